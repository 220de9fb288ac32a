// Copyright 2026 The stackattn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackattn/errors.hpp"
#include "stackattn/pcfg.hpp"

namespace stackattn {

/// A language-modeling task: a grammar plus the length protocol.
struct TaskSpec {
  std::string name;
  Pcfg grammar;
  bool deterministic = false;  // real-time deterministic CFL
  std::size_t min_length = 40, max_length = 80;            // train/validation
  std::size_t test_min_length = 40, test_max_length = 100;  // test grid

  /// Alphabet symbols in token order.
  std::vector<std::string> alphabet() const {
    std::vector<std::string> out;
    for (char c : grammar.terminals()) out.emplace_back(1, c);
    return out;
  }
};

inline std::vector<std::string> task_names() {
  return {"marked-reversal", "unmarked-reversal", "padded-reversal", "dyck", "hardest-cfl"};
}

inline TaskSpec make_task(const std::string& name) {
  TaskSpec t;
  t.name = name;
  if (name == "marked-reversal") {
    t.deterministic = true;
    t.grammar = Pcfg({"S"}, "01#", "S",
                     {{"S", "0 S 0", 0.25}, {"S", "1 S 1", 0.25}, {"S", "#", 0.5}});
  } else if (name == "unmarked-reversal") {
    t.grammar = Pcfg({"S"}, "01", "S",
                     {{"S", "0 S 0", 0.25}, {"S", "1 S 1", 0.25}, {"S", "", 0.5}});
  } else if (name == "padded-reversal") {
    // w a^p w^R: the pad symbol is uniform and its run length geometric.
    t.grammar = Pcfg({"S", "P", "A0", "A1"}, "01", "S",
                     {{"S", "0 S 0", 0.25},
                      {"S", "1 S 1", 0.25},
                      {"S", "P", 0.5},
                      {"P", "", 0.5},
                      {"P", "0 A0", 0.25},
                      {"P", "1 A1", 0.25},
                      {"A0", "0 A0", 0.5},
                      {"A0", "", 0.5},
                      {"A1", "1 A1", 0.5},
                      {"A1", "", 0.5}});
  } else if (name == "dyck") {
    t.deterministic = true;
    t.grammar = Pcfg({"S"}, "()[]", "S",
                     {{"S", "( S ) S", 0.25}, {"S", "[ S ] S", 0.25}, {"S", "", 0.5}});
  } else if (name == "hardest-cfl") {
    // Blocks "x , y , z ;" whose middle parts y concatenate to "$" followed
    // by a two-bracket Dyck string; x and z are unconstrained fillers. The
    // block boundary J may fall anywhere inside the Dyck string.
    const double f = 1.0 / 6.0, b = 1.0 / 3.0;
    t.grammar = Pcfg({"S", "Y", "T", "J", "X"}, "()[],;$", "S",
                     {{"S", "X , $ Y , X ;", 1.0},
                      {"Y", "", 0.5},
                      {"Y", "T Y", 0.5},
                      {"T", "( Y )", b},
                      {"T", "[ Y ]", b},
                      {"T", "J", b},
                      {"J", ", X ; X ,", 1.0},
                      {"X", "", f},
                      {"X", "( X", f},
                      {"X", ") X", f},
                      {"X", "[ X", f},
                      {"X", "] X", f},
                      {"X", ", X", f}});
  } else {
    throw ParameterError("unknown task '" + name + "'");
  }
  return t;
}

/// How a data split was sampled. Range: a length drawn uniformly from the
/// supported lengths in [lo, hi], then a string of exactly that length.
/// Exact: every string is judged against its own length.
struct Conditioning {
  enum class Kind { kRange, kExact };
  Kind kind = Kind::kExact;
  std::size_t lo = 0, hi = 0;

  static Conditioning range(std::size_t lo, std::size_t hi) { return {Kind::kRange, lo, hi}; }
  static Conditioning exact() { return {Kind::kExact, 0, 0}; }
  std::string name() const { return kind == Kind::kRange ? "range" : "exact"; }
};

/// Grammar tables for a task, covering every length the task uses.
class TaskOracle {
 public:
  explicit TaskOracle(TaskSpec task, std::size_t max_length = 0)
      : task_(std::move(task)),
        tables_(task_.grammar,
                std::max({max_length, task_.max_length, task_.test_max_length}) + 1) {}

  const TaskSpec& task() const { return task_; }
  const LengthTables& tables() const { return tables_; }

  /// Lengths in [lo, hi] that carry positive probability.
  std::vector<std::size_t> supported_lengths(std::size_t lo, std::size_t hi) const {
    std::vector<std::size_t> out;
    for (std::size_t n = lo; n <= std::min(hi, tables_.max_length()); ++n)
      if (tables_.length_mass(n) > 0) out.push_back(n);
    return out;
  }

  double length_mass(std::size_t n) const { return tables_.length_mass(n); }

  /// log q(L) for the length distribution implied by the conditioning,
  /// -inf off its support. Exact conditioning is relative to `target`.
  double log_length_weight(const Conditioning& c, std::size_t len, std::size_t target) const {
    if (c.kind == Conditioning::Kind::kExact) {
      return len == target ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    if (len < c.lo || len > c.hi || !(tables_.length_mass(len) > 0))
      return -std::numeric_limits<double>::infinity();
    return -std::log(static_cast<double>(supported_lengths(c.lo, c.hi).size()));
  }

  /// Log-probability of x under the distribution the split was sampled
  /// from: log q(|x|) + log p(x | |x|).
  double true_logprob(const std::vector<int>& x, const Conditioning& c) const {
    const std::size_t n = x.size();
    if (n > tables_.max_length()) throw ParameterError("string longer than the oracle tables");
    const double mass = tables_.length_mass(n);
    if (!(mass > 0)) throw ParameterError("zero probability mass at length " + std::to_string(n));
    const double lq = log_length_weight(c, n, n);
    if (std::isinf(lq)) throw ParameterError("string length outside the conditioning support");
    return lq + inside_logprob(task_.grammar, x) - std::log(mass);
  }

 private:
  TaskSpec task_;
  LengthTables tables_;
};

inline double true_logprob(const TaskOracle& oracle, const std::vector<int>& x,
                           const Conditioning& c) {
  return oracle.true_logprob(x, c);
}

/// Strings of one split with their true log-probabilities.
struct Dataset {
  std::string task;
  std::string split;
  std::uint64_t seed = 0;
  Conditioning conditioning;
  std::vector<std::vector<int>> strings;
  std::vector<double> true_logprobs;

  std::size_t size() const { return strings.size(); }
};

/// Range-conditioned split: batches of `batch_size` strings, each batch of
/// one length drawn uniformly from the supported training lengths.
inline Dataset generate_range_split(const TaskOracle& oracle, const std::string& split,
                                    std::size_t count, std::size_t batch_size,
                                    std::uint64_t seed) {
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  const TaskSpec& t = oracle.task();
  Dataset d{t.name, split, seed, Conditioning::range(t.min_length, t.max_length), {}, {}};
  const auto lengths = oracle.supported_lengths(t.min_length, t.max_length);
  if (lengths.empty()) throw ParameterError("task has no strings in the training length range");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, lengths.size() - 1);
  while (d.strings.size() < count) {
    const std::size_t n = lengths[pick(rng)];
    for (std::size_t k = 0; k < batch_size && d.strings.size() < count; ++k)
      d.strings.push_back(oracle.tables().sample(n, rng));
  }
  for (const auto& x : d.strings) d.true_logprobs.push_back(oracle.true_logprob(x, d.conditioning));
  return d;
}

/// Exact-length test split: `per_length` strings for every supported
/// length on the test grid.
inline Dataset generate_test_split(const TaskOracle& oracle, std::size_t per_length,
                                   std::uint64_t seed) {
  const TaskSpec& t = oracle.task();
  Dataset d{t.name, "test", seed, Conditioning::exact(), {}, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t n : oracle.supported_lengths(t.test_min_length, t.test_max_length))
    for (std::size_t k = 0; k < per_length; ++k) d.strings.push_back(oracle.tables().sample(n, rng));
  for (const auto& x : d.strings) d.true_logprobs.push_back(oracle.true_logprob(x, d.conditioning));
  return d;
}

/// Writes <dir>/<split>.txt (one string per line) and <dir>/<split>.json.
inline void save_dataset(const Dataset& d, const Pcfg& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream text(dir / (d.split + ".txt"), std::ios::binary);
  for (const auto& x : d.strings) text << g.decode(x) << '\n';
  nlohmann::json meta;
  meta["task"] = d.task;
  meta["split"] = d.split;
  meta["seed"] = d.seed;
  meta["conditioning"] = {{"kind", d.conditioning.name()},
                          {"lo", d.conditioning.lo},
                          {"hi", d.conditioning.hi}};
  meta["count"] = d.strings.size();
  meta["true_logprobs"] = d.true_logprobs;
  std::ofstream js(dir / (d.split + ".json"), std::ios::binary);
  js << meta.dump(1) << '\n';
  if (!text || !js) throw ResourceError("failed to write dataset in " + dir.string());
}

inline Dataset load_dataset(const Pcfg& g, const std::filesystem::path& dir,
                            const std::string& split) {
  std::ifstream text(dir / (split + ".txt"), std::ios::binary);
  std::ifstream js(dir / (split + ".json"), std::ios::binary);
  if (!text || !js) throw InputError("missing dataset files for split '" + split + "' in " + dir.string());
  Dataset d;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
    d.task = meta.at("task").get<std::string>();
    d.split = meta.at("split").get<std::string>();
    d.seed = meta.at("seed").get<std::uint64_t>();
    const auto& c = meta.at("conditioning");
    d.conditioning = c.at("kind").get<std::string>() == "range"
                         ? Conditioning::range(c.at("lo").get<std::size_t>(), c.at("hi").get<std::size_t>())
                         : Conditioning::exact();
    d.true_logprobs = meta.at("true_logprobs").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed dataset metadata: " + std::string(e.what()));
  }
  std::string line;
  while (std::getline(text, line)) d.strings.push_back(g.encode(line));
  if (d.strings.size() != d.true_logprobs.size()) {
    throw InputError("dataset line count does not match its metadata");
  }
  return d;
}

/// Exact next-symbol conditionals of a task's sampling distribution.
class OracleModel {
 public:
  OracleModel(std::shared_ptr<const TaskOracle> oracle, Conditioning c)
      : oracle_(std::move(oracle)), cond_(c) {
    if (c.kind == Conditioning::Kind::kRange) {
      const std::size_t max = oracle_->tables().max_length();
      for (std::size_t len = 0; len <= max; ++len)
        range_log_q_.push_back(oracle_->log_length_weight(c, len, 0));
    }
  }

  const TaskOracle& oracle() const { return *oracle_; }

  /// Distribution over the alphabet plus EOS (last entry) after `prefix`.
  /// `length` is the target length for exact conditioning.
  std::vector<double> next_distribution(const std::vector<int>& prefix, std::size_t length) const {
    const std::size_t S = oracle_->task().grammar.num_terminals();
    std::vector<double> out(S + 1, 0.0);
    const double w = prefix_weight(prefix, length);
    if (!(w > 0)) throw ParameterError("prefix has zero probability");
    std::vector<int> ext = prefix;
    ext.push_back(0);
    for (std::size_t a = 0; a < S; ++a) {
      ext.back() = static_cast<int>(a);
      out[a] = prefix_weight(ext, length) / w;
    }
    out[S] = end_weight(prefix, length) / w;
    return out;
  }

  /// Sum of the log conditionals of every symbol and the final EOS.
  double sequence_logprob(const std::vector<int>& x) const {
    const std::size_t n = x.size();
    double total = 0.0;
    double prev = prefix_weight({}, n);
    std::vector<int> prefix;
    for (std::size_t t = 0; t < n; ++t) {
      prefix.push_back(x[t]);
      const double w = prefix_weight(prefix, n);
      total += std::log(w / prev);
      prev = w;
    }
    return total + std::log(end_weight(x, n) / prev);
  }

 private:
  double log_q(std::size_t len, std::size_t target) const {
    if (cond_.kind == Conditioning::Kind::kRange) return range_log_q_[len];
    return len == target ? 0.0 : -std::numeric_limits<double>::infinity();
  }

  // Probability that a sampled string starts with `prefix`.
  double prefix_weight(const std::vector<int>& prefix, std::size_t target) const {
    const auto& tables = oracle_->tables();
    double w = 0.0;
    for (std::size_t len = prefix.size(); len <= tables.max_length(); ++len) {
      const double lq = log_q(len, target);
      if (std::isinf(lq)) continue;
      std::vector<int> pattern = prefix;
      pattern.resize(len, kAnySymbol);
      w += std::exp(lq) * inside_probability(oracle_->task().grammar, pattern) / tables.length_mass(len);
    }
    return w;
  }
  // Probability that a sampled string equals `prefix`.
  double end_weight(const std::vector<int>& prefix, std::size_t target) const {
    if (prefix.size() > oracle_->tables().max_length()) return 0.0;
    const double lq = log_q(prefix.size(), target);
    if (std::isinf(lq)) return 0.0;
    return std::exp(lq) * inside_probability(oracle_->task().grammar, prefix) /
           oracle_->tables().length_mass(prefix.size());
  }

  std::shared_ptr<const TaskOracle> oracle_;
  Conditioning cond_;
  std::vector<double> range_log_q_;
};

inline std::vector<double> score_dataset(const OracleModel& m, const Dataset& d) {
  std::vector<double> out;
  out.reserve(d.size());
  for (const auto& x : d.strings) out.push_back(m.sequence_logprob(x));
  return out;
}

/// Cross-entropy difference in nats per symbol (EOS counted) and its
/// standard error over strings.
struct MetricSummary {
  double value = 0;
  double std_error = 0;
  std::size_t strings = 0;
  std::size_t symbols = 0;
};

inline MetricSummary cross_entropy_difference(std::span<const double> model_logprobs,
                                              const Dataset& d) {
  if (model_logprobs.size() != d.size()) throw DimensionError("one model score per string expected");
  MetricSummary s;
  s.strings = d.size();
  if (d.size() == 0) return s;
  double diff = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    diff += d.true_logprobs[k] - model_logprobs[k];
    s.symbols += d.strings[k].size() + 1;
  }
  s.value = diff / static_cast<double>(s.symbols);
  if (d.size() > 1) {
    // Ratio-estimator standard error of sum(e) / sum(|x| + 1).
    const double mean_len = static_cast<double>(s.symbols) / static_cast<double>(d.size());
    double ss = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const double r = (d.true_logprobs[k] - model_logprobs[k]) -
                       s.value * static_cast<double>(d.strings[k].size() + 1);
      ss += r * r;
    }
    const double N = static_cast<double>(d.size());
    s.std_error = std::sqrt(ss / (N * (N - 1))) / mean_len;
  }
  return s;
}

template <typename Scorer>
MetricSummary cross_entropy_difference(const Scorer& model, const Dataset& d) {
  const std::vector<double> scores = score_dataset(model, d);
  return cross_entropy_difference(std::span<const double>(scores), d);
}

struct BinRow {
  std::size_t length = 0;
  MetricSummary metric;
};

/// Per-length cross-entropy difference, in increasing length order.
inline std::vector<BinRow> binned_test_eval(std::span<const double> model_logprobs,
                                            const Dataset& test) {
  if (model_logprobs.size() != test.size()) throw DimensionError("one model score per string expected");
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t k = 0; k < test.size(); ++k) by_length[test.strings[k].size()].push_back(k);
  std::vector<BinRow> rows;
  for (const auto& [len, idx] : by_length) {
    Dataset bin;
    std::vector<double> scores;
    for (std::size_t k : idx) {
      bin.strings.push_back(test.strings[k]);
      bin.true_logprobs.push_back(test.true_logprobs[k]);
      scores.push_back(model_logprobs[k]);
    }
    rows.push_back({len, cross_entropy_difference(std::span<const double>(scores), bin)});
  }
  return rows;
}

template <typename Scorer>
std::vector<BinRow> binned_test_eval(const Scorer& model, const Dataset& test) {
  const std::vector<double> scores = score_dataset(model, test);
  return binned_test_eval(std::span<const double>(scores), test);
}

}  // namespace stackattn
