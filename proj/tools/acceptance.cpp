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

// Acceptance checks. Each criterion prints one line:
//   criterion N: PASS|FAIL <name> (<details>)
// and the process exits 0 only if every selected criterion passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stackattn/attention.hpp"
#include "stackattn/checkpoint.hpp"
#include "stackattn/experiment.hpp"
#include "stackattn/grad_check.hpp"
#include "stackattn/model.hpp"
#include "stackattn/run_oracle.hpp"
#include "stackattn/superposition.hpp"
#include "stackattn/tasks.hpp"
#include "stackattn/vpda.hpp"

namespace fs = std::filesystem;
using namespace stackattn;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <typename T>
Tensor<T> as(const Shape& s, const std::vector<double>& v) {
  return Tensor<T>(s, std::vector<T>(v.begin(), v.end()));
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ----------------------------------------------------------- 1: parameters

Outcome parameter_counts() {
  struct Row {
    const char* task;
    std::size_t tf, sup, nd;
  };
  const Row table[] = {{"marked-reversal", 43044, 40964, 33273},
                       {"unmarked-reversal", 42979, 40899, 33216},
                       {"dyck", 43109, 41029, 33330}};
  std::size_t bad = 0;
  std::string mismatches;
  for (const Row& r : table) {
    const TaskSpec task = make_task(r.task);
    const std::pair<AttentionVariant, std::size_t> want[] = {
        {AttentionVariant::kSdpa, r.tf},
        {AttentionVariant::kSuperposition, r.sup},
        {AttentionVariant::kNondeterministic, r.nd}};
    for (const auto& [v, expected] : want) {
      std::mt19937_64 rng(0);
      const std::size_t got = count_parameters(build_model<double>(default_model_config(task, v), rng));
      if (got != expected) {
        ++bad;
        mismatches += std::string(" ") + r.task + ":" + std::to_string(got) + "!=" + std::to_string(expected);
      }
    }
  }
  return {bad == 0, "9 configurations, " + std::to_string(bad) + " mismatches" + mismatches};
}

// ------------------------------------------------------ 2: run enumeration

Outcome oracle_equivalence() {
  std::mt19937_64 rng(2026);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::bernoulli_distribution sparse(0.15);
  const int instances = 250;
  double worst = 0;
  for (int trial = 0; trial < instances; ++trial) {
    const VpdaConfig c{pick(1, 2), pick(1, 2), pick(1, 3)};
    const std::size_t n = pick(0, 5);
    const auto r0 = random_vec(c.stack_vector_dim, rng);
    std::vector<TransitionWeights<double>> deltas;
    std::vector<std::vector<double>> pushed;
    auto state = vpda_init<double>(n, c, r0);
    for (std::size_t t = 0; t < n; ++t) {
      auto w = random_vec(c.action_dim(), rng, -3, 3);
      for (auto& x : w)
        if (sparse(rng)) x = kNegInf;
      deltas.emplace_back(c, std::move(w));
      pushed.push_back(random_vec(c.stack_vector_dim, rng));
      vpda_update<double>(state, deltas.back(), pushed.back());
    }
    const auto dp = vpda_reading(state);
    const auto oracle = oracle_reading(c, enumerate_runs(c, r0, deltas, pushed));
    for (std::size_t i = 0; i < dp.size(); ++i) {
      const double e = std::abs(dp[i] - oracle[i]);
      worst = std::isnan(e) ? std::numeric_limits<double>::infinity() : std::max(worst, e);
    }
  }
  return {worst <= 1e-6,
          std::to_string(instances) + " instances, max abs error " + fmt(worst) + " (limit 1e-6)"};
}

// ---------------------------------------------------------- 3: special case

Outcome special_case() {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(1.0, 1.0);
  const VpdaConfig c{1, 1, 1};
  int disagree = 0;
  double worst = 0;
  for (int seq = 0; seq < 100; ++seq) {
    const std::size_t n = 1 + rng() % 20;
    SuperpositionState<double> sup(1);
    auto vp = vpda_init<double>(n, c, std::vector<double>{0.0});
    double seq_worst = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double a = g(rng), b = g(rng), p = g(rng), s = a + b + p;
      const ActionTriple<double> act{a / s, b / s, p / s};
      auto w = TransitionWeights<double>::zero(c);
      w.push(0, 0, 0, 0) = std::log(act.push);
      w.replace(0, 0, 0, 0) = std::log(act.noop);
      w.pop(0, 0, 0) = std::log(act.pop);
      const std::vector<double> v = random_vec(1, rng);
      sup = sup_update<double>(sup, act, v);
      vpda_update<double>(vp, w, v);
      seq_worst = std::max(seq_worst, std::abs(sup_reading(sup)[0] - vpda_reading(vp)[0]));
    }
    worst = std::max(worst, seq_worst);
    if (seq_worst > 1e-6) ++disagree;
  }
  return {disagree == 0, "100 sequences, " + std::to_string(disagree) +
                             " disagree beyond 1e-6, max abs difference " + fmt(worst)};
}

// --------------------------------------------------------------- 4: grads

struct Layer {
  StackAttentionConfig stack;
  SdpaConfig sdpa;
  bool is_sdpa = false;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;

  template <typename T>
  Tensor<T> apply(const Tensor<T>& input, std::size_t lanes, int slot = -1,
                  const Tensor<T>* x = nullptr) const {
    std::vector<Tensor<T>> p;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      p.push_back(int(i) == slot ? *x : as<T>(shapes[i], values[i]));
    std::mt19937_64 unused(0);
    if (is_sdpa) return sdpa_multihead(input, sdpa, SdpaParams<T>{p[0], p[1], p[2], p[3]}, Mode::kEval, unused, lanes);
    return stack_attention(input, stack, StackAttentionParams<T>{p[0], p[1], p[2], p.size() > 3 ? p[3] : Tensor<T>()},
                           lanes);
  }
};

Outcome gradients() {
  std::mt19937_64 rng(4);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  const int configs = 50;
  int checks = 0, failed = 0;
  double worst64 = 0, worst32 = 0;
  auto record = [&](const GradCheckReport& r, bool wide) {
    ++checks;
    const double tol = wide ? 1e-4 : 1e-6;
    (wide ? worst32 : worst64) = std::max(wide ? worst32 : worst64, r.max_rel_error);
    if (!(r.max_rel_error <= tol)) ++failed;
  };
  for (int k = 0; k < configs; ++k) {
    const std::size_t heads = pick(1, 2), d = 2 * heads * pick(1, 2), n = pick(1, 5), lanes = pick(1, 2);
    std::vector<Layer> layers(3);
    layers[0].is_sdpa = true;
    layers[0].sdpa = {d, heads, true, 0.0};
    layers[0].shapes = {{d, 3 * d}, {3 * d}, {d, d}, {d}};
    layers[1].stack = {StackVariant::kSuperposition, pick(1, 4), 1, 1};
    layers[2].stack = {StackVariant::kNondeterministic, pick(1, 3), pick(1, 2), pick(1, 3)};
    for (int s = 1; s <= 2; ++s) {
      const auto& c = layers[s].stack;
      layers[s].shapes = {{d, c.action_dim()}, {d, c.stack_vector_dim}, {c.reading_dim(), d}};
      if (c.variant == StackVariant::kNondeterministic) layers[s].shapes.push_back({c.stack_vector_dim});
    }
    for (auto& l : layers)
      for (const auto& s : l.shapes) l.values.push_back(random_vec(shape_size(s), rng, -0.8, 0.8));

    for (const Layer& layer : layers) {
      const auto x = random_vec(lanes * n * d, rng);
      const Shape xs{lanes * n, d};
      auto fx = [&](const auto& in) { return layer.apply(in, lanes); };
      record(grad_check(fx, Tensor<double>(xs, x), 1e-5), false);
      record(grad_check(fx, as<float>(xs, x), 1e-4, 1e-4), true);
      for (std::size_t slot = 0; slot < layer.shapes.size(); ++slot) {
        auto fp = [&](const auto& w) {
          using T = typename std::decay_t<decltype(w)>::value_type;
          return layer.apply(as<T>(xs, x), lanes, int(slot), &w);
        };
        record(grad_check(fp, Tensor<double>(layer.shapes[slot], layer.values[slot]), 1e-5), false);
        record(grad_check(fp, as<float>(layer.shapes[slot], layer.values[slot]), 1e-4, 1e-4), true);
      }
    }

    // Bare stack readings with respect to actions and pushed vectors.
    const std::size_t m = pick(1, 3);
    const auto logits = random_vec(lanes * n * 3, rng, -2, 2);
    const auto pushed = random_vec(lanes * n * m, rng);
    auto sup_a = [&](const auto& a) {
      using T = typename std::decay_t<decltype(a)>::value_type;
      std::vector<Tensor<T>> out;
      const auto probs = softmax(a);
      const auto v = as<T>({lanes * n, m}, pushed);
      for (std::size_t l = 0; l < lanes; ++l)
        out.push_back(superposition_readings(slice_rows(probs, l * n, n), slice_rows(v, l * n, n)));
      return concat_rows(out);
    };
    record(grad_check(sup_a, Tensor<double>({lanes * n, 3}, logits), 1e-5), false);
    record(grad_check(sup_a, as<float>({lanes * n, 3}, logits), 1e-4, 1e-4), true);
    const std::vector<double> logits0(logits.begin(), logits.begin() + n * 3);
    const std::vector<double> lane0(pushed.begin(), pushed.begin() + n * m);
    auto sup_v = [&](const auto& v) {
      using T = typename std::decay_t<decltype(v)>::value_type;
      return superposition_readings(softmax(as<T>({n, 3}, logits0)), v);
    };
    record(grad_check(sup_v, Tensor<double>({n, m}, lane0), 1e-5), false);
    record(grad_check(sup_v, as<float>({n, m}, lane0), 1e-4, 1e-4), true);

    const VpdaConfig vc{pick(1, 2), pick(1, 3), m};
    const auto acts = random_vec(lanes * n * vc.action_dim(), rng, -2, 2);
    const auto r0 = random_vec(m, rng, 0, 1);
    auto vp_a = [&](const auto& a) {
      using T = typename std::decay_t<decltype(a)>::value_type;
      return vpda_readings(a, as<T>({lanes * n, m}, pushed), as<T>({m}, r0), vc, lanes);
    };
    auto vp_v = [&](const auto& v) {
      using T = typename std::decay_t<decltype(v)>::value_type;
      return vpda_readings(as<T>({lanes * n, vc.action_dim()}, acts), v, as<T>({m}, r0), vc, lanes);
    };
    const Shape as_{lanes * n, vc.action_dim()}, vs{lanes * n, m};
    record(grad_check(vp_a, Tensor<double>(as_, acts), 1e-4), false);
    record(grad_check(vp_a, as<float>(as_, acts), 1e-4, 1e-4), true);
    record(grad_check(vp_v, Tensor<double>(vs, pushed), 1e-4), false);
    record(grad_check(vp_v, as<float>(vs, pushed), 1e-4, 1e-4), true);
  }
  return {failed == 0, std::to_string(configs) + " configurations, " + std::to_string(checks) +
                           " checks, " + std::to_string(failed) + " failed; max rel error 64-bit " +
                           fmt(worst64) + " (limit 1e-6), 32-bit " + fmt(worst32) + " (limit 1e-4)"};
}

// ---------------------------------------------------------- 5: learning

std::vector<json> run_summaries(const fs::path& dir) {
  std::vector<json> out;
  auto read = [&](const fs::path& p) {
    std::ifstream in(p);
    if (in) out.push_back(json::parse(in));
  };
  if (fs::exists(dir / "summary.json")) read(dir / "summary.json");
  for (std::size_t k = 0; fs::exists(dir / ("run-" + std::to_string(k))); ++k)
    read(dir / ("run-" + std::to_string(k)) / "summary.json");
  return out;
}

struct Best {
  bool found = false;
  double diff = std::numeric_limits<double>::infinity();
  std::size_t runs = 0, max_epochs = 0;
  std::string statuses;
};

Best best_of(const fs::path& dir) {
  Best b;
  for (const json& s : run_summaries(dir)) {
    b.found = true;
    ++b.runs;
    b.diff = std::min(b.diff, s.at("best_ce_difference").get<double>());
    b.max_epochs = std::max(b.max_epochs, s.at("epochs").get<std::size_t>());
    b.statuses += (b.statuses.empty() ? "" : ",") + s.at("status").get<std::string>();
  }
  return b;
}

Outcome learning(const fs::path& runs) {
  const Best sup = best_of(runs / "sup-marked"), nd = best_of(runs / "nd-unmarked"),
             tf = best_of(runs / "tf-unmarked");
  auto describe = [](const char* name, const Best& b) {
    if (!b.found) return std::string(name) + " missing";
    return std::string(name) + " " + fmt(b.diff) + " (" + std::to_string(b.runs) + " runs, <=" +
           std::to_string(b.max_epochs) + " epochs, " + b.statuses + ")";
  };
  const bool sup_ok = sup.found && sup.runs >= 5 && sup.max_epochs <= 200 && sup.diff <= 0.05;
  const bool nd_ok = nd.found && nd.max_epochs <= 200 && nd.diff <= 0.10;
  const bool tf_ok = tf.found && nd.found && tf.diff > nd.diff;
  return {sup_ok && nd_ok && tf_ok,
          describe("sup/marked", sup) + (sup_ok ? " ok" : " FAIL") + "; " + describe("nd/unmarked", nd) +
              (nd_ok ? " ok" : " FAIL") + "; " + describe("tf/unmarked", tf) + (tf_ok ? " ok" : " FAIL")};
}

// ------------------------------------------------------- 6: interpretability

Outcome interpretability(const fs::path& runs, const fs::path& data) {
  const fs::path ck = runs / "sup-marked" / "best.ckpt";
  if (!fs::exists(ck)) return {false, ck.string() + " missing"};
  const Model<float> model = load_model<float>(ck);
  const TaskSpec task = make_task("marked-reversal");
  if (model.config.alphabet != task.alphabet()) return {false, "checkpoint is not a marked-reversal model"};
  const Dataset val = load_dataset(task.grammar, data / "marked-reversal", "val");
  const int mark = static_cast<int>(std::find(model.config.alphabet.begin(), model.config.alphabet.end(), "#") -
                                    model.config.alphabet.begin());
  std::size_t before = 0, push = 0, after = 0, pop = 0, strings = 0;
  for (std::size_t k = 0; k < val.size() && strings < 200; ++k, ++strings) {
    const auto& x = val.strings[k];
    const auto a = stack_actions(model, x);
    const auto hash = std::find(x.begin(), x.end(), mark) - x.begin();
    // Row i + 1 is the action taken after reading x[i].
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::ptrdiff_t(i) == hash) continue;
      const float* r = &a.values()[(i + 1) * 3];
      const std::size_t arg = std::max_element(r, r + 3) - r;
      if (std::ptrdiff_t(i) < hash) {
        ++before;
        push += arg == 0;
      } else {
        ++after;
        pop += arg == 2;
      }
    }
  }
  const double fpush = before ? double(push) / double(before) : 0, fpop = after ? double(pop) / double(after) : 0;
  return {fpush >= 0.9 && fpop >= 0.9, std::to_string(strings) + " validation strings; push before # " +
                                           fmt(100 * fpush) + "%, pop after # " + fmt(100 * fpop) +
                                           "% (need >= 90% each)"};
}

// -------------------------------------------------------- 7: metric soundness

Outcome metric_soundness() {
  std::size_t bins = 0, bad = 0;
  double worst_ratio = 0;
  std::string notes;
  for (const char* name : {"marked-reversal", "unmarked-reversal"}) {
    auto oracle = std::make_shared<const TaskOracle>(make_task(name));
    const Dataset test = generate_test_split(*oracle, 100, 7);
    const auto rows = binned_test_eval(OracleModel(oracle, test.conditioning), test);
    for (const BinRow& r : rows) {
      ++bins;
      // Both sides are exact up to rounding; 1e-12 nats/symbol absorbs
      // the floating-point disagreement between the two computations.
      const double bound = 2 * r.metric.std_error + 1e-12;
      if (!(std::abs(r.metric.value) <= bound)) ++bad;
      worst_ratio = std::max(worst_ratio, std::abs(r.metric.value) / bound);
    }
    notes += std::string(notes.empty() ? "" : ", ") + name + " " + std::to_string(rows.size()) + " bins";
  }
  return {bad == 0, notes + "; " + std::to_string(bad) + " of " + std::to_string(bins) +
                        " bins outside 2 SE; worst |d|/bound " + fmt(worst_ratio)};
}

// ---------------------------------------------------------- 8: complexity

template <typename F>
double seconds_per_call(F&& f) {
  using Clock = std::chrono::steady_clock;
  double best = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < 5; ++rep) {
    std::size_t calls = 0;
    const auto t0 = Clock::now();
    double elapsed = 0;
    do {
      f();
      ++calls;
      elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
    } while (elapsed < 0.2);
    best = std::min(best, elapsed / double(calls));
  }
  return best;
}

Outcome complexity() {
  std::mt19937_64 rng(8);
  const std::size_t m = 5;
  const VpdaConfig vc{2, 3, m};
  std::vector<double> t_vpda, t_sup;
  for (std::size_t n : {32, 64, 128}) {
    const auto acts = as<float>({n, vc.action_dim()}, random_vec(n * vc.action_dim(), rng, -2, 2));
    const auto probs = softmax(as<float>({n, 3}, random_vec(n * 3, rng, -2, 2)));
    const auto pushed = as<float>({n, m}, random_vec(n * m, rng));
    const auto r0 = as<float>({m}, random_vec(m, rng));
    volatile float sink = 0;
    t_vpda.push_back(seconds_per_call([&] { sink = sink + vpda_readings(acts, pushed, r0, vc)[0]; }));
    t_sup.push_back(seconds_per_call([&] { sink = sink + superposition_readings(probs, pushed)[0]; }));
  }
  bool ok = true;
  std::string d;
  for (std::size_t i = 0; i < 2; ++i) {
    const double rv = t_vpda[i + 1] / t_vpda[i], rs = t_sup[i + 1] / t_sup[i];
    ok = ok && rv >= 4 && rv <= 16 && rs >= 2 && rs <= 8;
    d += std::string(i ? "; " : "") + "n=" + std::to_string(32 << i) + ": dVPDA x" + fmt(rv) +
         " superposition x" + fmt(rs);
  }
  return {ok, d + " (need [4,16] and [2,8])"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for stackattn"};
  int criterion = 0;
  std::string runs = "artifacts/runs", data = "artifacts/data";
  app.add_option("--criterion", criterion, "Criterion 1-8 (0: all)")->check(CLI::Range(0, 8));
  app.add_option("--runs", runs, "Directory with training runs");
  app.add_option("--data", data, "Directory with generated datasets");
  CLI11_PARSE(app, argc, argv);

  const char* names[] = {"",
                         "parameter counts",
                         "dVPDA oracle equivalence",
                         "superposition as one-state dVPDA",
                         "gradient correctness",
                         "desk-scale learning",
                         "action interpretability",
                         "metric soundness",
                         "complexity scaling"};
  bool all = true;
  for (int c = 1; c <= 8; ++c) {
    if (criterion != 0 && c != criterion) continue;
    Outcome o;
    try {
      switch (c) {
        case 1: o = parameter_counts(); break;
        case 2: o = oracle_equivalence(); break;
        case 3: o = special_case(); break;
        case 4: o = gradients(); break;
        case 5: o = learning(runs); break;
        case 6: o = interpretability(runs, data); break;
        case 7: o = metric_soundness(); break;
        case 8: o = complexity(); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << ' ' << names[c] << " ("
              << o.detail << ")" << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
