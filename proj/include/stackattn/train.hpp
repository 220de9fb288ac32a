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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackattn/errors.hpp"
#include "stackattn/model.hpp"
#include "stackattn/tasks.hpp"
#include "stackattn/tensor.hpp"

namespace stackattn {

struct TrainConfig {
  std::size_t batch_size = 10;
  std::size_t max_epochs = 200;
  double learning_rate = 0;  // 0: draw log-uniformly from [lr_min, lr_max]
  double lr_min = 5e-4;
  double lr_max = 1e-2;
  double clip_threshold = 5;
  double lr_decay = 0.9;
  std::size_t decay_patience = 5;
  std::size_t stop_patience = 10;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (max_epochs < 1) throw ParameterError("max_epochs must be >= 1");
    if (learning_rate < 0 || !std::isfinite(learning_rate)) {
      throw ParameterError("learning_rate must be finite and >= 0");
    }
    if (!(lr_min > 0 && lr_max >= lr_min)) throw ParameterError("need 0 < lr_min <= lr_max");
    if (!(clip_threshold > 0)) throw ParameterError("clip_threshold must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ParameterError("lr_decay must be in (0, 1]");
    if (decay_patience < 1 || stop_patience < 1) throw ParameterError("patience values must be >= 1");
  }

  /// The explicit rate, or a log-uniform draw keyed by the seed.
  double initial_learning_rate() const {
    if (learning_rate > 0) return learning_rate;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> u(std::log(lr_min), std::log(lr_max));
    return std::exp(u(rng));
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"max_epochs", c.max_epochs},
          {"learning_rate", c.learning_rate}, {"lr_min", c.lr_min},
          {"lr_max", c.lr_max},           {"clip_threshold", c.clip_threshold},
          {"lr_decay", c.lr_decay},       {"decay_patience", c.decay_patience},
          {"stop_patience", c.stop_patience}, {"seed", c.seed}};
}

/// Global L2 norm of the gradients, before clipping. Rescales in place when
/// the norm exceeds `threshold`.
template <typename T>
double clip_gradients(std::vector<std::vector<T>>& grads, double threshold) {
  if (!(threshold > 0)) throw ParameterError("clip threshold must be positive");
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto& g : grads)
      for (T& v : g) v = T(double(v) * s);
  }
  return norm;
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
  double lr = 0;

  template <typename P>
  static OptimizerState for_parameters(const std::vector<P>& params, double lr) {
    OptimizerState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update of `params` in place.
template <typename T>
void adam_step(std::vector<std::span<T>> params, const std::vector<std::vector<T>>& grads,
               OptimizerState<T>& state, const AdamHyper& hyper = {}) {
  if (params.size() != grads.size() || state.m.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment counts differ");
  }
  ++state.step;
  const double c1 = 1 - std::pow(hyper.beta1, double(state.step));
  const double c2 = 1 - std::pow(hyper.beta2, double(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto& g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw DimensionError("adam_step: shape mismatch in parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = hyper.beta1 * m[i] + (1 - hyper.beta1) * gi;
      v[i] = hyper.beta2 * v[i] + (1 - hyper.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] = T(double(p[i]) - state.lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

/// Plateau schedule. `best` is the lowest metric seen so far.
struct ScheduleState {
  double best = std::numeric_limits<double>::infinity();
  double lr = 0;
  std::size_t stagnant = 0;        // epochs since the last improvement
  std::size_t since_decay = 0;     // stagnant epochs since the last decay
  std::size_t decays = 0;
  bool stop = false;
};

inline ScheduleState schedule_step(ScheduleState s, double metric, const TrainConfig& c) {
  if (metric < s.best) {
    s.best = metric;
    s.stagnant = 0;
    s.since_decay = 0;
    return s;
  }
  ++s.stagnant;
  if (++s.since_decay >= c.decay_patience) {
    s.lr *= c.lr_decay;
    s.since_decay = 0;
    ++s.decays;
  }
  if (s.stagnant >= c.stop_patience) s.stop = true;
  return s;
}

inline ScheduleState schedule_step(const std::vector<double>& history, ScheduleState s,
                                   const TrainConfig& c) {
  for (double m : history) s = schedule_step(s, m, c);
  return s;
}

/// Same-length groups of at most `batch_size` indices, in order of first
/// appearance.
inline std::vector<std::vector<std::size_t>> length_batches(const Dataset& d, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  std::map<std::size_t, std::size_t> open;  // length -> index into out
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t len = d.strings[i].size();
    auto it = open.find(len);
    if (it == open.end() || out[it->second].size() >= batch_size) {
      open[len] = out.size();
      out.emplace_back();
      it = open.find(len);
    }
    out[it->second].push_back(i);
  }
  return out;
}

/// Eval-mode log p(x) for every string, scored in same-length batches.
template <typename T>
std::vector<double> score_dataset(const Model<T>& model, const Dataset& d,
                                  std::size_t batch_size = 16) {
  std::vector<double> out(d.size());
  std::mt19937_64 unused(0);
  const int eos = model.config.eos();
  for (const auto& idx : length_batches(d, batch_size)) {
    std::vector<std::vector<int>> batch;
    for (std::size_t i : idx) batch.push_back(d.strings[i]);
    const Tensor<T> logits = forward_logits(model, batch, Mode::kEval, unused);
    const std::size_t vocab = model.config.vocab_out(), n = batch[0].size() + 1;
    const auto lv = logits.values();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      double total = 0;
      for (std::size_t t = 0; t < n; ++t) {
        const T* row = lv.data() + (b * n + t) * vocab;
        const int target = t + 1 < n ? batch[b][t] : eos;
        const T mx = *std::max_element(row, row + vocab);
        double z = 0;
        for (std::size_t k = 0; k < vocab; ++k) z += std::exp(double(row[k] - mx));
        total += double(row[target] - mx) - std::log(z);
      }
      out[idx[b]] = total;
    }
  }
  return out;
}

/// Per-symbol cross-entropy in nats, EOS counted.
inline double per_symbol_cross_entropy(const std::vector<double>& logprobs, const Dataset& d) {
  double nll = 0, symbols = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    nll -= logprobs[i];
    symbols += double(d.strings[i].size() + 1);
  }
  return nll / symbols;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;   // per symbol
  double validation = 0;   // per-symbol cross-entropy
  double ce_difference = 0;
  double lr = 0;
  double seconds = 0;
  bool improved = false;

  nlohmann::json train_json() const {
    return {{"epoch", epoch}, {"split", "train"}, {"metric", train_loss}, {"lr", lr},
            {"seconds", seconds}};
  }
  nlohmann::json validation_json() const {
    return {{"epoch", epoch}, {"split", "validation"}, {"metric", validation},
            {"ce_difference", ce_difference}, {"lr", lr}, {"seconds", seconds},
            {"improved", improved}};
  }
};

template <typename T>
struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  double best_ce_difference = std::numeric_limits<double>::infinity();
  double initial_lr = 0;
  bool early_stopped = false;
  bool interrupted = false;  // stopped by TrainHooks::should_stop
};

/// Everything needed to continue a run after the end of `epoch`.
template <typename T>
struct TrainState {
  std::size_t epoch = 0;
  ScheduleState schedule;
  OptimizerState<T> optimizer;
  std::string rng;
  std::vector<std::vector<T>> best_parameters;
  TrainResult<T> result;
};

template <typename T>
struct TrainHooks {
  std::ostream* log = nullptr;  // JSON lines
  std::function<void(const EpochRecord&)> on_improvement;  // model holds the new best
  std::function<void(const TrainState<T>&)> on_epoch;     // model holds the current values
  std::function<bool(const EpochRecord&)> should_stop;     // e.g. a wall-clock budget
  const TrainState<T>* resume = nullptr;  // the model must hold the matching current values
};

template <typename T>
std::vector<std::span<T>> parameter_spans(Model<T>& model) {
  std::vector<std::span<T>> out;
  for (auto& p : model.parameters) out.push_back(p.tensor.mutable_data());
  return out;
}

template <typename T>
std::vector<std::vector<T>> snapshot_parameters(const Model<T>& model) {
  std::vector<std::vector<T>> out;
  for (const auto& p : model.parameters)
    out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

template <typename T>
void restore_parameters(Model<T>& model, const std::vector<std::vector<T>>& values) {
  if (values.size() != model.parameters.size()) throw DimensionError("snapshot does not match model");
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto dst = model.parameters[k].tensor.mutable_data();
    if (dst.size() != values[k].size()) throw DimensionError("snapshot does not match model");
    std::copy(values[k].begin(), values[k].end(), dst.begin());
  }
}

/// Trains on `train`, selecting on per-symbol validation cross-entropy. On
/// return `model` holds the best-validation parameters.
template <typename T>
TrainResult<T> train_model(Model<T>& model, const Dataset& train, const Dataset& validation,
                           const TrainConfig& config, const TrainHooks<T>& hooks = {}) {
  config.validate();
  if (train.size() == 0 || validation.size() == 0) throw InputError("empty training or validation set");
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();

  std::mt19937_64 rng(config.seed);
  auto batches = length_batches(train, config.batch_size);
  std::vector<std::vector<std::vector<int>>> batch_tokens;
  for (const auto& idx : batches) {
    batch_tokens.emplace_back();
    for (std::size_t i : idx) batch_tokens.back().push_back(train.strings[i]);
  }
  std::vector<std::size_t> order(batches.size());

  const bool have_true = validation.true_logprobs.size() == validation.size();
  double true_ce = 0;
  if (have_true) true_ce = per_symbol_cross_entropy(validation.true_logprobs, validation);

  TrainResult<T> result;
  result.initial_lr = config.initial_learning_rate();
  auto opt = OptimizerState<T>::for_parameters(snapshot_parameters(model), result.initial_lr);
  ScheduleState sched;
  sched.lr = result.initial_lr;
  auto best = snapshot_parameters(model);
  std::size_t first_epoch = 1;
  if (hooks.resume) {
    const TrainState<T>& r = *hooks.resume;
    if (r.optimizer.m.size() != model.parameters.size() ||
        r.best_parameters.size() != model.parameters.size()) {
      throw InputError("resume state does not match the model");
    }
    std::istringstream rs(r.rng);
    rs >> rng;
    if (!rs) throw InputError("corrupt rng state in resume data");
    opt = r.optimizer;
    sched = r.schedule;
    best = r.best_parameters;
    result = r.result;
    first_epoch = r.epoch + 1;
    if (sched.stop) first_epoch = config.max_epochs + 1;
  }
  TrainState<T> state;
  std::vector<std::vector<T>> grads(model.parameters.size());

  for (std::size_t epoch = first_epoch; epoch <= config.max_epochs; ++epoch) {
    // Reset before shuffling so the order depends only on the rng state.
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double nll = 0, symbols = 0;
    for (std::size_t bi : order) {
      const auto& batch = batch_tokens[bi];
      for (auto& p : model.parameters) p.tensor.zero_grad();
      Tape<T> tape;
      double loss_value;
      {
        typename Tape<T>::Scope scope(tape);
        Tensor<T> loss = scale(batch_logprob(model, batch, Mode::kTrain, rng), T(-1));
        loss_value = double(loss.item());
        if (!std::isfinite(loss_value)) {
          throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch of length " +
                      std::to_string(batch[0].size()));
        }
        tape.backward(loss);
      }
      for (std::size_t k = 0; k < grads.size(); ++k) {
        auto& t = model.parameters[k].tensor;
        if (t.has_grad())
          grads[k].assign(t.grad().begin(), t.grad().end());
        else
          grads[k].assign(t.size(), T(0));
      }
      const double gnorm = clip_gradients(grads, config.clip_threshold);
      if (!std::isfinite(gnorm)) {
        throw Error("non-finite gradient norm at epoch " + std::to_string(epoch));
      }
      opt.lr = sched.lr;
      adam_step(parameter_spans(model), grads, opt);
      nll += loss_value;
      symbols += double(batch.size() * (batch[0].size() + 1));
    }
    for (auto& p : model.parameters) p.tensor.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = nll / symbols;
    rec.lr = sched.lr;
    rec.validation = per_symbol_cross_entropy(score_dataset(model, validation), validation);
    if (!std::isfinite(rec.validation)) {
      throw Error("non-finite validation cross-entropy at epoch " + std::to_string(epoch));
    }
    rec.ce_difference = have_true ? rec.validation - true_ce : rec.validation;
    rec.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    sched = schedule_step(sched, rec.validation, config);
    rec.improved = sched.stagnant == 0;
    if (rec.improved) {
      best = snapshot_parameters(model);
      result.best_epoch = epoch;
      result.best_validation = rec.validation;
      result.best_ce_difference = rec.ce_difference;
    }
    result.epochs.push_back(rec);
    if (hooks.log) {
      *hooks.log << rec.train_json().dump() << '\n' << rec.validation_json().dump() << '\n';
      hooks.log->flush();
    }
    if (rec.improved && hooks.on_improvement) hooks.on_improvement(rec);
    if (hooks.on_epoch) {
      state.epoch = epoch;
      state.schedule = sched;
      state.optimizer = opt;
      std::ostringstream rs;
      rs << rng;
      state.rng = rs.str();
      state.best_parameters = best;
      state.result = result;
      hooks.on_epoch(state);
    }
    if (sched.stop) {
      result.early_stopped = true;
      break;
    }
    if (hooks.should_stop && hooks.should_stop(rec)) {
      result.interrupted = true;
      break;
    }
  }
  restore_parameters(model, best);
  return result;
}

}  // namespace stackattn
