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

// stackattn: generate data, train, evaluate, inspect stack actions and count
// parameters. Exit codes: 0 success, 1 usage or configuration error, 2
// runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stackattn/checkpoint.hpp"
#include "stackattn/experiment.hpp"
#include "stackattn/model.hpp"
#include "stackattn/tasks.hpp"
#include "stackattn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stackattn;

namespace {

using Real = float;

// Thrown for configuration problems detected after CLI11 parsing.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Applies a JSON config file to a subcommand. Keys are long option names
/// without dashes; options given on the command line win.
void apply_config_file(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError("unknown config key '" + key + "'");
    if (opt->count() > 0) continue;
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "true" : "false";
    } else if (value.is_number()) {
      text = value.dump();
    } else {
      throw ConfigError("config key '" + key + "' must be a scalar");
    }
    opt->add_result(text);
    opt->run_callback();
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw ResourceError("cannot write " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::string dataset_task(const fs::path& dir, const std::string& split) {
  const json meta = read_json_file(dir / (split + ".json"));
  if (!meta.contains("task")) throw InputError("dataset metadata lacks a task name");
  return meta["task"].get<std::string>();
}

Dataset truncated(Dataset d, std::size_t max_count) {
  if (max_count > 0 && d.size() > max_count) {
    d.strings.resize(max_count);
    d.true_logprobs.resize(max_count);
  }
  return d;
}

json metric_json(const MetricSummary& m) {
  return {{"ce_difference", m.value}, {"std_error", m.std_error}, {"strings", m.strings},
          {"symbols", m.symbols}};
}

// ---------------------------------------------------------------- generate

struct GenerateOptions {
  std::string task;
  std::string out;
  std::uint64_t seed = 1;
  std::size_t train_size = 10000;
  std::size_t val_size = 1000;
  std::size_t test_per_length = 100;
  std::size_t batch_size = 10;
  std::string config;
};

void add_generate(CLI::App& app, GenerateOptions& o) {
  auto* sub = app.add_subcommand("generate", "Sample train/validation/test splits for a task");
  sub->add_option("--task", o.task, "Task name (required)");
  sub->add_option("--out", o.out, "Output directory (required)");
  sub->add_option("--seed", o.seed, "Base seed (validation uses seed+1, test seed+2)");
  sub->add_option("--train-size", o.train_size, "Training strings");
  sub->add_option("--val-size", o.val_size, "Validation strings");
  sub->add_option("--test-per-length", o.test_per_length, "Test strings per length (0: no test split)");
  sub->add_option("--batch-size", o.batch_size, "Strings per same-length batch");
  sub->add_option("--config", o.config, "JSON file with option values");
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

int run_generate(const GenerateOptions& o) {
  require(o.task, "--task");
  require(o.out, "--out");
  TaskSpec task;
  try {
    task = make_task(o.task);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (o.batch_size == 0) throw ConfigError("--batch-size must be positive");
  if (o.train_size == 0 || o.val_size == 0) throw ConfigError("split sizes must be positive");
  const TaskOracle oracle(task);
  const Dataset train = generate_range_split(oracle, "train", o.train_size, o.batch_size, o.seed);
  const Dataset val = generate_range_split(oracle, "val", o.val_size, o.batch_size, o.seed + 1);
  fs::create_directories(o.out);
  save_dataset(train, task.grammar, o.out);
  save_dataset(val, task.grammar, o.out);
  if (o.test_per_length > 0) {
    save_dataset(generate_test_split(oracle, o.test_per_length, o.seed + 2), task.grammar, o.out);
  }
  write_json_file(fs::path(o.out) / "generate_config.json",
                  {{"task", o.task}, {"seed", o.seed}, {"train-size", o.train_size},
                   {"val-size", o.val_size}, {"test-per-length", o.test_per_length},
                   {"batch-size", o.batch_size}});
  std::cout << "wrote " << train.size() << " train, " << val.size() << " val strings to " << o.out
            << '\n';
  return 0;
}

// ------------------------------------------------------------ model config

struct ModelOptions {
  std::string variant = "sup";
  std::optional<std::size_t> layers, stack_layer, d_model, ffn_hidden, heads, stack_dim, states,
      symbols;
  std::optional<double> dropout;
};

void add_model_options(CLI::App* sub, ModelOptions& o) {
  sub->add_option("--variant", o.variant, "Attention variant: tf | sup | nd");
  sub->add_option("--layers", o.layers, "Number of layers");
  sub->add_option("--stack-layer", o.stack_layer, "1-based index of the stack layer");
  sub->add_option("--d-model", o.d_model, "Model width");
  sub->add_option("--ffn-hidden", o.ffn_hidden, "Feedforward hidden size (default 2*d_model)");
  sub->add_option("--heads", o.heads, "SDPA heads");
  sub->add_option("--stack-dim", o.stack_dim, "Stack vector size m");
  sub->add_option("--states", o.states, "Nondeterministic stack states |Q|");
  sub->add_option("--symbols", o.symbols, "Nondeterministic stack symbols |G|");
  sub->add_option("--dropout", o.dropout, "Dropout rate");
}

ModelConfig resolve_model_config(const TaskSpec& task, const ModelOptions& o) {
  AttentionVariant v;
  try {
    v = parse_variant(o.variant);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  ModelConfig c = default_model_config(task, v);
  if (o.layers) c.num_layers = *o.layers;
  if (o.stack_layer) c.stack_layer_index = *o.stack_layer;
  if (o.d_model) {
    c.d_model = *o.d_model;
    c.ffn_hidden = 2 * c.d_model;
  }
  if (o.ffn_hidden) c.ffn_hidden = *o.ffn_hidden;
  if (o.heads) c.num_heads = *o.heads;
  if (o.stack_dim) c.stack_vector_dim = *o.stack_dim;
  if (o.states) c.num_states = *o.states;
  if (o.symbols) c.num_symbols = *o.symbols;
  if (o.dropout) c.dropout = *o.dropout;
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ------------------------------------------------------------------- train

struct TrainOptions {
  std::string data;
  std::string out;
  ModelOptions model;
  TrainConfig train;
  std::size_t restarts = 1;
  bool resume = false;
  double time_limit = 0;
  std::size_t max_train = 0, max_val = 0;
  std::string config;
};

void add_train(CLI::App& app, TrainOptions& o) {
  auto* sub = app.add_subcommand("train", "Train one model (or the best of --restarts runs)");
  sub->add_option("--data", o.data, "Dataset directory from `generate` (required)");
  sub->add_option("--out", o.out, "Run directory (required)");
  add_model_options(sub, o.model);
  sub->add_option("--seed", o.train.seed, "Seed for initialization, dropout, shuffling and LR");
  sub->add_option("--epochs", o.train.max_epochs, "Maximum epochs");
  sub->add_option("--lr", o.train.learning_rate, "Initial learning rate (0: log-uniform draw)");
  sub->add_option("--batch-size", o.train.batch_size, "Strings per batch");
  sub->add_option("--clip", o.train.clip_threshold, "Gradient norm threshold");
  sub->add_option("--lr-decay", o.train.lr_decay, "LR factor after a stagnant stretch");
  sub->add_option("--decay-patience", o.train.decay_patience, "Stagnant epochs per LR decay");
  sub->add_option("--stop-patience", o.train.stop_patience, "Stagnant epochs before stopping");
  sub->add_option("--restarts", o.restarts, "Independent runs with seeds seed..seed+k-1");
  sub->add_flag("--resume", o.resume, "Continue from <out>/last.ckpt");
  sub->add_option("--time-limit", o.time_limit, "Wall-clock budget per run in seconds (0: none)");
  sub->add_option("--max-train", o.max_train, "Use only the first N training strings");
  sub->add_option("--max-val", o.max_val, "Use only the first N validation strings");
  sub->add_option("--config", o.config, "JSON file with option values");
}

json run_one(const TrainOptions& o, const TaskSpec& task, const ModelConfig& mc, TrainConfig tc,
             const Dataset& train, const Dataset& val, const fs::path& dir) {
  fs::create_directories(dir);
  const json effective = {{"task", task.name},
                          {"data", fs::absolute(o.data).string()},
                          {"max_train", o.max_train},
                          {"max_val", o.max_val},
                          {"model", to_json(mc)},
                          {"train", to_json(tc)}};
  // The epoch budget is left out so a finished run can be extended.
  json identity = effective;
  identity["train"].erase("max_epochs");
  const std::string hash = config_hash(identity);
  const fs::path last = dir / "last.ckpt", best = dir / "best.ckpt";

  std::optional<TrainState<Real>> resume_state;
  std::mt19937_64 init_rng(tc.seed);
  Model<Real> model = build_model<Real>(mc, init_rng);
  if (o.resume && fs::exists(last)) {
    const CheckpointData data = read_checkpoint(last);
    if (data.extra.value("config_hash", "") != hash) {
      throw ConfigError("refusing to resume " + dir.string() +
                        ": its config hash differs from the current configuration");
    }
    model = model_from_checkpoint<Real>(data);
    resume_state = load_train_state(data, model);
    std::cerr << dir.string() << ": resuming after epoch " << resume_state->epoch << '\n';
  } else if (fs::exists(last) && !o.resume) {
    throw ConfigError(dir.string() + " already holds a run; pass --resume or use a new --out");
  }
  json echoed = effective;
  echoed["config_hash"] = hash;
  write_json_file(dir / "config.json", echoed);

  std::ofstream log(dir / "log.jsonl", resume_state ? std::ios::app : std::ios::trunc);
  const auto started = std::chrono::steady_clock::now();
  const json meta = {{"task", task.name}, {"config_hash", hash}};
  TrainHooks<Real> hooks;
  hooks.log = &log;
  hooks.resume = resume_state ? &*resume_state : nullptr;
  hooks.on_improvement = [&](const EpochRecord& r) {
    json extra = meta;
    extra["epoch"] = r.epoch;
    extra["validation"] = r.validation;
    extra["ce_difference"] = r.ce_difference;
    save_model(best, model, extra);
  };
  hooks.on_epoch = [&](const TrainState<Real>& s) {
    save_train_state(last, model, s, meta);
    const auto& r = s.result.epochs.back();
    std::cerr << dir.filename().string() << " epoch " << r.epoch << " train " << std::fixed
              << std::setprecision(4) << r.train_loss << " val " << r.validation << " diff "
              << r.ce_difference << " lr " << std::scientific << std::setprecision(3) << r.lr
              << std::defaultfloat << '\n';
  };
  if (o.time_limit > 0) {
    hooks.should_stop = [&](const EpochRecord&) {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() >
             o.time_limit;
    };
  }
  const TrainResult<Real> result = train_model(model, train, val, tc, hooks);
  const std::string status = result.interrupted     ? "time_limited"
                             : result.early_stopped ? "early_stopped"
                                                    : "max_epochs";
  const json summary = {{"seed", tc.seed},
                        {"status", status},
                        {"epochs", result.epochs.size()},
                        {"best_epoch", result.best_epoch},
                        {"best_validation", result.best_validation},
                        {"best_ce_difference", result.best_ce_difference},
                        {"initial_lr", result.initial_lr},
                        {"seconds", result.epochs.empty() ? 0.0 : result.epochs.back().seconds},
                        {"config_hash", hash}};
  write_json_file(dir / "summary.json", summary);
  return summary;
}

int run_train(const TrainOptions& o) {
  require(o.data, "--data");
  require(o.out, "--out");
  const std::string task_name = dataset_task(o.data, "train");
  const TaskSpec task = make_task(task_name);
  const ModelConfig mc = resolve_model_config(task, o.model);
  try {
    o.train.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (o.restarts < 1) throw ConfigError("--restarts must be >= 1");
  const Dataset train = truncated(load_dataset(task.grammar, o.data, "train"), o.max_train);
  const Dataset val = truncated(load_dataset(task.grammar, o.data, "val"), o.max_val);
  if (train.task != task_name || val.task != task_name) throw InputError("splits belong to different tasks");

  if (o.restarts == 1) {
    const json s = run_one(o, task, mc, o.train, train, val, o.out);
    std::cout << s.dump() << '\n';
    return 0;
  }
  json runs = json::array();
  std::size_t best = 0;
  for (std::size_t k = 0; k < o.restarts; ++k) {
    TrainConfig tc = o.train;
    tc.seed = o.train.seed + k;
    const fs::path dir = fs::path(o.out) / ("run-" + std::to_string(k));
    runs.push_back(run_one(o, task, mc, tc, train, val, dir));
    runs.back()["dir"] = dir.string();
    if (runs[k]["best_validation"].get<double>() < runs[best]["best_validation"].get<double>()) best = k;
  }
  fs::copy_file(runs[best]["dir"].get<std::string>() + "/best.ckpt", fs::path(o.out) / "best.ckpt",
                fs::copy_options::overwrite_existing);
  const json report = {{"selected", best}, {"runs", runs}};
  write_json_file(fs::path(o.out) / "restarts.json", report);
  std::cout << report.dump() << '\n';
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalOptions {
  std::string checkpoint;
  bool oracle = false;
  std::string data;
  std::string split = "test";
  std::string out;
  std::size_t max_strings = 0;
  std::string config;
};

void add_eval(CLI::App& app, EvalOptions& o) {
  auto* sub = app.add_subcommand("eval", "Cross-entropy difference, overall and per length");
  auto* ck = sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  auto* orc = sub->add_flag("--oracle", o.oracle, "Score the exact task conditionals instead of a model");
  ck->excludes(orc);
  sub->add_option("--data", o.data, "Dataset directory (required)");
  sub->add_option("--split", o.split, "Split name: train | val | test");
  sub->add_option("--out", o.out, "Write JSON-lines rows here as well as to stdout");
  sub->add_option("--max-strings", o.max_strings, "Use only the first N strings");
  sub->add_option("--config", o.config, "JSON file with option values");
}

int run_eval(const EvalOptions& o) {
  require(o.data, "--data");
  if (o.checkpoint.empty() && !o.oracle) throw ConfigError("pass --checkpoint or --oracle");
  const TaskSpec task = make_task(dataset_task(o.data, o.split));
  const Dataset d = truncated(load_dataset(task.grammar, o.data, o.split), o.max_strings);
  std::vector<double> scores;
  std::string source;
  if (o.oracle) {
    std::size_t longest = 0;
    for (const auto& x : d.strings) longest = std::max(longest, x.size());
    auto oracle = std::make_shared<const TaskOracle>(task, longest);
    scores = score_dataset(OracleModel(oracle, d.conditioning), d);
    source = "oracle";
  } else {
    const Model<Real> model = load_model<Real>(o.checkpoint);
    if (model.config.alphabet != task.alphabet()) {
      throw InputError("checkpoint vocabulary does not match task '" + task.name + "'");
    }
    scores = score_dataset(model, d);
    source = o.checkpoint;
  }
  std::vector<json> rows;
  for (const auto& row : binned_test_eval(std::span<const double>(scores), d)) {
    json j = metric_json(row.metric);
    j["length"] = row.length;
    rows.push_back(j);
  }
  json overall = metric_json(cross_entropy_difference(std::span<const double>(scores), d));
  overall["length"] = "all";
  overall["task"] = task.name;
  overall["split"] = o.split;
  overall["source"] = source;
  rows.push_back(overall);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw ResourceError("cannot write " + o.out);
  }
  for (const auto& r : rows) {
    std::cout << r.dump() << '\n';
    if (file.is_open()) file << r.dump() << '\n';
  }
  return 0;
}

// --------------------------------------------------------- inspect-actions

struct InspectOptions {
  std::string checkpoint;
  std::string input;
  std::string out;
  std::size_t top_k = 5;
};

void add_inspect(CLI::App& app, InspectOptions& o) {
  auto* sub = app.add_subcommand("inspect-actions", "Per-position stack actions as TSV");
  sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  sub->add_option("--input", o.input, "Input string over the task alphabet")->required();
  sub->add_option("--out", o.out, "TSV file (default: stdout)");
  sub->add_option("--top-k", o.top_k, "Transitions listed per row for the nondeterministic stack");
}

int run_inspect(const InspectOptions& o) {
  const Model<Real> model = load_model<Real>(o.checkpoint);
  const ModelConfig& c = model.config;
  if (c.variant == AttentionVariant::kSdpa) {
    throw ConfigError("inspect-actions needs a stack attention model; this checkpoint is sdpa only");
  }
  std::vector<int> tokens;
  try {
    tokens = tokenize(c, o.input);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const Tensor<Real> actions = stack_actions(model, tokens);
  std::ostringstream tsv;
  tsv << std::setprecision(6);
  const std::size_t cols = actions.cols();
  if (c.variant == AttentionVariant::kSuperposition) {
    tsv << "position\tinput\tpush\tnoop\tpop\targmax\n";
  } else {
    tsv << "position\tinput";
    for (std::size_t k = 0; k < o.top_k && k < cols; ++k) tsv << "\ttop" << k + 1;
    tsv << '\n';
  }
  for (std::size_t t = 0; t < actions.rows(); ++t) {
    tsv << t << '\t' << (t == 0 ? std::string("BOS") : c.alphabet[tokens[t - 1]]);
    const Real* row = actions.values().data() + t * cols;
    if (c.variant == AttentionVariant::kSuperposition) {
      std::size_t arg = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        tsv << '\t' << row[k];
        if (row[k] > row[arg]) arg = k;
      }
      tsv << '\t' << kSuperpositionActions[arg] << '\n';
    } else {
      std::vector<std::size_t> idx(cols);
      for (std::size_t k = 0; k < cols; ++k) idx[k] = k;
      const std::size_t k_show = std::min(o.top_k, cols);
      std::partial_sort(idx.begin(), idx.begin() + k_show, idx.end(),
                        [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
      for (std::size_t k = 0; k < k_show; ++k)
        tsv << '\t' << transition_label(c.stack().vpda(), idx[k]) << '=' << row[idx[k]];
      tsv << '\n';
    }
  }
  if (o.out.empty()) {
    std::cout << tsv.str();
  } else {
    std::ofstream f(o.out);
    f << tsv.str();
    if (!f) throw ResourceError("cannot write " + o.out);
  }
  return 0;
}

// ------------------------------------------------------------ count-params

struct CountOptions {
  std::string task;
  ModelOptions model;
  bool as_json = false;
};

void add_count(CLI::App& app, CountOptions& o) {
  auto* sub = app.add_subcommand("count-params", "Learnable parameter count with a breakdown");
  sub->add_option("--task", o.task, "Task name (required)");
  add_model_options(sub, o.model);
  sub->add_flag("--json", o.as_json, "Print one JSON object");
}

int run_count(const CountOptions& o) {
  require(o.task, "--task");
  TaskSpec task;
  try {
    task = make_task(o.task);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  const ModelConfig mc = resolve_model_config(task, o.model);
  std::mt19937_64 rng(0);
  const Model<Real> model = build_model<Real>(mc, rng);
  const auto breakdown = parameter_breakdown(model);
  if (o.as_json) {
    json parts = json::object();
    for (const auto& [k, v] : breakdown) parts[k] = v;
    std::cout << json{{"total", count_parameters(model)}, {"breakdown", parts}}.dump() << '\n';
  } else {
    std::cout << count_parameters(model) << '\n';
    for (const auto& [k, v] : breakdown) std::cout << "  " << k << '\t' << v << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stack-attention transformers on context-free language tasks"};
  app.require_subcommand(1);
  GenerateOptions gen;
  TrainOptions train;
  EvalOptions eval;
  InspectOptions inspect;
  CountOptions count;
  add_generate(app, gen);
  add_train(app, train);
  add_eval(app, eval);
  add_inspect(app, inspect);
  add_count(app, count);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (auto* cfg = sub->get_option_no_throw("--config"); cfg && cfg->count() > 0) {
      apply_config_file(*sub, cfg->as<std::string>());
    }
    if (name == "generate") return run_generate(gen);
    if (name == "train") return run_train(train);
    if (name == "eval") return run_eval(eval);
    if (name == "inspect-actions") return run_inspect(inspect);
    return run_count(count);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
