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
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackattn/errors.hpp"
#include "stackattn/model.hpp"
#include "stackattn/train.hpp"

// Checkpoint layout:
//
//   STACKATTN-CKPT 1\n
//   <one line of JSON>\n
//   <raw little-endian float64 payload>
//
// The JSON header holds "model" (the ModelConfig), "extra" (free-form
// metadata) and "arrays": a list of {"name", "shape"} in payload order.
// Model parameters use their registered names; other arrays (optimizer
// moments, best-so-far values) are prefixed, e.g. "adam.m.<name>".

namespace stackattn {

inline constexpr const char* kCheckpointMagic = "STACKATTN-CKPT 1";

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},
          {"stack_layer_index", c.stack_layer_index},
          {"variant", variant_name(c.variant)},
          {"d_model", c.d_model},
          {"ffn_hidden", c.ffn_hidden},
          {"num_heads", c.num_heads},
          {"stack_vector_dim", c.stack_vector_dim},
          {"num_states", c.num_states},
          {"num_symbols", c.num_symbols},
          {"dropout", c.dropout},
          {"alphabet", c.alphabet}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"num_layers", "stack_layer_index", "variant", "d_model",
                                "ffn_hidden", "num_heads", "stack_vector_dim", "num_states",
                                "num_symbols", "dropout", "alphabet"};
  if (!j.is_object()) throw InputError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw InputError("unknown model config key '" + key + "'");
    }
  }
  ModelConfig c;
  try {
    c.num_layers = j.value("num_layers", c.num_layers);
    c.stack_layer_index = j.value("stack_layer_index", c.stack_layer_index);
    c.variant = parse_variant(j.value("variant", variant_name(c.variant)));
    c.d_model = j.value("d_model", c.d_model);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.stack_vector_dim = j.value("stack_vector_dim", c.stack_vector_dim);
    c.num_states = j.value("num_states", c.num_states);
    c.num_symbols = j.value("num_symbols", c.num_symbols);
    c.dropout = j.value("dropout", c.dropout);
    c.alphabet = j.value("alphabet", c.alphabet);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// 64-bit FNV-1a of the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  ModelConfig config;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");
  nlohmann::json header;
  header["model"] = to_json(data.config);
  header["extra"] = data.extra;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : data.arrays) {
    if (shape_size(a.shape) != a.values.size()) {
      throw DimensionError("array '" + a.name + "' size does not match its shape");
    }
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  }
  // Write to a sibling file then rename, so readers never see a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ResourceError("cannot write checkpoint " + tmp.string());
    out << kCheckpointMagic << '\n' << header.dump() << '\n';
    for (const auto& a : data.arrays) {
      out.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
    if (!out) throw ResourceError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string magic, header_text;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw InputError(path.string() + " is not a stackattn checkpoint");
  std::getline(in, header_text);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("corrupt checkpoint header: " + std::string(e.what()));
  }
  CheckpointData data;
  data.config = model_config_from_json(header.at("model"));
  data.extra = header.value("extra", nlohmann::json::object());
  for (const auto& a : header.at("arrays")) {
    NamedArray arr;
    arr.name = a.at("name").get<std::string>();
    arr.shape = a.at("shape").get<Shape>();
    arr.values.resize(shape_size(arr.shape));
    in.read(reinterpret_cast<char*>(arr.values.data()),
            static_cast<std::streamsize>(arr.values.size() * sizeof(double)));
    if (!in) throw InputError("checkpoint payload truncated at array '" + arr.name + "'");
    data.arrays.push_back(std::move(arr));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes in checkpoint");
  return data;
}

template <typename T>
std::vector<NamedArray> model_arrays(const Model<T>& model, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& p : model.parameters) {
    out.push_back({prefix + p.name, p.tensor.shape(),
                   std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())});
  }
  return out;
}

/// Builds the architecture from the stored config and fills the parameters
/// named `prefix + name`.
template <typename T>
Model<T> model_from_checkpoint(const CheckpointData& data, const std::string& prefix = "") {
  std::mt19937_64 rng(0);
  Model<T> model = build_model<T>(data.config, rng);
  for (auto& p : model.parameters) {
    const NamedArray* a = data.find(prefix + p.name);
    if (a == nullptr) throw InputError("checkpoint lacks parameter '" + prefix + p.name + "'");
    if (a->shape != p.tensor.shape()) throw InputError("shape mismatch for parameter '" + p.name + "'");
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(a->values[i]);
  }
  return model;
}

template <typename T>
void save_model(const std::filesystem::path& path, const Model<T>& model,
                const nlohmann::json& extra = nlohmann::json::object()) {
  write_checkpoint(path, {model.config, extra, model_arrays(model)});
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path, nlohmann::json* extra = nullptr) {
  const CheckpointData data = read_checkpoint(path);
  if (extra) *extra = data.extra;
  return model_from_checkpoint<T>(data);
}

/// Current parameters plus the training state needed to continue the run.
template <typename T>
void save_train_state(const std::filesystem::path& path, const Model<T>& model,
                      const TrainState<T>& state, nlohmann::json extra) {
  CheckpointData data{model.config, std::move(extra), model_arrays(model)};
  for (std::size_t k = 0; k < model.parameters.size(); ++k) {
    const auto& p = model.parameters[k];
    data.arrays.push_back({"adam.m." + p.name, p.tensor.shape(), state.optimizer.m[k]});
    data.arrays.push_back({"adam.v." + p.name, p.tensor.shape(), state.optimizer.v[k]});
    data.arrays.push_back({"best." + p.name, p.tensor.shape(),
                           std::vector<double>(state.best_parameters[k].begin(),
                                               state.best_parameters[k].end())});
  }
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : state.result.epochs) {
    records.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss},
                       {"validation", r.validation}, {"ce_difference", r.ce_difference},
                       {"lr", r.lr}, {"seconds", r.seconds}, {"improved", r.improved}});
  }
  const auto& s = state.schedule;
  data.extra["train_state"] = {
      {"epoch", state.epoch},
      {"step", state.optimizer.step},
      {"optimizer_lr", state.optimizer.lr},
      {"schedule", {{"best", s.best}, {"lr", s.lr}, {"stagnant", s.stagnant},
                    {"since_decay", s.since_decay}, {"decays", s.decays}, {"stop", s.stop}}},
      {"rng", state.rng},
      {"best_epoch", state.result.best_epoch},
      {"best_validation", state.result.best_validation},
      {"best_ce_difference", state.result.best_ce_difference},
      {"initial_lr", state.result.initial_lr},
      {"epochs", records}};
  write_checkpoint(path, data);
}

template <typename T>
TrainState<T> load_train_state(const CheckpointData& data, const Model<T>& model) {
  if (!data.extra.contains("train_state")) throw InputError("checkpoint holds no training state");
  const auto& j = data.extra.at("train_state");
  TrainState<T> st;
  st.epoch = j.at("epoch").get<std::size_t>();
  st.optimizer.step = j.at("step").get<std::uint64_t>();
  st.optimizer.lr = j.at("optimizer_lr").get<double>();
  const auto& s = j.at("schedule");
  st.schedule.best = s.at("best").is_null() ? std::numeric_limits<double>::infinity()
                                            : s.at("best").get<double>();
  st.schedule.lr = s.at("lr").get<double>();
  st.schedule.stagnant = s.at("stagnant").get<std::size_t>();
  st.schedule.since_decay = s.at("since_decay").get<std::size_t>();
  st.schedule.decays = s.at("decays").get<std::size_t>();
  st.schedule.stop = s.at("stop").get<bool>();
  st.rng = j.at("rng").get<std::string>();
  st.result.best_epoch = j.at("best_epoch").get<std::size_t>();
  st.result.best_validation = j.at("best_validation").get<double>();
  st.result.best_ce_difference = j.at("best_ce_difference").get<double>();
  st.result.initial_lr = j.at("initial_lr").get<double>();
  st.result.early_stopped = st.schedule.stop;
  for (const auto& r : j.at("epochs")) {
    EpochRecord e;
    e.epoch = r.at("epoch").get<std::size_t>();
    e.train_loss = r.at("train_loss").get<double>();
    e.validation = r.at("validation").get<double>();
    e.ce_difference = r.at("ce_difference").get<double>();
    e.lr = r.at("lr").get<double>();
    e.seconds = r.at("seconds").get<double>();
    e.improved = r.at("improved").get<bool>();
    st.result.epochs.push_back(e);
  }
  for (const auto& p : model.parameters) {
    for (const char* kind : {"adam.m.", "adam.v.", "best."}) {
      const NamedArray* a = data.find(kind + p.name);
      if (a == nullptr) throw InputError(std::string("checkpoint lacks '") + kind + p.name + "'");
      if (a->values.size() != p.tensor.size()) throw InputError("size mismatch for '" + a->name + "'");
      if (kind[0] == 'b') {
        st.best_parameters.emplace_back(a->values.begin(), a->values.end());
      } else if (kind[5] == 'm') {
        st.optimizer.m.push_back(a->values);
      } else {
        st.optimizer.v.push_back(a->values);
      }
    }
  }
  return st;
}

}  // namespace stackattn
