// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: 8-byte magic, little-endian u64 header length, a
// JSON text header (precision, model config echo, tensor directory), then
// raw little-endian float arrays in directory order.
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/model.hpp"

namespace moelab {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};

namespace detail {

template <class T>
void write_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T read_le(const char* p) {
  char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline nlohmann::ordered_json config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["model_dim"] = c.model_dim;
  j["num_layers"] = c.num_layers;
  j["experts_per_layer"] = c.experts_per_layer;
  j["top_k"] = c.top_k;
  j["shared_expert"] = c.shared_expert;
  j["expert_hidden_dim"] = c.expert_hidden_dim;
  j["attention"] = c.attention;
  j["precision"] = to_string(c.precision);
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.experts_per_layer = j.at("experts_per_layer").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.shared_expert = j.at("shared_expert").get<bool>();
  c.expert_hidden_dim = j.at("expert_hidden_dim").get<int>();
  c.attention = j.at("attention").get<bool>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  return c;
}

}  // namespace detail

template <class S>
std::string serialize_checkpoint(const MoEModel<S>& model) {
  nlohmann::ordered_json header;
  header["format"] = "moelab-checkpoint";
  header["version"] = 1;
  header["precision"] = sizeof(S) == 4 ? "f32" : "f64";
  header["model"] = detail::config_json(model.config());
  std::vector<int> experts;
  nlohmann::ordered_json exclusions = nlohmann::ordered_json::array();
  bool adaptive = false;
  for (const auto& b : model.blocks()) {
    experts.push_back(b.moe.num_experts());
    adaptive = adaptive || b.moe.adaptive.has_value();
    exclusions.push_back(b.moe.excluded_domains);
  }
  header["experts_per_layer"] = experts;
  header["adaptive_installed"] = adaptive;
  header["excluded_domains"] = exclusions;

  auto state = model.named_state();
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : state) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    offset += uint64_t(t.size()) * sizeof(S);
    dir.push_back(e);
  }
  header["tensors"] = dir;

  const std::string htext = header.dump();
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<uint64_t>(out, htext.size());
  out += htext;
  for (const auto& [name, t] : state)
    for (S v : t.values()) detail::write_le<S>(out, v);
  return out;
}

template <class S>
void save_checkpoint(const MoEModel<S>& model, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = serialize_checkpoint(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Rebuilds the model structure recorded in the header (expert counts,
// adaptive routers, availability exclusions) and loads every array. The
// stored config and precision must match the caller's expectation.
template <class S>
MoEModel<S> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("checkpoint not found: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ConfigError("not a checkpoint file: " + path.string());
  const uint64_t hlen = detail::read_le<uint64_t>(bytes.data() + 8);
  if (16 + hlen > bytes.size()) throw ConfigError("truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));

  const std::string want_prec = sizeof(S) == 4 ? "f32" : "f64";
  if (header.at("precision").get<std::string>() != want_prec)
    throw ConfigError("checkpoint precision " + header.at("precision").get<std::string>() +
                      " does not match requested " + want_prec);
  ModelConfig stored = detail::config_from_json(header.at("model"));
  if (stored.vocab_size != expect.vocab_size || stored.model_dim != expect.model_dim ||
      stored.num_layers != expect.num_layers ||
      stored.experts_per_layer != expect.experts_per_layer || stored.top_k != expect.top_k ||
      stored.shared_expert != expect.shared_expert ||
      stored.expert_hidden_dim != expect.expert_hidden_dim ||
      stored.attention != expect.attention)
    throw ConfigError("checkpoint/config mismatch for " + path.string());

  MoEModel<S> model = MoEModel<S>::build(stored, /*seed=*/0);
  const auto counts = header.at("experts_per_layer").get<std::vector<int>>();
  for (size_t l = 0; l < counts.size(); ++l)
    while (model.num_experts(static_cast<int>(l)) < counts[l])
      model.add_expert_copy(static_cast<int>(l), 0);
  if (header.at("adaptive_installed").get<bool>()) model.install_adaptive_routers(/*seed=*/0);
  if (header.contains("excluded_domains")) {
    auto ex = header.at("excluded_domains").get<std::vector<std::vector<std::vector<int>>>>();
    for (size_t l = 0; l < ex.size(); ++l) model.blocks()[l].moe.excluded_domains = ex[l];
  }

  const char* data = bytes.data() + 16 + hlen;
  const size_t data_len = bytes.size() - 16 - hlen;
  auto state = model.named_state();
  size_t cursor = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    if (cursor >= state.size() || state[cursor].first != name ||
        state[cursor].second.shape() != shape)
      throw ConfigError("checkpoint layout mismatch at tensor '" + name + "'");
    Tensor<S> t = state[cursor].second;
    const uint64_t need = offset + uint64_t(t.size()) * sizeof(S);
    if (need > data_len) throw ConfigError("checkpoint data truncated at '" + name + "'");
    for (long long i = 0; i < t.size(); ++i)
      t.values()[static_cast<size_t>(i)] =
          detail::read_le<S>(data + offset + uint64_t(i) * sizeof(S));
    ++cursor;
  }
  if (cursor != state.size()) throw ConfigError("checkpoint missing tensors");
  return model;
}

}  // namespace moelab
