#pragma once

// Model and gradient-information persistence over the tensor container.

#include <cstdio>
#include <string>
#include <string_view>

#include "igpk/container.hpp"
#include "igpk/errors.hpp"
#include "igpk/igia.hpp"
#include "igpk/model.hpp"

namespace igpk {

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string part =
        s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!part.empty()) out.push_back(std::stoi(part));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline const std::string& require_attr(const AttrMap& attrs, const std::string& key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw IoError(IoErrc::parse, "missing attribute '" + key + "'");
  return it->second;
}

inline const Tensor& require_tensor(const Container& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw IoError(IoErrc::parse, "missing tensor '" + name + "'");
  return it->second;
}

}  // namespace detail

inline Container model_to_container(const ModelState& m) {
  Container c;
  c.attrs["kind"] = "model";
  c.attrs["config.n_layers"] = std::to_string(m.config.n_layers);
  c.attrs["config.d_model"] = std::to_string(m.config.d_model);
  c.attrs["config.n_heads"] = std::to_string(m.config.n_heads);
  c.attrs["config.d_ff"] = std::to_string(m.config.d_ff);
  c.attrs["config.vocab_size"] = std::to_string(m.config.vocab_size);
  c.attrs["config.max_seq"] = std::to_string(m.config.max_seq);
  c.attrs["config.lora_rank"] = std::to_string(m.config.lora_rank);
  c.attrs["config.lora_alpha"] = detail::format_double(m.config.lora_alpha);
  c.attrs["layer_ids"] = detail::join_ints(m.layer_ids);
  c.tensors["tok_emb"] = m.tok_emb;
  c.tensors["pos_emb"] = m.pos_emb;
  c.tensors["final_norm"] = m.final_norm;
  c.tensors["head"] = m.head;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const int id = m.layer_ids[i];
    const LayerBlock& layer = m.layers[i];
    c.tensors[linear_name(id, "attn_norm")] = layer.attn_norm;
    c.tensors[linear_name(id, "mlp_norm")] = layer.mlp_norm;
    for (const AdapterLinear* lin : layer.linears()) {
      c.tensors[lin->name + ".w"] = lin->w;
      c.tensors[lin->name + ".lora_a"] = lin->a;
      c.tensors[lin->name + ".lora_b"] = lin->b;
    }
  }
  return c;
}

inline ModelState model_from_container(const Container& c) {
  using detail::require_attr;
  using detail::require_tensor;
  if (require_attr(c.attrs, "kind") != "model") {
    throw IoError(IoErrc::parse, "container is not a model checkpoint");
  }
  ModelConfig cfg;
  cfg.n_layers = std::stoi(require_attr(c.attrs, "config.n_layers"));
  cfg.d_model = std::stoi(require_attr(c.attrs, "config.d_model"));
  cfg.n_heads = std::stoi(require_attr(c.attrs, "config.n_heads"));
  cfg.d_ff = std::stoi(require_attr(c.attrs, "config.d_ff"));
  cfg.vocab_size = std::stoi(require_attr(c.attrs, "config.vocab_size"));
  cfg.max_seq = std::stoi(require_attr(c.attrs, "config.max_seq"));
  cfg.lora_rank = std::stoi(require_attr(c.attrs, "config.lora_rank"));
  cfg.lora_alpha = std::stod(require_attr(c.attrs, "config.lora_alpha"));
  cfg.validate();

  ModelState m;
  m.config = cfg;
  m.layer_ids = detail::split_ints(require_attr(c.attrs, "layer_ids"));
  m.tok_emb = require_tensor(c, "tok_emb");
  m.pos_emb = require_tensor(c, "pos_emb");
  m.final_norm = require_tensor(c, "final_norm");
  m.head = require_tensor(c, "head");
  for (int id : m.layer_ids) {
    LayerBlock layer;
    layer.attn_norm = require_tensor(c, linear_name(id, "attn_norm"));
    layer.mlp_norm = require_tensor(c, linear_name(id, "mlp_norm"));
    auto load_linear = [&](const char* sub) {
      AdapterLinear lin;
      lin.name = linear_name(id, sub);
      lin.w = require_tensor(c, lin.name + ".w");
      lin.a = require_tensor(c, lin.name + ".lora_a");
      lin.b = require_tensor(c, lin.name + ".lora_b");
      lin.rank = cfg.lora_rank;
      lin.alpha = cfg.lora_alpha;
      if (lin.a.rows() != static_cast<std::size_t>(cfg.lora_rank) ||
          lin.b.cols() != static_cast<std::size_t>(cfg.lora_rank)) {
        throw IoError(IoErrc::parse, "adapter shape mismatch for '" + lin.name + "'");
      }
      return lin;
    };
    layer.q = load_linear("attn.q");
    layer.k = load_linear("attn.k");
    layer.v = load_linear("attn.v");
    layer.o = load_linear("attn.o");
    layer.up = load_linear("mlp.up");
    layer.gate = load_linear("mlp.gate");
    layer.down = load_linear("mlp.down");
    m.layers.push_back(std::move(layer));
  }
  return m;
}

inline void save_model(const std::string& path, const ModelState& m, Dtype dtype = Dtype::f64) {
  Container c = model_to_container(m);
  save_container(path, c.tensors, c.attrs, dtype);
}

inline ModelState load_model(const std::string& path) {
  return model_from_container(load_container(path));
}

// Gradient-information files: one tensor per linear, name suffixed ".igia",
// with the probe step count in the header.
inline void save_igia(const std::string& path, const IgiaMap& igia) {
  if (igia.empty()) throw ValueError("refusing to save an empty gradient-information map");
  Container c;
  c.attrs["kind"] = "igia";
  c.attrs["steps_seen"] = std::to_string(igia.begin()->second.steps_seen);
  for (const auto& [name, m] : igia) {
    c.tensors[name + ".igia"] = m.f;
  }
  save_container(path, c.tensors, c.attrs);
}

inline IgiaMap load_igia(const std::string& path) {
  Container c = load_container(path);
  if (detail::require_attr(c.attrs, "kind") != "igia") {
    throw IoError(IoErrc::parse, "container is not a gradient-information file");
  }
  const auto steps =
      static_cast<std::int64_t>(std::stoll(detail::require_attr(c.attrs, "steps_seen")));
  IgiaMap out;
  for (const auto& [name, t] : c.tensors) {
    constexpr std::string_view suffix = ".igia";
    if (name.size() <= suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw IoError(IoErrc::parse, "unexpected tensor '" + name + "' in gradient-information file");
    }
    const std::string base = name.substr(0, name.size() - suffix.size());
    out.emplace(base, IgiaMatrix{base, t, steps});
  }
  return out;
}

}  // namespace igpk
