#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/rng.hpp"
#include "igpk/tensor.hpp"

namespace igpk {

// Invalid runtime inputs (bad token ids, mismatched tapes, unknown names).
class ValueError : public std::invalid_argument {
 public:
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 32;
  int max_seq = 32;
  int lora_rank = 8;
  double lora_alpha = 16.0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq < 1 || lora_rank < 1) {
      throw ConfigError("model config fields must all be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (!std::isfinite(lora_alpha)) throw ConfigError("lora_alpha must be finite");
  }

  bool operator==(const ModelConfig&) const = default;
};

// A linear layer with a frozen-able base weight and low-rank adapter factors.
// Effective weight is w + alpha * b * a.
struct AdapterLinear {
  std::string name;
  Tensor w;  // [out x in]
  Tensor a;  // [rank x in]
  Tensor b;  // [out x rank]
  int rank = 0;
  double alpha = 0.0;

  std::size_t out_features() const { return w.rows(); }
  std::size_t in_features() const { return w.cols(); }
};

// w + alpha * b * a. Adapters are conceptually zeroed after folding.
inline Tensor merge_lora(const AdapterLinear& lin) {
  return scaled_add(lin.w, matmul(lin.b, lin.a), lin.alpha);
}

inline constexpr std::array<const char*, 7> kSublayerNames = {
    "attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.gate", "mlp.down"};

inline std::string linear_name(int layer_id, const char* sublayer) {
  return "layer." + std::to_string(layer_id) + "." + std::string(sublayer);
}

struct LayerBlock {
  Tensor attn_norm;  // [d_model] RMSNorm gain
  AdapterLinear q, k, v, o;
  Tensor mlp_norm;  // [d_model]
  AdapterLinear up, gate, down;

  std::array<AdapterLinear*, 7> linears() { return {&q, &k, &v, &o, &up, &gate, &down}; }
  std::array<const AdapterLinear*, 7> linears() const {
    return {&q, &k, &v, &o, &up, &gate, &down};
  }
};

struct ModelState {
  ModelConfig config;
  Tensor tok_emb;  // [vocab x d_model]
  Tensor pos_emb;  // [max_seq x d_model]
  std::vector<LayerBlock> layers;
  Tensor final_norm;  // [d_model]
  Tensor head;        // [vocab x d_model]
  std::vector<int> layer_ids;  // original indices of surviving layers, strictly increasing
};

template <typename Fn>
void for_each_linear(ModelState& m, Fn&& fn) {
  for (auto& layer : m.layers)
    for (AdapterLinear* lin : layer.linears()) fn(*lin);
}

template <typename Fn>
void for_each_linear(const ModelState& m, Fn&& fn) {
  for (const auto& layer : m.layers)
    for (const AdapterLinear* lin : layer.linears()) fn(*lin);
}

inline const AdapterLinear* find_linear(const ModelState& m, const std::string& name) {
  const AdapterLinear* found = nullptr;
  for_each_linear(m, [&](const AdapterLinear& lin) {
    if (lin.name == name) found = &lin;
  });
  return found;
}

inline std::size_t layer_param_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.d_ff);
  return 4 * d * d + 3 * d * f + 2 * d;  // qkvo + up/gate/down + two norm gains
}

// Transformer-block parameters only: embeddings and head excluded.
inline std::size_t block_param_count(const ModelState& m) {
  return m.layers.size() * layer_param_count(m.config);
}

inline std::size_t total_param_count(const ModelState& m) {
  const auto& c = m.config;
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  std::size_t n = block_param_count(m);
  n += static_cast<std::size_t>(c.vocab_size) * d;  // tok_emb
  n += static_cast<std::size_t>(c.max_seq) * d;     // pos_emb
  n += d;                                           // final norm
  n += static_cast<std::size_t>(c.vocab_size) * d;  // head
  return n;
}

inline std::size_t adapter_param_count(const ModelState& m) {
  std::size_t n = 0;
  for_each_linear(m, [&](const AdapterLinear& lin) { n += lin.a.numel() + lin.b.numel(); });
  return n;
}

namespace detail {

inline AdapterLinear make_linear(const std::string& name, std::size_t out, std::size_t in,
                                 int rank, double alpha, Rng& rng) {
  AdapterLinear lin;
  lin.name = name;
  lin.rank = rank;
  lin.alpha = alpha;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(in));
  lin.w = Tensor::random_normal({out, in}, w_std, rng);
  // a small random, b zero: the fresh model computes exactly the base function.
  lin.a = Tensor::random_normal({static_cast<std::size_t>(rank), in}, w_std, rng);
  lin.b = Tensor::zeros({out, static_cast<std::size_t>(rank)});
  return lin;
}

}  // namespace detail

inline ModelState build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x11));
  ModelState m;
  m.config = config;
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto s = static_cast<std::size_t>(config.max_seq);
  m.tok_emb = Tensor::random_normal({v, d}, 0.02, rng);
  m.pos_emb = Tensor::random_normal({s, d}, 0.02, rng);
  m.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (int j = 0; j < config.n_layers; ++j) {
    LayerBlock& layer = m.layers[static_cast<std::size_t>(j)];
    layer.attn_norm = Tensor::full({d}, 1.0);
    layer.q = detail::make_linear(linear_name(j, "attn.q"), d, d, config.lora_rank,
                                  config.lora_alpha, rng);
    layer.k = detail::make_linear(linear_name(j, "attn.k"), d, d, config.lora_rank,
                                  config.lora_alpha, rng);
    layer.v = detail::make_linear(linear_name(j, "attn.v"), d, d, config.lora_rank,
                                  config.lora_alpha, rng);
    layer.o = detail::make_linear(linear_name(j, "attn.o"), d, d, config.lora_rank,
                                  config.lora_alpha, rng);
    layer.mlp_norm = Tensor::full({d}, 1.0);
    layer.up = detail::make_linear(linear_name(j, "mlp.up"), f, d, config.lora_rank,
                                   config.lora_alpha, rng);
    layer.gate = detail::make_linear(linear_name(j, "mlp.gate"), f, d, config.lora_rank,
                                     config.lora_alpha, rng);
    layer.down = detail::make_linear(linear_name(j, "mlp.down"), d, f, config.lora_rank,
                                     config.lora_alpha, rng);
    m.layer_ids.push_back(j);
  }
  m.final_norm = Tensor::full({d}, 1.0);
  m.head = Tensor::random_normal({v, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

using TokenSeq = std::vector<std::int32_t>;

constexpr double kRmsEps = 1e-5;

namespace detail {

// y = x * W_eff^T computed in factored form; xa = x * a^T is kept for backward.
inline Tensor lora_forward(const AdapterLinear& lin, const Tensor& x, Tensor& xa_out) {
  try {
    Tensor y = matmul_nt(x, lin.w);
    xa_out = matmul_nt(x, lin.a);
    Tensor yb = matmul_nt(xa_out, lin.b);
    scaled_add_inplace(y, yb, lin.alpha);
    return y;
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in linear '" + lin.name + "'");
  }
}

struct LinearGrads {
  Tensor dx;
  Tensor da;
  Tensor db;
  Tensor dw;  // only filled when full gradients are requested
};

inline LinearGrads lora_backward(const AdapterLinear& lin, const Tensor& x, const Tensor& xa,
                                 const Tensor& g, bool want_full) {
  try {
    LinearGrads out;
    Tensor gb = matmul(g, lin.b);  // [T x r]
    out.dx = matmul(g, lin.w);
    scaled_add_inplace(out.dx, matmul(gb, lin.a), lin.alpha);
    out.db = scale(matmul_tn(g, xa), lin.alpha);
    out.da = scale(matmul_tn(gb, x), lin.alpha);
    if (want_full) out.dw = matmul_tn(g, x);
    return out;
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in linear '" + lin.name + "'");
  }
}

inline Tensor rmsnorm_forward(const Tensor& x, const Tensor& gain, std::vector<double>& rinv) {
  const std::size_t t_len = x.rows(), d = x.cols();
  Tensor y({t_len, d});
  rinv.resize(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x.data() + t * d;
    double ms = 0.0;
    for (std::size_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsEps);
    rinv[t] = r;
    double* yr = y.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) yr[i] = gain[i] * xr[i] * r;
  }
  return y;
}

// Accumulates the gain gradient; returns the input gradient.
inline Tensor rmsnorm_backward(const Tensor& x, const Tensor& gain,
                               const std::vector<double>& rinv, const Tensor& g,
                               Tensor& dgain) {
  const std::size_t t_len = x.rows(), d = x.cols();
  Tensor dx({t_len, d});
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x.data() + t * d;
    const double* gr = g.data() + t * d;
    const double r = rinv[t];
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += gr[i] * gain[i] * xr[i];
    const double coef = r * r * r * dot / static_cast<double>(d);
    double* dxr = dx.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      dxr[i] = r * gr[i] * gain[i] - coef * xr[i];
      dgain[i] += gr[i] * xr[i] * r;
    }
  }
  return dx;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

}  // namespace detail

struct LayerTape {
  Tensor attn_in;      // residual stream entering the attention block
  Tensor attn_normed;  // rmsnorm output
  std::vector<double> attn_rinv;
  Tensor q, k, v;                  // [T x d]
  Tensor q_xa, k_xa, v_xa, o_xa;   // adapter inputs x*a^T
  std::vector<Tensor> attn_probs;  // per head, [T x T], causal rows
  Tensor ctx;                      // [T x d], input to the o projection
  Tensor mlp_in;                   // residual stream entering the MLP block
  Tensor mlp_normed;
  std::vector<double> mlp_rinv;
  Tensor up_xa, gate_xa, down_xa;
  Tensor up_out;    // [T x f]
  Tensor gate_out;  // [T x f], pre-activation
  Tensor hidden;    // silu(gate) ⊙ up, input to the down projection
};

struct Tape {
  ModelConfig config;
  std::vector<int> layer_ids;
  TokenSeq tokens;
  Tensor embedded;  // [T x d]
  std::vector<LayerTape> layers;
  Tensor final_in;
  Tensor final_normed;
  std::vector<double> final_rinv;
};

struct ForwardResult {
  Tensor logits;  // [T x vocab]
  Tape tape;
};

inline ForwardResult forward(const ModelState& m, const TokenSeq& tokens) {
  const auto& cfg = m.config;
  if (tokens.empty()) throw ValueError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValueError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  }
  for (std::int32_t tok : tokens) {
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw ValueError("token id " + std::to_string(tok) + " out of range [0, " +
                       std::to_string(cfg.vocab_size) + ")");
    }
  }

  const std::size_t t_len = tokens.size();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = d / n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardResult out;
  Tape& tape = out.tape;
  tape.config = cfg;
  tape.layer_ids = m.layer_ids;
  tape.tokens = tokens;

  Tensor x({t_len, d});
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* te = m.tok_emb.data() + static_cast<std::size_t>(tokens[t]) * d;
    const double* pe = m.pos_emb.data() + t * d;
    double* xr = x.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
  }
  tape.embedded = x;

  tape.layers.resize(m.layers.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    try {
    const LayerBlock& layer = m.layers[li];
    LayerTape& lt = tape.layers[li];
    lt.attn_in = x;
    lt.attn_normed = detail::rmsnorm_forward(x, layer.attn_norm, lt.attn_rinv);

    lt.q = detail::lora_forward(layer.q, lt.attn_normed, lt.q_xa);
    lt.k = detail::lora_forward(layer.k, lt.attn_normed, lt.k_xa);
    lt.v = detail::lora_forward(layer.v, lt.attn_normed, lt.v_xa);

    lt.ctx = Tensor({t_len, d});
    lt.attn_probs.assign(n_heads, Tensor());
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * hd;
      Tensor probs({t_len, t_len});
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* qr = lt.q.data() + t * d + c0;
        double maxs = -std::numeric_limits<double>::infinity();
        std::vector<double> srow(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          const double* kr = lt.k.data() + u * d + c0;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) s += qr[i] * kr[i];
          s *= attn_scale;
          srow[u] = s;
          maxs = std::max(maxs, s);
        }
        double denom = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          srow[u] = std::exp(srow[u] - maxs);
          denom += srow[u];
        }
        double* prow = probs.data() + t * t_len;
        for (std::size_t u = 0; u <= t; ++u) prow[u] = srow[u] / denom;
        double* ctxr = lt.ctx.data() + t * d + c0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = prow[u];
          const double* vr = lt.v.data() + u * d + c0;
          for (std::size_t i = 0; i < hd; ++i) ctxr[i] += p * vr[i];
        }
      }
      lt.attn_probs[h] = std::move(probs);
    }

    Tensor attn_out = detail::lora_forward(layer.o, lt.ctx, lt.o_xa);
    Tensor x_mid = scaled_add(x, attn_out, 1.0);

    lt.mlp_in = x_mid;
    lt.mlp_normed = detail::rmsnorm_forward(x_mid, layer.mlp_norm, lt.mlp_rinv);
    lt.up_out = detail::lora_forward(layer.up, lt.mlp_normed, lt.up_xa);
    lt.gate_out = detail::lora_forward(layer.gate, lt.mlp_normed, lt.gate_xa);
    lt.hidden = Tensor({t_len, static_cast<std::size_t>(cfg.d_ff)});
    for (std::size_t i = 0; i < lt.hidden.numel(); ++i) {
      lt.hidden[i] = detail::silu(lt.gate_out[i]) * lt.up_out[i];
    }
    Tensor mlp_out = detail::lora_forward(layer.down, lt.hidden, lt.down_xa);
    x = scaled_add(x_mid, mlp_out, 1.0);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (forward, layer " +
                         std::to_string(m.layer_ids[li]) + ")");
    }
  }

  tape.final_in = x;
  tape.final_normed = detail::rmsnorm_forward(x, m.final_norm, tape.final_rinv);
  out.logits = matmul_nt(tape.final_normed, m.head);
  return out;
}

// Adapter gradient pair for one linear; shapes match (a, b).
struct AdapterGrads {
  Tensor a;
  Tensor b;
};

using AdapterGradMap = std::map<std::string, AdapterGrads>;
using ParamGradMap = std::map<std::string, Tensor>;

// One probe step's gradients, keyed by linear name. step is 1-based.
struct GradRecord {
  std::int64_t step = 0;
  AdapterGradMap linears;
};

struct BackwardResult {
  double loss = 0.0;
  AdapterGradMap adapter_grads;
  // Base-weight gradients per linear plus embeddings / norms / head under
  // their parameter names. Present only when requested.
  std::optional<ParamGradMap> full_grads;
};

// Mean token cross-entropy over positions whose target id is >= 0.
// Targets with negative ids are excluded from loss and gradients.
inline BackwardResult backward(const ModelState& m, const Tape& tape, const TokenSeq& targets,
                               bool want_full_grads = false) {
  const auto& cfg = m.config;
  if (!(tape.config == cfg) || tape.layer_ids != m.layer_ids) {
    throw ValueError("tape does not match model (config or surviving layers differ)");
  }
  if (targets.size() != tape.tokens.size()) {
    throw ValueError("targets length " + std::to_string(targets.size()) +
                     " != tokens length " + std::to_string(tape.tokens.size()));
  }
  for (std::int32_t y : targets) {
    if (y >= cfg.vocab_size) {
      throw ValueError("target id " + std::to_string(y) + " out of range");
    }
  }

  const std::size_t t_len = tape.tokens.size();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t vocab = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = d / n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Recompute logits from the tape; cheaper than storing them twice.
  Tensor logits = matmul_nt(tape.final_normed, m.head);

  std::size_t n_valid = 0;
  for (std::int32_t y : targets)
    if (y >= 0) ++n_valid;
  if (n_valid == 0) throw ValueError("no valid (non-negative) targets in sequence");
  const double inv_n = 1.0 / static_cast<double>(n_valid);

  BackwardResult result;
  Tensor dlogits({t_len, vocab});
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (targets[t] < 0) continue;
    const double* lr = logits.data() + t * vocab;
    double maxl = lr[0];
    for (std::size_t j = 1; j < vocab; ++j) maxl = std::max(maxl, lr[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(lr[j] - maxl);
    const double lse = maxl + std::log(denom);
    loss += lse - lr[static_cast<std::size_t>(targets[t])];
    double* dr = dlogits.data() + t * vocab;
    for (std::size_t j = 0; j < vocab; ++j) dr[j] = std::exp(lr[j] - lse) * inv_n;
    dr[static_cast<std::size_t>(targets[t])] -= inv_n;
  }
  result.loss = loss * inv_n;
  if (!std::isfinite(result.loss)) throw NumericError("non-finite loss");

  ParamGradMap full;
  const bool wf = want_full_grads;

  // Head and final norm.
  if (wf) full["head"] = matmul_tn(dlogits, tape.final_normed);
  Tensor dfinal_normed = matmul(dlogits, m.head);
  Tensor dfinal_gain({d});
  Tensor dx = detail::rmsnorm_backward(tape.final_in, m.final_norm, tape.final_rinv,
                                       dfinal_normed, dfinal_gain);
  if (wf) full["final_norm"] = std::move(dfinal_gain);

  for (std::size_t li = m.layers.size(); li-- > 0;) {
    try {
    const LayerBlock& layer = m.layers[li];
    const LayerTape& lt = tape.layers[li];
    const int layer_id = m.layer_ids[li];

    // MLP block: x_out = mlp_in + down(hidden)
    auto down_g = detail::lora_backward(layer.down, lt.hidden, lt.down_xa, dx, wf);
    result.adapter_grads[layer.down.name] = {std::move(down_g.da), std::move(down_g.db)};
    if (wf) full[layer.down.name] = std::move(down_g.dw);

    const std::size_t f = static_cast<std::size_t>(cfg.d_ff);
    Tensor dup({t_len, f}), dgate({t_len, f});
    for (std::size_t i = 0; i < t_len * f; ++i) {
      const double g = down_g.dx[i];
      const double z = lt.gate_out[i];
      dup[i] = g * detail::silu(z);
      dgate[i] = g * detail::silu_grad(z) * lt.up_out[i];
    }
    auto up_g = detail::lora_backward(layer.up, lt.mlp_normed, lt.up_xa, dup, wf);
    auto gate_g = detail::lora_backward(layer.gate, lt.mlp_normed, lt.gate_xa, dgate, wf);
    result.adapter_grads[layer.up.name] = {std::move(up_g.da), std::move(up_g.db)};
    result.adapter_grads[layer.gate.name] = {std::move(gate_g.da), std::move(gate_g.db)};
    if (wf) {
      full[layer.up.name] = std::move(up_g.dw);
      full[layer.gate.name] = std::move(gate_g.dw);
    }
    Tensor dmlp_normed = scaled_add(up_g.dx, gate_g.dx, 1.0);
    Tensor dmlp_gain({d});
    Tensor dmid = detail::rmsnorm_backward(lt.mlp_in, layer.mlp_norm, lt.mlp_rinv, dmlp_normed,
                                           dmlp_gain);
    if (wf) full[linear_name(layer_id, "mlp_norm")] = std::move(dmlp_gain);
    scaled_add_inplace(dmid, dx, 1.0);  // residual path

    // Attention block: mlp_in = attn_in + o(ctx)
    auto o_g = detail::lora_backward(layer.o, lt.ctx, lt.o_xa, dmid, wf);
    result.adapter_grads[layer.o.name] = {std::move(o_g.da), std::move(o_g.db)};
    if (wf) full[layer.o.name] = std::move(o_g.dw);

    Tensor dq({t_len, d}), dk({t_len, d}), dv({t_len, d});
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * hd;
      const Tensor& probs = lt.attn_probs[h];
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* dctx = o_g.dx.data() + t * d + c0;
        const double* prow = probs.data() + t * t_len;
        // dv and dp
        std::vector<double> dprow(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          const double* vr = lt.v.data() + u * d + c0;
          double dp = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dp += dctx[i] * vr[i];
          dprow[u] = dp;
          double* dvr = dv.data() + u * d + c0;
          const double p = prow[u];
          for (std::size_t i = 0; i < hd; ++i) dvr[i] += p * dctx[i];
        }
        // softmax backward
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) dot += dprow[u] * prow[u];
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = prow[u] * (dprow[u] - dot) * attn_scale;
          const double* kr = lt.k.data() + u * d + c0;
          const double* qr = lt.q.data() + t * d + c0;
          double* dqr = dq.data() + t * d + c0;
          double* dkr = dk.data() + u * d + c0;
          for (std::size_t i = 0; i < hd; ++i) {
            dqr[i] += ds * kr[i];
            dkr[i] += ds * qr[i];
          }
        }
      }
    }

    auto q_g = detail::lora_backward(layer.q, lt.attn_normed, lt.q_xa, dq, wf);
    auto k_g = detail::lora_backward(layer.k, lt.attn_normed, lt.k_xa, dk, wf);
    auto v_g = detail::lora_backward(layer.v, lt.attn_normed, lt.v_xa, dv, wf);
    result.adapter_grads[layer.q.name] = {std::move(q_g.da), std::move(q_g.db)};
    result.adapter_grads[layer.k.name] = {std::move(k_g.da), std::move(k_g.db)};
    result.adapter_grads[layer.v.name] = {std::move(v_g.da), std::move(v_g.db)};
    if (wf) {
      full[layer.q.name] = std::move(q_g.dw);
      full[layer.k.name] = std::move(k_g.dw);
      full[layer.v.name] = std::move(v_g.dw);
    }

    Tensor dattn_normed = scaled_add(scaled_add(q_g.dx, k_g.dx, 1.0), v_g.dx, 1.0);
    Tensor dattn_gain({d});
    Tensor dattn_in = detail::rmsnorm_backward(lt.attn_in, layer.attn_norm, lt.attn_rinv,
                                               dattn_normed, dattn_gain);
    if (wf) full[linear_name(layer_id, "attn_norm")] = std::move(dattn_gain);
    scaled_add_inplace(dattn_in, dmid, 1.0);  // residual path
    dx = std::move(dattn_in);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (backward, layer " +
                         std::to_string(m.layer_ids[li]) + ")");
    }
  }

  if (wf) {
    Tensor dtok = Tensor::zeros(m.tok_emb.shape());
    Tensor dpos = Tensor::zeros(m.pos_emb.shape());
    for (std::size_t t = 0; t < t_len; ++t) {
      const double* dxr = dx.data() + t * d;
      double* tr = dtok.data() + static_cast<std::size_t>(tape.tokens[t]) * d;
      double* pr = dpos.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) {
        tr[i] += dxr[i];
        pr[i] += dxr[i];
      }
    }
    full["tok_emb"] = std::move(dtok);
    full["pos_emb"] = std::move(dpos);
    result.full_grads = std::move(full);
  }
  return result;
}

// Removes the given (original) layer indices. Survivors keep relative order.
inline ModelState drop_layers(const ModelState& m, const std::set<int>& pruned) {
  if (pruned.empty()) return m;
  for (int id : pruned) {
    bool known = false;
    for (int have : m.layer_ids) known = known || have == id;
    if (!known) throw ValueError("unknown layer index " + std::to_string(id));
  }
  if (pruned.size() >= m.layer_ids.size()) {
    throw ValueError("cannot prune all " + std::to_string(m.layer_ids.size()) + " layers");
  }
  ModelState out;
  out.config = m.config;
  out.tok_emb = m.tok_emb;
  out.pos_emb = m.pos_emb;
  out.final_norm = m.final_norm;
  out.head = m.head;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (pruned.count(m.layer_ids[i])) continue;
    out.layers.push_back(m.layers[i]);
    out.layer_ids.push_back(m.layer_ids[i]);
  }
  return out;
}

// Resolves a parameter name to its tensor. Accepts the names used in
// full-gradient maps ("tok_emb", "head", "layer.3.attn.q", "layer.3.mlp_norm",
// ...) plus adapter factors as "<linear>.lora_a" / "<linear>.lora_b".
// Returns nullptr for unknown names.
inline Tensor* find_param(ModelState& m, const std::string& name) {
  if (name == "tok_emb") return &m.tok_emb;
  if (name == "pos_emb") return &m.pos_emb;
  if (name == "head") return &m.head;
  if (name == "final_norm") return &m.final_norm;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const int id = m.layer_ids[i];
    if (name == linear_name(id, "attn_norm")) return &m.layers[i].attn_norm;
    if (name == linear_name(id, "mlp_norm")) return &m.layers[i].mlp_norm;
    for (AdapterLinear* lin : m.layers[i].linears()) {
      if (name == lin->name) return &lin->w;
      if (name == lin->name + ".lora_a") return &lin->a;
      if (name == lin->name + ".lora_b") return &lin->b;
    }
  }
  return nullptr;
}

inline bool model_bitwise_equal(const ModelState& a, const ModelState& b) {
  if (!(a.config == b.config) || a.layer_ids != b.layer_ids) return false;
  if (!bitwise_equal(a.tok_emb, b.tok_emb) || !bitwise_equal(a.pos_emb, b.pos_emb) ||
      !bitwise_equal(a.final_norm, b.final_norm) || !bitwise_equal(a.head, b.head)) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    auto la = a.layers[i].linears();
    auto lb = b.layers[i].linears();
    for (std::size_t j = 0; j < la.size(); ++j) {
      if (la[j]->name != lb[j]->name || !bitwise_equal(la[j]->w, lb[j]->w) ||
          !bitwise_equal(la[j]->a, lb[j]->a) || !bitwise_equal(la[j]->b, lb[j]->b)) {
        return false;
      }
    }
    if (!bitwise_equal(a.layers[i].attn_norm, b.layers[i].attn_norm) ||
        !bitwise_equal(a.layers[i].mlp_norm, b.layers[i].mlp_norm)) {
      return false;
    }
  }
  return true;
}

}  // namespace igpk
