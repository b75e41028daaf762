#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "igpk/data.hpp"
#include "igpk/errors.hpp"
#include "igpk/model.hpp"
#include "igpk/rng.hpp"

namespace igpk {

enum class TrainMode { fft, lora };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "fft" || s == "FFT") return TrainMode::fft;
  if (s == "lora" || s == "LoRA" || s == "LORA") return TrainMode::lora;
  throw ConfigError("unknown train mode '" + s + "' (expected fft or lora)");
}

inline const char* train_mode_name(TrainMode m) {
  return m == TrainMode::fft ? "fft" : "lora";
}

struct TrainConfig {
  std::int64_t total_steps = 0;  // T; when 0, epochs drive the step budget
  std::int64_t probe_steps = 0;  // t
  int batch_size = 64;
  double learning_rate = 1e-5;
  double momentum = 0.0;
  int epochs = 3;
  TrainMode mode = TrainMode::lora;
  std::uint64_t seed = 0;

  void validate() const {
    if (total_steps < 0 || probe_steps < 0) throw ConfigError("step counts must be >= 0");
    if (total_steps > 0 && probe_steps > total_steps) {
      throw ConfigError("probe_steps (" + std::to_string(probe_steps) +
                        ") must not exceed total_steps (" + std::to_string(total_steps) + ")");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be finite and >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }
};

// SGD momentum buffers, keyed like the gradient maps. Unused when momentum==0.
struct OptState {
  std::map<std::string, AdapterGrads> adapter_velocity;
  ParamGradMap param_velocity;
};

namespace detail {

inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                                  std::int64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x31 + static_cast<std::uint64_t>(epoch) * 2ULL));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
  return idx;
}

inline std::int64_t steps_per_epoch(const Dataset& data, const TrainConfig& cfg) {
  const auto n = static_cast<std::int64_t>(data.train_count);
  const auto b = static_cast<std::int64_t>(cfg.batch_size);
  return (n + b - 1) / b;
}

// Training-split indices for a 0-based global step. Epochs are fresh seeded
// permutations sliced into consecutive batches; the last batch may be short.
inline std::vector<std::size_t> batch_indices(const Dataset& data, const TrainConfig& cfg,
                                              std::int64_t step) {
  const std::int64_t spe = steps_per_epoch(data, cfg);
  const std::int64_t epoch = step / spe;
  const std::int64_t slot = step % spe;
  auto perm = epoch_permutation(data.train_count, cfg.seed, epoch);
  const auto begin = static_cast<std::size_t>(slot * cfg.batch_size);
  const auto end = std::min(data.train_count, begin + static_cast<std::size_t>(cfg.batch_size));
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin),
          perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

inline void sgd_apply(Tensor& param, const Tensor& grad, Tensor* velocity, double lr,
                      double momentum) {
  if (momentum > 0.0 && velocity != nullptr) {
    for (std::size_t i = 0; i < velocity->numel(); ++i) {
      (*velocity)[i] = momentum * (*velocity)[i] + grad[i];
    }
    scaled_add_inplace(param, *velocity, -lr);
  } else {
    scaled_add_inplace(param, grad, -lr);
  }
}

inline std::string first_non_finite_param(const ModelState& m) {
  std::string found;
  for_each_linear(m, [&](const AdapterLinear& lin) {
    if (!found.empty()) return;
    if (!lin.w.all_finite()) found = lin.name;
    else if (!lin.a.all_finite()) found = lin.name + ".lora_a";
    else if (!lin.b.all_finite()) found = lin.name + ".lora_b";
  });
  return found;
}

}  // namespace detail

struct StepResult {
  double loss = 0.0;
  GradRecord grads;  // batch-mean adapter gradients, taken before the update
};

// One optimizer step over a batch of training-split indices. Plain SGD;
// momentum only when configured. LoRA mode touches adapter factors only, FFT
// mode touches base weights, norms, embeddings and head.
inline StepResult train_step(ModelState& model, const Dataset& data,
                             const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                             OptState* opt = nullptr) {
  cfg.validate();
  if (batch.empty()) throw ConfigError("empty batch");
  const bool fft = cfg.mode == TrainMode::fft;

  StepResult result;
  AdapterGradMap& acc = result.grads.linears;
  ParamGradMap full_acc;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  try {
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      const Sample& sample = data.train_sample(batch[bi]);
      auto fwd = forward(model, sample.input);
      auto bwd = backward(model, fwd.tape, sample.target, /*want_full_grads=*/fft);
      result.loss += bwd.loss * inv_b;
      for (auto& [name, g] : bwd.adapter_grads) {
        auto it = acc.find(name);
        if (it == acc.end()) {
          acc.emplace(name, AdapterGrads{scale(g.a, inv_b), scale(g.b, inv_b)});
        } else {
          scaled_add_inplace(it->second.a, g.a, inv_b);
          scaled_add_inplace(it->second.b, g.b, inv_b);
        }
      }
      if (fft) {
        for (auto& [name, g] : *bwd.full_grads) {
          auto it = full_acc.find(name);
          if (it == full_acc.end()) full_acc.emplace(name, scale(g, inv_b));
          else scaled_add_inplace(it->second, g, inv_b);
        }
      }
    }
  } catch (const NumericError& e) {
    const std::string culprit = detail::first_non_finite_param(model);
    throw NumericError(std::string("train_step aborted: ") + e.what() +
                       (culprit.empty() ? std::string("; parameters still finite")
                                        : "; first non-finite parameter: " + culprit));
  }

  if (!std::isfinite(result.loss)) throw NumericError("train_step: non-finite batch loss");

  if (cfg.learning_rate > 0.0) {
    if (cfg.mode == TrainMode::lora) {
      for (auto& layer : model.layers) {
        for (AdapterLinear* lin : layer.linears()) {
          const AdapterGrads& g = acc.at(lin->name);
          AdapterGrads* vel = nullptr;
          if (cfg.momentum > 0.0 && opt != nullptr) {
            auto [it, inserted] = opt->adapter_velocity.try_emplace(
                lin->name, AdapterGrads{Tensor::zeros(g.a.shape()), Tensor::zeros(g.b.shape())});
            vel = &it->second;
          }
          detail::sgd_apply(lin->a, g.a, vel ? &vel->a : nullptr, cfg.learning_rate,
                            cfg.momentum);
          detail::sgd_apply(lin->b, g.b, vel ? &vel->b : nullptr, cfg.learning_rate,
                            cfg.momentum);
        }
      }
    } else {
      for (auto& [name, g] : full_acc) {
        Tensor* param = find_param(model, name);
        if (param == nullptr) throw ValueError("gradient for unknown parameter " + name);
        Tensor* vel = nullptr;
        if (cfg.momentum > 0.0 && opt != nullptr) {
          auto [it, inserted] = opt->param_velocity.try_emplace(name, Tensor::zeros(g.shape()));
          vel = &it->second;
        }
        detail::sgd_apply(*param, g, vel, cfg.learning_rate, cfg.momentum);
      }
    }
  }
  return result;
}

using GradSink = std::function<void(const GradRecord&)>;

struct ProbeSummary {
  std::int64_t steps_executed = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

// Runs exactly cfg.probe_steps adapter-only steps, delivering each step's
// batch-mean adapter gradients to the sink in step order (1-based). Base
// weights are untouched by construction; adapters do move.
inline ProbeSummary run_probe(ModelState& model, const Dataset& data, const TrainConfig& cfg,
                              const GradSink& sink) {
  cfg.validate();
  if (cfg.mode != TrainMode::lora) {
    throw ConfigError("probe phase requires mode=lora (adapters supply the gradient stream)");
  }
  ProbeSummary summary;
  OptState opt;
  for (std::int64_t s = 0; s < cfg.probe_steps; ++s) {
    auto batch = detail::batch_indices(data, cfg, s);
    StepResult r = train_step(model, data, batch, cfg, &opt);
    r.grads.step = s + 1;
    if (s == 0) summary.first_loss = r.loss;
    summary.last_loss = r.loss;
    ++summary.steps_executed;
    if (sink) sink(r.grads);
  }
  return summary;
}

struct FinetuneResult {
  std::vector<double> loss_curve;  // one entry per executed step
};

// Step budget: total_steps when positive, otherwise epochs * ceil(N/batch).
inline FinetuneResult run_finetune(ModelState& model, const Dataset& data,
                                   const TrainConfig& cfg) {
  cfg.validate();
  FinetuneResult result;
  const std::int64_t steps =
      cfg.total_steps > 0 ? cfg.total_steps
                          : static_cast<std::int64_t>(cfg.epochs) * detail::steps_per_epoch(data, cfg);
  OptState opt;
  result.loss_curve.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t s = 0; s < steps; ++s) {
    auto batch = detail::batch_indices(data, cfg, s);
    StepResult r = train_step(model, data, batch, cfg, &opt);
    result.loss_curve.push_back(r.loss);
  }
  return result;
}

}  // namespace igpk
