#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/model.hpp"
#include "igpk/tensor.hpp"
#include "igpk/trainer.hpp"

namespace igpk {

// Per-linear accumulated gradient-information matrix. Same shape as the base
// weight; every entry is a mean of squared simulated gradients, hence >= 0.
struct IgiaMatrix {
  std::string name;
  Tensor f;
  std::int64_t steps_seen = 0;
};

using IgiaMap = std::map<std::string, IgiaMatrix>;

// Aligns the two adapter gradients to the base weight's shape:
// grad_b [out x r] times grad_a [r x in] -> [out x in].
inline Tensor simulate_weight_gradient(const Tensor& grad_b, const Tensor& grad_a) {
  if (!grad_b.is_matrix() || !grad_a.is_matrix() || grad_b.cols() != grad_a.rows()) {
    throw ShapeError("simulated gradient rank mismatch: " + grad_b.shape_string() + " vs " +
                     grad_a.shape_string());
  }
  return matmul(grad_b, grad_a);
}

// Streaming mean of squared simulated gradients: running sums plus a step
// counter, divided once at finalize. Memory stays O(params) for any t.
class IgiaAccumulator {
 public:
  // Registers every adapter-bearing linear of the model. strict_order demands
  // records arrive with consecutive 1-based step indices.
  explicit IgiaAccumulator(const ModelState& model, bool strict_order = true)
      : strict_order_(strict_order) {
    for_each_linear(model, [&](const AdapterLinear& lin) {
      sums_.emplace(lin.name, Tensor::zeros(lin.w.shape()));
      adapter_shapes_.emplace(lin.name,
                              std::make_pair(lin.b.shape(), lin.a.shape()));
    });
  }

  void accumulate(const GradRecord& record) {
    if (strict_order_ && record.step != steps_ + 1) {
      throw ValueError("out-of-order gradient record: step " + std::to_string(record.step) +
                       " after " + std::to_string(steps_) + " accumulated");
    }
    for (const auto& [name, grads] : record.linears) {
      auto it = sums_.find(name);
      if (it == sums_.end()) {
        throw ShapeError("gradient record for unregistered linear '" + name + "'");
      }
      const auto& [b_shape, a_shape] = adapter_shapes_.at(name);
      if (grads.b.shape() != b_shape || grads.a.shape() != a_shape) {
        throw ShapeError("adapter gradient shape mismatch for '" + name + "': got " +
                         grads.b.shape_string() + "/" + grads.a.shape_string());
      }
      Tensor sim = simulate_weight_gradient(grads.b, grads.a);
      scaled_add_inplace(it->second, hadamard_square(sim), 1.0);
    }
    ++steps_;
  }

  std::int64_t steps_seen() const { return steps_; }

  IgiaMap finalize() const {
    if (steps_ == 0) throw NumericError("cannot finalize an empty gradient stream");
    IgiaMap out;
    const double inv_t = 1.0 / static_cast<double>(steps_);
    for (const auto& [name, sum] : sums_) {
      out.emplace(name, IgiaMatrix{name, scale(sum, inv_t), steps_});
    }
    return out;
  }

 private:
  std::map<std::string, Tensor> sums_;
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
      adapter_shapes_;
  std::int64_t steps_ = 0;
  bool strict_order_ = true;
};

// Probe-then-finalize. Takes the model by value: probe-phase adapter updates
// are deliberately discarded, the caller's model is untouched.
inline IgiaMap compute_igia(ModelState model, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.probe_steps < 1) throw ConfigError("compute_igia needs probe_steps >= 1");
  IgiaAccumulator acc(model);
  run_probe(model, data, cfg, [&](const GradRecord& rec) { acc.accumulate(rec); });
  return acc.finalize();
}

}  // namespace igpk
