#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/igia.hpp"
#include "igpk/model.hpp"
#include "igpk/tensor.hpp"

namespace igpk {

enum class MergeStrategy { sign_sum, weighted_average, adaptive_isotropic, adaptive_fisher };

inline MergeStrategy parse_merge_strategy(const std::string& s) {
  if (s == "sign-sum") return MergeStrategy::sign_sum;
  if (s == "weighted-avg") return MergeStrategy::weighted_average;
  if (s == "adaptive-isotropic") return MergeStrategy::adaptive_isotropic;
  if (s == "adaptive-fisher") return MergeStrategy::adaptive_fisher;
  throw ConfigError("unknown merge strategy '" + s + "'");
}

inline const char* merge_strategy_name(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::sign_sum: return "sign-sum";
    case MergeStrategy::weighted_average: return "weighted-avg";
    case MergeStrategy::adaptive_isotropic: return "adaptive-isotropic";
    case MergeStrategy::adaptive_fisher: return "adaptive-fisher";
  }
  return "?";
}

struct MergeConfig {
  double sparsity_p = 0.8;  // fraction of donor entries retained
  MergeStrategy strategy = MergeStrategy::sign_sum;
  // Adaptive threshold on squared accumulated gradient information. When
  // unset, derived per linear from sparsity_p (see default_tau).
  std::optional<double> tau;
  // Weighted-average coefficients, first entry for the retained layer. When
  // empty, uniform weights are used.
  std::vector<double> avg_weights;

  void validate() const {
    if (!(sparsity_p >= 0.0 && sparsity_p <= 1.0)) {
      throw ConfigError("sparsity_p must be in [0, 1]");
    }
    if (tau && !(*tau >= 0.0)) throw ConfigError("tau must be >= 0");
    if (!avg_weights.empty()) {
      double sum = 0.0;
      for (double w : avg_weights) {
        if (!(w >= 0.0)) throw ConfigError("avg_weights must be >= 0");
        sum += w;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("avg_weights must sum to 1");
    }
  }
};

inline int sign_of(double x) { return x > 0.0 ? 1 : (x < 0.0 ? -1 : 0); }

// Entries in {-1, 0, +1} matching the input's shape.
inline Tensor sign_mask(const Tensor& w) {
  Tensor m = w;
  for (double& v : m.values()) v = static_cast<double>(sign_of(v));
  return m;
}

// Number of surviving entries for retention fraction p over n entries:
// ceil(p*n) evaluated with a small slack so exact fractions behave as written.
inline std::size_t retain_count(double p, std::size_t n) {
  if (p <= 0.0) return 0;
  if (p >= 1.0) return n;
  const double k = std::ceil(p * static_cast<double>(n) - 1e-9);
  return static_cast<std::size_t>(std::max(0.0, k));
}

// Keeps the retain_count(p, n) entries with the largest accumulated gradient
// information; ties break toward the lower flat index. Everything else is
// zeroed.
inline Tensor sparsify(const Tensor& w, const IgiaMatrix& f, double p) {
  if (!w.same_shape(f.f)) {
    throw ShapeError("sparsify shape mismatch: " + w.shape_string() + " vs " +
                     f.f.shape_string());
  }
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("sparsify fraction must be in [0, 1]");
  const std::size_t n = w.numel();
  const std::size_t k = retain_count(p, n);
  if (k == n) return w;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (f.f[a] != f.f[b]) return f.f[a] > f.f[b];
    return a < b;
  });
  Tensor out = Tensor::zeros(w.shape());
  for (std::size_t i = 0; i < k; ++i) out[idx[i]] = w[idx[i]];
  return out;
}

// Adds each donor entry whose sign matches the retained entry's (nonzero)
// sign. The retained tensor itself is never sparsified.
inline Tensor sign_merge(const Tensor& w1, const std::vector<Tensor>& sparsified) {
  Tensor out = w1;
  for (const Tensor& donor : sparsified) {
    if (!donor.same_shape(w1)) {
      throw ShapeError("sign_merge shape mismatch: " + w1.shape_string() + " vs " +
                       donor.shape_string());
    }
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const int s1 = sign_of(w1[i]);
      if (s1 != 0 && sign_of(donor[i]) == s1) out[i] += donor[i];
    }
  }
  return out;
}

inline Tensor weighted_average_merge(const std::vector<Tensor>& tensors,
                                     const std::vector<double>& weights) {
  if (tensors.empty()) throw ConfigError("weighted_average_merge needs at least one tensor");
  if (tensors.size() != weights.size()) {
    throw ShapeError("weighted_average_merge: " + std::to_string(tensors.size()) +
                     " tensors vs " + std::to_string(weights.size()) + " weights");
  }
  Tensor out = Tensor::zeros(tensors.front().shape());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    scaled_add_inplace(out, tensors[i], weights[i]);
  }
  return out;
}

// Per-entry adaptive coefficients: the donor entry participates (equal split)
// only when its squared gradient information clears the threshold and its
// sign agrees with the retained entry's nonzero sign.
inline std::pair<double, double> adaptive_lambda(double f_m_entry, int sign_r, int sign_m,
                                                 double tau) {
  if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
  if (f_m_entry * f_m_entry >= tau && sign_m == sign_r && sign_r != 0) return {0.5, 0.5};
  return {1.0, 0.0};
}

// Entrywise (lr*Fr*theta_r + lm*Fm*theta_m) / (lr*Fr + lm*Fm). Degenerate
// entries fall back to the retained value.
inline Tensor fisher_merge(const Tensor& theta_r, const Tensor& theta_m, const Tensor& f_r,
                           const Tensor& f_m, const Tensor& lambda_r, const Tensor& lambda_m) {
  if (!theta_r.same_shape(theta_m) || !theta_r.same_shape(f_r) || !theta_r.same_shape(f_m) ||
      !theta_r.same_shape(lambda_r) || !theta_r.same_shape(lambda_m)) {
    throw ShapeError("fisher_merge operands must share one shape, got " +
                     theta_r.shape_string());
  }
  Tensor out = theta_r;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double wr = lambda_r[i] * f_r[i];
    const double wm = lambda_m[i] * f_m[i];
    if (wm == 0.0) continue;  // exact identity on theta_r
    if (wr == 0.0) {
      out[i] = theta_m[i];
      continue;
    }
    const double denom = wr + wm;
    if (denom < 1e-12) continue;
    out[i] = (wr * theta_r[i] + wm * theta_m[i]) / denom;
  }
  return out;
}

// Threshold making the adaptive gate's surviving set line up with sparsify's
// at the same retention fraction: the k-th largest squared entry of f, with
// k = retain_count(p, n). Nothing survives when k == 0.
inline double default_tau(const IgiaMatrix& f, double p) {
  const std::size_t n = f.f.numel();
  const std::size_t k = retain_count(p, n);
  if (k == 0) return std::numeric_limits<double>::infinity();
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) sq[i] = f.f[i] * f.f[i];
  std::nth_element(sq.begin(), sq.begin() + static_cast<std::ptrdiff_t>(k - 1), sq.end(),
                   std::greater<double>());
  return sq[k - 1];
}

namespace detail {

inline Tensor merge_one(const Tensor& target_w, const std::vector<const AdapterLinear*>& donors,
                        const std::vector<const IgiaMatrix*>& donor_f,
                        const IgiaMatrix* target_f, const MergeConfig& cfg) {
  std::vector<Tensor> sparsified;
  sparsified.reserve(donors.size());
  for (std::size_t i = 0; i < donors.size(); ++i) {
    sparsified.push_back(sparsify(donors[i]->w, *donor_f[i], cfg.sparsity_p));
  }

  switch (cfg.strategy) {
    case MergeStrategy::sign_sum:
      return sign_merge(target_w, sparsified);

    case MergeStrategy::weighted_average: {
      std::vector<Tensor> all;
      all.push_back(target_w);
      for (Tensor& t : sparsified) all.push_back(std::move(t));
      std::vector<double> weights = cfg.avg_weights;
      if (weights.empty()) {
        weights.assign(all.size(), 1.0 / static_cast<double>(all.size()));
      } else if (weights.size() != all.size()) {
        throw ConfigError("avg_weights has " + std::to_string(weights.size()) +
                          " entries, expected " + std::to_string(all.size()));
      }
      return weighted_average_merge(all, weights);
    }

    case MergeStrategy::adaptive_isotropic: {
      Tensor result = target_w;
      for (std::size_t m = 0; m < sparsified.size(); ++m) {
        const double tau = cfg.tau ? *cfg.tau : default_tau(*donor_f[m], cfg.sparsity_p);
        const Tensor& fm = donor_f[m]->f;
        for (std::size_t i = 0; i < result.numel(); ++i) {
          auto [lr, lm] =
              adaptive_lambda(fm[i], sign_of(result[i]), sign_of(sparsified[m][i]), tau);
          result[i] = lr * result[i] + lm * sparsified[m][i];
        }
      }
      return result;
    }

    case MergeStrategy::adaptive_fisher: {
      if (target_f == nullptr) {
        throw ValueError("adaptive-fisher needs gradient information for the retained linear");
      }
      Tensor result = target_w;
      for (std::size_t m = 0; m < sparsified.size(); ++m) {
        const double tau = cfg.tau ? *cfg.tau : default_tau(*donor_f[m], cfg.sparsity_p);
        const Tensor& fm = donor_f[m]->f;
        Tensor lambda_r(result.shape()), lambda_m(result.shape());
        for (std::size_t i = 0; i < result.numel(); ++i) {
          auto [lr, lm] =
              adaptive_lambda(fm[i], sign_of(result[i]), sign_of(sparsified[m][i]), tau);
          lambda_r[i] = lr;
          lambda_m[i] = lm;
        }
        result = fisher_merge(result, sparsified[m], target_f->f, fm, lambda_r, lambda_m);
      }
      return result;
    }
  }
  throw ConfigError("unhandled merge strategy");
}

}  // namespace detail

// Merges every donor layer's linear sublayers into its target layer,
// position-wise by sublayer name (q with q, up with up, ...). Donor weights
// are sparsified against their own gradient information first; donor
// normalization parameters are discarded (the later structural drop removes
// them). merge_assignments maps donor layer id -> target layer id.
inline ModelState merge_layers(const ModelState& model,
                               const std::map<int, int>& merge_assignments, const IgiaMap& igia,
                               const MergeConfig& cfg) {
  cfg.validate();
  if (merge_assignments.empty()) return model;

  ModelState out = model;
  // Group donors per target, ascending donor id.
  std::map<int, std::vector<int>> donors_by_target;
  for (const auto& [donor, target] : merge_assignments) {
    donors_by_target[target].push_back(donor);
  }

  auto layer_index = [&](int id) -> std::size_t {
    for (std::size_t i = 0; i < out.layer_ids.size(); ++i) {
      if (out.layer_ids[i] == id) return i;
    }
    throw ValueError("layer id " + std::to_string(id) + " not present in model");
  };

  for (const auto& [target_id, donor_ids] : donors_by_target) {
    LayerBlock& target = out.layers[layer_index(target_id)];
    auto target_linears = target.linears();
    for (std::size_t si = 0; si < kSublayerNames.size(); ++si) {
      std::vector<const AdapterLinear*> donors;
      std::vector<const IgiaMatrix*> donor_f;
      for (int donor_id : donor_ids) {
        const LayerBlock& donor = model.layers[layer_index(donor_id)];
        const AdapterLinear* lin = donor.linears()[si];
        auto it = igia.find(lin->name);
        if (it == igia.end()) {
          throw ValueError("missing gradient information for donor linear '" + lin->name + "'");
        }
        donors.push_back(lin);
        donor_f.push_back(&it->second);
      }
      const IgiaMatrix* target_f = nullptr;
      auto tf = igia.find(target_linears[si]->name);
      if (tf != igia.end()) target_f = &tf->second;
      target_linears[si]->w =
          detail::merge_one(target_linears[si]->w, donors, donor_f, target_f, cfg);
    }
  }
  return out;
}

}  // namespace igpk
