#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "igpk/data.hpp"
#include "igpk/errors.hpp"
#include "igpk/model.hpp"
#include "igpk/scoring.hpp"

namespace igpk {

// Layer ranking captured at a training step, most important first.
struct RankingSnapshot {
  std::int64_t step = 0;
  std::vector<int> ranking;
};

// |top-k(candidate) ∩ top-k(reference)| / k.
inline double topk_overlap(const RankingSnapshot& candidate, const RankingSnapshot& reference,
                           std::size_t k) {
  if (k == 0 || k > candidate.ranking.size() || k > reference.ranking.size()) {
    throw ValueError("top-k size " + std::to_string(k) + " invalid for rankings of " +
                     std::to_string(candidate.ranking.size()) + "/" +
                     std::to_string(reference.ranking.size()) + " layers");
  }
  std::set<int> cand(candidate.ranking.begin(),
                     candidate.ranking.begin() + static_cast<std::ptrdiff_t>(k));
  std::size_t shared = 0;
  for (std::size_t i = 0; i < k; ++i) shared += cand.count(reference.ranking[i]);
  return static_cast<double>(shared) / static_cast<double>(k);
}

// One overlap value per snapshot, in the given (step) order.
inline std::vector<std::pair<std::int64_t, double>> sensitivity_curve(
    const std::vector<RankingSnapshot>& snapshots, const RankingSnapshot& reference,
    std::size_t k) {
  if (snapshots.empty()) throw ValueError("sensitivity_curve needs at least one snapshot");
  std::vector<std::pair<std::int64_t, double>> series;
  series.reserve(snapshots.size());
  for (const auto& snap : snapshots) {
    series.emplace_back(snap.step, topk_overlap(snap, reference, k));
  }
  return series;
}

inline void write_sensitivity_csv(std::ostream& os,
                                  const std::vector<std::pair<std::int64_t, double>>& series) {
  os << "step,topk_overlap\n";
  os.precision(17);
  for (const auto& [step, overlap] : series) os << step << "," << overlap << "\n";
}

// Default k echoing a 20-of-32 style cut: 60% of the layer count, rounded up.
inline std::size_t default_topk(std::size_t layer_count) {
  return static_cast<std::size_t>(
      std::ceil(0.6 * static_cast<double>(layer_count) - 1e-9));
}

struct EvalReport {
  double loss = 0.0;        // mean token cross-entropy over valid positions
  double perplexity = 1.0;  // exp(loss)
  double accuracy = 0.0;    // greedy next-token accuracy over valid positions
  std::size_t samples = 0;
};

// Core evaluator over any logits source (signature: Tensor(const TokenSeq&)).
// Deterministic full pass over the held-out split, token-level aggregation.
template <typename LogitsFn>
EvalReport evaluate_logits(LogitsFn&& logits_fn, const Dataset& data) {
  if (data.heldout_count() == 0) throw ValueError("empty held-out split");
  double loss_sum = 0.0;
  std::size_t n_tokens = 0, n_correct = 0;
  for (std::size_t si = 0; si < data.heldout_count(); ++si) {
    const Sample& sample = data.heldout_sample(si);
    Tensor logits = logits_fn(sample.input);
    const std::size_t vocab = logits.cols();
    for (std::size_t t = 0; t < sample.target.size(); ++t) {
      const std::int32_t y = sample.target[t];
      if (y < 0) continue;
      const double* row = logits.data() + t * vocab;
      double maxl = row[0];
      std::size_t argmax = 0;
      for (std::size_t j = 1; j < vocab; ++j) {
        if (row[j] > maxl) {
          maxl = row[j];
          argmax = j;
        }
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - maxl);
      loss_sum += maxl + std::log(denom) - row[static_cast<std::size_t>(y)];
      n_correct += argmax == static_cast<std::size_t>(y) ? 1 : 0;
      ++n_tokens;
    }
  }
  if (n_tokens == 0) throw ValueError("held-out split has no scored positions");
  EvalReport report;
  report.loss = loss_sum / static_cast<double>(n_tokens);
  report.perplexity = std::exp(report.loss);
  report.accuracy = static_cast<double>(n_correct) / static_cast<double>(n_tokens);
  report.samples = data.heldout_count();
  return report;
}

inline EvalReport evaluate(const ModelState& model, const Dataset& data) {
  return evaluate_logits(
      [&](const TokenSeq& tokens) { return forward(model, tokens).logits; }, data);
}

// Spearman rank correlation of two rankings over the same layer set.
inline double rank_correlation(const RankingSnapshot& a, const RankingSnapshot& b) {
  const std::size_t n = a.ranking.size();
  if (n != b.ranking.size() ||
      std::set<int>(a.ranking.begin(), a.ranking.end()) !=
          std::set<int>(b.ranking.begin(), b.ranking.end())) {
    throw ValueError("rank_correlation needs rankings over the same layer set");
  }
  if (n < 2) throw ValueError("rank_correlation needs at least two layers");
  std::map<int, std::size_t> pos_b;
  for (std::size_t i = 0; i < n; ++i) pos_b[b.ranking[i]] = i;
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(pos_b[a.ranking[i]]);
    d2 += d * d;
  }
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
}

struct LayerParamInfo {
  int layer_id = 0;
  std::size_t params = 0;
  bool retained = false;
};

struct ParamReport {
  std::size_t total_before = 0, total_after = 0;
  std::size_t block_before = 0, block_after = 0;
  double block_ratio = 0.0;  // fraction of block parameters removed
  std::vector<LayerParamInfo> per_layer;
};

inline ParamReport param_report(const ModelState& before, const ModelState& after) {
  ParamReport r;
  r.total_before = total_param_count(before);
  r.total_after = total_param_count(after);
  r.block_before = block_param_count(before);
  r.block_after = block_param_count(after);
  const std::size_t removed = r.block_before - r.block_after;
  r.block_ratio = r.block_before == 0
                      ? 0.0
                      : static_cast<double>(removed) / static_cast<double>(r.block_before);
  std::set<int> surviving(after.layer_ids.begin(), after.layer_ids.end());
  for (int id : before.layer_ids) {
    r.per_layer.push_back({id, layer_param_count(before.config), surviving.count(id) > 0});
  }
  return r;
}

inline std::string param_report_text(const ParamReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << "total parameters: " << r.total_before << " -> " << r.total_after << "\n";
  os << "block parameters: " << r.block_before << " -> " << r.block_after << "\n";
  os << "block ratio removed: " << r.block_ratio << "\n";
  for (const auto& l : r.per_layer) {
    os << "  layer " << l.layer_id << ": " << l.params << " params, "
       << (l.retained ? "retained" : "pruned") << "\n";
  }
  return os.str();
}

inline void write_eval_csv(std::ostream& os, const EvalReport& r) {
  os << "loss,perplexity,accuracy,samples\n";
  os.precision(17);
  os << r.loss << "," << r.perplexity << "," << r.accuracy << "," << r.samples << "\n";
}

}  // namespace igpk
