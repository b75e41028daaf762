#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/igia.hpp"
#include "igpk/merging.hpp"
#include "igpk/model.hpp"

namespace igpk {

struct LayerScore {
  int layer = 0;
  double score = 0.0;
};

using LayerScores = std::vector<LayerScore>;

// Importance of one layer: the sum over every entry of every sublayer's
// accumulated gradient-information matrix.
inline double layer_score(const IgiaMap& igia, int layer) {
  double score = 0.0;
  for (const char* sub : kSublayerNames) {
    auto it = igia.find(linear_name(layer, sub));
    if (it == igia.end()) {
      throw ValueError("missing gradient information for '" + linear_name(layer, sub) + "'");
    }
    score += total_sum(it->second.f);
  }
  return score;
}

// One score per layer id found in the map, ascending by layer id.
inline LayerScores compute_layer_scores(const IgiaMap& igia) {
  std::set<int> layers;
  for (const auto& [name, m] : igia) {
    if (name.rfind("layer.", 0) != 0) continue;
    const std::size_t dot = name.find('.', 6);
    if (dot == std::string::npos) continue;
    layers.insert(std::stoi(name.substr(6, dot - 6)));
  }
  LayerScores scores;
  for (int j : layers) scores.push_back({j, layer_score(igia, j)});
  return scores;
}

// Layer ids, most important first. Ties break toward the lower layer index.
inline std::vector<int> rank_layers(const LayerScores& scores) {
  std::vector<int> order(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)].score != scores[static_cast<std::size_t>(b)].score) {
      return scores[static_cast<std::size_t>(a)].score > scores[static_cast<std::size_t>(b)].score;
    }
    return scores[static_cast<std::size_t>(a)].layer < scores[static_cast<std::size_t>(b)].layer;
  });
  std::vector<int> ranking;
  ranking.reserve(order.size());
  for (int i : order) ranking.push_back(scores[static_cast<std::size_t>(i)].layer);
  return ranking;
}

struct PrunePlan {
  std::vector<int> retained;        // ascending layer ids
  std::vector<int> pruned_discard;  // ascending
  std::vector<int> pruned_merge;    // ascending
  std::map<int, int> merge_target;  // pruned id -> nearest preceding retained id
  double achieved_ratio = 0.0;      // fraction of transformer-block parameters removed
};

// Selects the prune_count lowest-scoring non-protected layers; of those, the
// merge_count highest-scoring are merged into their nearest preceding
// retained layer, the rest are discarded. The first layer is always retained.
inline PrunePlan make_prune_plan(const LayerScores& scores, int prune_count, int merge_count,
                                 const std::set<int>& protect = {}) {
  const int k = static_cast<int>(scores.size());
  if (k == 0) throw ConfigError("no layer scores");
  if (prune_count < 0 || merge_count < 0 || merge_count > prune_count) {
    throw ConfigError("need 0 <= merge_count <= prune_count");
  }
  if (prune_count >= k) {
    throw ConfigError("prune_count " + std::to_string(prune_count) + " must be < layer count " +
                      std::to_string(k));
  }

  std::set<int> known;
  for (const auto& s : scores) known.insert(s.layer);
  std::set<int> protected_ids = protect;
  protected_ids.insert(*known.begin());  // a merge donor needs a preceding retained layer
  for (int p : protected_ids) {
    if (!known.count(p)) throw ConfigError("protected layer " + std::to_string(p) + " unknown");
  }
  if (static_cast<int>(known.size() - protected_ids.size()) < prune_count) {
    throw ConfigError("protection leaves fewer than " + std::to_string(prune_count) +
                      " prunable layers");
  }

  const std::vector<int> ranking = rank_layers(scores);

  PrunePlan plan;
  std::set<int> pruned;
  for (auto it = ranking.rbegin(); it != ranking.rend() && static_cast<int>(pruned.size()) < prune_count;
       ++it) {
    if (!protected_ids.count(*it)) pruned.insert(*it);
  }
  std::set<int> merged;
  for (int id : ranking) {
    if (static_cast<int>(merged.size()) >= merge_count) break;
    if (pruned.count(id)) merged.insert(id);
  }

  for (int id : known) {
    if (!pruned.count(id)) plan.retained.push_back(id);
    else if (merged.count(id)) plan.pruned_merge.push_back(id);
    else plan.pruned_discard.push_back(id);
  }
  for (int id : plan.pruned_merge) {
    int target = -1;
    for (int r : plan.retained) {
      if (r < id) target = r;
    }
    if (target < 0) throw ConfigError("no retained layer precedes merge donor " + std::to_string(id));
    plan.merge_target[id] = target;
  }
  // Layers are structurally identical, so the block-parameter ratio reduces
  // to a layer-count ratio.
  plan.achieved_ratio = static_cast<double>(prune_count) / static_cast<double>(k);
  return plan;
}

// Merge donors into their targets, then drop every pruned layer.
inline ModelState apply_prune(const ModelState& model, const PrunePlan& plan, const IgiaMap& igia,
                              const MergeConfig& merge_cfg) {
  std::set<int> have(model.layer_ids.begin(), model.layer_ids.end());
  auto check = [&](const std::vector<int>& ids) {
    for (int id : ids) {
      if (!have.count(id)) throw ValueError("plan references unknown layer " + std::to_string(id));
    }
  };
  check(plan.retained);
  check(plan.pruned_discard);
  check(plan.pruned_merge);
  if (plan.retained.size() + plan.pruned_discard.size() + plan.pruned_merge.size() !=
      have.size()) {
    throw ValueError("plan does not partition the model's layer set");
  }

  ModelState merged = merge_layers(model, plan.merge_target, igia, merge_cfg);
  std::set<int> to_drop(plan.pruned_discard.begin(), plan.pruned_discard.end());
  to_drop.insert(plan.pruned_merge.begin(), plan.pruned_merge.end());
  return drop_layers(merged, to_drop);
}

// ---------------------------------------------------------------------------
// Plan persistence: one directive per line.
//   RETAIN j | DISCARD j | MERGE j INTO i | RATIO x
// ---------------------------------------------------------------------------

inline void write_plan(std::ostream& os, const PrunePlan& plan) {
  os.precision(17);
  for (int id : plan.retained) os << "RETAIN " << id << "\n";
  for (int id : plan.pruned_discard) os << "DISCARD " << id << "\n";
  for (int id : plan.pruned_merge) os << "MERGE " << id << " INTO " << plan.merge_target.at(id) << "\n";
  os << "RATIO " << plan.achieved_ratio << "\n";
}

inline PrunePlan parse_plan(std::istream& is) {
  PrunePlan plan;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    auto fail = [&](const std::string& why) {
      throw IoError(IoErrc::parse, "plan line " + std::to_string(lineno) + ": " + why);
    };
    if (kw == "RETAIN" || kw == "DISCARD") {
      int id;
      if (!(ls >> id)) fail("expected layer id");
      (kw == "RETAIN" ? plan.retained : plan.pruned_discard).push_back(id);
    } else if (kw == "MERGE") {
      int id, target;
      std::string into;
      if (!(ls >> id >> into >> target) || into != "INTO") fail("expected 'MERGE j INTO i'");
      plan.pruned_merge.push_back(id);
      plan.merge_target[id] = target;
    } else if (kw == "RATIO") {
      if (!(ls >> plan.achieved_ratio)) fail("expected ratio value");
    } else {
      fail("unknown directive '" + kw + "'");
    }
  }
  std::sort(plan.retained.begin(), plan.retained.end());
  std::sort(plan.pruned_discard.begin(), plan.pruned_discard.end());
  std::sort(plan.pruned_merge.begin(), plan.pruned_merge.end());
  return plan;
}

// Human-readable summary: lists, scores, ratio.
inline std::string plan_report(const PrunePlan& plan, const LayerScores& scores) {
  std::ostringstream os;
  os.precision(12);
  os << "layer scores:\n";
  for (const auto& s : scores) os << "  layer " << s.layer << ": " << s.score << "\n";
  auto list = [&](const char* label, const std::vector<int>& ids) {
    os << label << ":";
    if (ids.empty()) os << " (none)";
    for (int id : ids) os << " " << id;
    os << "\n";
  };
  list("retained", plan.retained);
  list("discarded", plan.pruned_discard);
  list("merged", plan.pruned_merge);
  for (const auto& [donor, target] : plan.merge_target) {
    os << "  merge " << donor << " -> " << target << "\n";
  }
  os << "achieved block-parameter ratio: " << plan.achieved_ratio << "\n";
  return os.str();
}

}  // namespace igpk
