#include "igpk/scoring.hpp"

#include <gtest/gtest.h>

#include "igpk/data.hpp"
#include "igpk/igia.hpp"
#include "igpk/trainer.hpp"

namespace igpk {
namespace {

// Builds a gradient-information map whose per-layer entry sums hit the given
// totals (spread over the 7 sublayers of a [1x1]-weight toy layout).
IgiaMap igia_with_layer_sums(const std::vector<double>& sums) {
  IgiaMap igia;
  for (std::size_t j = 0; j < sums.size(); ++j) {
    for (std::size_t s = 0; s < kSublayerNames.size(); ++s) {
      const std::string name = linear_name(static_cast<int>(j), kSublayerNames[s]);
      const double v = s == 0 ? sums[j] : 0.0;
      igia.emplace(name, IgiaMatrix{name, Tensor::full({1, 1}, v), 1});
    }
  }
  return igia;
}

TEST(LayerScore, ZeroMatricesScoreZero) {
  IgiaMap igia = igia_with_layer_sums({0, 0});
  EXPECT_EQ(layer_score(igia, 0), 0.0);
}

TEST(LayerScore, SumsAcrossSublayers) {
  IgiaMap igia = igia_with_layer_sums({0});
  igia.at("layer.0.attn.q").f = Tensor::matrix({{1, 2}});     // sums to 3
  igia.at("layer.0.mlp.down").f = Tensor::matrix({{4.5}});    // sums to 4.5
  EXPECT_DOUBLE_EQ(layer_score(igia, 0), 7.5);
}

TEST(LayerScore, MissingSublayerIsAnError) {
  IgiaMap igia = igia_with_layer_sums({1.0});
  igia.erase("layer.0.mlp.gate");
  EXPECT_THROW(layer_score(igia, 0), ValueError);
}

TEST(LayerScore, MonotoneUnderNonnegativeAddition) {
  IgiaMap igia = igia_with_layer_sums({2.0});
  const double before = layer_score(igia, 0);
  igia.at("layer.0.attn.v").f = Tensor::full({1, 1}, 0.7);
  EXPECT_GE(layer_score(igia, 0), before);
}

LayerScores scores_of(const std::vector<double>& v) {
  LayerScores s;
  for (std::size_t i = 0; i < v.size(); ++i) s.push_back({static_cast<int>(i), v[i]});
  return s;
}

TEST(RankLayers, DescendingWithTieRule) {
  EXPECT_EQ(rank_layers(scores_of({5, 1, 9, 2})), (std::vector<int>{2, 0, 3, 1}));
  EXPECT_EQ(rank_layers(scores_of({3, 3, 3})), (std::vector<int>{0, 1, 2}));
}

TEST(RankLayers, IsAPermutation) {
  auto ranking = rank_layers(scores_of({0.3, 0.1, 0.1, 0.9, 0.3}));
  std::set<int> seen(ranking.begin(), ranking.end());
  EXPECT_EQ(seen.size(), 5u);
}

TEST(PrunePlanning, EmptyPlanRetainsEverything) {
  PrunePlan plan = make_prune_plan(scores_of({5, 1, 9, 2}), 0, 0);
  EXPECT_EQ(plan.retained, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_TRUE(plan.pruned_discard.empty());
  EXPECT_TRUE(plan.pruned_merge.empty());
  EXPECT_EQ(plan.achieved_ratio, 0.0);
}

TEST(PrunePlanning, SelectionAndMergeSplit) {
  // Lowest two scores are layers 1 (1.0) and 3 (2.0); the higher-scoring of
  // those (layer 3) becomes the merge donor.
  PrunePlan plan = make_prune_plan(scores_of({5, 1, 9, 2}), 2, 1);
  EXPECT_EQ(plan.retained, (std::vector<int>{0, 2}));
  EXPECT_EQ(plan.pruned_discard, (std::vector<int>{1}));
  EXPECT_EQ(plan.pruned_merge, (std::vector<int>{3}));
  EXPECT_EQ(plan.merge_target.at(3), 2);  // nearest preceding retained layer
  EXPECT_DOUBLE_EQ(plan.achieved_ratio, 0.5);
}

TEST(PrunePlanning, PaperScaleConfiguration) {
  // 32 layers, prune 13, merge 3 of them.
  std::vector<double> v(32);
  Rng rng(5);
  for (double& x : v) x = rng.next_uniform();
  PrunePlan plan = make_prune_plan(scores_of(v), 13, 3);
  EXPECT_EQ(plan.retained.size(), 19u);
  EXPECT_EQ(plan.pruned_discard.size(), 10u);
  EXPECT_EQ(plan.pruned_merge.size(), 3u);
  EXPECT_NEAR(plan.achieved_ratio, 13.0 / 32.0, 1e-15);
  // Argmin property: no retained non-protected layer scores below a pruned one.
  double max_pruned = -1.0;
  for (int id : plan.pruned_discard) max_pruned = std::max(max_pruned, v[static_cast<std::size_t>(id)]);
  for (int id : plan.pruned_merge) max_pruned = std::max(max_pruned, v[static_cast<std::size_t>(id)]);
  for (int id : plan.retained) {
    if (id == 0) continue;  // always-protected first layer
    EXPECT_GE(v[static_cast<std::size_t>(id)], max_pruned);
  }
}

TEST(PrunePlanning, FirstLayerAlwaysRetained) {
  // Layer 0 has the lowest score but must survive.
  PrunePlan plan = make_prune_plan(scores_of({0.01, 5, 6, 7}), 2, 0);
  EXPECT_EQ(plan.retained.front(), 0);
  EXPECT_EQ(plan.pruned_discard, (std::vector<int>{1, 2}));
}

TEST(PrunePlanning, MergeTargetIsNearestPrecedingRetained) {
  // Prune layers 1,2,3 of five, merge all three; all target layer 0.
  PrunePlan plan = make_prune_plan(scores_of({9, 1, 1.5, 1.2, 8}), 3, 3);
  EXPECT_EQ(plan.retained, (std::vector<int>{0, 4}));
  for (int donor : plan.pruned_merge) {
    EXPECT_EQ(plan.merge_target.at(donor), 0);
    for (int r : plan.retained) {
      if (r < donor) EXPECT_LE(r, plan.merge_target.at(donor));
    }
  }
}

TEST(PrunePlanning, ScaleInvariantRanking) {
  std::vector<double> v{0.4, 0.1, 0.8, 0.2, 0.6};
  PrunePlan p1 = make_prune_plan(scores_of(v), 2, 1);
  for (double& x : v) x *= 1000.0;
  PrunePlan p2 = make_prune_plan(scores_of(v), 2, 1);
  EXPECT_EQ(p1.retained, p2.retained);
  EXPECT_EQ(p1.pruned_discard, p2.pruned_discard);
  EXPECT_EQ(p1.pruned_merge, p2.pruned_merge);
  EXPECT_EQ(p1.merge_target, p2.merge_target);
}

TEST(PrunePlanning, ValidationErrors) {
  auto s = scores_of({1, 2, 3, 4});
  EXPECT_THROW(make_prune_plan(s, 4, 0), ConfigError);   // N >= layer count
  EXPECT_THROW(make_prune_plan(s, 2, 3), ConfigError);   // merge > prune
  EXPECT_THROW(make_prune_plan(s, 3, 0, {1, 2, 3}), ConfigError);  // unreachable
  EXPECT_THROW(make_prune_plan(s, 1, 0, {9}), ConfigError);        // unknown protect
}

TEST(PlanIo, RoundTripsThroughText) {
  PrunePlan plan = make_prune_plan(scores_of({5, 1, 9, 2, 7}), 2, 1);
  std::ostringstream os;
  write_plan(os, plan);
  std::istringstream is(os.str());
  PrunePlan parsed = parse_plan(is);
  EXPECT_EQ(parsed.retained, plan.retained);
  EXPECT_EQ(parsed.pruned_discard, plan.pruned_discard);
  EXPECT_EQ(parsed.pruned_merge, plan.pruned_merge);
  EXPECT_EQ(parsed.merge_target, plan.merge_target);
  EXPECT_EQ(parsed.achieved_ratio, plan.achieved_ratio);
}

TEST(PlanIo, RejectsMalformedDirectives) {
  std::istringstream bad1("RETAIN x\n");
  EXPECT_THROW(parse_plan(bad1), IoError);
  std::istringstream bad2("MERGE 3 ONTO 2\n");
  EXPECT_THROW(parse_plan(bad2), IoError);
  std::istringstream bad3("FROBNICATE 1\n");
  EXPECT_THROW(parse_plan(bad3), IoError);
}

TEST(PlanReport, MentionsAllSections) {
  auto scores = scores_of({5, 1, 9, 2});
  PrunePlan plan = make_prune_plan(scores, 2, 1);
  std::string report = plan_report(plan, scores);
  EXPECT_NE(report.find("retained"), std::string::npos);
  EXPECT_NE(report.find("merged"), std::string::npos);
  EXPECT_NE(report.find("ratio"), std::string::npos);
}

TEST(ApplyPrune, EmptyPlanIsIdentity) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 8;
  c.max_seq = 8;
  c.lora_rank = 2;
  ModelState m = build_model(c, 3);
  IgiaMap igia;
  for_each_linear(m, [&](const AdapterLinear& lin) {
    igia.emplace(lin.name, IgiaMatrix{lin.name, Tensor::full(lin.w.shape(), 1.0), 1});
  });
  PrunePlan plan;
  plan.retained = {0, 1, 2};
  ModelState out = apply_prune(m, plan, igia, MergeConfig{});
  EXPECT_TRUE(model_bitwise_equal(m, out));
}

TEST(ApplyPrune, DropsExactlyThePlannedParameters) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 8;
  c.max_seq = 10;
  c.lora_rank = 2;
  ModelState m = build_model(c, 3);
  IgiaMap igia;
  Rng rng(4);
  for_each_linear(m, [&](const AdapterLinear& lin) {
    Tensor f = Tensor::random_normal(lin.w.shape(), 1.0, rng);
    igia.emplace(lin.name, IgiaMatrix{lin.name, hadamard_square(f), 3});
  });
  LayerScores scores = compute_layer_scores(igia);
  ASSERT_EQ(scores.size(), 4u);
  PrunePlan plan = make_prune_plan(scores, 2, 1);
  ModelState out = apply_prune(m, plan, igia, MergeConfig{});
  EXPECT_EQ(out.layers.size(), 2u);
  EXPECT_EQ(block_param_count(m) - block_param_count(out), 2 * layer_param_count(c));
  // Forward still works on a held-out style batch.
  auto fwd = forward(out, {1, 2, 3, 4, 5});
  EXPECT_TRUE(fwd.logits.all_finite());
}

TEST(ApplyPrune, RejectsForeignPlans) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 8;
  c.max_seq = 8;
  c.lora_rank = 2;
  ModelState m = build_model(c, 3);
  PrunePlan plan;
  plan.retained = {0, 1, 2};
  plan.pruned_discard = {5};
  EXPECT_THROW(apply_prune(m, plan, {}, MergeConfig{}), ValueError);
}

}  // namespace
}  // namespace igpk
