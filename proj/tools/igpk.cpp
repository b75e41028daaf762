// igpk - gradient-guided layer pruning pipeline over a built-in toy
// transformer: probe, score, plan, prune (with merging), finetune, eval,
// sensitivity.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "igpk/analysis.hpp"
#include "igpk/checkpoint.hpp"
#include "igpk/config.hpp"
#include "igpk/container.hpp"
#include "igpk/data.hpp"
#include "igpk/errors.hpp"
#include "igpk/igia.hpp"
#include "igpk/merging.hpp"
#include "igpk/model.hpp"
#include "igpk/scoring.hpp"
#include "igpk/trainer.hpp"

namespace {

using namespace igpk;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::int64_t> seed_flag;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--set", opts.overrides, "extra key=value override (repeatable)");
  cmd->add_option("--seed", opts.seed_flag, "master seed (fallback: IGPK_SEED, then 42)");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (const char* env = std::getenv("IGPK_SEED")) {
    cfg.seed = static_cast<std::uint64_t>(std::stoll(env));
  }
  if (!opts.config_path.empty()) {
    std::ifstream f(opts.config_path);
    if (!f) throw IoError(IoErrc::open_failed, "cannot open config '" + opts.config_path + "'");
    parse_run_config(f, cfg);
  }
  for (const std::string& kv : opts.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed_flag) cfg.seed = static_cast<std::uint64_t>(*opts.seed_flag);
  cfg.finalize();
  return cfg;
}

Dataset dataset_for(const RunConfig& cfg) {
  return make_dataset(cfg.task, cfg.data_size, cfg.data_seed());
}

// Data outputs go to --out when given, otherwise to stdout.
void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw IoError(IoErrc::open_failed, "cannot open '" + out_path + "' for writing");
  f << text;
  if (!f) throw IoError(IoErrc::write_failed, "short write to '" + out_path + "'");
}

std::string scores_csv(const LayerScores& scores) {
  const std::vector<int> ranking = rank_layers(scores);
  std::map<int, std::size_t> rank_of;
  for (std::size_t i = 0; i < ranking.size(); ++i) rank_of[ranking[i]] = i + 1;
  std::ostringstream os;
  os.precision(17);
  os << "layer,score,rank\n";
  for (const auto& s : scores) os << s.layer << "," << s.score << "," << rank_of[s.layer] << "\n";
  return os.str();
}

int cmd_init(const CommonOpts& opts, const std::string& out_path) {
  RunConfig cfg = resolve_config(opts);
  ModelState model = build_model(cfg.model, cfg.model_seed());
  save_model(out_path, model);
  std::cerr << "init: wrote " << out_path << " (" << total_param_count(model)
            << " parameters, " << model.layers.size() << " layers)\n";
  return 0;
}

int cmd_probe(const CommonOpts& opts, const std::string& model_path, const std::string& out_path,
              std::optional<double> steps_fraction) {
  RunConfig cfg = resolve_config(opts);
  cfg.train.mode = TrainMode::lora;  // the probe always runs on adapters
  if (steps_fraction) {
    if (cfg.train.total_steps <= 0) {
      throw ConfigError("--steps-fraction needs total_steps > 0");
    }
    cfg.train.probe_steps = steps_from_fraction(*steps_fraction, cfg.train.total_steps);
  }
  if (cfg.train.probe_steps < 1) throw ConfigError("probe needs probe_steps >= 1");
  ModelState model = load_model(model_path);
  Dataset data = dataset_for(cfg);
  IgiaMap igia = compute_igia(model, data, cfg.train);
  save_igia(out_path, igia);
  std::cerr << "probe: t=" << cfg.train.probe_steps << " steps over " << igia.size()
            << " linears -> " << out_path << "\n";
  return 0;
}

int cmd_score(const std::string& igia_path, const std::string& out_path) {
  IgiaMap igia = load_igia(igia_path);
  emit(out_path, scores_csv(compute_layer_scores(igia)));
  return 0;
}

int cmd_plan(const CommonOpts& opts, const std::string& igia_path, const std::string& out_path,
             std::optional<int> n_flag, std::optional<int> merge_flag,
             const std::vector<int>& protect_flag) {
  RunConfig cfg = resolve_config(opts);
  if (n_flag) cfg.prune_count = *n_flag;
  if (merge_flag) cfg.merge_count = *merge_flag;
  for (int p : protect_flag) cfg.protect.insert(p);
  IgiaMap igia = load_igia(igia_path);
  LayerScores scores = compute_layer_scores(igia);
  PrunePlan plan = make_prune_plan(scores, cfg.prune_count, cfg.merge_count, cfg.protect);
  std::ostringstream os;
  write_plan(os, plan);
  emit(out_path, os.str());
  std::cout << plan_report(plan, scores);
  return 0;
}

int cmd_prune(const CommonOpts& opts, const std::string& model_path, const std::string& igia_path,
              const std::string& plan_path, const std::string& out_path,
              std::optional<int> n_flag, std::optional<int> merge_flag,
              const std::vector<int>& protect_flag, std::optional<std::string> strategy_flag,
              std::optional<double> sparsity_flag, std::optional<double> tau_flag,
              const std::vector<double>& avg_weights_flag) {
  RunConfig cfg = resolve_config(opts);
  if (strategy_flag) cfg.merge.strategy = parse_merge_strategy(*strategy_flag);
  if (sparsity_flag) cfg.merge.sparsity_p = *sparsity_flag;
  if (tau_flag) cfg.merge.tau = *tau_flag;
  if (!avg_weights_flag.empty()) cfg.merge.avg_weights = avg_weights_flag;
  if (n_flag) cfg.prune_count = *n_flag;
  if (merge_flag) cfg.merge_count = *merge_flag;
  for (int p : protect_flag) cfg.protect.insert(p);
  cfg.merge.validate();

  ModelState model = load_model(model_path);
  IgiaMap igia = load_igia(igia_path);

  PrunePlan plan;
  LayerScores scores = compute_layer_scores(igia);
  if (!plan_path.empty()) {
    std::ifstream f(plan_path);
    if (!f) throw IoError(IoErrc::open_failed, "cannot open plan '" + plan_path + "'");
    plan = parse_plan(f);
  } else {
    plan = make_prune_plan(scores, cfg.prune_count, cfg.merge_count, cfg.protect);
  }

  ModelState pruned = apply_prune(model, plan, igia, cfg.merge);
  save_model(out_path, pruned);
  ParamReport report = param_report(model, pruned);
  std::cout << plan_report(plan, scores) << param_report_text(report);
  std::cerr << "prune: wrote " << out_path << "\n";
  return 0;
}

int cmd_finetune(const CommonOpts& opts, const std::string& model_path,
                 const std::string& out_path, const std::string& curve_path) {
  RunConfig cfg = resolve_config(opts);
  ModelState model = load_model(model_path);
  Dataset data = dataset_for(cfg);
  FinetuneResult result = run_finetune(model, data, cfg.train);
  save_model(out_path, model);
  if (!curve_path.empty()) {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss\n";
    for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
      os << (i + 1) << "," << result.loss_curve[i] << "\n";
    }
    emit(curve_path, os.str());
  }
  std::cerr << "finetune: " << result.loss_curve.size() << " steps ("
            << train_mode_name(cfg.train.mode) << ") -> " << out_path << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& model_path, const std::string& out_path) {
  RunConfig cfg = resolve_config(opts);
  ModelState model = load_model(model_path);
  Dataset data = dataset_for(cfg);
  EvalReport report = evaluate(model, data);
  std::ostringstream os;
  write_eval_csv(os, report);
  emit(out_path, os.str());
  return 0;
}

int cmd_sensitivity(const CommonOpts& opts, const std::string& model_path,
                    const std::string& out_path, std::vector<double> fractions,
                    std::optional<std::size_t> k_flag) {
  RunConfig cfg = resolve_config(opts);
  cfg.train.mode = TrainMode::lora;
  if (cfg.train.total_steps < 1) throw ConfigError("sensitivity needs total_steps >= 1");
  if (fractions.empty()) {
    fractions = {0.0002, 0.0005, 0.0008, 0.01, 0.1, 0.5, 1.0};
  }

  ModelState model = load_model(model_path);
  Dataset data = dataset_for(cfg);
  const std::size_t k = k_flag ? *k_flag : default_topk(model.layers.size());

  // Map fractions to 1-based snapshot steps; always track the full-run
  // reference at step T.
  std::map<std::int64_t, std::vector<double>> step_fractions;
  for (double f : fractions) {
    step_fractions[steps_from_fraction(f, cfg.train.total_steps)].push_back(f);
  }

  TrainConfig probe_cfg = cfg.train;
  probe_cfg.probe_steps = cfg.train.total_steps;
  IgiaAccumulator acc(model);
  std::vector<std::pair<double, RankingSnapshot>> snapshots;  // fraction, snapshot
  RankingSnapshot reference;
  run_probe(model, data, probe_cfg, [&](const GradRecord& rec) {
    acc.accumulate(rec);
    const auto it = step_fractions.find(rec.step);
    const bool is_last = rec.step == cfg.train.total_steps;
    if (it == step_fractions.end() && !is_last) return;
    LayerScores scores = compute_layer_scores(acc.finalize());
    RankingSnapshot snap{rec.step, rank_layers(scores)};
    if (it != step_fractions.end()) {
      for (double f : it->second) snapshots.emplace_back(f, snap);
    }
    if (is_last) reference = snap;
  });

  std::ostringstream os;
  os.precision(17);
  os << "step,fraction,topk_overlap\n";
  for (const auto& [fraction, snap] : snapshots) {
    os << snap.step << "," << fraction << "," << topk_overlap(snap, reference, k) << "\n";
  }
  emit(out_path, os.str());
  std::cerr << "sensitivity: T=" << cfg.train.total_steps << ", k=" << k << ", "
            << snapshots.size() << " snapshots\n";
  return 0;
}

std::string quote_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradient-guided layer pruning toolkit"};
  app.require_subcommand(1);

  CommonOpts init_opts, probe_opts, plan_opts, prune_opts, ft_opts, eval_opts, sens_opts;

  auto* init = app.add_subcommand("init", "build a fresh toy-transformer checkpoint");
  std::string init_out;
  add_common(init, init_opts);
  init->add_option("--out", init_out, "checkpoint path")->required();

  auto* probe = app.add_subcommand("probe", "adapter probe; writes gradient-information file");
  std::string probe_model, probe_out;
  std::optional<double> probe_fraction;
  add_common(probe, probe_opts);
  probe->add_option("--model", probe_model, "input checkpoint")->required();
  probe->add_option("--out", probe_out, "output gradient-information file")->required();
  probe->add_option("--steps-fraction", probe_fraction,
                    "probe budget as a fraction of total_steps (t = ceil(f*T))");

  auto* score = app.add_subcommand("score", "layer scores + ranking as CSV");
  std::string score_igia, score_out;
  score->add_option("--igia", score_igia, "gradient-information file")->required();
  score->add_option("--out", score_out, "CSV path (default: stdout)");

  auto* plan = app.add_subcommand("plan", "make a prune plan from layer scores");
  std::string plan_igia, plan_out;
  std::optional<int> plan_n, plan_merge;
  std::vector<int> plan_protect;
  add_common(plan, plan_opts);
  plan->add_option("--igia", plan_igia, "gradient-information file")->required();
  plan->add_option("--out", plan_out, "plan file path")->required();
  plan->add_option("--n", plan_n, "layers to prune");
  plan->add_option("--merge", plan_merge, "how many pruned layers to merge");
  plan->add_option("--protect", plan_protect, "layer ids that must be retained");

  auto* prune = app.add_subcommand("prune", "apply a plan (merging included) to a checkpoint");
  std::string prune_model, prune_igia, prune_plan_path, prune_out;
  std::optional<int> prune_n, prune_merge;
  std::vector<int> prune_protect;
  std::optional<std::string> prune_strategy;
  std::optional<double> prune_sparsity, prune_tau;
  std::vector<double> prune_avg_weights;
  add_common(prune, prune_opts);
  prune->add_option("--model", prune_model, "input checkpoint")->required();
  prune->add_option("--igia", prune_igia, "gradient-information file")->required();
  prune->add_option("--plan", prune_plan_path, "plan file (otherwise --n/--merge plan inline)");
  prune->add_option("--out", prune_out, "output checkpoint")->required();
  prune->add_option("--n", prune_n, "layers to prune (inline plan)");
  prune->add_option("--merge", prune_merge, "merged layer count (inline plan)");
  prune->add_option("--protect", prune_protect, "layer ids that must be retained");
  prune->add_option("--merge-strategy", prune_strategy,
                    "sign-sum | weighted-avg | adaptive-isotropic | adaptive-fisher");
  prune->add_option("--sparsity", prune_sparsity, "donor retention fraction in [0,1]");
  prune->add_option("--tau", prune_tau, "adaptive threshold override");
  prune->add_option("--avg-weights", prune_avg_weights, "weighted-avg coefficients");

  auto* finetune = app.add_subcommand("finetune", "train a checkpoint on the synthetic task");
  std::string ft_model, ft_out, ft_curve;
  add_common(finetune, ft_opts);
  finetune->add_option("--model", ft_model, "input checkpoint")->required();
  finetune->add_option("--out", ft_out, "output checkpoint")->required();
  finetune->add_option("--loss-curve", ft_curve, "CSV path for the per-step loss curve");

  auto* eval = app.add_subcommand("eval", "held-out metrics as CSV");
  std::string eval_model, eval_out;
  add_common(eval, eval_opts);
  eval->add_option("--model", eval_model, "checkpoint to evaluate")->required();
  eval->add_option("--out", eval_out, "CSV path (default: stdout)");

  auto* sens = app.add_subcommand("sensitivity",
                                  "ranking-stability curve across probe-step fractions");
  std::string sens_model, sens_out;
  std::vector<double> sens_fractions;
  std::optional<std::size_t> sens_k;
  add_common(sens, sens_opts);
  sens->add_option("--model", sens_model, "input checkpoint")->required();
  sens->add_option("--out", sens_out, "CSV path (default: stdout)");
  sens->add_option("--fractions", sens_fractions, "snapshot fractions of total_steps");
  sens->add_option("--k", sens_k, "top-k size (default: ceil(0.6 * layers))");

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return cmd_init(init_opts, init_out);
    if (probe->parsed()) return cmd_probe(probe_opts, probe_model, probe_out, probe_fraction);
    if (score->parsed()) return cmd_score(score_igia, score_out);
    if (plan->parsed()) return cmd_plan(plan_opts, plan_igia, plan_out, plan_n, plan_merge, plan_protect);
    if (prune->parsed()) {
      return cmd_prune(prune_opts, prune_model, prune_igia, prune_plan_path, prune_out, prune_n,
                       prune_merge, prune_protect, prune_strategy, prune_sparsity, prune_tau,
                       prune_avg_weights);
    }
    if (finetune->parsed()) return cmd_finetune(ft_opts, ft_model, ft_out, ft_curve);
    if (eval->parsed()) return cmd_eval(eval_opts, eval_model, eval_out);
    if (sens->parsed()) return cmd_sensitivity(sens_opts, sens_model, sens_out, sens_fractions, sens_k);
  } catch (const ConfigError& e) {
    std::cerr << "error kind=config msg=\"" << quote_escape(e.what()) << "\"\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error kind=shape msg=\"" << quote_escape(e.what()) << "\"\n";
    return 1;
  } catch (const ValueError& e) {
    std::cerr << "error kind=value msg=\"" << quote_escape(e.what()) << "\"\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error kind=numeric msg=\"" << quote_escape(e.what()) << "\"\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error kind=io." << to_string(e.kind()) << " msg=\"" << quote_escape(e.what())
              << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal msg=\"" << quote_escape(e.what()) << "\"\n";
    return 1;
  }
  return 0;
}
