#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "igpk/data.hpp"
#include "igpk/errors.hpp"
#include "igpk/merging.hpp"
#include "igpk/model.hpp"
#include "igpk/trainer.hpp"

namespace igpk {

// Full pipeline configuration. Persisted as flat key=value text, one key per
// line, keys named exactly after the fields below. Lines starting with '#'
// are comments.
//
// The defaults under "paper-mirror profile" in the README (learning_rate
// 1e-5, batch_size 64, epochs 3, sparsity_p 0.8) are the documented reference
// configuration; toy runs usually override them.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  MergeConfig merge;
  TaskSpec task;
  std::size_t data_size = 512;
  int prune_count = 0;
  int merge_count = 0;
  std::set<int> protect;
  std::uint64_t seed = 42;

  std::uint64_t model_seed() const { return derive_seed(seed, 1); }
  std::uint64_t data_seed() const { return derive_seed(seed, 2); }
  std::uint64_t train_seed() const { return derive_seed(seed, 3); }

  void validate() const {
    model.validate();
    train.validate();
    merge.validate();
    if (merge_count < 0 || prune_count < 0 || merge_count > prune_count) {
      throw ConfigError("need 0 <= merge_count <= prune_count");
    }
    if (task.seq_len > model.max_seq) {
      throw ConfigError("seq_len " + std::to_string(task.seq_len) + " exceeds max_seq " +
                        std::to_string(model.max_seq));
    }
  }

  // Cross-links derived fields; call after the last override.
  void finalize() {
    task.vocab_size = model.vocab_size;
    train.seed = train_seed();
    validate();
  }
};

namespace detail {

inline std::int64_t parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream is(v);
  while (std::getline(is, part, ',')) parts.push_back(part);
  return parts;
}

}  // namespace detail

// Applies one key=value override. Throws ConfigError for unknown keys.
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_double;
  using detail::parse_int;
  if (key == "n_layers") cfg.model.n_layers = static_cast<int>(parse_int(value, key));
  else if (key == "d_model") cfg.model.d_model = static_cast<int>(parse_int(value, key));
  else if (key == "n_heads") cfg.model.n_heads = static_cast<int>(parse_int(value, key));
  else if (key == "d_ff") cfg.model.d_ff = static_cast<int>(parse_int(value, key));
  else if (key == "vocab_size") cfg.model.vocab_size = static_cast<int>(parse_int(value, key));
  else if (key == "max_seq") cfg.model.max_seq = static_cast<int>(parse_int(value, key));
  else if (key == "lora_rank") cfg.model.lora_rank = static_cast<int>(parse_int(value, key));
  else if (key == "lora_alpha") cfg.model.lora_alpha = parse_double(value, key);
  else if (key == "total_steps") cfg.train.total_steps = parse_int(value, key);
  else if (key == "probe_steps") cfg.train.probe_steps = parse_int(value, key);
  else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(parse_int(value, key));
  else if (key == "learning_rate") cfg.train.learning_rate = parse_double(value, key);
  else if (key == "momentum") cfg.train.momentum = parse_double(value, key);
  else if (key == "epochs") cfg.train.epochs = static_cast<int>(parse_int(value, key));
  else if (key == "mode") cfg.train.mode = parse_train_mode(value);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(value, key));
  else if (key == "task") cfg.task.kind = parse_task(value);
  else if (key == "data_size") cfg.data_size = static_cast<std::size_t>(parse_int(value, key));
  else if (key == "seq_len") cfg.task.seq_len = static_cast<int>(parse_int(value, key));
  else if (key == "pattern_period") cfg.task.pattern_period = static_cast<int>(parse_int(value, key));
  else if (key == "prune_count") cfg.prune_count = static_cast<int>(parse_int(value, key));
  else if (key == "merge_count") cfg.merge_count = static_cast<int>(parse_int(value, key));
  else if (key == "protect") {
    cfg.protect.clear();
    for (const std::string& p : detail::split_commas(value)) {
      cfg.protect.insert(static_cast<int>(parse_int(p, key)));
    }
  } else if (key == "sparsity_p") cfg.merge.sparsity_p = parse_double(value, key);
  else if (key == "strategy") cfg.merge.strategy = parse_merge_strategy(value);
  else if (key == "tau") cfg.merge.tau = parse_double(value, key);
  else if (key == "avg_weights") {
    cfg.merge.avg_weights.clear();
    for (const std::string& p : detail::split_commas(value)) {
      cfg.merge.avg_weights.push_back(parse_double(p, key));
    }
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

inline void parse_run_config(std::istream& is, RunConfig& cfg) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // Trim.
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " has no '='");
    }
    auto strip = [](std::string s) {
      const auto sb = s.find_first_not_of(" \t");
      if (sb == std::string::npos) return std::string();
      const auto se = s.find_last_not_of(" \t");
      return s.substr(sb, se - sb + 1);
    };
    apply_config_key(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
}

// ceil(fraction * total) with a small slack so representable fractions give
// the intended count (0.01 of 2000 -> 20, not 21).
inline std::int64_t steps_from_fraction(double fraction, std::int64_t total) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("step fraction must be in (0, 1]");
  }
  const double x = fraction * static_cast<double>(total);
  return static_cast<std::int64_t>(std::ceil(x - 1e-9));
}

}  // namespace igpk
