#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/model.hpp"
#include "igpk/rng.hpp"

namespace igpk {

// One (input, target) pair. Targets are aligned with inputs position by
// position; a target id of -1 excludes that position from loss and accuracy.
struct Sample {
  TokenSeq input;
  TokenSeq target;
};

struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
  // The first train_count samples are the training split; the remainder is
  // held out for evaluation.
  std::size_t train_count = 0;

  std::size_t heldout_count() const { return samples.size() - train_count; }
  const Sample& train_sample(std::size_t i) const { return samples[i]; }
  const Sample& heldout_sample(std::size_t i) const { return samples[train_count + i]; }
};

enum class TaskKind { copy_sequence, modular_addition, pattern_completion };

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy-sequence") return TaskKind::copy_sequence;
  if (s == "modular-addition") return TaskKind::modular_addition;
  if (s == "pattern-completion") return TaskKind::pattern_completion;
  throw ConfigError("unknown task '" + s + "'");
}

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy_sequence: return "copy-sequence";
    case TaskKind::modular_addition: return "modular-addition";
    case TaskKind::pattern_completion: return "pattern-completion";
  }
  return "?";
}

struct TaskSpec {
  TaskKind kind = TaskKind::copy_sequence;
  int vocab_size = 32;
  int seq_len = 16;        // copy / pattern tasks
  int pattern_period = 4;  // pattern task
};

namespace detail {

// Layout: [0] payload(h) [1] payload(h), targets unmasked only on the second
// payload, where every token is a causal copy of the first occurrence.
inline Sample make_copy_sample(const TaskSpec& spec, Rng& rng) {
  if (spec.seq_len < 4 || spec.seq_len % 2 != 0) {
    throw ConfigError("copy-sequence needs an even seq_len >= 4");
  }
  if (spec.vocab_size < 4) throw ConfigError("copy-sequence needs vocab_size >= 4");
  const int h = (spec.seq_len - 2) / 2;
  Sample s;
  s.input.reserve(static_cast<std::size_t>(spec.seq_len));
  s.input.push_back(0);
  for (int i = 0; i < h; ++i) {
    s.input.push_back(
        static_cast<std::int32_t>(2 + rng.next_below(static_cast<std::uint64_t>(spec.vocab_size - 2))));
  }
  s.input.push_back(1);
  for (int i = 0; i < h; ++i) s.input.push_back(s.input[static_cast<std::size_t>(1 + i)]);
  s.target.assign(s.input.size(), -1);
  for (int i = h + 1; i < spec.seq_len - 1; ++i) {
    s.target[static_cast<std::size_t>(i)] = s.input[static_cast<std::size_t>(i + 1)];
  }
  return s;
}

inline Sample make_modular_sample(const TaskSpec& spec, Rng& rng) {
  if (spec.vocab_size < 4) throw ConfigError("modular-addition needs vocab_size >= 4");
  const int m = spec.vocab_size - 2;
  const auto a = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(m)));
  const auto b = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(m)));
  Sample s;
  s.input = {a, b, static_cast<std::int32_t>(m)};  // operands then "=" marker
  s.target = {-1, -1, static_cast<std::int32_t>((a + b) % m)};
  return s;
}

inline Sample make_pattern_sample(const TaskSpec& spec, Rng& rng) {
  const int k = spec.pattern_period;
  if (k < 2 || spec.seq_len < 2 * k) {
    throw ConfigError("pattern-completion needs period >= 2 and seq_len >= 2*period");
  }
  std::vector<std::int32_t> pattern(static_cast<std::size_t>(k));
  for (auto& t : pattern) {
    t = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(spec.vocab_size)));
  }
  Sample s;
  for (int i = 0; i < spec.seq_len; ++i) {
    s.input.push_back(pattern[static_cast<std::size_t>(i % k)]);
    s.target.push_back(i < k - 1 ? -1 : pattern[static_cast<std::size_t>((i + 1) % k)]);
  }
  return s;
}

}  // namespace detail

// Deterministic synthetic corpus. The last ~10% of samples (at least one) are
// reserved as the held-out split.
inline Dataset make_dataset(const TaskSpec& spec, std::size_t size, std::uint64_t seed) {
  if (size < 2) throw ConfigError("dataset size must be >= 2 (train + held-out)");
  Dataset d;
  d.name = task_name(spec.kind);
  d.seed = seed;
  Rng rng(derive_seed(seed, 0x21));
  d.samples.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    switch (spec.kind) {
      case TaskKind::copy_sequence: d.samples.push_back(detail::make_copy_sample(spec, rng)); break;
      case TaskKind::modular_addition:
        d.samples.push_back(detail::make_modular_sample(spec, rng));
        break;
      case TaskKind::pattern_completion:
        d.samples.push_back(detail::make_pattern_sample(spec, rng));
        break;
    }
  }
  const std::size_t heldout = std::max<std::size_t>(1, size / 10);
  d.train_count = size - heldout;
  return d;
}

// Keeps a random fraction of the training split (at least one sample); the
// held-out split is untouched. Mirrors data-size-stability style protocols.
inline Dataset subsample(const Dataset& src, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subsample fraction must be in (0, 1]");
  }
  const std::size_t n = src.train_count;
  auto keep = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(n) - 1e-9));
  keep = std::max<std::size_t>(1, std::min(keep, n));

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x22));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.next_below(i)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  Dataset out;
  out.name = src.name + "@" + std::to_string(keep) + "of" + std::to_string(n);
  out.seed = seed;
  for (std::size_t i : idx) out.samples.push_back(src.samples[i]);
  out.train_count = keep;
  for (std::size_t i = src.train_count; i < src.samples.size(); ++i) {
    out.samples.push_back(src.samples[i]);
  }
  return out;
}

}  // namespace igpk
