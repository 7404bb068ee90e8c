#pragma once

// Parameters, initialisers, seeded random streams and the AdamW optimiser.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "volssl/autograd.hpp"

namespace volssl {

std::uint64_t mix_seed(std::uint64_t base, std::string_view name);
std::uint64_t fnv1a(std::string_view text);

/// Seeded pseudo-random stream. Named substreams are derived by hashing, so
/// stage seeds are independent of the order in which streams are consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  Rng substream(std::string_view name) const { return Rng(mix_seed(seed_, name)); }
  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  Index below(Index n);
  double normal();
  bool coin(double p) { return uniform() < p; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(static_cast<Index>(i)));
    std::swap(v[i - 1], v[j]);
  }
}

Tensor trunc_normal(std::vector<Index> shape, double stddev, Rng& rng);
Tensor uniform_tensor(std::vector<Index> shape, double bound, Rng& rng);

/// Named, ordered collection of learnable leaves.
class ParameterSet {
 public:
  Var& add(const std::string& name, Tensor init, bool requires_grad = true);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Var& at(const std::string& name);
  const Var& at(const std::string& name) const;
  const std::map<std::string, Var>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Index total_count() const;
  void zero_grad();
  /// Deep copy of every value into fresh leaves.
  ParameterSet clone(bool requires_grad) const;
  /// Subset whose names start with `prefix` (shared leaves, not copies).
  ParameterSet with_prefix(const std::string& prefix) const;
  void merge(const ParameterSet& other);

  std::vector<std::pair<std::string, std::vector<Index>>> shape_list() const;
  /// Throws naming the first layer path whose presence or shape differs.
  void require_compatible(const ParameterSet& other) const;

 private:
  std::map<std::string, Var> params_;
};

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One update of every parameter that has a gradient. Matrices (rank >= 2)
  /// are decayed; biases, norms and tables are not.
  void step(ParameterSet& params, double lr);
  Index steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  Index steps_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

/// Linear warmup to `base`, then cosine decay to `floor` at `total` steps.
double cosine_lr(Index step, Index total, Index warmup, double base, double floor = 0.0);

double global_grad_norm(const ParameterSet& params);

}  // namespace volssl
