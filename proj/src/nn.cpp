#include "volssl/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace volssl {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t base, std::string_view name) {
  std::uint64_t z = base ^ fnv1a(name);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Index Rng::below(Index n) {
  if (n <= 0) throw std::invalid_argument("Rng::below requires n > 0");
  const auto un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<Index>(r % un);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw std::invalid_argument("corrupt RNG state");
}

Tensor trunc_normal(std::vector<Index> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = z * stddev;
  }
  return t;
}

Tensor uniform_tensor(std::vector<Index> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

Var& ParameterSet::add(const std::string& name, Tensor init, bool requires_grad) {
  auto [it, inserted] = params_.emplace(name, Var(std::move(init), requires_grad));
  if (!inserted) throw std::invalid_argument("duplicate parameter " + name);
  return it->second;
}

Var& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

const Var& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

Index ParameterSet::total_count() const {
  Index n = 0;
  for (const auto& [name, v] : params_) n += v.value().size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : params_) {
    if (!v.grad().empty()) v.mutable_grad().fill(0.0);
  }
}

ParameterSet ParameterSet::clone(bool requires_grad) const {
  ParameterSet out;
  for (const auto& [name, v] : params_) out.add(name, v.value(), requires_grad);
  return out;
}

ParameterSet ParameterSet::with_prefix(const std::string& prefix) const {
  ParameterSet out;
  for (const auto& [name, v] : params_) {
    if (name.rfind(prefix, 0) == 0) out.params_.emplace(name, v);
  }
  return out;
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [name, v] : other.params_) {
    if (!params_.emplace(name, v).second) throw std::invalid_argument("duplicate parameter " + name);
  }
}

std::vector<std::pair<std::string, std::vector<Index>>> ParameterSet::shape_list() const {
  std::vector<std::pair<std::string, std::vector<Index>>> out;
  for (const auto& [name, v] : params_) out.emplace_back(name, v.value().shape());
  return out;
}

void ParameterSet::require_compatible(const ParameterSet& other) const {
  auto a = params_.begin();
  auto b = other.params_.begin();
  while (a != params_.end() || b != other.params_.end()) {
    if (a == params_.end()) throw std::invalid_argument("parameter mismatch at " + b->first + ": missing");
    if (b == other.params_.end()) throw std::invalid_argument("parameter mismatch at " + a->first + ": missing");
    if (a->first != b->first) {
      throw std::invalid_argument("parameter mismatch at " + std::min(a->first, b->first) + ": missing");
    }
    if (a->second.value().shape() != b->second.value().shape()) {
      throw std::invalid_argument("parameter mismatch at " + a->first + ": " + shape_string(a->second.value().shape()) +
                                  " vs " + shape_string(b->second.value().shape()));
    }
    ++a;
    ++b;
  }
}

double global_grad_norm(const ParameterSet& params) {
  double s = 0.0;
  for (const auto& [name, v] : params.entries())
    for (double g : v.grad().values()) s += g * g;
  return std::sqrt(s);
}

void AdamW::step(ParameterSet& params, double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  double clip = 1.0;
  if (cfg_.clip_norm > 0.0) {
    const double norm = global_grad_norm(params);
    if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
  }
  for (auto& [name, v] : params.entries()) {
    Var p = v;
    if (!p.requires_grad() || p.grad().empty()) continue;
    auto& [m, s] = moments_[name];
    const Index n = p.value().size();
    if (static_cast<Index>(m.size()) != n) {
      m.assign(static_cast<std::size_t>(n), 0.0);
      s.assign(static_cast<std::size_t>(n), 0.0);
    }
    const bool decay = p.value().rank() >= 2 && cfg_.weight_decay > 0.0;
    double* w = p.mutable_value().data();
    const double* g = p.grad().data();
    for (Index i = 0; i < n; ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      s[i] = cfg_.beta2 * s[i] + (1.0 - cfg_.beta2) * gi * gi;
      if (decay) w[i] -= lr * cfg_.weight_decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + cfg_.eps);
    }
  }
}

double cosine_lr(Index step, Index total, Index warmup, double base, double floor) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<Index>(1, total - warmup)));
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(M_PI * progress));
}

}  // namespace volssl
