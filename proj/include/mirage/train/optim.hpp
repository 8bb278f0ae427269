#pragma once

// SGD with momentum and Adam over named tensors, plus a multi-step schedule.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mirage/core/tensor.hpp"

namespace mirage::train {

struct OptimizerConfig {
  enum class Kind { sgd, adam } kind = Kind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam
  double weight_decay = 0.0;  // L2 added to the gradient
};

struct LrSchedule {
  std::vector<std::size_t> milestones{15};
  double factor = 0.1;

  // lr * factor^(number of milestones <= epoch)
  double at(double base, std::size_t epoch) const {
    double lr = base;
    for (auto m : milestones)
      if (epoch >= m) lr *= factor;
    return lr;
  }
};

// Per-name state; tensors are updated in place.
template <Scalar T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr > 0)) throw ConfigError("optimizer: lr must be positive");
  }

  const OptimizerConfig& config() const { return cfg_; }

  // Advances the step count, then updates each named tensor.
  void step(const std::vector<std::pair<std::string, const Tensor<T>*>>& grads,
            std::map<std::string, Tensor<T>>& params, double lr) {
    ++t_;
    for (const auto& [name, g] : grads) update(name, *g, params.at(name), lr);
  }

  void update(const std::string& name, const Tensor<T>& grad, Tensor<T>& p, double lr) {
    require_same_shape(grad, p);
    const std::size_t n = p.size();
    const double wd = cfg_.weight_decay;
    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
      auto& v = state(m_, name, p);
      for (std::size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grad[i]) + wd * static_cast<double>(p[i]);
        v[i] = static_cast<T>(cfg_.momentum * static_cast<double>(v[i]) + g);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * static_cast<double>(v[i]));
      }
      return;
    }
    auto& m = state(m_, name, p);
    auto& v = state(v_, name, p);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(grad[i]) + wd * static_cast<double>(p[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
    }
  }

  std::size_t steps() const { return t_; }

 private:
  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
      throw DimensionError("optimizer: gradient " + shape_str(a.shape()) + " vs parameter " + shape_str(b.shape()));
  }
  static Tensor<T>& state(std::map<std::string, Tensor<T>>& s, const std::string& name, const Tensor<T>& like) {
    auto it = s.find(name);
    if (it == s.end()) it = s.emplace(name, Tensor<T>(like.shape())).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor<T>> m_, v_;
};

}  // namespace mirage::train
