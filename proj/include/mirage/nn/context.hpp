#pragma once

#include <map>
#include <string>

#include "mirage/autograd/ops.hpp"
#include "mirage/nn/params.hpp"

namespace mirage::nn {

enum class Mode { train, eval };

// Binds named parameters into a graph for one forward pass.
//
// Parameters become leaves when `differentiable` is set (training, gradient
// checks) and constants otherwise (model inversion, evaluation). In train mode
// a mutable parameter set receives the running-statistics update of every
// batch-norm layer; passing a const set suppresses it.
template <Scalar T>
class Context {
 public:
  Context(ag::Graph<T>& g, const ModelParams<T>& params, Mode mode, bool differentiable, T eps = T(1e-5),
          T momentum = T(0.1))
      : graph_(g), params_(params), sink_(nullptr), mode_(mode), differentiable_(differentiable), eps_(eps),
        momentum_(momentum) {}

  Context(ag::Graph<T>& g, ModelParams<T>& params, Mode mode, bool differentiable, T eps = T(1e-5),
          T momentum = T(0.1))
      : graph_(g), params_(params), sink_(mode == Mode::train ? &params : nullptr), mode_(mode),
        differentiable_(differentiable), eps_(eps), momentum_(momentum) {}

  ag::Graph<T>& graph() { return graph_; }
  Mode mode() const { return mode_; }
  T eps() const { return eps_; }
  const ModelParams<T>& params() const { return params_; }

  ag::Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor<T>& t = params_.at(name);
    ag::Var<T> v = differentiable_ ? graph_.leaf(t) : graph_.constant(t);
    bound_.emplace(name, v);
    return v;
  }

  // Routes later param(name) lookups to an existing node, such as a leaf
  // perturbed by a finite-difference check.
  void bind(const std::string& name, const ag::Var<T>& v) {
    if (v.shape() != params_.at(name).shape())
      throw DimensionError("context: binding " + shape_str(v.shape()) + " to '" + name + "' of shape " +
                           shape_str(params_.at(name).shape()));
    bound_.insert_or_assign(name, v);
  }

  const std::map<std::string, ag::Var<T>>& bound() const { return bound_; }

  ag::Var<T> batch_norm(const std::string& prefix, const ag::Var<T>& x) {
    auto gamma = param(prefix + ".gamma");
    auto beta = param(prefix + ".beta");
    if (mode_ == Mode::eval)
      return ag::batch_norm_eval(x, gamma, beta, params_.at(prefix + ".running_mean"),
                                 params_.at(prefix + ".running_var"), eps_);
    ag::BatchStats<T> stats;
    auto y = ag::batch_norm_train(x, gamma, beta, eps_, &stats);
    if (sink_) {
      const std::size_t count = x.value().size() / x.extent(1);
      const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
      Tensor<T>& rm = sink_->at(prefix + ".running_mean");
      Tensor<T>& rv = sink_->at(prefix + ".running_var");
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = (T(1) - momentum_) * rm[c] + momentum_ * stats.mean[c];
        rv[c] = (T(1) - momentum_) * rv[c] + momentum_ * stats.var[c] * unbias;
      }
    }
    return y;
  }

 private:
  ag::Graph<T>& graph_;
  const ModelParams<T>& params_;
  ModelParams<T>* sink_;
  Mode mode_;
  bool differentiable_;
  T eps_, momentum_;
  std::map<std::string, ag::Var<T>> bound_;
};

}  // namespace mirage::nn
