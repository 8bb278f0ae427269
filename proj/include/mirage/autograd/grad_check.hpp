#pragma once

// Central finite-difference gradient checking.

#include <cmath>
#include <functional>
#include <limits>

#include "mirage/autograd/graph.hpp"

namespace mirage::ag {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  std::size_t skipped = 0;     // probes that crossed a ReLU kink or were excluded by the caller
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;  // the two sides at worst_index
  double worst_numeric = 0.0;
};

// fn records a scalar function of its leaf argument into the given graph.
template <Scalar T>
using ScalarFn = std::function<Var<T>(Graph<T>&, const Var<T>&)>;

// Compares backward() against (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) per
// coordinate, with relative error |a-b| / max(|a|, |b|, 1e-12).
//
// With order = 4 the numeric side is the Richardson combination
// (4 D(eps/2) - D(eps)) / 3 of two central differences, whose O(eps^4)
// truncation error allows a step large enough that rounding is negligible.
//
// A coordinate is skipped when any probe changes the sign pattern of some
// ReLU input (the function is not differentiable across the probe), or when
// `skip` returns true for it.
template <Scalar T>
GradCheckReport grad_check(const ScalarFn<T>& fn, const Tensor<T>& x, double eps, double tol,
                           const std::function<bool(std::size_t)>& skip = {}, int order = 2) {
  if (order != 2 && order != 4) throw ConfigError("grad_check: order must be 2 or 4");
  auto eval = [&](const Tensor<T>& at, std::uint64_t* sig) {
    Graph<T> g;
    g.set_track_kinks(true);
    auto out = fn(g, g.leaf(at));
    if (out.value().size() != 1) throw ContractError("grad_check: function must return a scalar");
    if (sig) *sig = g.kink_signature();
    return out.value()[0];
  };

  Graph<T> g;
  g.set_track_kinks(true);
  auto xv = g.leaf(x);
  auto out = fn(g, xv);
  if (!std::isfinite(static_cast<double>(out.value().item())))
    throw NumericError("grad_check: non-finite forward value at the base point", 0);
  const std::uint64_t base_sig = g.kink_signature();
  const auto grads = backward(g, out.id);
  const Tensor<T> analytic = grads.has(xv) ? grads.at(xv) : Tensor<T>(x.shape());

  GradCheckReport r;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) {
      ++r.skipped;
      continue;
    }
    const T orig = probe[i];
    bool kinked = false;
    // Central difference with step h, using the realised step xp - xm, not
    // 2h, so representation error of x +/- h cancels.
    auto central = [&](double h) {
      std::uint64_t sp = 0, sm = 0;
      probe[i] = orig + static_cast<T>(h);
      const T xp = probe[i];
      const double fp = static_cast<double>(eval(probe, &sp));
      probe[i] = orig - static_cast<T>(h);
      const T xm = probe[i];
      const double fm = static_cast<double>(eval(probe, &sm));
      probe[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite forward value probing coordinate " + std::to_string(i), i);
      kinked = kinked || sp != base_sig || sm != base_sig;
      return (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
    };
    const double d1 = central(eps);
    const double numeric = order == 2 ? d1 : (4.0 * central(eps / 2) - d1) / 3.0;
    if (kinked) {
      ++r.skipped;
      continue;
    }
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
    ++r.checked;
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  r.pass = r.max_rel_err <= tol;
  return r;
}

}  // namespace mirage::ag
