#pragma once

// White-box model inversion: for each target id, optimise latents w so that
// the target classifies G(w) as that id, from several seeded starts, and keep
// the start with the highest final likelihood.
//
// Every row of the latent batch is an independent optimisation. All kernels
// are per-sample in eval mode and the loss is a sum of per-row terms, so a row
// evolves bitwise identically whatever else shares its batch. That is why ids
// can be grouped freely across workers.

#include <cstdlib>
#include <functional>
#include <thread>

#include "mirage/generator/generator.hpp"

namespace mirage::attack {

enum class LossKind { nll, logit_max };

inline const char* loss_kind_name(LossKind k) { return k == LossKind::nll ? "nll" : "logit_max"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "nll") return LossKind::nll;
  if (s == "logit_max") return LossKind::logit_max;
  throw ConfigError("unknown attack loss '" + s + "' (expected nll or logit_max)");
}

enum class StepRule { gd, adam };

inline const char* step_rule_name(StepRule r) { return r == StepRule::gd ? "gd" : "adam"; }

inline StepRule parse_step_rule(const std::string& s) {
  if (s == "gd") return StepRule::gd;
  if (s == "adam") return StepRule::adam;
  throw ConfigError("unknown attack optimizer '" + s + "' (expected gd or adam)");
}

struct AttackConfig {
  LossKind loss = LossKind::nll;
  std::size_t iterations = 500;
  double step_size = 0.05;
  StepRule optimizer = StepRule::adam;
  std::size_t candidates = 4;
  double prior_weight = 0.01;  // lambda; 0 drops the prior term entirely
  std::uint64_t seed = 0;
  std::size_t max_batch_rows = 128;  // latent rows per forward pass

  void validate() const {
    if (candidates == 0) throw ConfigError("attack: candidates must be >= 1");
    if (!(step_size > 0)) throw ConfigError("attack: step_size must be positive");
    if (!(prior_weight >= 0)) throw ConfigError("attack: prior_weight must be >= 0");
    if (max_batch_rows == 0) throw ConfigError("attack: max_batch_rows must be >= 1");
  }
};

// Logits [N, K] for images [N, ...]; must not modify shared state.
template <Scalar T>
using TargetFn = std::function<ag::Var<T>(ag::Graph<T>&, const ag::Var<T>&)>;

// Images for latents [N, d].
template <Scalar T>
using GeneratorFn = std::function<ag::Var<T>(ag::Graph<T>&, const ag::Var<T>&)>;

// Eval-mode classifier with its params bound as constants.
template <Scalar T>
TargetFn<T> classifier_target(const nn::Model& m, const nn::ModelParams<T>& p) {
  return [&m, &p](ag::Graph<T>& g, const ag::Var<T>& x) {
    return nn::network_forward(g, m.plan, p, x, static_cast<T>(m.spec.bn_eps)).logits;
  };
}

template <Scalar T>
GeneratorFn<T> generator_fn(const gen::Generator<T>& G) {
  return [&G](ag::Graph<T>& g, const ag::Var<T>& w) { return gen::generate(g, G, w); };
}

template <Scalar T>
GeneratorFn<T> identity_generator() {
  return [](ag::Graph<T>&, const ag::Var<T>& w) { return w; };
}

template <Scalar T>
struct MiLoss {
  ag::Var<T> total;     // scalar: sum of per-row losses
  ag::Var<T> per_row;   // [N]
  ag::Var<T> image;     // G(w)
  Tensor<T> log_probs;  // [N, K] log-softmax of the target logits
};

// Per row i: -log softmax_{y_i}(T(G(w_i))) or -logit_{y_i}, plus
// lambda * (TV(G(w_i)) + mean(w_i^2)) when lambda > 0.
template <Scalar T>
MiLoss<T> mi_loss(ag::Graph<T>& g, const TargetFn<T>& target, const GeneratorFn<T>& G, const ag::Var<T>& w,
                  const std::vector<std::size_t>& y, LossKind kind, double lambda) {
  auto img = G(g, w);
  auto logits = target(g, img);
  if (logits.value().rank() != 2 || logits.shape()[0] != y.size())
    throw DimensionError("mi_loss: target produced " + shape_str(logits.shape()) + " for " + std::to_string(y.size()) +
                         " labels");
  const std::size_t k = logits.shape()[1];
  for (auto c : y)
    if (c >= k) throw LabelError("mi_loss: label " + std::to_string(c) + " out of range [0," + std::to_string(k) + ")");
  auto lsm = ag::log_softmax(logits);
  auto row = ag::scale(ag::pick(kind == LossKind::nll ? lsm : logits, y), T(-1));
  if (lambda > 0) {
    auto prior = ag::add(ag::total_variation(img), ag::row_mean_square(w));
    row = ag::add(row, ag::scale(prior, static_cast<T>(lambda)));
  }
  return {ag::sum(row), row, img, lsm.value()};
}

template <Scalar T>
struct AttackEntry {
  std::size_t id = 0;
  std::size_t best_candidate = 0;
  Tensor<T> best_w;           // [d]
  Tensor<T> reconstruction;   // [C, H, W] (or the generator's per-row shape)
  double final_likelihood = 0;
  std::vector<double> trajectory;  // best candidate's loss, iterations + 1 values
  std::vector<double> candidate_likelihoods;  // NaN for failed candidates
  std::vector<bool> candidate_failed;
  Tensor<T> candidate_reconstructions;        // [candidates, ...]; failed rows hold G(0)
};

struct AttackFailure {
  std::size_t id;
  std::string message;
};

template <Scalar T>
struct AttackResult {
  std::vector<AttackEntry<T>> entries;  // in input id order, successful ids only
  std::vector<AttackFailure> failures;

  std::vector<std::size_t> ids() const {
    std::vector<std::size_t> v;
    for (const auto& e : entries) v.push_back(e.id);
    return v;
  }
  std::vector<double> likelihoods() const {
    std::vector<double> v;
    for (const auto& e : entries) v.push_back(e.final_likelihood);
    return v;
  }
};

class AttackError : public Error {
 public:
  using Error::Error;
};

// Standard-normal start for candidate c of `id`, from its own stream.
template <Scalar T>
Tensor<T> initial_latent(const AttackConfig& cfg, std::size_t id, std::size_t c, std::size_t dim) {
  Rng r = Rng(cfg.seed).split("attack").split(static_cast<std::uint64_t>(id)).split(static_cast<std::uint64_t>(c));
  return Tensor<T>::randn({dim}, r, 1.0);
}

namespace detail {

template <Scalar T>
double row_likelihood(const Tensor<T>& lsm, std::size_t row, std::size_t y) {
  return std::exp(static_cast<double>(lsm[row * lsm.extent(1) + y]));
}

// Optimises a block of candidate rows; w is [rows, d] and updated in place.
template <Scalar T>
void optimise_rows(const TargetFn<T>& target, const GeneratorFn<T>& G, const AttackConfig& cfg,
                   const std::vector<std::size_t>& y, Tensor<T>& w, std::vector<std::vector<double>>& traj,
                   std::vector<bool>& failed, std::vector<double>& lik, Tensor<T>& images) {
  const std::size_t rows = w.extent(0), d = w.extent(1);
  train::OptimizerConfig oc;
  oc.kind = cfg.optimizer == StepRule::adam ? train::OptimizerConfig::Kind::adam : train::OptimizerConfig::Kind::sgd;
  oc.lr = cfg.step_size;
  oc.momentum = 0.0;
  train::Optimizer<T> opt(oc);
  std::map<std::string, Tensor<T>> state;
  traj.assign(rows, {});
  failed.assign(rows, false);
  lik.assign(rows, std::numeric_limits<double>::quiet_NaN());

  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    ag::Graph<T> g;
    auto wv = g.leaf(w);
    auto l = mi_loss<T>(g, target, G, wv, y, cfg.loss, cfg.prior_weight);
    for (std::size_t r = 0; r < rows; ++r) {
      if (failed[r]) continue;
      const double v = static_cast<double>(l.per_row.value()[r]);
      if (!std::isfinite(v)) {
        failed[r] = true;
        continue;
      }
      traj[r].push_back(v);
    }
    if (it == cfg.iterations) {
      for (std::size_t r = 0; r < rows; ++r)
        if (!failed[r]) lik[r] = row_likelihood(l.log_probs, r, y[r]);
      images = l.image.value();
      break;
    }
    auto grads = ag::backward(l.total);
    Tensor<T> gw = grads.at(wv);
    for (std::size_t r = 0; r < rows; ++r) {
      bool finite = !failed[r];
      for (std::size_t j = 0; finite && j < d; ++j) finite = std::isfinite(static_cast<double>(gw[r * d + j]));
      if (!finite) {
        failed[r] = true;
        // A failed row is parked at the origin so it cannot poison later passes.
        for (std::size_t j = 0; j < d; ++j) gw[r * d + j] = T(0);
      }
    }
    state.clear();
    state.emplace("w", std::move(w));
    opt.step({{"w", &gw}}, state, cfg.step_size);
    w = std::move(state.at("w"));
    for (std::size_t r = 0; r < rows; ++r)
      if (failed[r])
        for (std::size_t j = 0; j < d; ++j) w[r * d + j] = T(0);
  }
}

template <Scalar T>
Tensor<T> row_of(const Tensor<T>& t, std::size_t r) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  const std::size_t per = t.size() / t.extent(0);
  return Tensor<T>(s, std::vector<T>(t.ptr() + r * per, t.ptr() + (r + 1) * per));
}

}  // namespace detail

// Attacks `ids` as one or more row blocks. `init`, when given, is
// [ids.size() * candidates, d] with candidate c of ids[i] at row i * candidates + c.
// Ids whose candidates all fail land in `failures`.
template <Scalar T>
AttackResult<T> attack_block(const TargetFn<T>& target, const GeneratorFn<T>& G, const std::vector<std::size_t>& ids,
                             std::size_t latent_dim, const AttackConfig& cfg,
                             const std::optional<Tensor<T>>& init = std::nullopt) {
  cfg.validate();
  const std::size_t C = cfg.candidates, rows = ids.size() * C;
  AttackResult<T> res;
  if (ids.empty()) return res;
  if (init && (init->rank() != 2 || init->extent(0) != rows || init->extent(1) != latent_dim))
    throw DimensionError("attack: initial latents " + shape_str(init->shape()) + ", expected [" +
                         std::to_string(rows) + "," + std::to_string(latent_dim) + "]");
  // Whole ids per block, at least one id.
  const std::size_t ids_per_block = std::max<std::size_t>(1, cfg.max_batch_rows / C);
  for (std::size_t b0 = 0; b0 < ids.size(); b0 += ids_per_block) {
    const std::size_t b1 = std::min(ids.size(), b0 + ids_per_block), br = (b1 - b0) * C;
    Tensor<T> w({br, latent_dim});
    std::vector<std::size_t> y;
    for (std::size_t i = b0; i < b1; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t r = (i - b0) * C + c;
        const Tensor<T> w0 = init ? detail::row_of(*init, i * C + c) : initial_latent<T>(cfg, ids[i], c, latent_dim);
        std::copy_n(w0.ptr(), latent_dim, w.ptr() + r * latent_dim);
        y.push_back(ids[i]);
      }
    std::vector<std::vector<double>> traj;
    std::vector<bool> failed;
    std::vector<double> lik;
    Tensor<T> images;
    detail::optimise_rows(target, G, cfg, y, w, traj, failed, lik, images);
    for (std::size_t i = b0; i < b1; ++i) {
      AttackEntry<T> e;
      e.id = ids[i];
      bool any = false;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t r = (i - b0) * C + c;
        e.candidate_failed.push_back(failed[r]);
        e.candidate_likelihoods.push_back(lik[r]);
        // Strictly greater: ties keep the lowest candidate index.
        if (!failed[r] && (!any || lik[r] > e.final_likelihood)) {
          any = true;
          e.best_candidate = c;
          e.final_likelihood = lik[r];
        }
      }
      if (!any) {
        res.failures.push_back({ids[i], "all " + std::to_string(C) + " candidates produced non-finite values"});
        continue;
      }
      const std::size_t r = (i - b0) * C + e.best_candidate;
      e.best_w = detail::row_of(w, r);
      e.reconstruction = detail::row_of(images, r);
      {
        const std::size_t per = images.size() / images.extent(0);
        Shape cs = images.shape();
        cs[0] = C;
        const T* first = images.ptr() + (i - b0) * C * per;
        e.candidate_reconstructions = Tensor<T>(cs, std::vector<T>(first, first + C * per));
      }
      e.trajectory = std::move(traj[r]);
      res.entries.push_back(std::move(e));
    }
  }
  return res;
}

// Single-id attack; an id with no surviving candidate raises AttackError.
template <Scalar T>
AttackEntry<T> mi_attack(const TargetFn<T>& target, const GeneratorFn<T>& G, std::size_t y, std::size_t latent_dim,
                         const AttackConfig& cfg, const std::optional<Tensor<T>>& init = std::nullopt) {
  auto r = attack_block(target, G, {y}, latent_dim, cfg, init);
  if (!r.failures.empty()) throw AttackError("attack on id " + std::to_string(y) + ": " + r.failures[0].message);
  return std::move(r.entries.front());
}

// Worker count: MIRAGE_THREADS when set to a positive integer, else the
// hardware concurrency (at least 1).
inline std::size_t worker_count() {
  if (const char* s = std::getenv("MIRAGE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end != s && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// All ids. Contiguous id ranges go to `threads` workers; results are merged in
// input order, so the output does not depend on the worker count.
template <Scalar T>
AttackResult<T> attack_all(const TargetFn<T>& target, const GeneratorFn<T>& G, const std::vector<std::size_t>& ids,
                           std::size_t latent_dim, const AttackConfig& cfg, std::size_t threads = worker_count()) {
  cfg.validate();
  threads = std::max<std::size_t>(1, std::min(threads, ids.size()));
  if (threads <= 1) return attack_block(target, G, ids, latent_dim, cfg);
  std::vector<AttackResult<T>> parts(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t per = (ids.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t a = std::min(ids.size(), t * per), b = std::min(ids.size(), a + per);
    pool.emplace_back([&, t, a, b] {
      try {
        parts[t] = attack_block(target, G, std::vector<std::size_t>(ids.begin() + a, ids.begin() + b), latent_dim, cfg);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  AttackResult<T> out;
  for (auto& p : parts) {
    for (auto& e : p.entries) out.entries.push_back(std::move(e));
    for (auto& f : p.failures) out.failures.push_back(std::move(f));
  }
  return out;
}

// Convenience for a classifier target and a generator.
template <Scalar T>
AttackResult<T> attack_all(const nn::Model& m, const nn::ModelParams<T>& p, const gen::Generator<T>& G,
                           const std::vector<std::size_t>& ids, const AttackConfig& cfg,
                           std::size_t threads = worker_count()) {
  return attack_all<T>(classifier_target(m, p), generator_fn(G), ids, G.spec.input_dim(), cfg, threads);
}

// Stacks reconstructions into [K, C, H, W] in entry order.
template <Scalar T>
Tensor<T> stack_reconstructions(const AttackResult<T>& r) {
  if (r.entries.empty()) throw ContractError("stack_reconstructions: empty attack result");
  Shape s = r.entries.front().reconstruction.shape();
  s.insert(s.begin(), r.entries.size());
  std::vector<T> v;
  for (const auto& e : r.entries) v.insert(v.end(), e.reconstruction.data().begin(), e.reconstruction.data().end());
  return Tensor<T>(s, std::move(v));
}

}  // namespace mirage::attack
