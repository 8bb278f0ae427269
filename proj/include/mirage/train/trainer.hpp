#pragma once

// Supervised classifier training and the two-stage scheme (full skips for M
// epochs, then the last-stage-removed architecture for N epochs).

#include <functional>
#include <optional>

#include "mirage/data/dataset.hpp"
#include "mirage/eval/metrics.hpp"
#include "mirage/train/optim.hpp"

namespace mirage::train {

struct Augmentation {
  bool horizontal_flip = true;
  double jitter = 0.0;  // brightness: x * u, u ~ U[1 - jitter, 1 + jitter], clamped to [0,1]
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
  LrSchedule schedule;
  Augmentation augmentation;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch statistics)");
    if (!(optimizer.lr > 0)) throw ConfigError("train: lr must be positive");
  }
};

struct EpochRecord {
  std::size_t stage = 0;  // 0 plain training; 1 or 2 inside the two-stage scheme
  std::size_t epoch = 0;  // epoch index within its stage
  double train_loss = 0;  // mean over batches
  double test_acc = 0;    // percent; NaN when no test set was given
  double lr = 0;
};

template <Scalar T>
struct TrainResult {
  nn::ModelParams<T> params;
  std::vector<EpochRecord> history;
};

template <Scalar T>
using EpochHook = std::function<void(const EpochRecord&, const nn::ModelParams<T>&)>;

template <Scalar T>
double accuracy(const nn::Model& m, const nn::ModelParams<T>& p, const data::LabeledImageSet& set) {
  const auto imgs = set.images.template cast<T>();
  const auto pred = kern::argmax_rows(nn::forward_chunked(m, p, imgs, false));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
  return eval::percent(hits, set.size());
}

// Flip and brightness jitter drawn from `r`, one draw sequence per sample.
template <Scalar T>
void augment(Tensor<T>& batch, const Augmentation& a, Rng& r) {
  const std::size_t n = batch.extent(0), c = batch.extent(1), h = batch.extent(2), w = batch.extent(3);
  for (std::size_t i = 0; i < n; ++i) {
    T* img = batch.ptr() + i * c * h * w;
    const bool flip = a.horizontal_flip && r.uniform() < 0.5;
    const double u = a.jitter > 0 ? r.uniform(1 - a.jitter, 1 + a.jitter) : 1.0;
    if (flip)
      for (std::size_t row = 0; row < c * h; ++row) std::reverse(img + row * w, img + (row + 1) * w);
    if (u != 1.0)
      for (std::size_t k = 0; k < c * h * w; ++k) img[k] = static_cast<T>(std::clamp(static_cast<double>(img[k]) * u, 0.0, 1.0));
  }
}

// Batch sequence per epoch: a shuffle drawn from the epoch's own stream. A
// trailing batch of one sample is dropped (batch statistics need two).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, const Rng& rng,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng r = rng.split("shuffle").split(static_cast<std::uint64_t>(epoch));
  r.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t e = std::min(n, i + batch_size);
    if (e - i < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

// Trains from `init` (or a fresh seeded initialisation) for cfg.epochs epochs.
// The returned params are those after the final epoch.
template <Scalar T>
TrainResult<T> train_classifier(const nn::NetworkSpec& spec, const data::LabeledImageSet& train_set,
                                const data::LabeledImageSet* test_set, const TrainConfig& cfg,
                                std::optional<nn::ModelParams<T>> init = std::nullopt, const EpochHook<T>& hook = {},
                                std::size_t stage = 0) {
  cfg.validate();
  train_set.validate();
  if (spec.num_classes != train_set.num_classes)
    throw ConfigError("train: spec has " + std::to_string(spec.num_classes) + " classes, data has " +
                      std::to_string(train_set.num_classes));
  const nn::Model model(spec);
  const Rng rng(cfg.seed);
  TrainResult<T> res{init ? std::move(*init) : nn::build_network<T>(spec, rng.split("init")), {}};
  nn::check_integrity(spec, res.params);
  Optimizer<T> opt(cfg.optimizer);
  const Tensor<T> all = train_set.images.template cast<T>();
  const std::size_t per = train_set.pixels_per_image();

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.schedule.at(cfg.optimizer.lr, e);
    const auto batches = epoch_batches(train_set.size(), cfg.batch_size, rng, e);
    double loss_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& rows = batches[bi];
      Shape s = all.shape();
      s[0] = rows.size();
      Tensor<T> x(s);
      std::vector<std::size_t> y;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy_n(all.ptr() + rows[k] * per, per, x.ptr() + k * per);
        y.push_back(train_set.labels[rows[k]]);
      }
      Rng ar = rng.split("augment").split(static_cast<std::uint64_t>(e)).split(static_cast<std::uint64_t>(bi));
      augment(x, cfg.augmentation, ar);

      ag::Graph<T> g;
      nn::Context<T> ctx(g, res.params, nn::Mode::train, true, static_cast<T>(spec.bn_eps),
                         static_cast<T>(spec.bn_momentum));
      auto out = nn::network_forward(ctx, model.plan, g.constant(x));
      auto loss = ag::cross_entropy(out.logits, y);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) throw DivergenceError("train: non-finite loss", e, bi);
      loss_sum += lv;
      const auto grads = ag::backward(loss);
      std::vector<std::pair<std::string, const Tensor<T>*>> named;
      for (const auto& [name, v] : ctx.bound())
        if (grads.has(v)) named.emplace_back(name, &grads.at(v));
      opt.step(named, res.params.tensors, lr);
    }
    EpochRecord rec{stage, e, batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size()),
                    test_set ? accuracy(model, res.params, *test_set) : std::numeric_limits<double>::quiet_NaN(), lr};
    res.history.push_back(rec);
    if (hook) hook(rec, res.params);
  }
  return res;
}

struct TTSConfig {
  std::size_t M = 2;   // stage-1 epochs, full skips
  std::size_t N = 18;  // stage-2 epochs, last-stage skips removed
  TrainConfig inner;
};

// Copies every tensor named by `target` from `source`; names absent from the
// target are dropped. Missing names or shape disagreements are reported together.
template <Scalar T>
nn::ModelParams<T> transfer_params(const nn::ModelParams<T>& source, const nn::NetworkSpec& target) {
  nn::ModelParams<T> out;
  std::vector<std::string> offenders;
  for (const auto& info : nn::network_params(target)) {
    auto it = source.tensors.find(info.name);
    if (it == source.tensors.end())
      offenders.push_back("missing " + info.name);
    else if (it->second.shape() != info.shape)
      offenders.push_back(info.name + ": source " + shape_str(it->second.shape()) + ", target " + shape_str(info.shape));
    else
      out.tensors.emplace(info.name, it->second);
  }
  if (!offenders.empty()) {
    std::string msg = "transfer to the removed-skip spec failed:";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw IntegrityError(msg);
  }
  return out;
}

// Both stages use fresh optimiser state, the schedule restarted at epoch 0 and
// the same seeded batch streams; with M = 0 the result equals training the
// removed-skip spec directly.
template <Scalar T>
TrainResult<T> tts_train(const nn::NetworkSpec& full_spec, const data::LabeledImageSet& train_set,
                         const data::LabeledImageSet* test_set, const TTSConfig& tts, const EpochHook<T>& hook = {}) {
  if (full_spec.stage(4).skip.is_removed()) throw ConfigError("tts: the stage-1 spec must keep its last-stage skips");
  TrainConfig c1 = tts.inner;
  c1.epochs = tts.M;
  auto s1 = train_classifier<T>(full_spec, train_set, test_set, c1, std::nullopt, hook, 1);
  const auto rolss = nn::apply_rolss(full_spec);
  TrainConfig c2 = tts.inner;
  c2.epochs = tts.N;
  auto s2 = train_classifier<T>(rolss, train_set, test_set, c2, transfer_params(s1.params, rolss), hook, 2);
  TrainResult<T> out{std::move(s2.params), std::move(s1.history)};
  out.history.insert(out.history.end(), s2.history.begin(), s2.history.end());
  return out;
}

}  // namespace mirage::train
