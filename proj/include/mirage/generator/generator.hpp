#pragma once

// Differentiable image prior G(w). The default is the decoder half of an
// autoencoder trained on public classes only; a pixel mode parameterises the
// image directly as sigmoid(w).

#include <set>

#include "mirage/train/trainer.hpp"

namespace mirage::gen {

enum class GeneratorMode { decoder, pixel };

inline const char* generator_mode_name(GeneratorMode m) { return m == GeneratorMode::decoder ? "decoder" : "pixel"; }

inline GeneratorMode parse_generator_mode(const std::string& s) {
  if (s == "decoder") return GeneratorMode::decoder;
  if (s == "pixel") return GeneratorMode::pixel;
  throw ConfigError("unknown generator mode '" + s + "' (expected decoder or pixel)");
}

// Decoder: fc -> [base_channels, b, b] -> ReLU, then one stage per entry of
// `decoder_channels`: upsample x2, conv3x3 + bias, ReLU (sigmoid after the
// last). b = resolution / 2^stages. The encoder mirrors it with average
// pooling and ends in per-row RMS normalisation, so codes have mean square 1
// like a standard-normal latent.
struct GeneratorSpec {
  GeneratorMode mode = GeneratorMode::decoder;
  std::size_t latent_dim = 64;
  std::size_t out_channels = 3;
  std::size_t resolution = 32;
  std::size_t base_channels = 32;
  std::vector<std::size_t> decoder_channels{32, 16, 8, 3};
  double latent_noise = 0.1;  // std of Gaussian noise on codes during training
  bool operator==(const GeneratorSpec&) const = default;

  std::size_t stages() const { return decoder_channels.size(); }
  std::size_t base_resolution() const { return resolution >> stages(); }
  // Length of w.
  std::size_t input_dim() const {
    return mode == GeneratorMode::pixel ? out_channels * resolution * resolution : latent_dim;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("generator spec: " + m); };
    if (out_channels == 0 || resolution == 0) fail("empty output image");
    if (mode == GeneratorMode::pixel) return;
    if (latent_dim == 0 || base_channels == 0) fail("latent_dim and base_channels must be positive");
    if (decoder_channels.empty()) fail("decoder needs at least one stage");
    if (decoder_channels.back() != out_channels)
      fail("last decoder stage has " + std::to_string(decoder_channels.back()) + " channels, output needs " +
           std::to_string(out_channels));
    if (base_resolution() == 0 || base_resolution() << stages() != resolution)
      fail("resolution " + std::to_string(resolution) + " is not divisible by 2^" + std::to_string(stages()));
  }
};

// A spec whose output matches a classifier input.
inline GeneratorSpec generator_for(const nn::NetworkSpec& target, GeneratorMode mode = GeneratorMode::decoder) {
  GeneratorSpec g;
  g.mode = mode;
  g.out_channels = target.in_channels;
  g.resolution = target.resolution;
  g.decoder_channels.back() = target.in_channels;
  return g;
}

inline std::vector<nn::ParamInfo> decoder_params(const GeneratorSpec& s) {
  std::vector<nn::ParamInfo> out;
  if (s.mode == GeneratorMode::pixel) return out;
  const std::size_t b = s.base_resolution(), flat = s.base_channels * b * b;
  out.push_back({"dec.fc.weight", {flat, s.latent_dim}, nn::ParamRole::linear_weight, s.latent_dim});
  out.push_back({"dec.fc.bias", {flat}, nn::ParamRole::bias});
  std::size_t in = s.base_channels;
  for (std::size_t i = 0; i < s.stages(); ++i) {
    const std::string p = "dec.conv" + std::to_string(i + 1);
    nn::push_conv(out, p + ".weight", s.decoder_channels[i], in, 3);
    out.push_back({p + ".bias", {s.decoder_channels[i]}, nn::ParamRole::bias});
    in = s.decoder_channels[i];
  }
  return out;
}

// Encoder widths are the decoder's in reverse: out_channels -> ... -> base.
inline std::vector<nn::ParamInfo> encoder_params(const GeneratorSpec& s) {
  std::vector<nn::ParamInfo> out;
  if (s.mode == GeneratorMode::pixel) return out;
  std::size_t in = s.out_channels;
  for (std::size_t i = 0; i < s.stages(); ++i) {
    const std::size_t o = i + 1 < s.stages() ? s.decoder_channels[s.stages() - 2 - i] : s.base_channels;
    const std::string p = "enc.conv" + std::to_string(i + 1);
    nn::push_conv(out, p + ".weight", o, in, 3);
    out.push_back({p + ".bias", {o}, nn::ParamRole::bias});
    in = o;
  }
  const std::size_t b = s.base_resolution(), flat = s.base_channels * b * b;
  out.push_back({"enc.fc.weight", {s.latent_dim, flat}, nn::ParamRole::linear_weight, flat});
  out.push_back({"enc.fc.bias", {s.latent_dim}, nn::ParamRole::bias});
  return out;
}

template <Scalar T>
struct Generator {
  GeneratorSpec spec;
  nn::ModelParams<T> params;  // decoder tensors only
};

namespace detail {

template <Scalar T>
ag::Var<T> bound(ag::Graph<T>& g, const nn::ModelParams<T>& p, std::map<std::string, ag::Var<T>>* leaves,
                 const std::string& name) {
  if (!leaves) return g.constant(p.at(name));
  auto it = leaves->find(name);
  if (it == leaves->end()) it = leaves->emplace(name, g.leaf(p.at(name))).first;
  return it->second;
}

// Decoder graph over [N, latent_dim] codes. `leaves` binds params as
// differentiable leaves (training); null binds them as constants.
template <Scalar T>
ag::Var<T> decode(ag::Graph<T>& g, const GeneratorSpec& s, const nn::ModelParams<T>& p, const ag::Var<T>& w,
                  std::map<std::string, ag::Var<T>>* leaves) {
  const std::size_t n = w.shape()[0];
  if (s.mode == GeneratorMode::pixel)
    return ag::reshape(ag::sigmoid(w), Shape{n, s.out_channels, s.resolution, s.resolution});
  const std::size_t b = s.base_resolution();
  auto h = ag::linear(w, bound(g, p, leaves, "dec.fc.weight"), bound(g, p, leaves, "dec.fc.bias"));
  h = ag::relu(ag::reshape(h, Shape{n, s.base_channels, b, b}));
  for (std::size_t i = 0; i < s.stages(); ++i) {
    const std::string pre = "dec.conv" + std::to_string(i + 1);
    h = ag::conv2d(ag::upsample2x(h), bound(g, p, leaves, pre + ".weight"), bound(g, p, leaves, pre + ".bias"), 1, 1);
    h = i + 1 < s.stages() ? ag::relu(h) : ag::sigmoid(h);
  }
  return h;
}

template <Scalar T>
ag::Var<T> encode(ag::Graph<T>& g, const GeneratorSpec& s, const nn::ModelParams<T>& p, const ag::Var<T>& x,
                  std::map<std::string, ag::Var<T>>* leaves) {
  auto h = x;
  for (std::size_t i = 0; i < s.stages(); ++i) {
    const std::string pre = "enc.conv" + std::to_string(i + 1);
    h = ag::conv2d(h, bound(g, p, leaves, pre + ".weight"), bound(g, p, leaves, pre + ".bias"), 1, 1);
    h = ag::avgpool2d(ag::relu(h), 2);
  }
  const std::size_t n = x.shape()[0];
  h = ag::reshape(h, Shape{n, h.value().size() / n});
  h = ag::linear(h, bound(g, p, leaves, "enc.fc.weight"), bound(g, p, leaves, "enc.fc.bias"));
  return ag::row_rms_normalize(h);
}

inline void require_latent(const GeneratorSpec& s, const Shape& w) {
  if (w.size() != 2 || w[1] != s.input_dim())
    throw DimensionError("generator input must be [N," + std::to_string(s.input_dim()) + "], got " + shape_str(w));
}

}  // namespace detail

// Generator graph for latents w [N, input_dim] -> images [N, C, R, R] in
// [0,1]. Params enter as constants; gradients reach w.
template <Scalar T>
ag::Var<T> generate(ag::Graph<T>& g, const Generator<T>& gen, const ag::Var<T>& w) {
  detail::require_latent(gen.spec, w.shape());
  return detail::decode<T>(g, gen.spec, gen.params, w, nullptr);
}

template <Scalar T>
Tensor<T> generate(const Generator<T>& gen, const Tensor<T>& w) {
  for (std::size_t i = 0; i < w.size(); ++i)
    if (!std::isfinite(static_cast<double>(w[i]))) throw NumericError("generate: non-finite latent", i);
  ag::Graph<T> g;
  return generate(g, gen, g.constant(w)).value();
}

// Mean over the batch of the per-image total variation, plus mean(w^2) of the
// latent when given.
template <Scalar T>
ag::Var<T> pixel_prior(const ag::Var<T>& image, const std::optional<ag::Var<T>>& latent = std::nullopt) {
  auto tv = ag::mean(ag::total_variation(image));
  if (!latent) return tv;
  return ag::add(tv, ag::mean(ag::mul(*latent, *latent)));
}

template <Scalar T>
nn::ModelParams<T> init_autoencoder(const GeneratorSpec& s, const Rng& rng) {
  auto infos = decoder_params(s);
  const auto enc = encoder_params(s);
  infos.insert(infos.end(), enc.begin(), enc.end());
  return nn::init_params<T>(infos, rng);
}

// Mean squared reconstruction error of encode-decode over `set`, noise-free.
template <Scalar T>
double autoencoder_mse(const GeneratorSpec& s, const nn::ModelParams<T>& p, const data::LabeledImageSet& set,
                       std::size_t chunk = 128) {
  if (s.mode == GeneratorMode::pixel) return 0.0;
  const auto imgs = set.images.template cast<T>();
  const std::size_t n = set.size(), per = set.pixels_per_image();
  double total = 0;
  for (std::size_t i = 0; i < n; i += chunk) {
    const std::size_t c = std::min(chunk, n - i);
    Shape sh = imgs.shape();
    sh[0] = c;
    Tensor<T> part(sh, std::vector<T>(imgs.ptr() + i * per, imgs.ptr() + (i + c) * per));
    ag::Graph<T> g;
    auto x = g.constant(part);
    auto r = detail::decode<T>(g, s, p, detail::encode<T>(g, s, p, x, nullptr), nullptr);
    for (std::size_t k = 0; k < part.size(); ++k) {
      const double d = static_cast<double>(r.value()[k]) - static_cast<double>(part[k]);
      total += d * d;
    }
  }
  return total / static_cast<double>(n * per);
}

template <Scalar T>
struct GeneratorTrainResult {
  Generator<T> generator;
  std::set<std::uint64_t> consumed_ids;  // every sample id read during training
  double initial_mse = 0;
  double final_mse = 0;
  std::vector<double> epoch_loss;
};

// Autoencoder training on `pub` only. Streams: "init" for weights, "shuffle"
// per epoch as in classifier training, "noise" per (epoch, batch).
template <Scalar T>
GeneratorTrainResult<T> train_generator(const GeneratorSpec& spec, const data::LabeledImageSet& pub,
                                        const train::TrainConfig& cfg) {
  spec.validate();
  if (pub.size() == 0) throw ContractError("train_generator: empty public set");
  pub.validate();
  if (pub.images.extent(1) != spec.out_channels || pub.images.extent(2) != spec.resolution ||
      pub.images.extent(3) != spec.resolution)
    throw DimensionError("train_generator: images " + shape_str(pub.images.shape()) + " do not match the generator output");
  GeneratorTrainResult<T> res;
  res.generator.spec = spec;
  if (spec.mode == GeneratorMode::pixel) return res;
  cfg.validate();

  const Rng rng(cfg.seed);
  auto params = init_autoencoder<T>(spec, rng.split("init"));
  res.initial_mse = autoencoder_mse(spec, params, pub);
  train::Optimizer<T> opt(cfg.optimizer);
  const Tensor<T> all = pub.images.template cast<T>();
  const std::size_t per = pub.pixels_per_image();

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.schedule.at(cfg.optimizer.lr, e);
    const auto batches = train::epoch_batches(pub.size(), cfg.batch_size, rng, e);
    double loss_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& rows = batches[bi];
      Shape s = all.shape();
      s[0] = rows.size();
      Tensor<T> x(s);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy_n(all.ptr() + rows[k] * per, per, x.ptr() + k * per);
        res.consumed_ids.insert(pub.sample_ids[rows[k]]);
      }
      Rng ar = rng.split("augment").split(static_cast<std::uint64_t>(e)).split(static_cast<std::uint64_t>(bi));
      train::augment(x, cfg.augmentation, ar);

      ag::Graph<T> g;
      std::map<std::string, ag::Var<T>> leaves;
      auto xv = g.constant(x);
      auto z = detail::encode<T>(g, spec, params, xv, &leaves);
      if (spec.latent_noise > 0) {
        Rng nr = rng.split("noise").split(static_cast<std::uint64_t>(e)).split(static_cast<std::uint64_t>(bi));
        z = ag::add(z, g.constant(Tensor<T>::randn(z.shape(), nr, spec.latent_noise)));
      }
      auto loss = ag::mse(detail::decode<T>(g, spec, params, z, &leaves), x);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) throw DivergenceError("train_generator: non-finite loss", e, bi);
      loss_sum += lv;
      const auto grads = ag::backward(loss);
      std::vector<std::pair<std::string, const Tensor<T>*>> named;
      for (const auto& [name, v] : leaves)
        if (grads.has(v)) named.emplace_back(name, &grads.at(v));
      opt.step(named, params.tensors, lr);
    }
    res.epoch_loss.push_back(batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size()));
  }
  res.final_mse = autoencoder_mse(spec, params, pub);
  for (const auto& info : decoder_params(spec)) res.generator.params.tensors.emplace(info.name, params.at(info.name));
  return res;
}

}  // namespace mirage::gen
