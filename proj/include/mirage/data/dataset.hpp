#pragma once

// Labelled image sets and the seeded synthetic identity generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mirage/core/rng.hpp"
#include "mirage/core/tensor.hpp"

namespace mirage::data {

// images [N,C,H,W] with values in [0,1]; labels in [0, num_classes).
// sample_ids identify each row in the set it was drawn from and survive
// subsetting, so consumers can log exactly which samples they read.
struct LabeledImageSet {
  Tensor<float> images;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> sample_ids;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;    // optional; empty or num_classes entries
  std::vector<std::size_t> source_class;   // per label: class id in the source set

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.extent(1); }
  std::size_t resolution() const { return images.extent(2); }
  std::size_t pixels_per_image() const { return images.size() / images.extent(0); }

  void validate() const {
    if (images.rank() != 4) throw DimensionError("image set: images must be [N,C,H,W], got " + shape_str(images.shape()));
    if (images.extent(0) != labels.size() || sample_ids.size() != labels.size())
      throw DimensionError("image set: " + std::to_string(images.extent(0)) + " images, " +
                           std::to_string(labels.size()) + " labels, " + std::to_string(sample_ids.size()) + " ids");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes)
        throw LabelError("image set: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                         " outside [0," + std::to_string(num_classes) + ")");
  }

  // Rows in the given order; labels keep their meaning.
  LabeledImageSet subset(const std::vector<std::size_t>& rows) const {
    if (rows.empty()) throw ContractError("image set: empty subset");
    const std::size_t per = pixels_per_image();
    std::vector<float> buf;
    buf.reserve(rows.size() * per);
    LabeledImageSet out;
    for (std::size_t r : rows) {
      if (r >= size()) throw LookupError("image set: row " + std::to_string(r) + " out of range");
      buf.insert(buf.end(), images.ptr() + r * per, images.ptr() + (r + 1) * per);
      out.labels.push_back(labels[r]);
      out.sample_ids.push_back(sample_ids[r]);
    }
    Shape s = images.shape();
    s[0] = rows.size();
    out.images = Tensor<float>(s, std::move(buf));
    out.num_classes = num_classes;
    out.class_names = class_names;
    out.source_class = source_class;
    return out;
  }

  Tensor<float> batch(const std::vector<std::size_t>& rows) const { return subset(rows).images; }

  std::vector<std::size_t> rows_of_class(std::size_t c) const {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < size(); ++i)
      if (labels[i] == c) r.push_back(i);
    return r;
  }

  // FNV-1a over shape, pixel bytes and labels.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    };
    for (auto e : images.shape()) mix(&e, sizeof e);
    mix(images.ptr(), images.size() * sizeof(float));
    for (auto l : labels) mix(&l, sizeof l);
    return h;
  }
};

// ---------------------------------------------------------------- synthetic identities

struct GlyphLayer {
  enum class Kind { ellipse, bar } kind;
  double cx, cy;   // centre in unit coordinates
  double a, b;     // half-axes (ellipse) or half-length / half-width (bar)
  double angle;    // radians
  double color[3];
};

struct IdentityGlyph {
  double background[3];
  std::vector<GlyphLayer> layers;
};

// Identity-specific geometry and colour, a pure function of (rng, id).
inline IdentityGlyph identity_glyph(const Rng& rng, std::size_t id) {
  Rng r = rng.split("identity").split(static_cast<std::uint64_t>(id));
  IdentityGlyph g;
  for (double& c : g.background) c = r.uniform(0.05, 0.45);
  const std::size_t ellipses = 2, bars = 1 + r.below(2);
  auto color = [&](double* c) {
    for (int k = 0; k < 3; ++k) c[k] = r.uniform(0.2, 1.0);
  };
  for (std::size_t i = 0; i < ellipses + bars; ++i) {
    GlyphLayer l{};
    l.kind = i < ellipses ? GlyphLayer::Kind::ellipse : GlyphLayer::Kind::bar;
    l.cx = r.uniform(0.25, 0.75);
    l.cy = r.uniform(0.25, 0.75);
    if (l.kind == GlyphLayer::Kind::ellipse) {
      l.a = r.uniform(0.12, 0.3);
      l.b = r.uniform(0.08, 0.22);
    } else {
      l.a = r.uniform(0.25, 0.42);
      l.b = r.uniform(0.04, 0.08);
    }
    l.angle = r.uniform(0.0, std::numbers::pi);
    color(l.color);
    g.layers.push_back(l);
  }
  return g;
}

struct GlyphJitter {
  double dx = 0, dy = 0, scale = 1, brightness = 1;
};

// Renders one glyph into [C,H,W] at `res`, anti-aliased over about one pixel,
// quantised to 8-bit levels q/255.
inline void render_glyph(const IdentityGlyph& g, const GlyphJitter& j, std::size_t channels, std::size_t res,
                         float* out) {
  const double px = 1.0 / static_cast<double>(res);
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      // Unit coordinates of the pixel centre, mapped back through the jitter.
      const double u = ((static_cast<double>(x) + 0.5) * px - 0.5 - j.dx) / j.scale + 0.5;
      const double v = ((static_cast<double>(y) + 0.5) * px - 0.5 - j.dy) / j.scale + 0.5;
      double col[3] = {g.background[0], g.background[1], g.background[2]};
      for (const auto& l : g.layers) {
        const double c = std::cos(l.angle), s = std::sin(l.angle);
        const double du = u - l.cx, dv = v - l.cy;
        const double p = c * du + s * dv, q = -s * du + c * dv;
        double sd;  // approximate signed distance, negative inside
        if (l.kind == GlyphLayer::Kind::ellipse) {
          const double rr = std::sqrt((p / l.a) * (p / l.a) + (q / l.b) * (q / l.b));
          sd = (rr - 1.0) * std::min(l.a, l.b);
        } else {
          sd = std::max(std::abs(p) - l.a, std::abs(q) - l.b);
        }
        const double cover = std::clamp(0.5 - sd / (px * j.scale), 0.0, 1.0);
        for (int k = 0; k < 3; ++k) col[k] = col[k] * (1 - cover) + l.color[k] * cover;
      }
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double lum = channels == 3 ? col[ch] : (col[0] + col[1] + col[2]) / 3.0;
        const double val = std::clamp(lum * j.brightness, 0.0, 1.0);
        out[(ch * res + y) * res + x] = static_cast<float>(std::lround(val * 255.0)) / 255.0f;
      }
    }
}

struct SynthOptions {
  std::size_t channels = 3;
  double max_shift = 0.06;       // unit coordinates
  double scale_jitter = 0.08;    // scale in [1 - s, 1 + s]
  double brightness_jitter = 0.15;
};

// num_ids identities, per_id samples each, ordered by identity. Sample i of
// identity c has id c * per_id + i and draws its jitter from its own stream.
inline LabeledImageSet synth_identities(std::size_t num_ids, std::size_t per_id, std::size_t resolution,
                                        const Rng& rng, const SynthOptions& opt = {}) {
  if (num_ids < 2) throw ConfigError("synth_identities: num_ids must be >= 2");
  if (per_id < 1) throw ConfigError("synth_identities: per_id must be >= 1");
  if (resolution != 32 && resolution != 64) throw ConfigError("synth_identities: resolution must be 32 or 64");
  if (opt.channels != 1 && opt.channels != 3) throw ConfigError("synth_identities: channels must be 1 or 3");
  const std::size_t n = num_ids * per_id, per = opt.channels * resolution * resolution;
  LabeledImageSet set;
  set.images = Tensor<float>({n, opt.channels, resolution, resolution});
  set.num_classes = num_ids;
  for (std::size_t c = 0; c < num_ids; ++c) {
    const IdentityGlyph g = identity_glyph(rng, c);
    set.class_names.push_back("id" + std::to_string(c));
    set.source_class.push_back(c);
    for (std::size_t i = 0; i < per_id; ++i) {
      const std::size_t row = c * per_id + i;
      Rng jr = rng.split("jitter").split(static_cast<std::uint64_t>(row));
      GlyphJitter j;
      j.dx = jr.uniform(-opt.max_shift, opt.max_shift);
      j.dy = jr.uniform(-opt.max_shift, opt.max_shift);
      j.scale = jr.uniform(1 - opt.scale_jitter, 1 + opt.scale_jitter);
      j.brightness = jr.uniform(1 - opt.brightness_jitter, 1 + opt.brightness_jitter);
      render_glyph(g, j, opt.channels, resolution, set.images.ptr() + row * per);
      set.labels.push_back(c);
      set.sample_ids.push_back(row);
    }
  }
  return set;
}

}  // namespace mirage::data
