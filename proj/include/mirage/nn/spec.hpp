#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "mirage/core/error.hpp"

namespace mirage::nn {

// How a block's skip connection is wired: Full (k = 1), Removed (no skip
// path, and no projection parameters), or Scaled(k) with 0 <= k <= 1.
class SkipMode {
 public:
  enum class Kind { full, removed, scaled };

  SkipMode() : SkipMode(Kind::full, 1.0) {}
  static SkipMode full() { return SkipMode(Kind::full, 1.0); }
  static SkipMode removed() { return SkipMode(Kind::removed, 0.0); }
  static SkipMode scaled(double k) {
    if (!(k >= 0.0 && k <= 1.0))
      throw ConfigError("skip scale factor k must lie in [0,1], got " + std::to_string(k));
    return SkipMode(Kind::scaled, k);
  }

  Kind kind() const { return kind_; }
  double factor() const { return k_; }
  bool is_removed() const { return kind_ == Kind::removed; }
  bool has_skip_path() const { return kind_ != Kind::removed; }

  // Channels kept from an n-channel input by a concatenative skip: floor(k*n).
  // The 1e-9 guard keeps products like 0.29 * 100 from rounding down a unit.
  std::size_t kept_channels(std::size_t n) const {
    if (kind_ == Kind::full) return n;
    if (kind_ == Kind::removed) return 0;
    return static_cast<std::size_t>(std::floor(k_ * static_cast<double>(n) + 1e-9));
  }

  std::string str() const {
    switch (kind_) {
      case Kind::full:
        return "full";
      case Kind::removed:
        return "removed";
      default: {
        char buf[64];
        std::snprintf(buf, sizeof buf, "scaled(%.17g)", k_);
        return buf;
      }
    }
  }

  static SkipMode parse(const std::string& s) {
    if (s == "full") return full();
    if (s == "removed") return removed();
    if (s.rfind("scaled(", 0) == 0 && s.back() == ')') {
      try {
        return scaled(std::stod(s.substr(7, s.size() - 8)));
      } catch (const std::invalid_argument&) {
      }
    }
    throw ConfigError("unrecognised skip mode '" + s + "' (expected full, removed or scaled(k))");
  }

  bool operator==(const SkipMode&) const = default;

 private:
  SkipMode(Kind kind, double k) : kind_(kind), k_(k) {}
  Kind kind_;
  double k_;
};

enum class BlockKind { residual, dense, repvgg };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::residual:
      return "residual";
    case BlockKind::dense:
      return "dense";
    default:
      return "repvgg";
  }
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "residual") return BlockKind::residual;
  if (s == "dense") return BlockKind::dense;
  if (s == "repvgg") return BlockKind::repvgg;
  throw ConfigError("unrecognised block kind '" + s + "'");
}

// conv(kernel x kernel, stride 1, same padding) followed by kernel-free
// average pooling of size `pool` (1 disables it).
struct StemSpec {
  std::size_t channels = 16;
  std::size_t kernel = 3;
  std::size_t pool = 2;
  bool operator==(const StemSpec&) const = default;
};

// `stride` > 1 downsamples at the start of the stage by average pooling the
// stage input (residual/repvgg: inside the first block; dense: in the
// transition). `channels` is the block width for residual/repvgg stages and
// the transition width for dense stages.
struct StageSpec {
  std::size_t num_blocks = 1;
  BlockKind kind = BlockKind::residual;
  std::size_t channels = 16;
  std::size_t growth = 8;
  std::size_t stride = 1;
  SkipMode skip = SkipMode::full();
  bool bottleneck = false;
  bool operator==(const StageSpec&) const = default;
};

struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t resolution = 32;
  StemSpec stem;
  std::array<StageSpec, 4> stages;
  std::size_t num_classes = 20;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  bool operator==(const NetworkSpec&) const = default;

  // Stages are numbered 1..4 to match "Skip-N Removed".
  StageSpec& stage(std::size_t n) {
    if (n < 1 || n > 4) throw ConfigError("stage index must be 1..4, got " + std::to_string(n));
    return stages[n - 1];
  }
  const StageSpec& stage(std::size_t n) const { return const_cast<NetworkSpec*>(this)->stage(n); }
};

// Variant with every block of stage n set to `mode`.
inline NetworkSpec with_stage_skip(NetworkSpec spec, std::size_t n, SkipMode mode) {
  spec.stage(n).skip = mode;
  return spec;
}

// Removal of the last stage's skip connections.
inline NetworkSpec apply_rolss(const NetworkSpec& spec) { return with_stage_skip(spec, 4, SkipMode::removed()); }

// Last-stage skip connections scaled by k.
inline NetworkSpec apply_ssf(const NetworkSpec& spec, double k) {
  return with_stage_skip(spec, 4, SkipMode::scaled(k));
}

// Default desk-scale pre-activation ResNet for 32x32 inputs:
// stem 32 -> 16, stages at 16, 8, 4, 2.
inline NetworkSpec toy_resnet(std::size_t num_classes = 20, std::size_t blocks_per_stage = 1,
                              std::size_t width = 8) {
  NetworkSpec s;
  s.num_classes = num_classes;
  s.stem = StemSpec{width, 3, 2};
  const std::size_t strides[4] = {1, 2, 2, 2};
  for (std::size_t i = 0; i < 4; ++i) {
    auto& st = s.stages[i];
    st.kind = BlockKind::residual;
    st.num_blocks = blocks_per_stage;
    st.channels = width << i;
    st.stride = strides[i];
  }
  return s;
}

inline NetworkSpec toy_densenet(std::size_t num_classes = 20, std::size_t blocks_per_stage = 2,
                                std::size_t growth = 6) {
  NetworkSpec s;
  s.num_classes = num_classes;
  s.stem = StemSpec{12, 3, 2};
  const std::size_t strides[4] = {1, 2, 2, 2};
  const std::size_t widths[4] = {12, 12, 16, 20};
  for (std::size_t i = 0; i < 4; ++i) {
    auto& st = s.stages[i];
    st.kind = BlockKind::dense;
    st.num_blocks = blocks_per_stage;
    st.channels = widths[i];
    st.growth = growth;
    st.stride = strides[i];
  }
  return s;
}

inline NetworkSpec toy_repvgg(std::size_t num_classes = 20, std::size_t blocks_per_stage = 2,
                              std::size_t width = 8) {
  NetworkSpec s = toy_resnet(num_classes, blocks_per_stage, width);
  for (auto& st : s.stages) st.kind = BlockKind::repvgg;
  return s;
}

inline void validate(const NetworkSpec& s) {
  auto fail = [](const std::string& m) { throw ConfigError("network spec: " + m); };
  if (s.in_channels == 0) fail("in_channels must be positive");
  if (s.num_classes < 2) fail("num_classes must be >= 2");
  if (s.stem.channels == 0 || s.stem.kernel % 2 == 0) fail("stem needs positive channels and an odd kernel");
  if (s.stem.pool == 0) fail("stem pool must be >= 1");
  if (!(s.bn_eps > 0)) fail("bn_eps must be positive");
  if (!(s.bn_momentum > 0 && s.bn_momentum <= 1)) fail("bn_momentum must lie in (0,1]");
  std::size_t res = s.resolution;
  if (res % s.stem.pool) fail("resolution not divisible by stem pool");
  res /= s.stem.pool;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& st = s.stages[i];
    const std::string at = "stage" + std::to_string(i + 1) + ": ";
    if (st.num_blocks == 0) fail(at + "num_blocks must be >= 1");
    if (st.channels == 0) fail(at + "channels must be positive");
    if (st.stride == 0) fail(at + "stride must be >= 1");
    if (st.kind == BlockKind::dense && st.growth == 0) fail(at + "dense stages need growth > 0");
    if (st.kind == BlockKind::residual && st.bottleneck && st.channels % 4) fail(at + "bottleneck width must be divisible by 4");
    if (res % st.stride) fail(at + "spatial extent " + std::to_string(res) + " not divisible by stride");
    res /= st.stride;
    if (res == 0) fail(at + "spatial extent collapsed to zero");
  }
}

}  // namespace mirage::nn
