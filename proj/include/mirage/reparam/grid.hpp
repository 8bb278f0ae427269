#pragma once

// Seeded RepVGG blocks across a shape grid, each merged and verified.

#include <set>

#include "mirage/reparam/fold.hpp"
#include "mirage/reparam/verify.hpp"

namespace mirage::reparam {

struct GridConfig {
  std::vector<std::size_t> channels{4, 8, 16};
  std::vector<std::size_t> sizes{8, 16};  // H = W
  std::size_t blocks = 100;
  std::size_t samples = 2;  // random inputs per block
  std::size_t batch = 2;
  double tolerance = 1e-10;
  std::uint64_t seed = 0;
  std::set<std::size_t> corrupt;  // block indices whose merged bias is deliberately shifted
};

struct BlockCase {
  std::size_t index = 0;
  std::size_t channels = 0;
  std::size_t size = 0;
  nn::SkipMode skip = nn::SkipMode::full();
  bool corrupted = false;
  ReparamReport report;
};

struct GridReport {
  std::vector<BlockCase> cases;
  double max_forward_rel_err = 0;
  double max_input_grad_rel_err = 0;
  std::size_t failures = 0;
  bool pass() const { return failures == 0 && !cases.empty(); }
};

// Non-trivial BN statistics and affine terms; a fresh init has mean 0, var 1.
template <Scalar T>
void randomize_bn(nn::ModelParams<T>& p, Rng& r) {
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".gamma")) t = Tensor<T>::uniform(t.shape(), r, 0.5, 1.5);
    if (name.ends_with(".beta") || name.ends_with(".running_mean")) t = Tensor<T>::randn(t.shape(), r, 0.3);
    if (name.ends_with(".running_var")) t = Tensor<T>::uniform(t.shape(), r, 0.5, 2.0);
  }
}

// Block i uses channels[i % |C|], sizes[(i / |C|) % |H|], and cycles its skip
// through full, scaled(0.5) and removed every |C| * |H| blocks.
template <Scalar T>
GridReport run_grid(const GridConfig& cfg) {
  if (cfg.channels.empty() || cfg.sizes.empty() || cfg.samples == 0 || cfg.batch == 0)
    throw ConfigError("reparam grid: channels, sizes, samples and batch must be non-empty");
  const nn::SkipMode skips[3] = {nn::SkipMode::full(), nn::SkipMode::scaled(0.5), nn::SkipMode::removed()};
  const std::size_t nc = cfg.channels.size(), cell = nc * cfg.sizes.size();
  const Rng root(cfg.seed);
  GridReport g;
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    BlockCase bc;
    bc.index = i;
    bc.channels = cfg.channels[i % nc];
    bc.size = cfg.sizes[(i / nc) % cfg.sizes.size()];
    bc.skip = skips[(i / cell) % 3];
    bc.corrupted = cfg.corrupt.count(i) != 0;
    const auto plan = nn::repvgg_block_plan("rep", bc.channels, bc.channels, 1, bc.skip);
    Rng r = root.split("block").split(static_cast<std::uint64_t>(i));
    auto params = nn::init_block<T>(plan, r);
    randomize_bn(params, r);
    const T eps = T(1e-5);
    auto merged = merge_repvgg_block(RepvggBranches<T>::from_params(params, "rep", eps, static_cast<T>(bc.skip.factor())));
    if (bc.corrupted) merged.bias[0] += T(1);
    bc.report = verify_equivalence(plan, params, merged, cfg.samples, r, cfg.tolerance, bc.size, bc.size, cfg.batch, eps);
    g.max_forward_rel_err = std::max(g.max_forward_rel_err, bc.report.max_forward_rel_err);
    g.max_input_grad_rel_err = std::max(g.max_input_grad_rel_err, bc.report.max_input_grad_rel_err);
    g.failures += !bc.report.pass;
    g.cases.push_back(std::move(bc));
  }
  return g;
}

}  // namespace mirage::reparam
