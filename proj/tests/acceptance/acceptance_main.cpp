// Acceptance suite: one PASS/FAIL line per criterion on stdout, supporting
// detail on stderr. Exit status is nonzero when a hard criterion fails;
// criterion 6 is directional and only counts with --strict.
//
//   acceptance_tests [--only 1,4,8] [--strict]

#include <chrono>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "mirage/autograd/decomposition.hpp"
#include "mirage/autograd/grad_check.hpp"
#include "mirage/experiment/pipeline.hpp"

using namespace mirage;
using ag::Graph;
using ag::Var;
using nn::SkipMode;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

void note(const std::string& m) { std::cerr << "    " << m << "\n"; }

nn::ModelParams<double> random_bn(nn::ModelParams<double> p, std::uint64_t seed) {
  Rng r(seed);
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".gamma")) t = Tensor<double>::uniform(t.shape(), r, 0.5, 1.5);
    if (name.ends_with(".beta") || name.ends_with(".running_mean")) t = Tensor<double>::randn(t.shape(), r, 0.3);
    if (name.ends_with(".running_var")) t = Tensor<double>::uniform(t.shape(), r, 0.5, 2.0);
  }
  return p;
}

// Weighted sum with fixed random weights so every output coordinate matters.
Var<double> project(const Var<double>& y) {
  Rng r(99);
  return ag::weighted_sum(y, Tensor<double>::randn(y.shape(), r));
}

bool exactly_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

// ---------------------------------------------------------------- 1

Outcome reparam_equivalence() {
  const auto t0 = Clock::now();
  reparam::GridConfig c64;
  const auto g64 = reparam::run_grid<double>(c64);
  reparam::GridConfig c32;
  c32.tolerance = 1e-4;
  const auto g32 = reparam::run_grid<float>(c32);
  const double dt = seconds_since(t0);
  note("float64: " + std::to_string(g64.cases.size()) + " blocks, max forward " + fmt(g64.max_forward_rel_err) +
       ", max input grad " + fmt(g64.max_input_grad_rel_err));
  note("float32: " + std::to_string(g32.cases.size()) + " blocks, max forward " + fmt(g32.max_forward_rel_err) +
       ", max input grad " + fmt(g32.max_input_grad_rel_err));
  const bool ok = g64.pass() && g32.pass() && g64.cases.size() >= 100 && g64.max_forward_rel_err <= 1e-10 &&
                  g64.max_input_grad_rel_err <= 1e-10 && g32.max_forward_rel_err <= 1e-4 &&
                  g32.max_input_grad_rel_err <= 1e-4 && dt < 60;
  return {ok, std::to_string(g64.cases.size()) + " blocks; f64 max err " +
                  fmt(std::max(g64.max_forward_rel_err, g64.max_input_grad_rel_err)) + " (<= 1e-10), f32 max err " +
                  fmt(std::max(g32.max_forward_rel_err, g32.max_input_grad_rel_err)) + " (<= 1e-4); " + fmt(dt) +
                  " s (< 60 s)"};
}

// ---------------------------------------------------------------- 2

struct FdTally {
  std::size_t checks = 0, failures = 0, coords = 0, skipped = 0;
  double worst = 0;
  std::string worst_name;

  // Single ops use the plain central form at 1e-5. Composed blocks have
  // entries near 1e-5 against outputs of order 10, where a 1e-5 step leaves
  // rounding noise near 1e-10; fourth-order differences at 1e-3 keep both
  // truncation and rounding near 1e-12.
  int default_order = 2;
  double default_eps = 1e-5;

  void run(const std::string& name, const ag::ScalarFn<double>& f, const Tensor<double>& x, double eps = 0,
           int order = 0) {
    if (order == 0) order = default_order;
    if (eps == 0) eps = default_eps;
    const auto r = ag::grad_check<double>(f, x, eps, 1e-6, {}, order);
    ++checks;
    coords += r.checked;
    skipped += r.skipped;
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = name;
    }
    if (!r.pass || r.checked == 0) {
      ++failures;
      note("gradient check failed: " + name + " rel err " + fmt(r.max_rel_err) + " at " +
           std::to_string(r.worst_index) + " (analytic " + fmt(r.worst_analytic, 6) + ", numeric " +
           fmt(r.worst_numeric, 6) + "), checked " + std::to_string(r.checked));
    }
  }
};

void check_ops(FdTally& t) {
  Rng r(77);
  const auto x4 = Tensor<double>::randn({2, 3, 4, 4}, r);
  const auto y4 = Tensor<double>::randn({2, 3, 4, 4}, r);
  const auto x5 = Tensor<double>::randn({2, 3, 5, 5}, r);
  const auto x2 = Tensor<double>::randn({3, 5}, r);
  const auto W = Tensor<double>::randn({4, 5}, r);
  const auto b = Tensor<double>::randn({4}, r);
  const auto cb = Tensor<double>::randn({2}, r);
  const auto k = Tensor<double>::randn({2, 3, 3, 3}, r);
  const auto gamma = Tensor<double>::uniform({3}, r, 0.5, 1.5);
  const auto beta = Tensor<double>::randn({3}, r);
  const auto rm = Tensor<double>::randn({3}, r);
  const auto rv = Tensor<double>::uniform({3}, r, 0.5, 2.0);
  const auto target = Tensor<double>::randn({2, 3, 4, 4}, r);
  const std::vector<std::size_t> labels{1, 4, 0};
  auto C = [](Graph<double>& g, const Tensor<double>& v) { return g.constant(v); };
  using G = Graph<double>;
  using V = Var<double>;
  t.run("add", [&](G& g, const V& v) { return project(ag::add(v, C(g, y4))); }, x4);
  t.run("sub", [&](G& g, const V& v) { return project(ag::sub(C(g, y4), v)); }, x4);
  t.run("mul", [&](G& g, const V& v) { return project(ag::mul(v, C(g, y4))); }, x4);
  t.run("scale", [&](G&, const V& v) { return project(ag::scale(v, -0.37)); }, x4);
  t.run("reshape", [&](G&, const V& v) { return project(ag::reshape(v, {6, 16})); }, x4);
  t.run("mean", [&](G&, const V& v) { return ag::mean(ag::mul(v, v)); }, x4);
  t.run("sigmoid", [&](G&, const V& v) { return project(ag::sigmoid(v)); }, x4);
  t.run("relu", [&](G&, const V& v) { return project(ag::relu(v)); }, x4);
  t.run("conv2d.input", [&](G& g, const V& v) { return project(ag::conv2d(v, C(g, k), C(g, cb), 1, 1)); }, x4);
  t.run("conv2d.strided", [&](G& g, const V& v) { return project(ag::conv2d(v, C(g, k), C(g, cb), 2, 1)); }, x5);
  t.run("conv2d.weight", [&](G& g, const V& v) { return project(ag::conv2d(C(g, x4), v, C(g, cb), 1, 0)); }, k);
  t.run("conv2d.bias", [&](G& g, const V& v) { return project(ag::conv2d(C(g, x4), C(g, k), v, 1, 1)); }, cb);
  t.run("linear.input", [&](G& g, const V& v) { return project(ag::linear(v, C(g, W), C(g, b))); }, x2);
  t.run("linear.weight", [&](G& g, const V& v) { return project(ag::linear(C(g, x2), v, C(g, b))); }, W);
  t.run("linear.bias", [&](G& g, const V& v) { return project(ag::linear(C(g, x2), C(g, W), v)); }, b);
  t.run("concat.first", [&](G& g, const V& v) { return project(ag::concat_channels(v, C(g, y4))); }, x4);
  t.run("concat.second", [&](G& g, const V& v) { return project(ag::concat_channels(C(g, y4), v)); }, x4);
  t.run("slice", [&](G&, const V& v) { return project(ag::slice_channels(v, 1, 3)); }, x4);
  t.run("avgpool", [&](G&, const V& v) { return project(ag::avgpool2d(v, 2)); }, x4);
  t.run("global_avgpool", [&](G&, const V& v) { return project(ag::global_avgpool(v)); }, x4);
  t.run("upsample2x", [&](G&, const V& v) { return project(ag::upsample2x(v)); }, x4);
  t.run("bn_train.input", [&](G& g, const V& v) { return project(ag::batch_norm_train(v, C(g, gamma), C(g, beta), 1e-5)); }, x4);
  t.run("bn_train.gamma", [&](G& g, const V& v) { return project(ag::batch_norm_train(C(g, x4), v, C(g, beta), 1e-5)); }, gamma);
  t.run("bn_train.beta", [&](G& g, const V& v) { return project(ag::batch_norm_train(C(g, x4), C(g, gamma), v, 1e-5)); }, beta);
  t.run("bn_eval.input", [&](G& g, const V& v) { return project(ag::batch_norm_eval(v, C(g, gamma), C(g, beta), rm, rv, 1e-5)); }, x4);
  t.run("bn_eval.gamma", [&](G& g, const V& v) { return project(ag::batch_norm_eval(C(g, x4), v, C(g, beta), rm, rv, 1e-5)); }, gamma);
  t.run("bn_eval.beta", [&](G& g, const V& v) { return project(ag::batch_norm_eval(C(g, x4), C(g, gamma), v, rm, rv, 1e-5)); }, beta);
  t.run("log_softmax", [&](G&, const V& v) { return project(ag::log_softmax(v)); }, x2);
  t.run("cross_entropy", [&](G&, const V& v) { return ag::cross_entropy(v, labels); }, x2);
  t.run("pick", [&](G&, const V& v) { return project(ag::pick(v, labels)); }, x2);
  t.run("row_mean_square", [&](G&, const V& v) { return project(ag::row_mean_square(v)); }, x2);
  t.run("row_rms_normalize", [&](G&, const V& v) { return project(ag::row_rms_normalize(v)); }, x2);
  t.run("mse", [&](G&, const V& v) { return ag::mse(v, target); }, x4);
  t.run("total_variation", [&](G&, const V& v) { return project(ag::total_variation(v)); }, x4);
}

// Input gradient and every trainable parameter gradient of one block.
template <class Forward>
void check_block(FdTally& t, const std::string& name, const nn::ModelParams<double>& p, const Tensor<double>& z,
                 nn::Mode mode, Forward fwd) {
  const std::string m = mode == nn::Mode::eval ? "eval" : "train";
  t.run(name + "." + m + ".input",
        [&](Graph<double>& g, const Var<double>& v) {
          nn::Context<double> ctx(g, p, mode, true);
          return project(fwd(ctx, v));
        },
        z);
  for (const auto& [pname, tensor] : p.tensors) {
    if (pname.ends_with(".running_mean") || pname.ends_with(".running_var")) continue;
    t.run(name + "." + m + "." + pname,
          [&, pname = pname](Graph<double>& g, const Var<double>& v) {
            nn::Context<double> ctx(g, p, mode, true);
            ctx.bind(pname, v);
            return project(fwd(ctx, g.constant(z)));
          },
          tensor);
  }
}

void check_blocks(FdTally& t) {
  Rng r(5);
  const auto z4 = Tensor<double>::randn({2, 4, 6, 6}, r);
  const auto z8 = Tensor<double>::randn({2, 8, 4, 4}, r);
  const auto z5 = Tensor<double>::randn({2, 4, 5, 5}, r);
  std::uint64_t seed = 1;
  for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
    for (auto skip : {SkipMode::full(), SkipMode::removed(), SkipMode::scaled(0.5)}) {
      const std::string s = skip.str();
      const auto same = nn::residual_block_plan("res", 4, 4, 1, skip);
      const auto down = nn::residual_block_plan("res", 4, 8, 2, skip);
      const auto bott = nn::residual_block_plan("res", 8, 8, 1, skip, true);
      auto res = [](const nn::BlockPlan& b) {
        return [b](nn::Context<double>& c, const Var<double>& v) { return nn::residual_block(c, b, v).out; };
      };
      check_block(t, "residual." + s, random_bn(nn::init_block<double>(same, Rng(seed)), seed), z4, mode, res(same));
      check_block(t, "residual_down." + s, random_bn(nn::init_block<double>(down, Rng(seed)), seed), z4, mode, res(down));
      check_block(t, "bottleneck." + s, random_bn(nn::init_block<double>(bott, Rng(seed)), seed), z8, mode, res(bott));

      const auto dense = nn::dense_block_plan("dense", 4, 3, skip);
      check_block(t, "dense." + s, random_bn(nn::init_block<double>(dense, Rng(seed)), seed), z4, mode,
                  [dense](nn::Context<double>& c, const Var<double>& v) { return nn::dense_block(c, dense, v); });

      const auto rep = nn::repvgg_block_plan("rep", 4, 4, 1, skip);
      check_block(t, "repvgg." + s, random_bn(nn::init_block<double>(rep, Rng(seed)), seed), z4, mode,
                  [rep](nn::Context<double>& c, const Var<double>& v) { return nn::repvgg_block(c, rep, v).out; });
      ++seed;
    }
    const auto strided = nn::repvgg_block_plan("rep", 4, 6, 1, SkipMode::full(), 2);
    check_block(t, "repvgg_strided", random_bn(nn::init_block<double>(strided, Rng(40)), 40), z5, mode,
                [strided](nn::Context<double>& c, const Var<double>& v) { return nn::repvgg_block(c, strided, v).out; });

    nn::TransitionPlan tp{"tr", 8, 4, 2};
    nn::ModelParams<double> tparams;
    Rng tr(41);
    tparams.tensors.emplace("tr.bn.gamma", Tensor<double>::uniform({8}, tr, 0.5, 1.5));
    tparams.tensors.emplace("tr.bn.beta", Tensor<double>::randn({8}, tr, 0.3));
    tparams.tensors.emplace("tr.bn.running_mean", Tensor<double>::randn({8}, tr, 0.3));
    tparams.tensors.emplace("tr.bn.running_var", Tensor<double>::uniform({8}, tr, 0.5, 2.0));
    tparams.tensors.emplace("tr.conv.weight", Tensor<double>::randn({4, 8, 1, 1}, tr, 0.5));
    check_block(t, "transition", tparams, z8, mode,
                [tp](nn::Context<double>& c, const Var<double>& v) { return nn::transition(c, tp, v); });
  }
  // Inference-time RepVGG: the merged convolution is a constant, so only the input is checked.
  const auto rep = nn::repvgg_block_plan("rep", 4, 4, 1, SkipMode::scaled(0.5));
  const auto rp = random_bn(nn::init_block<double>(rep, Rng(50)), 50);
  t.run("repvgg.inference.input",
        [&](Graph<double>& g, const Var<double>& v) {
          nn::Context<double> ctx(g, rp, nn::Mode::eval, false);
          return project(nn::repvgg_block(ctx, rep, v, false).out);
        },
        z4);
}

nn::NetworkSpec tiny(nn::NetworkSpec s) {
  s.resolution = 8;
  s.num_classes = 3;
  const std::size_t strides[4] = {1, 2, 1, 2};
  for (std::size_t i = 0; i < 4; ++i) s.stages[i].stride = strides[i];
  return s;
}

// Whole networks are checked along random directions d: the analytic
// grad . d against the difference quotient of t -> f(x + t d). Individual
// entries there routinely sit at 1e-11 (batch statistics over a few values
// cancel them), below what a difference quotient resolves, while grad . d is
// of the order of the gradient norm. The point x + t d is recorded in the
// graph as linear(t, d, x), so the probe goes through grad_check itself.
constexpr double kDirEps = 1e-5;
constexpr std::size_t kDirections = 3, kMaxDirectionTries = 24;

void run_directional(FdTally& t, const std::string& name, const ag::ScalarFn<double>& f, const Tensor<double>& x,
                     std::uint64_t seed) {
  const std::size_t n = x.size();
  const Tensor<double> base = x.reshaped({n});
  Rng r(seed);
  std::size_t done = 0;
  for (std::size_t k = 0; k < kMaxDirectionTries && done < kDirections; ++k) {
    auto d = Tensor<double>::randn({n, 1}, r);
    double norm2 = 0;
    for (double v : d.data()) norm2 += v * v;
    d = kern::scale(d, 1.0 / std::sqrt(norm2));
    const auto rep = ag::grad_check<double>(
        [&](Graph<double>& g, const Var<double>& s) {
          const auto pt = ag::linear(ag::reshape(s, {1, 1}), g.constant(d), g.constant(base));
          return f(g, ag::reshape(pt, x.shape()));
        },
        Tensor<double>({1}), kDirEps, 1e-6, {}, 4);
    if (rep.checked == 0) {  // the probe crossed a ReLU kink
      ++t.skipped;
      continue;
    }
    ++done;
    ++t.checks;
    ++t.coords;
    if (rep.max_rel_err > t.worst) {
      t.worst = rep.max_rel_err;
      t.worst_name = name;
    }
    if (!rep.pass) {
      ++t.failures;
      note("directional check failed: " + name + " rel err " + fmt(rep.max_rel_err) + " (analytic " +
           fmt(rep.worst_analytic, 8) + ", numeric " + fmt(rep.worst_numeric, 8) + ")");
    }
  }
  if (done < kDirections) {
    ++t.failures;
    note("directional check: " + name + " found only " + std::to_string(done) + " kink-free directions");
  }
}

// The networks see a 16x16 batch of four so the deepest train-mode batch
// statistics pool 16 values per channel; over two values the normalised
// output is +/-1 whatever the input and the map is degenerate.
nn::NetworkSpec net16(nn::NetworkSpec s) {
  s = tiny(std::move(s));
  s.resolution = 16;
  return s;
}

void check_networks(FdTally& t) {
  Rng r(8);
  const auto x = Tensor<double>::uniform({4, 3, 16, 16}, r, 0, 1);
  const std::pair<std::string, nn::NetworkSpec> specs[] = {
      {"resnet", net16(nn::toy_resnet(3, 1, 4))},
      {"resnet_rolss", nn::apply_rolss(net16(nn::toy_resnet(3, 1, 4)))},
      {"resnet_ssf", nn::apply_ssf(net16(nn::toy_resnet(3, 1, 4)), 0.5)},
      {"densenet", [] {
         auto s = net16(nn::toy_densenet(3, 1, 3));
         s.stem.channels = 4;
         for (auto& st : s.stages) st.channels = 4;
         return s;
       }()},
      {"repvgg", net16(nn::toy_repvgg(3, 1, 4))}};
  for (const auto& [name, spec] : specs) {
    const nn::Model m(spec);
    const auto p = random_bn(nn::build_network<double>(spec, Rng(3)), 4);
    for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
      const std::string tag = "network." + name + (mode == nn::Mode::eval ? ".eval" : ".train");
      run_directional(
          t, tag + ".input",
          [&](Graph<double>& g, const Var<double>& v) {
            nn::Context<double> ctx(g, p, mode, true, 1e-5);
            return project(nn::network_forward(ctx, m.plan, v).logits);
          },
          x, 11);
      for (const auto& [pname, tensor] : p.tensors) {
        if (pname.ends_with(".running_mean") || pname.ends_with(".running_var")) continue;
        run_directional(
            t, tag + "." + pname,
            [&, pname = pname](Graph<double>& g, const Var<double>& v) {
              nn::Context<double> ctx(g, p, mode, true, 1e-5);
              ctx.bind(pname, v);
              return project(nn::network_forward(ctx, m.plan, g.constant(x)).logits);
            },
            tensor, 12);
      }
    }
  }
}

void check_generator_and_attack(FdTally& t) {
  gen::GeneratorSpec gs;
  gs.latent_dim = 4;
  gs.resolution = 8;
  gs.base_channels = 4;
  gs.decoder_channels = {4, 3};
  gs.validate();
  const auto gp = random_bn(nn::init_params<double>(gen::decoder_params(gs), Rng(6)), 6);
  const gen::Generator<double> G{gs, gp};
  Rng r(9);
  const auto w = Tensor<double>::randn({2, 4}, r);
  t.run("generator.latent", [&](Graph<double>& g, const Var<double>& v) { return project(gen::generate(g, G, v)); }, w);
  gen::GeneratorSpec px;
  px.mode = gen::GeneratorMode::pixel;
  px.resolution = 8;
  px.validate();
  const gen::Generator<double> P{px, {}};
  t.run("generator.pixel", [&](Graph<double>& g, const Var<double>& v) { return project(gen::generate(g, P, v)); },
        Tensor<double>::randn({2, px.input_dim()}, r));

  const auto spec = tiny(nn::toy_resnet(3, 1, 4));
  const nn::Model m(spec);
  const auto p = random_bn(nn::build_network<double>(spec, Rng(3)), 4);
  const std::vector<std::size_t> y{1, 2};
  for (auto kind : {attack::LossKind::nll, attack::LossKind::logit_max}) {
    // The composed loss has components far below its largest gradient entry;
    // the fourth-order difference keeps rounding out of the comparison.
    t.run(std::string("mi_loss.") + attack::loss_kind_name(kind),
          [&](Graph<double>& g, const Var<double>& v) {
            return attack::mi_loss<double>(g, attack::classifier_target(m, p), attack::generator_fn(G), v, y, kind, 0.01)
                .total;
          },
          w, 1e-3, 4);
  }
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  FdTally t;
  check_ops(t);
  t.default_order = 4;
  t.default_eps = 1e-3;
  check_blocks(t);
  check_networks(t);
  check_generator_and_attack(t);
  const double dt = seconds_since(t0);
  note(std::to_string(t.checks) + " checks over " + std::to_string(t.coords) + " coordinates (" +
       std::to_string(t.skipped) + " probes skipped at ReLU kinks); worst " + fmt(t.worst) +
       " in " + t.worst_name);
  return {t.failures == 0 && dt < 120,
          std::to_string(t.checks - t.failures) + "/" + std::to_string(t.checks) +
              " ops, layers, blocks and networks within 1e-6 (worst " + fmt(t.worst) + "); " + fmt(dt) + " s (< 120 s)"};
}

// ---------------------------------------------------------------- 3

Outcome decomposition() {
  double worst_sum = 0, worst_scale = 0;
  bool removed_zero = true;
  std::size_t cases = 0;
  Rng r(13);
  struct Shape3 {
    std::size_t in, out, pool;
    bool bottleneck;
  };
  for (const Shape3& s : {Shape3{4, 4, 1, false}, Shape3{4, 8, 2, false}, Shape3{8, 8, 1, true}}) {
    const auto z = Tensor<double>::randn({2, s.in, 8, 8}, r);
    const auto bf = nn::residual_block_plan("blk", s.in, s.out, s.pool, SkipMode::full(), s.bottleneck);
    const auto p = random_bn(nn::init_block<double>(bf, Rng(cases + 1)), cases + 7);
    const auto up = Tensor<double>::randn({2, s.out, 8 / s.pool, 8 / s.pool}, r);
    for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
      const auto df = ag::gradient_decomposition(bf, p, z, mode, up);
      for (auto skip : {SkipMode::full(), SkipMode::removed(), SkipMode::scaled(0.2), SkipMode::scaled(0.7)}) {
        const auto b = nn::residual_block_plan("blk", s.in, s.out, s.pool, skip, s.bottleneck);
        const auto d = ag::gradient_decomposition(b, p, z, mode, up);
        worst_sum = std::max(worst_sum, kern::max_rel_diff(kern::add(d.passthrough, d.through_g), d.total));
        if (skip.is_removed()) {
          for (double v : d.passthrough.data()) removed_zero = removed_zero && v == 0.0;
        } else {
          worst_scale =
              std::max(worst_scale, kern::max_rel_diff(d.passthrough, kern::scale(df.passthrough, skip.factor())));
        }
        ++cases;
      }
    }
  }
  note(std::to_string(cases) + " cases; sum residual " + fmt(worst_sum) + ", scaling residual " + fmt(worst_scale));
  return {worst_sum <= 1e-10 && worst_scale <= 1e-12 && removed_zero,
          "passthrough + through-g vs autodiff max rel " + fmt(worst_sum) + " (<= 1e-10); Scaled(k) = k x Full within " +
              fmt(worst_scale) + "; Removed passthrough " + (removed_zero ? "exactly zero" : "NONZERO") + "; " +
              std::to_string(cases) + " cases"};
}

// ---------------------------------------------------------------- 4

struct BlockRun {
  Tensor<double> out, input_grad;
  std::map<std::string, Tensor<double>> param_grads;
};

template <class Forward>
BlockRun run_block(const nn::ModelParams<double>& p, const Tensor<double>& z, nn::Mode mode, Forward fwd) {
  Graph<double> g;
  nn::Context<double> ctx(g, p, mode, true);
  auto zv = g.leaf(z);
  auto out = fwd(ctx, zv);
  const auto grads = ag::backward(project(out));
  BlockRun r{out.value(), grads.at(zv), {}};
  for (const auto& [name, v] : ctx.bound())
    if (grads.has(v)) r.param_grads.emplace(name, grads.at(v));
  return r;
}

// Forward bitwise, input gradient and shared parameter gradients exactly equal.
bool same_run(const BlockRun& a, const BlockRun& b) {
  if (!a.out.bitwise_equal(b.out) || !exactly_equal(a.input_grad, b.input_grad)) return false;
  for (const auto& [name, t] : a.param_grads) {
    auto it = b.param_grads.find(name);
    if (it != b.param_grads.end() && !exactly_equal(t, it->second)) return false;
  }
  return true;
}

Outcome ssf_boundaries() {
  Rng r(21);
  std::size_t checks = 0, failures = 0;
  auto expect = [&](bool ok, const std::string& what) {
    ++checks;
    if (!ok) {
      ++failures;
      note("boundary identity failed: " + what);
    }
  };
  for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
    const std::string m = mode == nn::Mode::eval ? "eval" : "train";
    for (auto [in, out, pool] : {std::tuple{4, 4, 1}, std::tuple{4, 8, 2}}) {
      const auto z = Tensor<double>::randn({2, std::size_t(in), 8, 8}, r);
      auto plan = [&](SkipMode s) { return nn::residual_block_plan("blk", in, out, pool, s); };
      const auto p = random_bn(nn::init_block<double>(plan(SkipMode::scaled(0.0)), Rng(3)), 4);
      auto run = [&](SkipMode s) {
        const auto b = plan(s);
        return run_block(p, z, mode, [b](nn::Context<double>& c, const Var<double>& v) { return nn::residual_block(c, b, v).out; });
      };
      const std::string w = "additive " + std::to_string(in) + "->" + std::to_string(out) + " " + m;
      expect(same_run(run(SkipMode::scaled(1.0)), run(SkipMode::full())), w + ": scaled(1) vs full");
      expect(same_run(run(SkipMode::scaled(0.0)), run(SkipMode::removed())), w + ": scaled(0) vs removed");
    }
    const auto z = Tensor<double>::randn({2, 6, 5, 5}, r);
    const auto p = random_bn(nn::init_block<double>(nn::dense_block_plan("d", 6, 3, SkipMode::full()), Rng(5)), 6);
    auto run = [&](SkipMode s) {
      const auto b = nn::dense_block_plan("d", 6, 3, s);
      return run_block(p, z, mode, [b](nn::Context<double>& c, const Var<double>& v) { return nn::dense_block(c, b, v); });
    };
    expect(same_run(run(SkipMode::scaled(1.0)), run(SkipMode::full())), "concatenative " + m + ": scaled(1) vs full");
    expect(same_run(run(SkipMode::scaled(0.0)), run(SkipMode::removed())), "concatenative " + m + ": scaled(0) vs removed");
  }
  // Whole network: the SSF transform at k = 1 leaves the model unchanged.
  for (const auto& spec : {tiny(nn::toy_resnet(3, 1, 4)), [] {
         auto s = tiny(nn::toy_densenet(3, 1, 3));
         s.stem.channels = 4;
         for (auto& st : s.stages) st.channels = 4;
         return s;
       }()}) {
    const auto p = random_bn(nn::build_network<double>(spec, Rng(2)), 3);
    const auto x = Tensor<double>::uniform({2, 3, 8, 8}, r, 0, 1);
    const auto a = nn::forward(nn::Model(spec), p, x);
    const auto b = nn::forward(nn::Model(nn::apply_ssf(spec, 1.0)), p, x);
    expect(a.bitwise_equal(b), "network " + std::string(nn::block_kind_name(spec.stage(1).kind)) + ": ssf(1) vs full");
  }
  return {failures == 0, std::to_string(checks - failures) + "/" + std::to_string(checks) +
                             " identities (additive and concatenative, eval and train, bitwise forward in float64)"};
}

// ---------------------------------------------------------------- 5

struct TableRow {
  const char* variant;
  double acc, attacc, printed_delta;
};

struct DefenseTable {
  const char* architecture;
  const char* table;
  std::vector<TableRow> rows;  // first row is the undefended baseline
};

// ResNet defense results: the main comparison and the extended baseline comparison.
const std::vector<DefenseTable>& resnet_tables() {
  static const std::vector<DefenseTable> t = {
      {"ResNet-34", "main", {{"no_def", 94.69, 90.78, 0}, {"bido", 91.66, 81.98, 2.90}, {"rolss", 91.38, 71.86, 5.72},
                             {"ssf", 94.21, 79.79, 22.90}, {"tts", 94.40, 81.65, 31.48}}},
      {"ResNet-50", "main", {{"no_def", 94.58, 82.76, 0}, {"bido", 91.12, 58.41, 7.04}, {"rolss", 92.89, 68.44, 8.47},
                             {"ssf", 93.05, 74.79, 6.87}, {"tts", 93.56, 77.21, 5.44}}},
      {"ResNet-101", "main", {{"no_def", 94.86, 83.00, 0}, {"bido", 90.31, 67.07, 3.50}, {"rolss", 92.40, 58.68, 9.89},
                              {"ssf", 93.79, 71.06, 11.16}, {"tts", 94.16, 77.26, 8.20}}},
      {"ResNet-152", "main", {{"no_def", 95.43, 86.51, 0}, {"bido", 91.80, 58.14, 7.82}, {"rolss", 93.00, 64.98, 8.86},
                              {"ssf", 93.79, 70.71, 9.63}, {"tts", 93.97, 73.59, 8.85}}},
      {"ResNet-34", "extended", {{"no_def", 94.69, 90.78, 0}, {"mid", 91.12, 46.25, 12.47}, {"dp", 89.66, 72.19, 3.70},
                                 {"bido", 91.66, 81.98, 2.90}, {"rolss", 91.38, 71.86, 5.72},
                                 {"rolss_plus", 93.49, 65.78, 20.83}, {"ssf", 94.21, 79.79, 22.90},
                                 {"tts", 94.40, 81.65, 31.48}}},
      {"ResNet-50", "extended", {{"no_def", 94.58, 82.76, 0}, {"mid", 89.62, 66.82, 3.21}, {"dp", 89.97, 68.89, 3.01},
                                 {"bido", 91.12, 58.41, 7.04}, {"rolss", 92.89, 68.44, 8.47},
                                 {"ssf", 93.05, 74.79, 5.21}, {"rolss_plus", 92.51, 64.50, 8.82},
                                 {"tts", 93.56, 77.21, 5.44}}},
      {"ResNet-101", "extended", {{"no_def", 94.86, 83.00, 0}, {"mid", 90.85, 52.61, 7.58}, {"dp", 91.36, 74.88, 2.32},
                                  {"bido", 90.31, 67.07, 3.50}, {"rolss", 92.40, 58.68, 9.89},
                                  {"rolss_plus", 91.05, 52.74, 7.94}, {"ssf", 93.79, 71.06, 11.16},
                                  {"tts", 94.16, 77.26, 8.20}}},
      {"ResNet-152", "extended", {{"no_def", 95.43, 86.51, 0}, {"mid", 91.56, 66.18, 5.25}, {"dp", 91.61, 75.33, 2.93},
                                  {"bido", 91.80, 58.14, 7.82}, {"rolss", 93.00, 64.98, 8.86},
                                  {"rolss_plus", 92.19, 54.79, 9.79}, {"ssf", 93.79, 70.71, 9.63},
                                  {"tts", 93.97, 73.59, 8.85}}},
      {"ResNet-101", "combined", {{"no_def", 94.86, 83.00, 0}, {"bido", 90.31, 67.07, 3.50},
                                  {"bido_rolss", 89.13, 41.44, 7.25}}},
  };
  return t;
}

// The main table prints 6.87 for ResNet-50 SSF, but its own pair
// (93.05, 74.79) against (94.58, 82.76) gives 5.21, which is what the
// extended table prints for the identical pair. No arithmetic reproduces
// 6.87 from that row, so it is checked against the extended-table value.
bool is_known_misprint(const DefenseTable& t, const TableRow& r) {
  return std::string(t.architecture) == "ResNet-50" && std::string(t.table) == "main" &&
         std::string(r.variant) == "ssf" && r.printed_delta == 6.87;
}

Outcome delta_reproduction() {
  std::size_t ok = 0, total = 0, conflicts = 0;
  for (const auto& t : resnet_tables()) {
    std::vector<exp::DefenseRow> rows;
    for (const auto& r : t.rows) rows.push_back({r.variant, {r.acc, r.attacc}});
    // Through the report path: render, then read the delta column back.
    const auto text = exp::defense_table(rows).render("acceptance", exp::tool_version);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      std::getline(in, line);
      const std::string cell = line.substr(line.rfind(',') + 1);
      if (i == 0) {
        total++;
        ok += cell == "NA";
        continue;
      }
      const auto& r = t.rows[i];
      const double got = std::stod(cell);
      double want = r.printed_delta;
      if (is_known_misprint(t, r)) {
        ++conflicts;
        want = 5.21;
        note(std::string(t.architecture) + " " + t.table + " " + r.variant + ": printed 6.87, pair gives " + cell +
             " (matches the extended-table print 5.21 of the same pair)");
      }
      ++total;
      if (std::abs(got - want) <= 0.01 + 1e-9)
        ++ok;
      else
        note(std::string("delta mismatch: ") + t.architecture + " " + t.table + " " + r.variant + " got " + cell +
             " printed " + fmt(want, 4));
    }
  }
  // Ratio undefined when accuracy does not drop.
  const bool na_rule = !eval::delta_tradeoff({94.0, 80.0}, {94.0, 70.0}) &&
                       !eval::delta_tradeoff({94.0, 80.0}, {93.995, 70.0}) &&
                       eval::delta_tradeoff({94.0, 80.0}, {93.98, 70.0}).has_value();
  return {ok == total && na_rule, std::to_string(ok) + "/" + std::to_string(total) +
                                      " printed values reproduced within 0.01 (" + std::to_string(conflicts) +
                                      " inconsistent print resolved by its duplicate row); NA rule " +
                                      (na_rule ? "holds" : "BROKEN")};
}

// ---------------------------------------------------------------- 6 and 7

struct SeedRun {
  double full_acc, full_attacc, rolss_acc, rolss_attacc, tts_acc;
};

std::vector<SeedRun> g_seed_runs;  // shared by criteria 6 and 7

const std::vector<SeedRun>& seed_runs(double* elapsed) {
  if (!g_seed_runs.empty()) return g_seed_runs;
  const auto t0 = Clock::now();
  const auto base = exp::default_config();
  const auto bench = exp::prepare_bench(base, [](const std::string& m) { note(m); });
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto c = exp::apply_overrides(base, {"seed=" + std::to_string(s)});
    auto train = [&](const nn::NetworkSpec& spec) {
      return train::train_classifier<float>(spec, bench.split.priv_train, nullptr, c.train).params;
    };
    const auto full_p = train(c.target);
    const auto rolss_spec = nn::apply_rolss(c.target);
    const auto rolss_p = train(rolss_spec);
    const auto full = exp::measure(c, bench, nn::Model(c.target), full_p);
    const auto rolss = exp::measure(c, bench, nn::Model(rolss_spec), rolss_p);
    train::TTSConfig t{c.tts_m, c.tts_n, c.train};
    const auto tts_p = train::tts_train<float>(c.target, bench.split.priv_train, nullptr, t).params;
    const double tts_acc = eval::natural_accuracy(nn::Model(rolss_spec), tts_p, bench.split.priv_test);
    g_seed_runs.push_back({full.natural_acc, full.attack_acc, rolss.natural_acc, rolss.attack_acc, tts_acc});
    note("seed " + std::to_string(s) + ": full acc " + io::fixed2(full.natural_acc) + " attacc " +
         io::fixed2(full.attack_acc) + " lik " + io::fixed2(full.mean_likelihood) + " | rolss acc " +
         io::fixed2(rolss.natural_acc) + " attacc " + io::fixed2(rolss.attack_acc) + " lik " +
         io::fixed2(rolss.mean_likelihood) + " | tts acc " + io::fixed2(tts_acc) + " (" + fmt(seconds_since(t0), 4) +
         " s)");
  }
  *elapsed = seconds_since(t0);
  return g_seed_runs;
}

double g_seed_seconds = 0;

Outcome directional_trend() {
  const auto& runs = seed_runs(&g_seed_seconds);
  double acc_f = 0, acc_r = 0, att_f = 0, att_r = 0;
  for (const auto& r : runs) {
    acc_f += r.full_acc / 3;
    acc_r += r.rolss_acc / 3;
    att_f += r.full_attacc / 3;
    att_r += r.rolss_attacc / 3;
  }
  const double gap = att_f - att_r;
  const bool matched = std::abs(acc_f - acc_r) <= 2.0;
  return {matched && gap >= 5.0,
          "3-seed mean acc full " + io::fixed2(acc_f) + " vs rolss " + io::fixed2(acc_r) + " (within 2: " +
              (matched ? "yes" : "no") + "); AttAcc full " + io::fixed2(att_f) + " vs rolss " + io::fixed2(att_r) +
              ", gap " + io::fixed2(gap) + " pp (need >= 5); " + fmt(g_seed_seconds, 4) + " s"};
}

Outcome tts_recovery() {
  const auto& runs = seed_runs(&g_seed_seconds);
  double tts = 0, rolss = 0;
  for (const auto& r : runs) {
    tts += r.tts_acc / 3;
    rolss += r.rolss_acc / 3;
  }
  return {tts >= rolss, "3-seed mean acc TTS(2,18) " + io::fixed2(tts) + " vs RoLSS(20) " + io::fixed2(rolss)};
}

// ---------------------------------------------------------------- 8

Outcome determinism_and_formats() {
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  const auto dir = std::filesystem::temp_directory_path() / "mirage_acceptance";
  std::filesystem::create_directories(dir);

  // Checkpoints, both dtypes.
  {
    const auto spec = nn::toy_resnet();
    const auto pf = nn::build_network<float>(spec, Rng(1));
    const auto pd = random_bn(nn::build_network<double>(spec, Rng(2)), 3);
    const auto f = (dir / "f32.skmi").string(), d = (dir / "f64.skmi").string();
    io::save_params(pf, f);
    io::save_params(pd, d);
    expect(io::load_params<float>(f).bitwise_equal(pf), "float32 checkpoint round trip");
    expect(io::load_params<double>(d).bitwise_equal(pd), "float64 checkpoint round trip");
    expect(io::encode(io::load(f)) == data::idx_detail::read_file(f), "checkpoint re-encode");
    auto bytes = data::idx_detail::read_file(f);
    bytes[0] ^= 0xff;
    bool rejected = false;
    try {
      io::decode(bytes);
    } catch (const FormatError&) {
      rejected = true;
    }
    expect(rejected, "corrupt magic rejected");
  }

  // Same config, fresh runs, identical CSV bytes.
  {
    const auto c = exp::apply_overrides(
        exp::default_config(),
        {"data.total_ids=4", "data.private_ids=2", "data.per_id=8", "generator_train.epochs=1",
         "generator_train.batch_size=4", "train.epochs=2", "train.batch_size=4", "sweep_checkpoints=[1,2]",
         "attack.iterations=4", "attack.candidates=2"});
    auto render = [&] {
      const auto b = exp::prepare_bench(c);
      return exp::run_sweep(c, b).render(exp::config_hash(c), exp::tool_version) +
             exp::run_defend(c, b).render(exp::config_hash(c), exp::tool_version);
    };
    const auto a = render(), b = render();
    expect(a == b, "repeated sweep and defend reports differ");
    expect(io::parse_csv_header(a).config_hash == exp::config_hash(c), "report header hash");
  }

  // IDX fixture with hand-written bytes.
  {
    std::vector<std::uint8_t> img = {0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255, 1, 128, 254, 17};
    std::vector<std::uint8_t> lab = {0, 0, 0x08, 1, 0, 0, 0, 2, 1, 0};
    const auto s = data::idx_to_set(img, lab);
    bool exact = s.images.shape() == Shape{2, 1, 2, 2} && s.labels == std::vector<std::size_t>{1, 0};
    for (std::size_t i = 0; i < 8 && exact; ++i) exact = s.images[i] == static_cast<float>(img[16 + i]) / 255.0f;
    expect(exact, "IDX pixel values");
  }

  // Private and public class sets never meet.
  {
    std::size_t protocols = 0;
    bool disjoint = true;
    for (std::size_t total : {3, 5, 10, 30}) {
      const auto set = data::synth_identities(total, 3, 32, Rng(total));
      for (std::size_t priv = 1; priv < total; ++priv)
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
          const auto sp = data::split_private_public(set, data::default_protocol(total, priv, seed));
          std::set<std::size_t> a(sp.priv_train.source_class.begin(), sp.priv_train.source_class.end());
          std::set<std::uint64_t> ids(sp.priv_train.sample_ids.begin(), sp.priv_train.sample_ids.end());
          ids.insert(sp.priv_test.sample_ids.begin(), sp.priv_test.sample_ids.end());
          for (auto k : sp.pub.source_class) disjoint = disjoint && !a.count(k);
          for (auto id : sp.pub.sample_ids) disjoint = disjoint && !ids.count(id);
          ++protocols;
        }
    }
    expect(disjoint, "private/public overlap");
    note(std::to_string(protocols) + " generated protocols checked for private/public overlap");
  }
  std::filesystem::remove_all(dir);
  std::string d = "checkpoint round trip, report reproducibility, IDX pixels, split disjointness";
  for (const auto& f : failed) d += "; FAILED " + f;
  return {failed.empty(), d};
}

struct Criterion {
  int id;
  const char* name;
  bool soft;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  bool strict = false;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--strict")) {
      strict = true;
    } else if (!std::strcmp(argv[i], "--only") && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance_tests [--only 1,2,...] [--strict]\n";
      return 2;
    }
  }
  const Criterion criteria[] = {
      {1, "reparameterisation equivalence", false, reparam_equivalence},
      {2, "gradient correctness", false, gradient_checks},
      {3, "gradient decomposition", false, decomposition},
      {4, "scaled-skip boundary identities", false, ssf_boundaries},
      {5, "defense delta arithmetic", false, delta_reproduction},
      {6, "last-stage skip removal lowers attack accuracy", true, directional_trend},
      {7, "two-stage training recovers accuracy", false, tts_recovery},
      {8, "determinism and formats", false, determinism_and_formats},
  };
  int hard_failures = 0, soft_failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::cerr << "criterion " << c.id << ": " << c.name << "\n";
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) (c.soft ? soft_failures : hard_failures)++;
    std::cout << "[" << c.id << "] " << (o.pass ? "PASS" : "FAIL") << (c.soft ? " (soft)" : "") << "  " << c.name
              << ": " << o.detail << std::endl;
  }
  return hard_failures > 0 || (strict && soft_failures > 0) ? 1 : 0;
}
