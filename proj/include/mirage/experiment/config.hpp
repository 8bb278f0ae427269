#pragma once

// Experiment configuration, its JSON form and the config hash stamped into
// every artifact.

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mirage/attack/attack.hpp"
#include "mirage/eval/metrics.hpp"

#ifndef MIRAGE_VERSION
#define MIRAGE_VERSION "0.1.0"
#endif

namespace mirage::exp {

using nlohmann::json;

inline constexpr const char* tool_version = MIRAGE_VERSION;

struct DataConfig {
  std::size_t total_ids = 30;
  std::size_t private_ids = 20;
  std::size_t per_id = 50;
  std::size_t resolution = 32;
  std::size_t channels = 3;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  // When both are set, images come from IDX files instead of the synthesiser.
  std::string idx_images;
  std::string idx_labels;
  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  DataConfig data;
  nn::NetworkSpec target = nn::toy_resnet();
  train::TrainConfig train;
  std::size_t tts_m = 2;
  std::size_t tts_n = 18;
  gen::GeneratorSpec generator;
  train::TrainConfig generator_train = [] {
    train::TrainConfig c;
    c.epochs = 30;
    c.batch_size = 32;
    c.optimizer.lr = 2e-3;
    c.schedule.milestones = {};
    c.seed = 1;
    return c;
  }();
  attack::AttackConfig attack;
  eval::CandidateScoring attack_scoring = eval::CandidateScoring::best;
  nn::NetworkSpec eval_model = nn::toy_resnet(20, 2, 8);
  std::uint64_t eval_seed = 1000;
  double ssf_k = 0.5;
  bool include_skip3 = false;
  std::vector<std::size_t> sweep_checkpoints{10, 20};  // epochs after which each variant is attacked
  std::string output_dir = "out";
  std::uint64_t seed = 0;  // target training and attack seed

  // Resolves dependent fields: class counts, generator output shape.
  void normalise() {
    target.num_classes = data.private_ids;
    eval_model.num_classes = data.private_ids;
    target.in_channels = eval_model.in_channels = data.channels;
    target.resolution = eval_model.resolution = data.resolution;
    generator.out_channels = data.channels;
    generator.resolution = data.resolution;
    if (generator.mode == gen::GeneratorMode::decoder && !generator.decoder_channels.empty())
      generator.decoder_channels.back() = data.channels;
    train.seed = seed;
    attack.seed = seed;
  }

  void validate() const {
    if (data.private_ids < 2 || data.private_ids >= data.total_ids)
      throw ConfigError("config: need 2 <= private_ids < total_ids");
    if (!(ssf_k >= 0 && ssf_k <= 1)) throw ConfigError("config: ssf_k must lie in [0,1]");
    for (auto e : sweep_checkpoints)
      if (e == 0 || e > train.epochs) throw ConfigError("config: sweep checkpoint " + std::to_string(e) + " outside 1..epochs");
    nn::validate(target);
    nn::validate(eval_model);
    generator.validate();
    train.validate();
    attack.validate();
  }
};

}  // namespace mirage::exp

// ---------------------------------------------------------------- JSON

namespace mirage::nn {

inline void to_json(nlohmann::json& j, const SkipMode& s) { j = s.str(); }
inline void from_json(const nlohmann::json& j, SkipMode& s) { s = SkipMode::parse(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, const BlockKind& k) { j = block_kind_name(k); }
inline void from_json(const nlohmann::json& j, BlockKind& k) { k = parse_block_kind(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StemSpec, channels, kernel, pool)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StageSpec, num_blocks, kind, channels, growth, stride, skip, bottleneck)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NetworkSpec, in_channels, resolution, stem, stages, num_classes, bn_eps,
                                                bn_momentum)

}  // namespace mirage::nn

namespace mirage::train {

inline void to_json(nlohmann::json& j, const OptimizerConfig::Kind& k) {
  j = k == OptimizerConfig::Kind::sgd ? "sgd" : "adam";
}
inline void from_json(const nlohmann::json& j, OptimizerConfig::Kind& k) {
  const auto s = j.get<std::string>();
  if (s == "sgd")
    k = OptimizerConfig::Kind::sgd;
  else if (s == "adam")
    k = OptimizerConfig::Kind::adam;
  else
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, lr, momentum, beta1, beta2, eps, weight_decay)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LrSchedule, milestones, factor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Augmentation, horizontal_flip, jitter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, optimizer, schedule, augmentation, seed)

}  // namespace mirage::train

namespace mirage::gen {

inline void to_json(nlohmann::json& j, const GeneratorMode& m) { j = generator_mode_name(m); }
inline void from_json(const nlohmann::json& j, GeneratorMode& m) { m = parse_generator_mode(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorSpec, mode, latent_dim, out_channels, resolution, base_channels,
                                                decoder_channels, latent_noise)

}  // namespace mirage::gen

namespace mirage::attack {

inline void to_json(nlohmann::json& j, const LossKind& k) { j = loss_kind_name(k); }
inline void from_json(const nlohmann::json& j, LossKind& k) { k = parse_loss_kind(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, const StepRule& r) { j = step_rule_name(r); }
inline void from_json(const nlohmann::json& j, StepRule& r) { r = parse_step_rule(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttackConfig, loss, iterations, step_size, optimizer, candidates,
                                                prior_weight, seed, max_batch_rows)

}  // namespace mirage::attack

namespace mirage::eval {

inline void to_json(nlohmann::json& j, const CandidateScoring& s) { j = candidate_scoring_name(s); }
inline void from_json(const nlohmann::json& j, CandidateScoring& s) { s = parse_candidate_scoring(j.get<std::string>()); }

}  // namespace mirage::eval

namespace mirage::exp {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, total_ids, private_ids, per_id, resolution, channels,
                                                train_fraction, seed, idx_images, idx_labels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, data, target, train, tts_m, tts_n, generator,
                                                generator_train, attack, attack_scoring, eval_model, eval_seed, ssf_k,
                                                include_skip3, sweep_checkpoints, output_dir, seed)

// Canonical text: keys sorted, no whitespace. The output directory is left
// out so relocating a run does not change its identity.
inline std::string canonical_dump(const ExperimentConfig& c) {
  json j = c;
  j.erase("output_dir");
  return j.dump();
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(canonical_dump(c))); }

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline void check_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("config: unknown key '" + path + it.key() + "'");
    if (it.value().is_object() && known[it.key()].is_object()) check_keys(it.value(), known[it.key()], path + it.key() + ".");
  }
}

inline ExperimentConfig config_from_json(const json& j) {
  check_keys(j, json(ExperimentConfig{}), "");
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.normalise();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError("config '" + path + "': " + e.what(), e.byte);
  }
  return config_from_json(j);
}

inline ExperimentConfig default_config() {
  ExperimentConfig c;
  c.normalise();
  return c;
}

// Applies "a.b.c=value" overrides; the value is parsed as JSON when it can
// be, otherwise taken as a string.
inline ExperimentConfig apply_overrides(const ExperimentConfig& base, const std::vector<std::string>& sets) {
  json j = base;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' must look like key.path=value");
    const std::string key = s.substr(0, eq), val = s.substr(eq + 1);
    json v;
    try {
      v = json::parse(val);
    } catch (const json::parse_error&) {
      v = val;
    }
    json::json_pointer ptr("/" + [&] {
      std::string p = key;
      std::replace(p.begin(), p.end(), '.', '/');
      return p;
    }());
    if (!j.contains(ptr)) throw ConfigError("override: unknown key '" + key + "'");
    j[ptr] = v;
  }
  return config_from_json(j);
}

}  // namespace mirage::exp
