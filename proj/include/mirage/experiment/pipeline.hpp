#pragma once

// End-to-end studies: data, public-only generator, evaluation model, target
// variants, attacks and metrics.

#include <filesystem>
#include <functional>

#include "mirage/data/idx.hpp"
#include "mirage/data/split.hpp"
#include "mirage/experiment/config.hpp"
#include "mirage/io/checkpoint.hpp"
#include "mirage/io/report.hpp"
#include "mirage/reparam/grid.hpp"

namespace mirage::exp {

// Progress lines; defaults to silence.
using Log = std::function<void(const std::string&)>;

inline data::LabeledImageSet load_dataset(const DataConfig& d) {
  if (!d.idx_images.empty() || !d.idx_labels.empty()) {
    if (d.idx_images.empty() || d.idx_labels.empty())
      throw ConfigError("data: idx_images and idx_labels must be given together");
    return data::load_idx(d.idx_images, d.idx_labels);
  }
  data::SynthOptions o;
  o.channels = d.channels;
  return data::synth_identities(d.total_ids, d.per_id, d.resolution, Rng(d.seed), o);
}

inline data::SplitProtocol protocol_for(const DataConfig& d, std::size_t total_classes) {
  auto p = data::default_protocol(total_classes, d.private_ids, d.seed);
  p.train_fraction = d.train_fraction;
  return p;
}

inline data::PrivPubSplit prepare_split(const ExperimentConfig& c) {
  const auto set = load_dataset(c.data);
  return data::split_private_public(set, protocol_for(c.data, set.num_classes));
}

// Generator training with the data-protocol audit: every consumed id must
// come from the public split, none from either private split.
inline gen::GeneratorTrainResult<float> train_public_generator(const ExperimentConfig& c, const data::PrivPubSplit& s) {
  auto r = gen::train_generator<float>(c.generator, s.pub, c.generator_train);
  const std::set<std::uint64_t> pub(s.pub.sample_ids.begin(), s.pub.sample_ids.end());
  for (auto id : r.consumed_ids)
    if (!pub.count(id)) throw ProtocolError("generator training read sample " + std::to_string(id) + " outside the public split");
  for (const auto* part : {&s.priv_train, &s.priv_test})
    for (auto id : part->sample_ids)
      if (r.consumed_ids.count(id))
        throw ProtocolError("generator training read private sample " + std::to_string(id));
  return r;
}

struct Classifier {
  nn::Model model;
  nn::ModelParams<float> params;
};

inline Classifier train_eval_model(const ExperimentConfig& c, const data::PrivPubSplit& s) {
  if (c.eval_model == c.target) throw ConfigError("config: the evaluation model must differ from the target spec");
  auto tc = c.train;
  tc.seed = c.eval_seed;
  auto r = train::train_classifier<float>(c.eval_model, s.priv_train, nullptr, tc);
  return {nn::Model(c.eval_model), std::move(r.params)};
}

// Knowledge shared by every target in a study.
struct Bench {
  data::PrivPubSplit split;
  gen::Generator<float> generator;
  Classifier eval;
  std::vector<Tensor<float>> private_features;  // per private id: eval-model features of its training images
  double generator_mse = 0;
};

// Hash of the fields the shared bench depends on; target and attack settings
// are excluded so one bench serves every target variant.
inline std::string bench_hash(const ExperimentConfig& c) {
  json j = c;
  json k{{"data", j["data"]},           {"generator", j["generator"]}, {"generator_train", j["generator_train"]},
         {"eval_model", j["eval_model"]}, {"eval_seed", j["eval_seed"]}, {"train", j["train"]}};
  k["train"].erase("seed");
  return hex64(fnv1a64(k.dump()));
}

// With a cache directory, the generator and evaluation model are stored there
// and reused when their bench hash matches.
inline Bench prepare_bench(const ExperimentConfig& c, const Log& log = {}, const std::string& cache_dir = "") {
  auto split = prepare_split(c);
  if (log) log("data: " + std::to_string(split.priv_train.size()) + " private train, " +
               std::to_string(split.priv_test.size()) + " private test, " + std::to_string(split.pub.size()) + " public");
  const std::string key = bench_hash(c);
  const auto gen_path = (std::filesystem::path(cache_dir) / ("generator_" + key + ".skmi")).string();
  const auto eval_path = (std::filesystem::path(cache_dir) / ("eval_model_" + key + ".skmi")).string();
  std::optional<gen::Generator<float>> generator;
  std::optional<Classifier> ev;
  double mse = std::numeric_limits<double>::quiet_NaN();
  if (!cache_dir.empty() && std::filesystem::exists(gen_path) && std::filesystem::exists(eval_path)) {
    generator = gen::Generator<float>{c.generator, io::load_params<float>(gen_path)};
    if (c.generator.mode == gen::GeneratorMode::decoder) nn::check_integrity(gen::decoder_params(c.generator), generator->params);
    ev = Classifier{nn::Model(c.eval_model), io::load_params<float>(eval_path)};
    nn::check_integrity(c.eval_model, ev->params);
    if (log) log("bench: reusing cached generator and evaluation model " + key);
  } else {
    auto g = train_public_generator(c, split);
    mse = g.final_mse;
    if (log) log("generator: reconstruction mse " + io::shortest(g.initial_mse) + " -> " + io::shortest(g.final_mse));
    generator = std::move(g.generator);
    ev = train_eval_model(c, split);
    if (!cache_dir.empty()) {
      std::filesystem::create_directories(cache_dir);
      io::save_params(generator->params, gen_path, {{"bench_hash", key}});
      io::save_params(ev->params, eval_path, {{"bench_hash", key}});
    }
  }
  if (log) log("eval model: test accuracy " + io::fixed2(eval::natural_accuracy(ev->model, ev->params, split.priv_test)));
  std::vector<Tensor<float>> feats;
  for (std::size_t k = 0; k < split.priv_train.num_classes; ++k) {
    const auto rows = split.priv_train.rows_of_class(k);
    const auto sub = split.priv_train.subset(rows);
    feats.push_back(nn::forward_chunked(ev->model, ev->params, sub.images, true));
  }
  return {std::move(split), std::move(*generator), std::move(*ev), std::move(feats), mse};
}

inline std::vector<std::size_t> private_ids(const Bench& b) {
  std::vector<std::size_t> ids(b.split.priv_train.num_classes);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

// Accuracy on the private test split, then the attack on every private id.
inline eval::MetricsReport measure(const ExperimentConfig& c, const Bench& b, const nn::Model& m,
                                   const nn::ModelParams<float>& p) {
  eval::MetricsReport r;
  r.natural_acc = eval::natural_accuracy(m, p, b.split.priv_test);
  const auto ids = private_ids(b);
  const auto res = attack::attack_all<float>(m, p, b.generator, ids, c.attack);
  if (!res.failures.empty())
    throw attack::AttackError("attack failed for " + std::to_string(res.failures.size()) + " ids, first: id " +
                              std::to_string(res.failures[0].id) + ": " + res.failures[0].message);
  const auto recons = attack::stack_reconstructions(res);
  if (c.attack_scoring == eval::CandidateScoring::best) {
    r.attack_acc = eval::attack_accuracy(res.ids(), recons, b.eval.model, b.eval.params);
  } else {
    // Every surviving candidate counts once; failed candidates are not images of anything.
    std::vector<std::size_t> ids;
    std::vector<float> pixels;
    for (const auto& e : res.entries) {
      const std::size_t per = e.candidate_reconstructions.size() / e.candidate_failed.size();
      for (std::size_t k = 0; k < e.candidate_failed.size(); ++k) {
        if (e.candidate_failed[k]) continue;
        ids.push_back(e.id);
        const float* row = e.candidate_reconstructions.ptr() + k * per;
        pixels.insert(pixels.end(), row, row + per);
      }
    }
    Shape s = recons.shape();
    s[0] = ids.size();
    r.attack_acc = eval::attack_accuracy(ids, Tensor<float>(s, std::move(pixels)), b.eval.model, b.eval.params);
  }
  const auto feats = nn::forward_chunked(b.eval.model, b.eval.params, recons, true);
  std::vector<Tensor<float>> priv;
  for (auto id : res.ids()) priv.push_back(b.private_features.at(id));
  r.knn_dist = eval::knn_dist(feats, priv);
  const auto lik = res.likelihoods();
  double s = 0;
  for (double v : lik) s += v;
  r.mean_likelihood = s / static_cast<double>(lik.size());
  r.likelihood_histogram = eval::likelihood_histogram(lik);
  return r;
}

// ---------------------------------------------------------------- sweep

struct SweepVariant {
  std::string name;
  nn::NetworkSpec spec;
};

inline std::vector<SweepVariant> sweep_variants(const ExperimentConfig& c) {
  std::vector<SweepVariant> v{{"full", c.target}};
  for (std::size_t n : {1, 2, 3, 4}) {
    if (n == 3 && !c.include_skip3) continue;
    v.push_back({"skip" + std::to_string(n), nn::with_stage_skip(c.target, n, nn::SkipMode::removed())});
  }
  return v;
}

// Target architecture by variant name: full, rolss, ssf (with ssf_k), skip1..skip4.
inline nn::NetworkSpec variant_spec(const ExperimentConfig& c, const std::string& name) {
  if (name == "full") return c.target;
  if (name == "rolss") return nn::apply_rolss(c.target);
  if (name == "ssf") return nn::apply_ssf(c.target, c.ssf_k);
  if (name.size() == 5 && name.rfind("skip", 0) == 0 && name[4] >= '1' && name[4] <= '4')
    return nn::with_stage_skip(c.target, static_cast<std::size_t>(name[4] - '0'), nn::SkipMode::removed());
  throw ConfigError("unknown variant '" + name + "' (expected full, rolss, ssf or skip1..skip4)");
}

inline io::CsvTable sweep_table() {
  return io::CsvTable({"variant", "epoch", "natural_acc", "attack_acc", "knn_dist", "mean_likelihood"});
}

inline void add_metrics_row(io::CsvTable& t, std::vector<std::string> prefix, const eval::MetricsReport& r) {
  prefix.push_back(io::fixed2(r.natural_acc));
  prefix.push_back(io::fixed2(r.attack_acc));
  prefix.push_back(io::fixed2(r.knn_dist));
  prefix.push_back(io::fixed2(r.mean_likelihood));
  t.add(std::move(prefix));
}

// Every variant is trained once; params captured after each checkpoint epoch
// are attacked. A failing variant is reported as a row of NA values.
inline io::CsvTable run_sweep(const ExperimentConfig& c, const Bench& b, const Log& log = {}) {
  auto table = sweep_table();
  for (const auto& v : sweep_variants(c)) {
    std::vector<std::pair<std::size_t, nn::ModelParams<float>>> snaps;
    try {
      train::train_classifier<float>(v.spec, b.split.priv_train, nullptr, c.train, std::nullopt,
                                     [&](const train::EpochRecord& rec, const nn::ModelParams<float>& p) {
                                       const std::size_t e = rec.epoch + 1;
                                       if (std::find(c.sweep_checkpoints.begin(), c.sweep_checkpoints.end(), e) !=
                                           c.sweep_checkpoints.end())
                                         snaps.emplace_back(e, p);
                                     });
      const nn::Model m(v.spec);
      for (const auto& [e, p] : snaps) {
        const auto r = measure(c, b, m, p);
        add_metrics_row(table, {v.name, std::to_string(e)}, r);
        if (log) log("sweep " + v.name + " epoch " + std::to_string(e) + ": acc " + io::fixed2(r.natural_acc) +
                     " attacc " + io::fixed2(r.attack_acc));
      }
    } catch (const Error& err) {
      if (log) log("sweep " + v.name + " failed: " + err.what());
      table.add({v.name, "NA", "NA", "NA", "NA", "NA"});
    }
  }
  return table;
}

// ---------------------------------------------------------------- defend

struct DefenseRow {
  std::string variant;
  eval::AccPair pair;
  double knn_dist = std::numeric_limits<double>::quiet_NaN();
  double mean_likelihood = std::numeric_limits<double>::quiet_NaN();
};

// The first row is the undefended baseline; delta is computed against it and
// left NA for the baseline itself.
inline io::CsvTable defense_table(const std::vector<DefenseRow>& rows) {
  if (rows.empty()) throw ContractError("defense_table: no rows");
  io::CsvTable t({"variant", "natural_acc", "attack_acc", "knn_dist", "mean_likelihood", "delta"});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto d = i == 0 ? std::nullopt : eval::delta_tradeoff(rows[0].pair, r.pair);
    t.add({r.variant, io::fixed2(r.pair.acc), io::fixed2(r.pair.attacc), io::fixed2(r.knn_dist),
           io::fixed2(r.mean_likelihood), io::optional2(d ? std::optional(eval::round2(*d)) : std::nullopt)});
  }
  return t;
}

struct TrainedVariant {
  std::string name;
  nn::NetworkSpec spec;
  nn::ModelParams<float> params;
};

inline std::vector<TrainedVariant> train_defenses(const ExperimentConfig& c, const Bench& b, const Log& log = {}) {
  std::vector<TrainedVariant> out;
  auto plain = [&](const std::string& name, const nn::NetworkSpec& s) {
    auto r = train::train_classifier<float>(s, b.split.priv_train, nullptr, c.train);
    out.push_back({name, s, std::move(r.params)});
    if (log) log("trained " + name);
  };
  plain("no_def", c.target);
  plain("rolss", nn::apply_rolss(c.target));
  char ssf[32];
  std::snprintf(ssf, sizeof ssf, "ssf_%.2f", c.ssf_k);
  plain(ssf, nn::apply_ssf(c.target, c.ssf_k));
  train::TTSConfig t{c.tts_m, c.tts_n, c.train};
  auto r = train::tts_train<float>(c.target, b.split.priv_train, nullptr, t);
  out.push_back({"tts", nn::apply_rolss(c.target), std::move(r.params)});
  if (log) log("trained tts");
  return out;
}

inline io::CsvTable run_defend(const ExperimentConfig& c, const Bench& b, const Log& log = {}) {
  std::vector<DefenseRow> rows;
  for (const auto& v : train_defenses(c, b, log)) {
    const nn::Model m(v.spec);
    const auto r = measure(c, b, m, v.params);
    rows.push_back({v.name, {r.natural_acc, r.attack_acc}, r.knn_dist, r.mean_likelihood});
    if (log) log("defend " + v.name + ": acc " + io::fixed2(r.natural_acc) + " attacc " + io::fixed2(r.attack_acc));
  }
  return defense_table(rows);
}

// ---------------------------------------------------------------- reparam check

inline json grid_report_json(const reparam::GridReport& g, const reparam::GridConfig& cfg, const std::string& dtype) {
  json cases = json::array();
  for (const auto& bc : g.cases)
    cases.push_back({{"index", bc.index},
                     {"channels", bc.channels},
                     {"size", bc.size},
                     {"skip", bc.skip.str()},
                     {"corrupted", bc.corrupted},
                     {"samples", bc.report.samples},
                     {"max_forward_rel_err", bc.report.max_forward_rel_err},
                     {"max_input_grad_rel_err", bc.report.max_input_grad_rel_err},
                     {"pass", bc.report.pass}});
  return {{"dtype", dtype},
          {"tolerance", cfg.tolerance},
          {"blocks", g.cases.size()},
          {"failures", g.failures},
          {"max_forward_rel_err", g.max_forward_rel_err},
          {"max_input_grad_rel_err", g.max_input_grad_rel_err},
          {"pass", g.pass()},
          {"cases", cases}};
}

// Schema check for a reparam report: required keys with the right JSON types.
inline void validate_grid_report(const json& j) {
  auto need = [](const json& o, const char* k, json::value_t t, const std::string& where) {
    if (!o.contains(k)) throw FormatError("reparam report: missing '" + std::string(k) + "' in " + where, 0);
    const auto vt = o[k].type();
    const bool num = t == json::value_t::number_float &&
                     (vt == json::value_t::number_integer || vt == json::value_t::number_unsigned);
    const bool uns = t == json::value_t::number_unsigned && vt == json::value_t::number_integer && o[k].get<long long>() >= 0;
    if (vt != t && !num && !uns) throw FormatError("reparam report: '" + std::string(k) + "' has the wrong type in " + where, 0);
  };
  using V = json::value_t;
  need(j, "dtype", V::string, "report");
  need(j, "tolerance", V::number_float, "report");
  need(j, "blocks", V::number_unsigned, "report");
  need(j, "failures", V::number_unsigned, "report");
  need(j, "max_forward_rel_err", V::number_float, "report");
  need(j, "max_input_grad_rel_err", V::number_float, "report");
  need(j, "pass", V::boolean, "report");
  need(j, "cases", V::array, "report");
  for (const auto& c : j["cases"]) {
    const std::string w = "case";
    need(c, "index", V::number_unsigned, w);
    need(c, "channels", V::number_unsigned, w);
    need(c, "size", V::number_unsigned, w);
    need(c, "skip", V::string, w);
    need(c, "corrupted", V::boolean, w);
    need(c, "samples", V::number_unsigned, w);
    need(c, "max_forward_rel_err", V::number_float, w);
    need(c, "max_input_grad_rel_err", V::number_float, w);
    need(c, "pass", V::boolean, w);
  }
}

// ---------------------------------------------------------------- artifacts

inline std::string write_csv(const ExperimentConfig& c, const io::CsvTable& t, const std::string& file) {
  std::filesystem::create_directories(c.output_dir);
  const auto path = (std::filesystem::path(c.output_dir) / file).string();
  io::write_text(path, t.render(config_hash(c), tool_version));
  return path;
}

inline std::string write_json(const ExperimentConfig& c, json body, const std::string& file) {
  std::filesystem::create_directories(c.output_dir);
  body["config_hash"] = config_hash(c);
  body["tool_version"] = tool_version;
  const auto path = (std::filesystem::path(c.output_dir) / file).string();
  io::write_text(path, body.dump(2) + "\n");
  return path;
}

inline std::map<std::string, std::string> artifact_meta(const ExperimentConfig& c) {
  return {{"config_hash", config_hash(c)}, {"version", tool_version}};
}

}  // namespace mirage::exp
