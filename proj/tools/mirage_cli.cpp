// mirage: command-line driver for the data, training, attack and
// reparameterisation studies. Precedence for settings: dedicated flag, then
// --set override, then --config file, then built-in default.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "mirage/experiment/pipeline.hpp"

using namespace mirage;
using nlohmann::json;

namespace {

enum Exit { ok = 0, check_failed = 1, usage = 2, runtime = 3 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  exp::ExperimentConfig resolve() const {
    auto c = config.empty() ? exp::default_config() : exp::load_config(config);
    auto s = sets;
    if (!out.empty()) s.push_back("output_dir=" + json(out).dump());
    if (seed) s.push_back("seed=" + std::to_string(*seed));
    return s.empty() ? c : exp::apply_overrides(c, s);
  }

  exp::Log log() const {
    if (quiet) return {};
    return [](const std::string& m) { std::cerr << "[mirage] " << m << "\n"; };
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "override a config field, e.g. --set attack.iterations=200")->take_all();
  app->add_option("--out", c.out, "output directory (overrides output_dir)");
  app->add_option("--seed", c.seed, "target training and attack seed (overrides seed)");
  app->add_flag("-q,--quiet", c.quiet, "suppress progress lines");
}

std::string out_path(const exp::ExperimentConfig& c, const std::string& file) {
  std::filesystem::create_directories(c.output_dir);
  return (std::filesystem::path(c.output_dir) / file).string();
}

std::map<std::string, std::string> checkpoint_meta(const exp::ExperimentConfig& c, const std::string& variant,
                                                   const nn::NetworkSpec& spec) {
  auto m = exp::artifact_meta(c);
  m["variant"] = variant;
  m["spec"] = json(spec).dump();
  return m;
}

// Loads a target checkpoint; its stored spec wins over the config so a model
// is always rebuilt with the architecture it was trained with.
std::pair<nn::Model, nn::ModelParams<float>> load_target(const std::string& path, const exp::ExperimentConfig& c,
                                                         const std::string& variant) {
  std::map<std::string, std::string> meta;
  auto p = io::load_params<float>(path, &meta);
  const auto it = meta.find("spec");
  const nn::NetworkSpec spec =
      it != meta.end() ? json::parse(it->second).get<nn::NetworkSpec>() : exp::variant_spec(c, variant);
  nn::check_integrity(spec, p);
  return {nn::Model(spec), std::move(p)};
}

io::CsvTable history_table(const std::vector<train::EpochRecord>& h) {
  io::CsvTable t({"stage", "epoch", "train_loss", "test_acc", "lr"});
  for (const auto& r : h)
    t.add({std::to_string(r.stage), std::to_string(r.epoch), io::shortest(r.train_loss), io::fixed2(r.test_acc),
           io::shortest(r.lr)});
  return t;
}

std::vector<std::size_t> parse_ids(const std::string& s, std::size_t num_ids) {
  std::vector<std::size_t> ids;
  if (s.empty()) {
    for (std::size_t i = 0; i < num_ids; ++i) ids.push_back(i);
    return ids;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t v = 0;
    const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (r.ec != std::errc() || r.ptr != tok.data() + tok.size()) throw ConfigError("--ids: '" + tok + "' is not an id");
    if (v >= num_ids) throw LabelError("--ids: id " + tok + " outside [0," + std::to_string(num_ids) + ")");
    ids.push_back(v);
  }
  return ids;
}

json metrics_json(const eval::MetricsReport& r) {
  return {{"natural_acc", r.natural_acc},
          {"attack_acc", r.attack_acc},
          {"knn_dist", r.knn_dist},
          {"mean_likelihood", r.mean_likelihood},
          {"likelihood_histogram", r.likelihood_histogram}};
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Common& co, const std::string& format) {
  const auto c = co.resolve();
  const auto set = exp::load_dataset(c.data);
  const auto split = data::split_private_public(set, exp::protocol_for(c.data, set.num_classes));
  std::vector<std::string> files;
  if (format == "idx") {
    files = {out_path(c, "images.idx"), out_path(c, "labels.idx")};
    data::write_idx(set, files[0], files[1]);
  } else {
    files = {out_path(c, "data.skmi")};
    io::save(io::dataset_container(set, exp::artifact_meta(c)), files[0]);
  }
  const auto priv = split.priv_train.source_class;
  std::vector<std::size_t> overlap;
  for (auto k : split.pub.source_class)
    if (std::find(priv.begin(), priv.end(), k) != priv.end()) overlap.push_back(k);
  json j{{"files", files},
         {"samples", set.size()},
         {"classes", set.num_classes},
         {"private_train", split.priv_train.size()},
         {"private_test", split.priv_test.size()},
         {"public", split.pub.size()},
         {"private_public_overlap", overlap}};
  std::cout << exp::write_json(c, j, "data_summary.json") << "\n";
  return overlap.empty() ? ok : check_failed;
}

int cmd_train(const Common& co, const std::string& variant) {
  const auto c = co.resolve();
  const auto spec = exp::variant_spec(c, variant);
  const auto split = exp::prepare_split(c);
  const auto log = co.log();
  auto r = train::train_classifier<float>(spec, split.priv_train, &split.priv_test, c.train, std::nullopt,
                                          [&](const train::EpochRecord& e, const nn::ModelParams<float>&) {
                                            if (log) log("epoch " + std::to_string(e.epoch + 1) + " loss " +
                                                         io::shortest(e.train_loss) + " acc " + io::fixed2(e.test_acc));
                                          });
  const auto path = out_path(c, variant + ".skmi");
  io::save_params(r.params, path, checkpoint_meta(c, variant, spec));
  exp::write_csv(c, history_table(r.history), variant + "_history.csv");
  std::cout << path << "\n";
  return ok;
}

int cmd_tts_train(const Common& co) {
  const auto c = co.resolve();
  const auto split = exp::prepare_split(c);
  const auto log = co.log();
  train::TTSConfig t{c.tts_m, c.tts_n, c.train};
  auto r = train::tts_train<float>(c.target, split.priv_train, &split.priv_test, t,
                                   [&](const train::EpochRecord& e, const nn::ModelParams<float>&) {
                                     if (log) log("stage " + std::to_string(e.stage) + " epoch " +
                                                  std::to_string(e.epoch + 1) + " acc " + io::fixed2(e.test_acc));
                                   });
  const auto path = out_path(c, "tts.skmi");
  io::save_params(r.params, path, checkpoint_meta(c, "tts", nn::apply_rolss(c.target)));
  exp::write_csv(c, history_table(r.history), "tts_history.csv");
  std::cout << path << "\n";
  return ok;
}

int cmd_attack(const Common& co, const std::string& checkpoint, const std::string& variant, const std::string& ids_arg) {
  const auto c = co.resolve();
  const auto [model, params] = load_target(checkpoint, c, variant);
  const auto bench = exp::prepare_bench(c, co.log(), c.output_dir);
  const auto ids = parse_ids(ids_arg, model.spec.num_classes);
  const auto res = attack::attack_all<float>(model, params, bench.generator, ids, c.attack);
  json entries = json::array();
  for (const auto& e : res.entries)
    entries.push_back({{"id", e.id},
                       {"best_candidate", e.best_candidate},
                       {"final_likelihood", e.final_likelihood},
                       {"candidate_likelihoods", e.candidate_likelihoods},
                       {"candidate_failed", e.candidate_failed}});
  json failures = json::array();
  for (const auto& f : res.failures) failures.push_back({{"id", f.id}, {"message", f.message}});
  if (!res.entries.empty()) {
    io::Container rc;
    rc.meta = exp::artifact_meta(c);
    rc.tensors.emplace("reconstructions", attack::stack_reconstructions(res));
    const std::size_t n = res.entries.size();
    std::vector<double> done(n);
    for (std::size_t i = 0; i < n; ++i) done[i] = static_cast<double>(res.entries[i].id);
    rc.tensors.emplace("ids", Tensor<double>({n}, std::move(done)));
    io::save(rc, out_path(c, "reconstructions_" + variant + ".skmi"));
  }
  json j{{"variant", variant}, {"requested_ids", ids}, {"entries", entries}, {"failures", failures}};
  std::cout << exp::write_json(c, j, "attack_" + variant + ".json") << "\n";
  return res.failures.empty() ? ok : check_failed;
}

int cmd_evaluate(const Common& co, const std::string& checkpoint, const std::string& variant) {
  const auto c = co.resolve();
  const auto [model, params] = load_target(checkpoint, c, variant);
  const auto bench = exp::prepare_bench(c, co.log(), c.output_dir);
  const auto r = exp::measure(c, bench, model, params);
  auto j = metrics_json(r);
  j["variant"] = variant;
  std::cout << exp::write_json(c, j, "evaluate_" + variant + ".json") << "\n";
  return ok;
}

int cmd_reparam_check(const Common& co, reparam::GridConfig g, const std::string& dtype) {
  const auto c = co.resolve();
  g.seed = c.seed;
  reparam::GridReport rep;
  if (dtype == "float64")
    rep = reparam::run_grid<double>(g);
  else
    rep = reparam::run_grid<float>(g);
  const auto j = exp::grid_report_json(rep, g, dtype);
  exp::validate_grid_report(j);
  std::cout << exp::write_json(c, j, "reparam_report.json") << "\n";
  std::cerr << "reparam-check: " << rep.cases.size() - rep.failures << "/" << rep.cases.size()
            << " blocks within " << g.tolerance << " (max forward " << rep.max_forward_rel_err << ", max input grad "
            << rep.max_input_grad_rel_err << ")\n";
  return rep.pass() ? ok : check_failed;
}

int cmd_sweep(const Common& co) {
  const auto c = co.resolve();
  const auto bench = exp::prepare_bench(c, co.log(), c.output_dir);
  const auto t = exp::run_sweep(c, bench, co.log());
  std::cout << exp::write_csv(c, t, "sweep.csv") << "\n";
  return ok;
}

int cmd_defend(const Common& co) {
  const auto c = co.resolve();
  const auto bench = exp::prepare_bench(c, co.log(), c.output_dir);
  const auto t = exp::run_defend(c, bench, co.log());
  std::cout << exp::write_csv(c, t, "defend.csv") << "\n";
  return ok;
}

// Renders a defense table from (variant, acc, attacc) rows; the first row is
// the undefended baseline.
int cmd_report(const Common& co, const std::string& pairs, const std::string& show) {
  if (!show.empty()) {
    if (show.ends_with(".skmi")) {
      const auto c = io::load(show);
      for (const auto& [k, v] : c.meta) std::cout << k << "=" << (v.size() > 72 ? v.substr(0, 72) + "..." : v) << "\n";
      std::size_t values = 0;
      for (const auto& [name, t] : c.tensors) {
        std::visit(
            [&](const auto& x) {
              values += x.size();
              std::cout << name << " " << dtype_traits<typename std::decay_t<decltype(x)>::value_type>::name << " "
                        << shape_str(x.shape()) << "\n";
            },
            t);
      }
      std::cout << c.tensors.size() << " tensors, " << values << " values\n";
      return ok;
    }
    const auto text = io::read_text(show);
    if (show.ends_with(".json")) {
      const auto j = json::parse(text);
      std::cout << "config_hash=" << j.value("config_hash", "NA") << " tool_version=" << j.value("tool_version", "NA")
                << "\n";
    } else {
      const auto h = io::parse_csv_header(text);
      std::cout << "config_hash=" << h.config_hash << " tool_version=" << h.tool_version << "\n";
    }
    return ok;
  }
  if (pairs.empty()) throw ConfigError("report: give --pairs FILE or --show FILE");
  const auto c = co.resolve();
  json j;
  try {
    j = json::parse(io::read_text(pairs));
  } catch (const json::parse_error& e) {
    throw FormatError("report: " + std::string(e.what()), e.byte);
  }
  std::vector<exp::DefenseRow> rows;
  for (const auto& r : j) rows.push_back({r.at("variant").get<std::string>(), {r.at("acc").get<double>(), r.at("attacc").get<double>()}});
  const auto t = exp::defense_table(rows);
  std::cout << t.render(exp::config_hash(c), exp::tool_version);
  exp::write_csv(c, t, "report.csv");
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-inversion studies of skip connections on small CNNs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(exp::tool_version));

  Common co;
  std::string variant = "full", checkpoint, ids, format = "skmi", pairs, show, dtype = "float64";
  reparam::GridConfig grid;
  std::vector<std::size_t> corrupt;

  auto* gen_data = app.add_subcommand("gen-data", "synthesise (or import) the dataset and write it out");
  add_common(gen_data, co);
  gen_data->add_option("--format", format, "skmi or idx")->check(CLI::IsMember({"skmi", "idx"}));

  auto* trn = app.add_subcommand("train", "train a target variant on the private split");
  add_common(trn, co);
  trn->add_option("--variant", variant, "full, rolss, ssf, skip1..skip4");

  auto* tts = app.add_subcommand("tts-train", "two-stage training: full skips, then last-stage skips removed");
  add_common(tts, co);

  auto* atk = app.add_subcommand("attack", "white-box inversion of a trained target");
  add_common(atk, co);
  atk->add_option("--checkpoint", checkpoint, "target checkpoint")->required()->check(CLI::ExistingFile);
  atk->add_option("--variant", variant, "variant name used for output files");
  atk->add_option("--ids", ids, "comma-separated ids (default: all private ids)");

  auto* evl = app.add_subcommand("evaluate", "accuracy and attack metrics for a trained target");
  add_common(evl, co);
  evl->add_option("--checkpoint", checkpoint, "target checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--variant", variant, "variant name used for output files");

  auto* rep = app.add_subcommand("reparam-check", "verify merged RepVGG blocks against their branches");
  add_common(rep, co);
  rep->add_option("--blocks", grid.blocks, "number of blocks");
  rep->add_option("--tolerance", grid.tolerance, "relative error bound");
  rep->add_option("--dtype", dtype, "float64 or float32")->check(CLI::IsMember({"float64", "float32"}));
  rep->add_option("--corrupt", corrupt, "block indices to corrupt deliberately")->delimiter(',');
  rep->add_option("--channels", grid.channels, "channel grid")->delimiter(',');
  rep->add_option("--sizes", grid.sizes, "spatial size grid")->delimiter(',');

  auto* swp = app.add_subcommand("sweep", "stage-wise skip removal study");
  add_common(swp, co);

  auto* dfd = app.add_subcommand("defend", "compare no defense, RoLSS, SSF and TTS");
  add_common(dfd, co);

  auto* rpt = app.add_subcommand("report", "render a defense table from (acc, attacc) pairs, or show an artifact header");
  add_common(rpt, co);
  rpt->add_option("--pairs", pairs, "JSON array of {variant, acc, attacc}; first row is the baseline");
  rpt->add_option("--show", show, "CSV or JSON artifact (header stamps), or a .skmi container (contents)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_data) return cmd_gen_data(co, format);
    if (*trn) return cmd_train(co, variant);
    if (*tts) return cmd_tts_train(co);
    if (*atk) return cmd_attack(co, checkpoint, variant, ids);
    if (*evl) return cmd_evaluate(co, checkpoint, variant);
    if (*rep) {
      if (dtype == "float32" && rep->count("--tolerance") == 0) grid.tolerance = 1e-4;
      grid.corrupt = {corrupt.begin(), corrupt.end()};
      return cmd_reparam_check(co, grid, dtype);
    }
    if (*swp) return cmd_sweep(co);
    if (*dfd) return cmd_defend(co);
    if (*rpt) return cmd_report(co, pairs, show);
  } catch (const ConfigError& e) {
    std::cerr << "mirage: " << e.what() << "\n";
    return usage;
  } catch (const LabelError& e) {
    std::cerr << "mirage: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "mirage: " << e.what() << "\n";
    return runtime;
  }
  return usage;
}
