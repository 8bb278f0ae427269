#pragma once

// Accuracy, attack accuracy, KNN feature distance, the defence trade-off
// ratio and likelihood histograms.

#include <cmath>
#include <optional>
#include <vector>

#include "mirage/data/dataset.hpp"
#include "mirage/nn/network.hpp"

namespace mirage::eval {

// Half-away-from-zero rounding to two decimals, the reporting precision.
inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline double percent(std::size_t hits, std::size_t total) {
  if (total == 0) throw ContractError("percentage of an empty set");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

// Top-1 predictions; ties go to the lowest class index.
template <Scalar T>
std::vector<std::size_t> predict(const nn::Model& m, const nn::ModelParams<T>& p, const Tensor<T>& images) {
  return kern::argmax_rows(nn::forward_chunked(m, p, images, false));
}

// Percentage of `set` classified correctly.
inline double natural_accuracy(const nn::Model& m, const nn::ModelParams<float>& p, const data::LabeledImageSet& set) {
  if (set.size() == 0) throw ContractError("natural_accuracy: empty test set");
  const auto pred = predict(m, p, set.images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
  return percent(hits, set.size());
}

// Percentage of ids whose prediction equals the id.
inline double attack_accuracy_from_predictions(const std::vector<std::size_t>& ids,
                                               const std::vector<std::size_t>& predictions) {
  if (ids.empty()) throw ContractError("attack_accuracy: no ids");
  if (ids.size() != predictions.size())
    throw ContractError("attack_accuracy: " + std::to_string(ids.size()) + " ids but " +
                        std::to_string(predictions.size()) + " reconstructions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) hits += ids[i] == predictions[i];
  return percent(hits, ids.size());
}

// One reconstruction per id (row i depicts ids[i]), scored by the evaluation model.
inline double attack_accuracy(const std::vector<std::size_t>& ids, const Tensor<float>& recons,
                              const nn::Model& eval_model, const nn::ModelParams<float>& eval_params) {
  if (ids.empty()) throw ContractError("attack_accuracy: no ids");
  if (recons.rank() != 4 || recons.extent(0) != ids.size())
    throw ContractError("attack_accuracy: reconstructions " + shape_str(recons.shape()) + " do not cover " +
                        std::to_string(ids.size()) + " ids");
  return attack_accuracy_from_predictions(ids, predict(eval_model, eval_params, recons));
}

// Which reconstructions attack accuracy scores: the most likely candidate per
// id, or every surviving candidate (the mean over an id's candidate set).
enum class CandidateScoring { best, all_candidates };

inline const char* candidate_scoring_name(CandidateScoring s) {
  return s == CandidateScoring::best ? "best" : "all_candidates";
}

inline CandidateScoring parse_candidate_scoring(const std::string& s) {
  if (s == "best") return CandidateScoring::best;
  if (s == "all_candidates") return CandidateScoring::all_candidates;
  throw ConfigError("unknown attack scoring '" + s + "' (expected best or all_candidates)");
}

// Mean over ids of min_j || f_i - g_{i,j} ||_2, with f_i the reconstruction
// feature (row i of recon_features) and g_{i,j} the private features of id i.
template <Scalar T>
double knn_dist(const Tensor<T>& recon_features, const std::vector<Tensor<T>>& private_features) {
  if (recon_features.rank() != 2) throw DimensionError("knn_dist: features must be [K,F]");
  const std::size_t k = recon_features.extent(0), f = recon_features.extent(1);
  if (private_features.size() != k)
    throw ContractError("knn_dist: " + std::to_string(k) + " reconstructions but " +
                        std::to_string(private_features.size()) + " private feature sets");
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& pf = private_features[i];
    if (pf.size() == 0) throw ContractError("knn_dist: empty private set for id row " + std::to_string(i));
    if (pf.rank() != 2 || pf.extent(1) != f) throw DimensionError("knn_dist: private features must be [n," + std::to_string(f) + "]");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < pf.extent(0); ++j) {
      double d = 0;
      for (std::size_t c = 0; c < f; ++c) {
        const double e = static_cast<double>(recon_features[i * f + c]) - static_cast<double>(pf[j * f + c]);
        d += e * e;
      }
      best = std::min(best, d);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(k);
}

struct AccPair {
  double acc = 0;     // natural accuracy, percent
  double attacc = 0;  // attack accuracy, percent
};

// (attacc_nodef - attacc_def) / (acc_nodef - acc_def); NA (nullopt) when the
// accuracy drop is at most 0.01 points.
inline std::optional<double> delta_tradeoff(const AccPair& nodef, const AccPair& def) {
  const double acc_drop = nodef.acc - def.acc;
  if (!(acc_drop > 0.01)) return std::nullopt;
  return (nodef.attacc - def.attacc) / acc_drop;
}

// Uniform bins over [0,1]; 1.0 lands in the last bin, values outside are clamped.
inline std::vector<std::size_t> likelihood_histogram(const std::vector<double>& likelihoods, std::size_t bins = 20) {
  if (bins == 0) throw ConfigError("likelihood_histogram: bins must be >= 1");
  std::vector<std::size_t> h(bins, 0);
  for (double v : likelihoods) {
    const double c = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0);
    h[std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)))]++;
  }
  return h;
}

struct MetricsReport {
  double natural_acc = 0;
  double attack_acc = 0;
  double knn_dist = 0;
  double mean_likelihood = 0;
  std::optional<double> delta;
  std::vector<std::size_t> likelihood_histogram;
};

}  // namespace mirage::eval
