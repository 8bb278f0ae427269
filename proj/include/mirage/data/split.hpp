#pragma once

// Private/public class split. Private classes train and test the target;
// public classes, disjoint from them, feed only the image prior.

#include <set>

#include "mirage/data/dataset.hpp"

namespace mirage::data {

struct SplitProtocol {
  std::vector<std::size_t> priv_classes;
  std::vector<std::size_t> pub_classes;
  double train_fraction = 0.8;  // of each private class; the rest is test
  std::uint64_t seed = 0;       // within-class shuffle

  void validate(std::size_t num_classes) const {
    if (priv_classes.empty() || pub_classes.empty()) throw ProtocolError("split: both class sets must be nonempty");
    if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("split: train_fraction must lie in (0,1)");
    std::set<std::size_t> priv(priv_classes.begin(), priv_classes.end());
    if (priv.size() != priv_classes.size()) throw ProtocolError("split: duplicate private class");
    std::set<std::size_t> pub;
    for (auto c : pub_classes) {
      if (!pub.insert(c).second) throw ProtocolError("split: duplicate public class");
      if (priv.count(c)) throw ProtocolError("split: class " + std::to_string(c) + " is both private and public");
    }
    for (auto c : priv_classes)
      if (c >= num_classes) throw ProtocolError("split: private class " + std::to_string(c) + " not in dataset");
    for (auto c : pub_classes)
      if (c >= num_classes) throw ProtocolError("split: public class " + std::to_string(c) + " not in dataset");
  }
};

// First `num_priv` classes private, the remaining `total - num_priv` public.
inline SplitProtocol default_protocol(std::size_t total = 30, std::size_t num_priv = 20, std::uint64_t seed = 0) {
  if (num_priv == 0 || num_priv >= total) throw ConfigError("default_protocol: need 0 < num_priv < total");
  SplitProtocol p;
  for (std::size_t c = 0; c < num_priv; ++c) p.priv_classes.push_back(c);
  for (std::size_t c = num_priv; c < total; ++c) p.pub_classes.push_back(c);
  p.seed = seed;
  return p;
}

struct PrivPubSplit {
  LabeledImageSet priv_train, priv_test, pub;
};

// Labels are renumbered 0..K-1 in protocol order within each part;
// source_class maps them back.
inline PrivPubSplit split_private_public(const LabeledImageSet& set, const SplitProtocol& proto) {
  set.validate();
  proto.validate(set.num_classes);
  Rng rng(proto.seed);
  std::vector<std::size_t> tr, te, pu;
  std::vector<std::size_t> tr_lab, te_lab, pu_lab;
  for (std::size_t k = 0; k < proto.priv_classes.size(); ++k) {
    auto rows = set.rows_of_class(proto.priv_classes[k]);
    if (rows.size() < 2) throw ProtocolError("split: private class needs >= 2 samples");
    Rng cr = rng.split(static_cast<std::uint64_t>(proto.priv_classes[k]));
    cr.shuffle(rows);
    auto ntr = static_cast<std::size_t>(std::llround(proto.train_fraction * static_cast<double>(rows.size())));
    ntr = std::clamp<std::size_t>(ntr, 1, rows.size() - 1);
    std::sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(ntr));
    std::sort(rows.begin() + static_cast<std::ptrdiff_t>(ntr), rows.end());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      (i < ntr ? tr : te).push_back(rows[i]);
      (i < ntr ? tr_lab : te_lab).push_back(k);
    }
  }
  for (std::size_t k = 0; k < proto.pub_classes.size(); ++k)
    for (auto r : set.rows_of_class(proto.pub_classes[k])) {
      pu.push_back(r);
      pu_lab.push_back(k);
    }
  if (pu.empty()) throw ProtocolError("split: public classes have no samples");

  auto relabel = [&](const std::vector<std::size_t>& rows, const std::vector<std::size_t>& lab,
                     const std::vector<std::size_t>& classes) {
    LabeledImageSet s = set.subset(rows);
    s.labels = lab;
    s.num_classes = classes.size();
    s.source_class.clear();
    s.class_names.clear();
    for (auto c : classes) {
      s.source_class.push_back(set.source_class.empty() ? c : set.source_class[c]);
      if (!set.class_names.empty()) s.class_names.push_back(set.class_names[c]);
    }
    return s;
  };
  return {relabel(tr, tr_lab, proto.priv_classes), relabel(te, te_lab, proto.priv_classes),
          relabel(pu, pu_lab, proto.pub_classes)};
}

}  // namespace mirage::data
