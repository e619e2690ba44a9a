#pragma once

// Structural anomaly pruning: classes whose pixel count swings across ensemble
// views (high coefficient of variation relative to the batch) are masked out of
// the consensus pseudo-label.

#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "shape/core.hpp"
#include "shape/stats.hpp"

namespace shape::sap {

struct SapConfig {
  double q = 50.0;           // percentile of pooled instabilities
  double min_count = 10.0;   // mean pixel count for a class to count as significant
  double eps = 1e-6;

  void validate() const {
    if (!(q >= 0 && q <= 100)) throw ValidationError("q must lie in [0, 100]");
    if (!(min_count >= 1)) throw ValidationError("min_count must be >= 1");
    if (!(eps >= 0)) throw ValidationError("eps must be non-negative");
  }
};

struct ClassSignature {
  int k = 0;
  std::vector<double> counts;  // per ensemble member
  double mean = 0;
  double instability = 0;      // sample std / (mean + eps)
  bool significant = false;
};

inline double instability(std::span<const double> counts, double eps) {
  return sample_std(counts) / (mean_of(counts) + eps);
}

inline ClassSignature class_signature(std::span<const LabelMap> member_maps, int k, const SapConfig& cfg) {
  ClassSignature s;
  s.k = k;
  for (const auto& m : member_maps) s.counts.push_back(static_cast<double>(m.count(k)));
  s.mean = mean_of(s.counts);
  s.instability = instability(s.counts, cfg.eps);
  s.significant = s.mean >= cfg.min_count;
  return s;
}

// Foreground signatures k = 1..K-1 of one sample.
inline std::vector<ClassSignature> signatures(std::span<const LabelMap> member_maps, const SapConfig& cfg) {
  if (member_maps.empty()) throw ValidationError("signatures: no ensemble members");
  std::vector<ClassSignature> out;
  for (int k = 1; k < member_maps.front().num_classes(); ++k) {
    out.push_back(class_signature(member_maps, k, cfg));
  }
  return out;
}

// q-th percentile of the given instabilities; +inf when there are none.
inline double anomaly_threshold(std::span<const double> instabilities, double q) {
  if (instabilities.empty()) return std::numeric_limits<double>::infinity();
  return quantile_linear(std::vector<double>(instabilities.begin(), instabilities.end()), q / 100.0);
}

// Significant classes strictly above the threshold.
inline std::set<int> anomalous_set(std::span<const ClassSignature> sigs, double theta) {
  std::set<int> out;
  for (const auto& s : sigs) {
    if (s.significant && s.instability > theta) out.insert(s.k);
  }
  return out;
}

inline LabelMap prune(const LabelMap& m, const std::set<int>& anomalous) {
  LabelMap out = m;
  if (anomalous.empty()) return out;
  for (auto& v : out.values()) {
    if (v != kIgnore && anomalous.count(v)) v = kIgnore;
  }
  return out;
}

struct InstabilityReport {
  std::string id;
  std::vector<ClassSignature> per_class;
  double theta = std::numeric_limits<double>::infinity();
  std::set<int> anomalous;
  LabelMap pruned;
  std::size_t pruned_pixels = 0;
};

// Per-sample signatures, one threshold pooled over every significant class of the
// batch, then per-sample pruning of the consensus maps.
// member_maps[i] are the argmax maps of sample i's ensemble members.
inline std::vector<InstabilityReport> prune_batch(std::span<const std::vector<LabelMap>> member_maps,
                                                  std::span<const LabelMap> consensus, const SapConfig& cfg) {
  cfg.validate();
  if (member_maps.size() != consensus.size()) throw ShapeError("prune_batch: size mismatch");
  std::vector<InstabilityReport> out(consensus.size());
  std::vector<double> pool;
  for (std::size_t i = 0; i < consensus.size(); ++i) {
    out[i].per_class = signatures(member_maps[i], cfg);
    for (const auto& s : out[i].per_class) {
      if (s.significant) pool.push_back(s.instability);
    }
  }
  const double theta = anomaly_threshold(pool, cfg.q);
  for (std::size_t i = 0; i < consensus.size(); ++i) {
    auto& r = out[i];
    r.theta = theta;
    r.anomalous = anomalous_set(r.per_class, theta);
    r.pruned = prune(consensus[i], r.anomalous);
    for (int k : r.anomalous) r.pruned_pixels += consensus[i].count(k);
  }
  return out;
}

}  // namespace shape::sap
