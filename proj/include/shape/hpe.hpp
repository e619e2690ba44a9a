#pragma once

// Hypergraph plausibility estimation. Each consensus mask is treated as a
// hypergraph: foreground pixels are vertices, each class is a hyperedge, and
// the class centroids form one layout hyperedge. Samples are scored on pixel
// reliability (certainty x ensemble consistency), per-class shape (isoperimetric
// ratio z-scored against the batch), and pairwise layout (centroid direction
// cosines z-scored against the batch).

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <utility>
#include <vector>

#include "shape/core.hpp"
#include "shape/stats.hpp"

namespace shape::hpe {

struct GateConfig {
  double alpha = 0.25;     // intra/inter fusion weight
  double tau = 0.1;        // softmax temperature of the outlier-penalizing aggregate
  double rho_0 = 0.1;      // initial top-rho selection fraction
  double rho_max = 0.8;
  double eps = 1e-6;
  double eps_stat = 1e-3;  // floor on batch standard deviations
  std::size_t warmup = 10; // select everything until this many scores are accumulated

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw ValidationError("alpha must lie in [0, 1]");
    if (!(tau > 0)) throw ValidationError("tau must be positive");
    if (!(rho_0 > 0 && rho_0 <= rho_max && rho_max <= 1)) {
      throw ValidationError("need 0 < rho_0 <= rho_max <= 1");
    }
    if (!(eps > 0) || !(eps_stat > 0)) throw ValidationError("stabilizers must be positive");
  }
};

struct Point {
  double x = 0, y = 0;
};

// Pixels of one class as flat indices into an H x W grid.
struct PixelSet {
  std::size_t height = 0, width = 0;
  std::vector<std::size_t> pixels;

  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }
};

struct StructuralHypergraph {
  std::size_t height = 0, width = 0;
  int num_classes = 0;
  std::vector<std::size_t> vertices;         // all foreground pixels
  std::vector<PixelSet> class_edges;         // index k = 1..K-1; [0] left empty
  std::vector<std::optional<Point>> layout;  // centroid per class, nullopt when absent
};

// Shape --------------------------------------------------------------------------------

inline std::optional<Point> centroid(const PixelSet& e) {
  if (e.empty()) return std::nullopt;
  double sx = 0, sy = 0;
  for (auto p : e.pixels) {
    sx += static_cast<double>(p % e.width);
    sy += static_cast<double>(p / e.width);
  }
  const double n = static_cast<double>(e.size());
  return Point{sx / n, sy / n};
}

// Exposed 4-neighbour edges: class pixel next to a non-class pixel or the border.
inline std::size_t perimeter_edges(const PixelSet& e) {
  std::vector<std::uint8_t> in(e.height * e.width, 0);
  for (auto p : e.pixels) in[p] = 1;
  std::size_t edges = 0;
  const auto H = e.height, W = e.width;
  for (auto p : e.pixels) {
    const std::size_t y = p / W, x = p % W;
    edges += (y == 0 || !in[p - W]);
    edges += (y + 1 == H || !in[p + W]);
    edges += (x == 0 || !in[p - 1]);
    edges += (x + 1 == W || !in[p + 1]);
  }
  return edges;
}

// 4 pi Area / (Perimeter^2 + eps); empty set -> 0.
inline double isoperimetric(const PixelSet& e, double eps = 1e-6) {
  if (e.empty()) return 0.0;
  const double area = static_cast<double>(e.size());
  const double per = static_cast<double>(perimeter_edges(e));
  return 4.0 * std::numbers::pi * area / (per * per + eps);
}

// Horizontal direction cosine of c_j - c_i.
inline double direction_cosine(Point ci, Point cj, double eps = 1e-6) {
  const double dx = cj.x - ci.x, dy = cj.y - ci.y;
  return dx / (std::hypot(dx, dy) + eps);
}

inline PixelSet class_pixels(const LabelMap& m, int k) {
  PixelSet s{m.height(), m.width(), {}};
  for (std::size_t p = 0; p < m.size(); ++p) {
    if (m[p] == k) s.pixels.push_back(p);
  }
  return s;
}

inline StructuralHypergraph build_hypergraph(const LabelMap& m) {
  StructuralHypergraph g;
  g.height = m.height();
  g.width = m.width();
  g.num_classes = m.num_classes();
  g.class_edges.assign(static_cast<std::size_t>(m.num_classes()), PixelSet{m.height(), m.width(), {}});
  for (std::size_t p = 0; p < m.size(); ++p) {
    const auto v = m[p];
    if (v == 0 || v == kIgnore) continue;
    g.vertices.push_back(p);
    g.class_edges[v].pixels.push_back(p);
  }
  g.layout.resize(g.class_edges.size());
  for (std::size_t k = 1; k < g.class_edges.size(); ++k) g.layout[k] = centroid(g.class_edges[k]);
  return g;
}

// Vertex reliability ------------------------------------------------------------------------

// 1 - H(p)/log K.
template <typename Range>
double pixel_certainty(const Range& p, int num_classes) {
  return std::clamp(1.0 - entropy(p) / std::log(static_cast<double>(num_classes)), 0.0, 1.0);
}

// 1 - JSD/log K, JSD = H(mean) - mean(H(member)), clamped to [0, 1].
inline double pixel_consistency(const std::vector<std::vector<double>>& members) {
  const std::size_t K = members.front().size();
  std::vector<double> mean(K, 0.0);
  double mean_h = 0;
  for (const auto& m : members) {
    for (std::size_t k = 0; k < K; ++k) mean[k] += m[k];
    mean_h += entropy(m);
  }
  const double n = static_cast<double>(members.size());
  for (auto& v : mean) v /= n;
  const double jsd = entropy(mean) - mean_h / n;
  return std::clamp(1.0 - jsd / std::log(static_cast<double>(K)), 0.0, 1.0);
}

struct VertexScore {
  double s_vertex = 0.0;
  std::vector<double> pixel_weights;  // H x W, row-major; defined on every pixel
};

// Per-pixel w = certainty * consistency; S_vertex is its mean over foreground
// pixels of `consensus` (0 when there are none).
template <std::floating_point T>
VertexScore vertex_score(const PredictionEnsemble<T>& ens, const LabelMap& consensus) {
  ens.validate();
  if (consensus.height() != ens.height() || consensus.width() != ens.width()) {
    throw ShapeError("vertex_score: consensus and ensemble shapes differ");
  }
  const int K = ens.num_classes();
  const std::size_t plane = consensus.size();
  const double log_k = std::log(static_cast<double>(K));
  const double inv_n = 1.0 / static_cast<double>(ens.size());
  VertexScore out;
  out.pixel_weights.resize(plane);
  std::vector<double> mean(static_cast<std::size_t>(K));
  double acc = 0;
  std::size_t nv = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    std::fill(mean.begin(), mean.end(), 0.0);
    double mean_h = 0;
    for (const auto& m : ens.members) {
      double h = 0;
      for (int k = 0; k < K; ++k) {
        const double v = m.at(k, p);
        mean[k] += v * inv_n;
        if (v > 0) h -= v * std::log(v);
      }
      mean_h += h * inv_n;
    }
    const double h_mean = entropy(mean);
    const double certainty = std::clamp(1.0 - h_mean / log_k, 0.0, 1.0);
    const double consistency = std::clamp(1.0 - (h_mean - mean_h) / log_k, 0.0, 1.0);
    const double w = certainty * consistency;
    out.pixel_weights[p] = w;
    const auto c = consensus[p];
    if (c != 0 && c != kIgnore) {
      acc += w;
      ++nv;
    }
  }
  out.s_vertex = nv ? acc / static_cast<double>(nv) : 0.0;
  return out;
}

// Structure ------------------------------------------------------------------------------------

using ClassPair = std::pair<int, int>;

// Shape/layout descriptors of one sample; only present classes/pairs appear.
struct ShapeDescriptors {
  std::map<int, double> phi;
  std::map<ClassPair, double> psi;
};

inline ShapeDescriptors describe(const StructuralHypergraph& g, double eps = 1e-6) {
  ShapeDescriptors d;
  for (int k = 1; k < g.num_classes; ++k) {
    if (!g.class_edges[k].empty()) d.phi[k] = isoperimetric(g.class_edges[k], eps);
  }
  for (int i = 1; i < g.num_classes; ++i)
    for (int j = 1; j < g.num_classes; ++j) {
      if (i == j || !g.layout[i] || !g.layout[j]) continue;
      d.psi[{i, j}] = direction_cosine(*g.layout[i], *g.layout[j], eps);
    }
  return d;
}

struct MeanStd {
  double mean = 0, std = 0;
  std::size_t count = 0;
};

struct BatchShapeStats {
  std::map<int, MeanStd> phi;
  std::map<ClassPair, MeanStd> psi;
};

namespace detail {
template <typename Key>
std::map<Key, MeanStd> pooled(const std::map<Key, std::vector<double>>& values, double floor) {
  std::map<Key, MeanStd> out;
  for (const auto& [key, v] : values) {
    out[key] = {mean_of(v), std::max(population_std(v), floor), v.size()};
  }
  return out;
}
}  // namespace detail

// Population statistics per class/pair over the samples where it is present,
// std floored at eps_stat.
inline BatchShapeStats batch_stats(std::span<const ShapeDescriptors> batch, double eps_stat) {
  std::map<int, std::vector<double>> phi;
  std::map<ClassPair, std::vector<double>> psi;
  for (const auto& d : batch) {
    for (const auto& [k, v] : d.phi) phi[k].push_back(v);
    for (const auto& [k, v] : d.psi) psi[k].push_back(v);
  }
  return {detail::pooled(phi, eps_stat), detail::pooled(psi, eps_stat)};
}

inline double zscore(double v, double mu, double sigma, double eps) { return (v - mu) / (sigma + eps); }

// exp(-|z|)
inline double zscore_plausibility(double v, double mu, double sigma, double eps) {
  return std::exp(-std::abs(zscore(v, mu, sigma, eps)));
}

// sum_i s_i softmax(-s / tau)_i. Empty input is vacuously plausible (1).
inline double penalized_aggregate(std::span<const double> s, double tau) {
  if (s.empty()) return 1.0;
  const double lo = *std::min_element(s.begin(), s.end());
  double num = 0, den = 0;
  for (double v : s) {
    const double w = std::exp(-(v - lo) / tau);
    num += v * w;
    den += w;
  }
  return num / den;
}

struct ClassDetail {
  int k = 0;
  double phi = 0, z = 0, s_phi = 1;
};

struct PairDetail {
  int i = 0, j = 0;
  double psi = 0, z = 0, s_psi = 1;
};

struct IntraResult {
  double s_intra = 1.0;
  std::vector<ClassDetail> classes;
};

struct InterResult {
  double s_inter = 1.0;
  std::vector<PairDetail> pairs;
};

inline IntraResult intra_score(const ShapeDescriptors& d, const BatchShapeStats& stats, const GateConfig& cfg) {
  IntraResult r;
  std::vector<double> s;
  for (const auto& [k, phi] : d.phi) {
    ClassDetail c{k, phi, 0.0, 1.0};
    if (auto it = stats.phi.find(k); it != stats.phi.end()) {
      c.z = zscore(phi, it->second.mean, it->second.std, cfg.eps);
      c.s_phi = std::exp(-std::abs(c.z));
    }
    s.push_back(c.s_phi);
    r.classes.push_back(c);
  }
  r.s_intra = penalized_aggregate(s, cfg.tau);
  return r;
}

inline InterResult inter_score(const ShapeDescriptors& d, const BatchShapeStats& stats, const GateConfig& cfg) {
  InterResult r;
  std::vector<double> s;
  for (const auto& [ij, psi] : d.psi) {
    PairDetail p{ij.first, ij.second, psi, 0.0, 1.0};
    if (auto it = stats.psi.find(ij); it != stats.psi.end()) {
      p.z = zscore(psi, it->second.mean, it->second.std, cfg.eps);
      p.s_psi = std::exp(-std::abs(p.z));
    }
    s.push_back(p.s_psi);
    r.pairs.push_back(p);
  }
  r.s_inter = penalized_aggregate(s, cfg.tau);
  return r;
}

inline double final_score(double s_vertex, double s_intra, double s_inter, double alpha) {
  return s_vertex * (alpha * s_intra + (1.0 - alpha) * s_inter);
}

struct PlausibilityReport {
  std::string id;
  double s_vertex = 0, s_intra = 1, s_inter = 1, s_final = 0;
  std::vector<ClassDetail> per_class;
  std::vector<PairDetail> per_pair;
  std::vector<double> pixel_weights;
  std::size_t height = 0, width = 0;
};

// Scores every ensemble of a batch against statistics pooled over that batch.
// consensus[i] must be the argmax of ensemble i's mean.
template <std::floating_point T>
std::vector<PlausibilityReport> score_batch(std::span<const PredictionEnsemble<T>> ensembles,
                                            std::span<const LabelMap> consensus, const GateConfig& cfg) {
  cfg.validate();
  if (ensembles.size() != consensus.size()) throw ShapeError("score_batch: size mismatch");
  std::vector<ShapeDescriptors> desc;
  desc.reserve(ensembles.size());
  for (const auto& m : consensus) desc.push_back(describe(build_hypergraph(m), cfg.eps));
  const auto stats = batch_stats(desc, cfg.eps_stat);

  std::vector<PlausibilityReport> out;
  out.reserve(ensembles.size());
  for (std::size_t i = 0; i < ensembles.size(); ++i) {
    auto vs = vertex_score(ensembles[i], consensus[i]);
    auto intra = intra_score(desc[i], stats, cfg);
    auto inter = inter_score(desc[i], stats, cfg);
    PlausibilityReport r;
    r.s_vertex = vs.s_vertex;
    r.s_intra = intra.s_intra;
    r.s_inter = inter.s_inter;
    r.s_final = final_score(r.s_vertex, r.s_intra, r.s_inter, cfg.alpha);
    r.per_class = std::move(intra.classes);
    r.per_pair = std::move(inter.pairs);
    r.pixel_weights = std::move(vs.pixel_weights);
    r.height = consensus[i].height();
    r.width = consensus[i].width();
    out.push_back(std::move(r));
  }
  return out;
}

// Selection ---------------------------------------------------------------------------------------

// S_final values seen in the current epoch, in insertion order.
class ScoreAccumulator {
 public:
  void start_epoch(std::size_t epoch) {
    epoch_ = epoch;
    scores_.clear();
  }
  void add(std::span<const double> s) { scores_.insert(scores_.end(), s.begin(), s.end()); }
  std::span<const double> scores() const { return scores_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t size() const { return scores_.size(); }

 private:
  std::size_t epoch_ = 0;
  std::vector<double> scores_;
};

// Adds the batch to the accumulator, then keeps the batch samples whose score is
// at or above the (1 - rho) quantile of everything accumulated this epoch.
inline std::vector<std::size_t> select_samples(ScoreAccumulator& acc, std::span<const double> batch_scores,
                                               double rho, std::size_t warmup = 10) {
  if (!(rho > 0 && rho <= 1)) throw ValidationError("rho must lie in (0, 1]");
  acc.add(batch_scores);
  std::vector<std::size_t> sel;
  const bool all = acc.size() < warmup;
  const double threshold =
      all ? -std::numeric_limits<double>::infinity()
          : quantile_linear(std::vector<double>(acc.scores().begin(), acc.scores().end()), 1.0 - rho);
  for (std::size_t i = 0; i < batch_scores.size(); ++i) {
    if (batch_scores[i] >= threshold) sel.push_back(i);
  }
  return sel;
}

}  // namespace shape::hpe
