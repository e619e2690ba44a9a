#pragma once

// Hierarchical feature modulation: global AdaIN restyling plus purity-gated,
// class-aware token mixing on an upsampled token grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "shape/core.hpp"
#include "shape/rng.hpp"

namespace shape::hfm {

struct HfmConfig {
  double purity_threshold = 1.0;  // tau_p
  std::size_t upsample_factor = 2;
  double pool_fraction = 0.1;
  double epsilon = 1e-5;
  // When set, replaces the per-call uniform draw of the mixing factor.
  std::optional<double> fixed_lambda;

  void validate() const {
    if (!(purity_threshold >= 0.0 && purity_threshold <= 1.0)) {
      throw ValidationError("tau_p must lie in [0, 1]");
    }
    if (upsample_factor < 1) throw ValidationError("upsample_factor must be >= 1");
    if (!(pool_fraction > 0.0 && pool_fraction <= 1.0)) {
      throw ValidationError("pool_fraction must lie in (0, 1]");
    }
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
    if (fixed_lambda && !(*fixed_lambda >= 0.0 && *fixed_lambda <= 1.0)) {
      throw ValidationError("lambda must lie in [0, 1]");
    }
  }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

template <std::floating_point T>
struct LayerNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  double eps = 1e-6;

  static LayerNormParams identity(std::size_t channels) {
    return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0)), 1e-6};
  }
};

// Per-channel mean and population std over H*W positions (Welford).
template <std::floating_point T>
ChannelStats channel_stats(const FeatureMap<T>& f) {
  ChannelStats s;
  s.mean.resize(f.channels());
  s.std.resize(f.channels());
  for (std::size_t c = 0; c < f.channels(); ++c) {
    double mean = 0, m2 = 0;
    std::size_t n = 0;
    for (T v : f.channel(c)) {
      ++n;
      const double d = v - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (v - mean);
    }
    s.mean[c] = mean;
    s.std[c] = std::sqrt(std::max(0.0, m2 / static_cast<double>(n)));
  }
  return s;
}

// sigma_t * (x - mu_s) / (sigma_s + eps) + mu_t, per channel. Output has the
// spatial size of `source`.
template <std::floating_point T>
FeatureMap<T> adain(const FeatureMap<T>& source, const FeatureMap<T>& target, double eps) {
  if (source.channels() != target.channels()) {
    throw ShapeError("adain: channel counts differ");
  }
  const auto ss = channel_stats(source);
  const auto ts = channel_stats(target);
  FeatureMap<T> out(source.channels(), source.height(), source.width());
  for (std::size_t c = 0; c < source.channels(); ++c) {
    const double scale = ts.std[c] / (ss.std[c] + eps);
    auto in = source.channel(c);
    auto o = out.channel(c);
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = static_cast<T>(scale * (in[i] - ss.mean[c]) + ts.mean[c]);
    }
  }
  return out;
}

namespace detail {

struct BilinearTap {
  std::size_t i0, i1;
  double w1;
};

// Source sample position (o + 0.5) / factor - 0.5, clamped to the input range.
inline std::vector<BilinearTap> bilinear_taps(std::size_t n_out, std::size_t n_in, std::size_t factor) {
  std::vector<BilinearTap> t(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, n_in - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace detail

// Bilinear resampling, align_corners = false, edge-clamped.
template <std::floating_point T>
FeatureMap<T> upsample_bilinear(const FeatureMap<T>& f, std::size_t factor) {
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  if (factor == 1) return f;
  const std::size_t oh = f.height() * factor, ow = f.width() * factor;
  FeatureMap<T> out(f.channels(), oh, ow);
  const auto ty = detail::bilinear_taps(oh, f.height(), factor);
  const auto tx = detail::bilinear_taps(ow, f.width(), factor);
  // horizontal pass into one row buffer per input row, then vertical blend
  std::vector<double> rows(f.height() * ow);
  for (std::size_t c = 0; c < f.channels(); ++c) {
    for (std::size_t y = 0; y < f.height(); ++y) {
      const T* src = &f.at(c, y, 0);
      double* dst = &rows[y * ow];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        dst[x] = (1 - b.w1) * src[b.i0] + b.w1 * src[b.i1];
      }
    }
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      const double* r0 = &rows[a.i0 * ow];
      const double* r1 = &rows[a.i1 * ow];
      T* dst = &out.at(c, y, 0);
      for (std::size_t x = 0; x < ow; ++x) dst[x] = static_cast<T>((1 - a.w1) * r0[x] + a.w1 * r1[x]);
    }
  }
  return out;
}

// Adjoint of upsample_bilinear: scatters a fine-grid gradient back onto the
// coarse grid of size (height, width).
template <std::floating_point T>
FeatureMap<T> upsample_bilinear_adjoint(const FeatureMap<T>& g, std::size_t factor, std::size_t height,
                                        std::size_t width) {
  if (g.height() != height * factor || g.width() != width * factor) {
    throw ShapeError("upsample_bilinear_adjoint: gradient shape mismatch");
  }
  if (factor == 1) return g;
  FeatureMap<T> out(g.channels(), height, width);
  const auto ty = detail::bilinear_taps(g.height(), height, factor);
  const auto tx = detail::bilinear_taps(g.width(), width, factor);
  const std::size_t ow = g.width();
  // transpose of the vertical blend, then of the horizontal pass
  std::vector<double> rows(height * ow);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    std::fill(rows.begin(), rows.end(), 0.0);
    for (std::size_t y = 0; y < g.height(); ++y) {
      const auto& a = ty[y];
      const T* src = &g.at(c, y, 0);
      double* r0 = &rows[a.i0 * ow];
      double* r1 = &rows[a.i1 * ow];
      for (std::size_t x = 0; x < ow; ++x) {
        r0[x] += (1 - a.w1) * src[x];
        r1[x] += a.w1 * src[x];
      }
    }
    for (std::size_t y = 0; y < height; ++y) {
      const double* r = &rows[y * ow];
      T* dst = &out.at(c, y, 0);
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        dst[b.i0] += static_cast<T>((1 - b.w1) * r[x]);
        dst[b.i1] += static_cast<T>(b.w1 * r[x]);
      }
    }
  }
  return out;
}

template <std::floating_point T>
FeatureMap<T> avg_pool(const FeatureMap<T>& f, std::size_t factor) {
  if (factor < 1 || f.height() % factor || f.width() % factor) {
    throw ShapeError("avg_pool: dims not divisible by factor");
  }
  if (factor == 1) return f;
  const std::size_t oh = f.height() / factor, ow = f.width() / factor;
  FeatureMap<T> out(f.channels(), oh, ow);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t c = 0; c < f.channels(); ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) s += f.at(c, y * factor + dy, x * factor + dx);
        out.at(c, y, x) = static_cast<T>(s * inv);
      }
  return out;
}

// Tokens -----------------------------------------------------------------------

// One token per spatial position of a feature map, row-major. Token i covers the
// patch_px x patch_px block of label pixels at (r*patch_px, c*patch_px).
template <std::floating_point T>
struct TokenGrid {
  std::size_t grid_h = 0, grid_w = 0, channels = 0, patch_px = 1;
  std::vector<T> tokens;  // N x C, row-major

  std::size_t count() const { return grid_h * grid_w; }
  std::span<T> token(std::size_t i) { return {tokens.data() + i * channels, channels}; }
  std::span<const T> token(std::size_t i) const { return {tokens.data() + i * channels, channels}; }
};

// Label pixels per token edge. Label dims must be an integer multiple of the grid.
inline std::size_t token_patch_px(std::size_t label_h, std::size_t label_w, std::size_t grid_h,
                                  std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0 || label_h % grid_h || label_w % grid_w ||
      label_h / grid_h != label_w / grid_w) {
    throw ShapeError("label " + std::to_string(label_h) + "x" + std::to_string(label_w) +
                     " does not tile a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                     " token grid");
  }
  return label_h / grid_h;
}

template <std::floating_point T>
TokenGrid<T> unfold(const FeatureMap<T>& f, std::size_t patch_px = 1) {
  TokenGrid<T> g{f.height(), f.width(), f.channels(), patch_px, {}};
  g.tokens.resize(f.size());
  const std::size_t plane = f.plane();
  auto v = f.values();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < f.channels(); ++c) g.tokens[p * f.channels() + c] = v[c * plane + p];
  return g;
}

template <std::floating_point T>
TokenGrid<T> unfold(const FeatureMap<T>& f, const LabelMap& aligned) {
  return unfold(f, token_patch_px(aligned.height(), aligned.width(), f.height(), f.width()));
}

template <std::floating_point T>
FeatureMap<T> fold(const TokenGrid<T>& g) {
  if (g.tokens.size() != g.count() * g.channels) throw ShapeError("fold: token buffer size mismatch");
  FeatureMap<T> f(g.channels, g.grid_h, g.grid_w);
  const std::size_t plane = f.plane();
  auto v = f.values();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < g.channels; ++c) v[c * plane + p] = g.tokens[p * g.channels + c];
  return f;
}

// Purity ---------------------------------------------------------------------------

struct PatchPurity {
  double purity = 0.0;
  int majority = 0;  // lowest index among tied majorities; meaningless when purity == 0
};

namespace detail {
inline PatchPurity purity_with(const LabelMap& labels, std::size_t y0, std::size_t x0, std::size_t size,
                               std::vector<std::size_t>& hist) {
  hist.assign(static_cast<std::size_t>(labels.num_classes()), 0);
  std::size_t valid = 0;
  for (std::size_t y = y0; y < y0 + size; ++y)
    for (std::size_t x = x0; x < x0 + size; ++x) {
      const auto v = labels.at(y, x);
      if (v == kIgnore) continue;
      ++hist[v];
      ++valid;
    }
  if (valid == 0) return {};
  const auto it = std::max_element(hist.begin(), hist.end());
  return {static_cast<double>(*it) / static_cast<double>(valid), static_cast<int>(it - hist.begin())};
}
}  // namespace detail

// Majority-class frequency over the non-ignored pixels of a block. All-ignore -> 0.
inline PatchPurity purity(const LabelMap& labels, std::size_t y0, std::size_t x0, std::size_t size) {
  std::vector<std::size_t> hist;
  return detail::purity_with(labels, y0, x0, size, hist);
}

inline std::vector<PatchPurity> patch_purities(const LabelMap& labels, std::size_t grid_h,
                                               std::size_t grid_w) {
  const std::size_t px = token_patch_px(labels.height(), labels.width(), grid_h, grid_w);
  std::vector<PatchPurity> out;
  out.reserve(grid_h * grid_w);
  std::vector<std::size_t> hist;
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) out.push_back(detail::purity_with(labels, r * px, c * px, px, hist));
  return out;
}

struct TokenPartition {
  std::vector<std::size_t> pure;
  std::vector<std::size_t> impure;
};

// Closed comparison: tau_p = 1 keeps exactly the fully pure patches.
inline TokenPartition partition_tokens(std::span<const double> purities, double tau_p) {
  TokenPartition p;
  for (std::size_t i = 0; i < purities.size(); ++i) {
    (purities[i] >= tau_p ? p.pure : p.impure).push_back(i);
  }
  return p;
}

// Exemplar pools -------------------------------------------------------------------

// Per-class list of representative tokens: the ceil(fraction * n) members of the
// class closest (Euclidean) to the class mean, nearest first.
template <std::floating_point T>
struct ExemplarPools {
  std::size_t channels = 0;
  std::vector<std::vector<std::vector<T>>> by_class;

  bool empty(int k) const {
    return k < 0 || static_cast<std::size_t>(k) >= by_class.size() || by_class[k].empty();
  }
};

template <std::floating_point T>
ExemplarPools<T> build_exemplar_pools(const TokenGrid<T>& grid, std::span<const PatchPurity> purities,
                                      std::span<const std::size_t> pure_indices, int num_classes,
                                      double pool_fraction) {
  ExemplarPools<T> pools;
  pools.channels = grid.channels;
  pools.by_class.resize(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(num_classes));
  for (auto i : pure_indices) members[purities[i].majority].push_back(i);

  const std::size_t C = grid.channels;
  for (int k = 0; k < num_classes; ++k) {
    const auto& idx = members[k];
    if (idx.empty()) continue;
    std::vector<double> mean(C, 0.0);
    for (auto i : idx) {
      auto t = grid.token(i);
      for (std::size_t c = 0; c < C; ++c) mean[c] += t[c];
    }
    for (auto& m : mean) m /= static_cast<double>(idx.size());

    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(idx.size());
    for (auto i : idx) {
      auto t = grid.token(i);
      double d = 0;
      for (std::size_t c = 0; c < C; ++c) d += (t[c] - mean[c]) * (t[c] - mean[c]);
      dist.emplace_back(d, i);
    }
    const auto keep = static_cast<std::size_t>(std::ceil(pool_fraction * static_cast<double>(idx.size())));
    const auto n = std::clamp<std::size_t>(keep, 1, idx.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(n), dist.end());
    for (std::size_t j = 0; j < n; ++j) {
      auto t = grid.token(dist[j].second);
      pools.by_class[k].emplace_back(t.begin(), t.end());
    }
  }
  return pools;
}

// (1 - lambda) * source + lambda * exemplar, with the exemplar drawn uniformly from
// the class pool. Empty pool -> source unchanged, no rng draw.
template <std::floating_point T>
std::vector<T> modulate_pure(std::span<const T> source, int cls, const ExemplarPools<T>& pools,
                             double lambda, SeededRng& rng) {
  std::vector<T> out(source.begin(), source.end());
  if (pools.empty(cls)) return out;
  const auto& pool = pools.by_class[cls];
  const auto& ex = pool[rng.below(pool.size())];
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = static_cast<T>((1.0 - lambda) * source[c] + lambda * ex[c]);
  }
  return out;
}

namespace detail {
template <std::floating_point T>
ChannelStats token_set_stats(const TokenGrid<T>& g, std::span<const std::size_t> idx) {
  const std::size_t C = g.channels;
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  if (idx.empty()) return s;
  for (auto i : idx) {
    auto t = g.token(i);
    for (std::size_t c = 0; c < C; ++c) s.mean[c] += t[c];
  }
  for (auto& m : s.mean) m /= static_cast<double>(idx.size());
  for (auto i : idx) {
    auto t = g.token(i);
    for (std::size_t c = 0; c < C; ++c) s.std[c] += (t[c] - s.mean[c]) * (t[c] - s.mean[c]);
  }
  for (auto& v : s.std) v = std::sqrt(v / static_cast<double>(idx.size()));
  return s;
}
}  // namespace detail

// Restyles the source boundary tokens in place: standardize by the source
// boundary statistics, then apply (1 - lambda) * source + lambda * target stats.
// Empty target set -> source statistics on both sides.
template <std::floating_point T>
void modulate_impure(TokenGrid<T>& source, std::span<const std::size_t> source_idx,
                     const TokenGrid<T>& target, std::span<const std::size_t> target_idx, double lambda,
                     double eps) {
  if (source_idx.empty()) return;
  if (source.channels != target.channels) throw ShapeError("modulate_impure: channel mismatch");
  const auto s = detail::token_set_stats(source, source_idx);
  const auto t = target_idx.empty() ? s : detail::token_set_stats(target, target_idx);
  const std::size_t C = source.channels;
  std::vector<double> mu_mix(C), sd_mix(C);
  for (std::size_t c = 0; c < C; ++c) {
    mu_mix[c] = (1.0 - lambda) * s.mean[c] + lambda * t.mean[c];
    sd_mix[c] = (1.0 - lambda) * s.std[c] + lambda * t.std[c];
  }
  for (auto i : source_idx) {
    auto tok = source.token(i);
    for (std::size_t c = 0; c < C; ++c) {
      tok[c] = static_cast<T>(sd_mix[c] * (tok[c] - s.mean[c]) / (s.std[c] + eps) + mu_mix[c]);
    }
  }
}

// Per-position normalization over the channel vector, then gamma/beta.
template <std::floating_point T>
FeatureMap<T> layer_norm(const FeatureMap<T>& f, const LayerNormParams<T>& p) {
  const std::size_t C = f.channels();
  if (p.gamma.size() != C || p.beta.size() != C) throw ShapeError("layer_norm: parameter length != C");
  FeatureMap<T> out(C, f.height(), f.width());
  const std::size_t plane = f.plane();
  auto in = f.values();
  auto o = out.values();
  for (std::size_t px = 0; px < plane; ++px) {
    double mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += in[c * plane + px];
    mean /= static_cast<double>(C);
    double var = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = in[c * plane + px] - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + p.eps);
    for (std::size_t c = 0; c < C; ++c) {
      o[c * plane + px] = static_cast<T>(p.gamma[c] * (in[c * plane + px] - mean) * inv + p.beta[c]);
    }
  }
  return out;
}

// Forward pass -----------------------------------------------------------------------

template <std::floating_point T>
struct HfmOutput {
  FeatureMap<T> source_to_target;
  FeatureMap<T> source_cross;
  FeatureMap<T> target_to_source;
  FeatureMap<T> target_cross;
  double lambda = 0.0;
  std::size_t source_pure = 0, source_impure = 0, target_pure = 0, target_impure = 0;
};

struct CrossStats {
  std::size_t pure = 0, impure = 0;
};

// Class-aware local modulation of `self` against `other`. The modulation delta is
// taken on the upsampled grid and average-pooled back, so a null modulation
// returns `self` unchanged.
template <std::floating_point T>
FeatureMap<T> cross_modulate(const FeatureMap<T>& self, const LabelMap& self_labels,
                             const FeatureMap<T>& other, const LabelMap& other_labels, double lambda,
                             const HfmConfig& cfg, SeededRng& rng, CrossStats* stats = nullptr) {
  const std::size_t f = cfg.upsample_factor;
  const auto up_self = upsample_bilinear(self, f);
  const auto up_other = upsample_bilinear(other, f);
  auto grid_self = unfold(up_self, self_labels);
  const auto grid_other = unfold(up_other, other_labels);

  const auto pur_self = patch_purities(self_labels, grid_self.grid_h, grid_self.grid_w);
  const auto pur_other = patch_purities(other_labels, grid_other.grid_h, grid_other.grid_w);
  std::vector<double> ps(pur_self.size()), po(pur_other.size());
  std::transform(pur_self.begin(), pur_self.end(), ps.begin(), [](auto p) { return p.purity; });
  std::transform(pur_other.begin(), pur_other.end(), po.begin(), [](auto p) { return p.purity; });
  const auto part_self = partition_tokens(ps, cfg.purity_threshold);
  const auto part_other = partition_tokens(po, cfg.purity_threshold);

  const auto pools = build_exemplar_pools(grid_other, std::span<const PatchPurity>(pur_other),
                                          std::span<const std::size_t>(part_other.pure),
                                          self_labels.num_classes(), cfg.pool_fraction);
  for (auto i : part_self.pure) {
    auto tok = grid_self.token(i);
    const auto mixed =
        modulate_pure(std::span<const T>(tok.data(), tok.size()), pur_self[i].majority, pools, lambda, rng);
    std::copy(mixed.begin(), mixed.end(), tok.begin());
  }
  modulate_impure(grid_self, std::span<const std::size_t>(part_self.impure), grid_other,
                  std::span<const std::size_t>(part_other.impure), lambda, cfg.epsilon);

  auto delta = fold(grid_self);
  {
    auto d = delta.values();
    auto u = up_self.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(d[i] - u[i]);
  }
  auto out = avg_pool(delta, f);
  {
    auto o = out.values();
    auto s = self.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(s[i] + o[i]);
  }
  if (stats) *stats = {part_self.pure.size(), part_self.impure.size()};
  return out;
}

// Produces the four modulated maps, each passed through layer_norm. One mixing
// factor is drawn per call and shared by both branches and both directions.
template <std::floating_point T>
HfmOutput<T> hfm_forward(const FeatureMap<T>& source, const LabelMap& source_labels,
                         const FeatureMap<T>& target, const LabelMap& target_pseudo,
                         const HfmConfig& cfg, SeededRng& rng,
                         const std::optional<LayerNormParams<T>>& ln = std::nullopt) {
  cfg.validate();
  if (source.channels() != target.channels()) throw ShapeError("hfm_forward: channel mismatch");
  if (source_labels.num_classes() != target_pseudo.num_classes()) {
    throw ShapeError("hfm_forward: class counts differ");
  }
  const auto norm = ln.value_or(LayerNormParams<T>::identity(source.channels()));
  const double lambda = cfg.fixed_lambda ? *cfg.fixed_lambda : rng.uniform();

  HfmOutput<T> out;
  out.lambda = lambda;
  out.source_to_target = layer_norm(adain(source, target, cfg.epsilon), norm);
  out.target_to_source = layer_norm(adain(target, source, cfg.epsilon), norm);
  CrossStats cs, ct;
  out.source_cross =
      layer_norm(cross_modulate(source, source_labels, target, target_pseudo, lambda, cfg, rng, &cs), norm);
  out.target_cross =
      layer_norm(cross_modulate(target, target_pseudo, source, source_labels, lambda, cfg, rng, &ct), norm);
  out.source_pure = cs.pure;
  out.source_impure = cs.impure;
  out.target_pure = ct.pure;
  out.target_impure = ct.impure;
  return out;
}

}  // namespace shape::hfm
