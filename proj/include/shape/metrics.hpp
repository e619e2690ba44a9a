#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "shape/core.hpp"

namespace shape::metrics {

namespace detail {

// Membership mask for class k; pixels ignored in gt are excluded from both masks.
inline std::vector<std::uint8_t> class_mask(const LabelMap& m, const LabelMap& gt, int k) {
  std::vector<std::uint8_t> out(m.size(), 0);
  for (std::size_t p = 0; p < m.size(); ++p) out[p] = (m[p] == k && gt[p] != kIgnore);
  return out;
}

inline void check_pair(const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_shape(gt)) throw ShapeError("metric inputs differ in shape");
}

// 1-D squared distance transform (Felzenszwalb & Huttenlocher).
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  // skip leading infinite samples so parabola intersections stay finite
  std::size_t first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    for (std::size_t q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    const auto fq = f[q] + static_cast<double>(q * q);
    double s;
    while (true) {
      const auto vk = static_cast<double>(v[k]);
      s = (fq - (f[v[k]] + vk * vk)) / (2.0 * (static_cast<double>(q) - vk));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance to the nearest set pixel.
inline std::vector<double> squared_edt(const std::vector<std::uint8_t>& seeds, std::size_t H, std::size_t W) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(H * W);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  std::vector<double> col(H), out(std::max(H, W));
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) col[y] = g[y * W + x];
    edt_1d(col.data(), out.data(), H, v, z);
    for (std::size_t y = 0; y < H; ++y) g[y * W + x] = out[y];
  }
  for (std::size_t y = 0; y < H; ++y) {
    edt_1d(&g[y * W], out.data(), W, v, z);
    std::copy(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(W), g.begin() + static_cast<std::ptrdiff_t>(y * W));
  }
  return g;
}

}  // namespace detail

// Class pixels with a non-class 4-neighbour or lying on the image border.
inline std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& mask, std::size_t H, std::size_t W) {
  std::vector<std::uint8_t> b(mask.size(), 0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      if (!mask[p]) continue;
      b[p] = y == 0 || x == 0 || y + 1 == H || x + 1 == W || !mask[p - W] || !mask[p + W] || !mask[p - 1] ||
             !mask[p + 1];
    }
  return b;
}

// 200 |P & G| / (|P| + |G|) in percent; both empty -> 100.
inline double dice_score(const LabelMap& pred, const LabelMap& gt, int k) {
  detail::check_pair(pred, gt);
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (gt[p] == kIgnore) continue;
    const bool a = pred[p] == k, b = gt[p] == k;
    np += a;
    ng += b;
    inter += a && b;
  }
  if (np + ng == 0) return 100.0;
  return 200.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Symmetric average surface distance, scaled by `spacing`. +inf when either
// boundary is empty.
inline double asd(const LabelMap& pred, const LabelMap& gt, int k, double spacing = 1.0) {
  detail::check_pair(pred, gt);
  const std::size_t H = gt.height(), W = gt.width();
  const auto bp = boundary(detail::class_mask(pred, gt, k), H, W);
  const auto bg = boundary(detail::class_mask(gt, gt, k), H, W);
  const auto np = std::count(bp.begin(), bp.end(), 1), ng = std::count(bg.begin(), bg.end(), 1);
  if (np == 0 || ng == 0) return std::numeric_limits<double>::infinity();
  const auto dist_to_g = detail::squared_edt(bg, H, W);
  const auto dist_to_p = detail::squared_edt(bp, H, W);
  double sum = 0;
  for (std::size_t p = 0; p < bp.size(); ++p)
    if (bp[p]) sum += std::sqrt(dist_to_g[p]);
  for (std::size_t p = 0; p < bg.size(); ++p)
    if (bg[p]) sum += std::sqrt(dist_to_p[p]);
  return spacing * sum / static_cast<double>(np + ng);
}

struct ClassMetric {
  int k = 0;
  double dsc = 0;
  double asd = 0;  // +inf when undefined
};

struct MetricReport {
  std::vector<ClassMetric> per_class;  // foreground classes 1..K-1
  double mean_dsc = 0;
  double mean_asd = std::numeric_limits<double>::infinity();
  std::size_t asd_undefined = 0;  // classes excluded from mean_asd
  double spacing = 1.0;
};

inline MetricReport evaluate(const LabelMap& pred, const LabelMap& gt, double spacing = 1.0) {
  detail::check_pair(pred, gt);
  MetricReport r;
  r.spacing = spacing;
  double dsum = 0, asum = 0;
  std::size_t an = 0;
  for (int k = 1; k < gt.num_classes(); ++k) {
    ClassMetric m{k, dice_score(pred, gt, k), asd(pred, gt, k, spacing)};
    dsum += m.dsc;
    if (std::isfinite(m.asd)) {
      asum += m.asd;
      ++an;
    } else {
      ++r.asd_undefined;
    }
    r.per_class.push_back(m);
  }
  r.mean_dsc = r.per_class.empty() ? 100.0 : dsum / static_cast<double>(r.per_class.size());
  if (an) r.mean_asd = asum / static_cast<double>(an);
  return r;
}

}  // namespace shape::metrics
