#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shape {

// Errors ---------------------------------------------------------------------

// Inputs whose dimensions do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A value violates a type invariant (ProbMap sums, label range, config range).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::uint8_t kIgnore = 255;

// FeatureMap -----------------------------------------------------------------

// Dense C x H x W grid, C-order (channel slowest).
template <std::floating_point T>
class FeatureMap {
 public:
  using value_type = T;

  FeatureMap() = default;
  FeatureMap(std::size_t channels, std::size_t height, std::size_t width, T fill = T(0))
      : c_(channels), h_(height), w_(width), v_(channels * height * width, fill) {
    if (channels == 0 || height == 0 || width == 0) {
      throw ShapeError("FeatureMap dimensions must be positive");
    }
  }

  std::size_t channels() const { return c_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t plane() const { return h_ * w_; }
  std::size_t size() const { return v_.size(); }

  T& at(std::size_t c, std::size_t y, std::size_t x) { return v_[(c * h_ + y) * w_ + x]; }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const { return v_[(c * h_ + y) * w_ + x]; }

  std::span<T> channel(std::size_t c) { return {v_.data() + c * plane(), plane()}; }
  std::span<const T> channel(std::size_t c) const { return {v_.data() + c * plane(), plane()}; }

  std::span<T> values() { return v_; }
  std::span<const T> values() const { return v_; }

  bool same_shape(const FeatureMap& o) const { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }

  bool all_finite() const {
    return std::all_of(v_.begin(), v_.end(), [](T x) { return std::isfinite(x); });
  }

  template <std::floating_point U>
  FeatureMap<U> cast() const {
    FeatureMap<U> out(c_, h_, w_);
    std::transform(v_.begin(), v_.end(), out.values().begin(), [](T x) { return static_cast<U>(x); });
    return out;
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::size_t c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> v_;
};

// LabelMap -------------------------------------------------------------------

// Hard H x W mask. Values in [0, K) or kIgnore; class 0 is background.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, int num_classes, std::uint8_t fill = 0)
      : h_(height), w_(width), k_(num_classes), v_(height * width, fill) {
    if (height == 0 || width == 0) throw ShapeError("LabelMap dimensions must be positive");
    if (num_classes < 2 || num_classes > 255) throw ValidationError("LabelMap needs 2 <= K <= 255");
    if (fill != kIgnore && fill >= num_classes) throw ValidationError("LabelMap fill out of range");
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return v_.size(); }
  int num_classes() const { return k_; }

  std::uint8_t& at(std::size_t y, std::size_t x) { return v_[y * w_ + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return v_[y * w_ + x]; }
  std::uint8_t operator[](std::size_t i) const { return v_[i]; }
  std::uint8_t& operator[](std::size_t i) { return v_[i]; }

  std::span<std::uint8_t> values() { return v_; }
  std::span<const std::uint8_t> values() const { return v_; }

  bool same_shape(const LabelMap& o) const { return h_ == o.h_ && w_ == o.w_; }

  // Throws ValidationError if any pixel is outside [0, K) and not kIgnore.
  void validate() const {
    for (auto v : v_) {
      if (v != kIgnore && v >= k_) {
        throw ValidationError("label value " + std::to_string(v) + " outside [0, " +
                              std::to_string(k_) + ")");
      }
    }
  }

  std::size_t count(int k) const {
    return static_cast<std::size_t>(std::count(v_.begin(), v_.end(), static_cast<std::uint8_t>(k)));
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  int k_ = 2;
  std::vector<std::uint8_t> v_;
};

// ProbMap --------------------------------------------------------------------

// Per-pixel class distribution, K x H x W.
template <std::floating_point T>
class ProbMap {
 public:
  using value_type = T;
  static constexpr double kSumTolerance = 1e-5;

  ProbMap() = default;
  ProbMap(int num_classes, std::size_t height, std::size_t width)
      : data_(static_cast<std::size_t>(num_classes), height, width, T(1) / T(num_classes)) {
    if (num_classes < 2) throw ValidationError("ProbMap needs K >= 2");
  }
  // Takes ownership of raw values; caller is expected to validate().
  explicit ProbMap(FeatureMap<T> raw) : data_(std::move(raw)) {}

  int num_classes() const { return static_cast<int>(data_.channels()); }
  std::size_t height() const { return data_.height(); }
  std::size_t width() const { return data_.width(); }
  std::size_t plane() const { return data_.plane(); }

  T& at(int k, std::size_t y, std::size_t x) { return data_.at(static_cast<std::size_t>(k), y, x); }
  T at(int k, std::size_t y, std::size_t x) const { return data_.at(static_cast<std::size_t>(k), y, x); }
  // Flat pixel index p = y * W + x.
  T& at(int k, std::size_t p) { return data_.values()[static_cast<std::size_t>(k) * plane() + p]; }
  T at(int k, std::size_t p) const { return data_.values()[static_cast<std::size_t>(k) * plane() + p]; }

  std::span<T> values() { return data_.values(); }
  std::span<const T> values() const { return data_.values(); }
  const FeatureMap<T>& raw() const { return data_; }

  bool same_shape(const ProbMap& o) const { return data_.same_shape(o.data_); }

  void validate(double tol = kSumTolerance) const {
    const int k = num_classes();
    for (std::size_t p = 0; p < plane(); ++p) {
      double s = 0;
      for (int c = 0; c < k; ++c) {
        const T v = at(c, p);
        if (!(v >= T(0) && v <= T(1))) {
          throw ValidationError("ProbMap value outside [0,1] at pixel " + std::to_string(p));
        }
        s += v;
      }
      if (std::abs(s - 1.0) > tol) {
        throw ValidationError("ProbMap pixel " + std::to_string(p) + " sums to " + std::to_string(s));
      }
    }
  }

  friend bool operator==(const ProbMap&, const ProbMap&) = default;

 private:
  FeatureMap<T> data_;
};

// PredictionEnsemble: aligned member distributions for one sample.
template <std::floating_point T>
struct PredictionEnsemble {
  std::vector<ProbMap<T>> members;

  void validate() const {
    if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
    for (const auto& m : members) {
      if (!m.same_shape(members.front())) throw ShapeError("ensemble members differ in shape");
    }
  }
  int num_classes() const { return members.front().num_classes(); }
  std::size_t height() const { return members.front().height(); }
  std::size_t width() const { return members.front().width(); }
  std::size_t size() const { return members.size(); }
};

// Ties go to the lowest class index.
template <std::floating_point T>
LabelMap argmax_map(const ProbMap<T>& p) {
  LabelMap out(p.height(), p.width(), p.num_classes());
  const int k = p.num_classes();
  for (std::size_t i = 0; i < p.plane(); ++i) {
    int best = 0;
    T bv = p.at(0, i);
    for (int c = 1; c < k; ++c) {
      if (p.at(c, i) > bv) {
        bv = p.at(c, i);
        best = c;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// Pointwise mean of the ensemble members.
template <std::floating_point T>
ProbMap<T> ensemble_mean(const PredictionEnsemble<T>& ens) {
  ens.validate();
  FeatureMap<T> acc(static_cast<std::size_t>(ens.num_classes()), ens.height(), ens.width());
  auto out = acc.values();
  for (const auto& m : ens.members) {
    auto in = m.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  }
  const T inv = T(1) / static_cast<T>(ens.size());
  for (auto& v : out) v *= inv;
  return ProbMap<T>(std::move(acc));
}

template <std::floating_point T>
ProbMap<T> one_hot(const LabelMap& y) {
  FeatureMap<T> raw(static_cast<std::size_t>(y.num_classes()), y.height(), y.width());
  const std::size_t plane = y.size();
  for (std::size_t p = 0; p < plane; ++p) {
    if (y[p] == kIgnore) {
      for (int k = 0; k < y.num_classes(); ++k) raw.values()[k * plane + p] = T(1) / y.num_classes();
    } else {
      raw.values()[y[p] * plane + p] = T(1);
    }
  }
  return ProbMap<T>(std::move(raw));
}

}  // namespace shape
