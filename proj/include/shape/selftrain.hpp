#pragma once

// Desk-scale self-training: a per-pixel linear softmax decoder with hand-derived
// Dice + focal gradients, an EMA teacher, and the adaptation loop that chains
// feature modulation, plausibility gating and anomaly pruning into pseudo-label
// supervision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "shape/core.hpp"
#include "shape/hfm.hpp"
#include "shape/hpe.hpp"
#include "shape/metrics.hpp"
#include "shape/rng.hpp"
#include "shape/sap.hpp"

namespace shape::selftrain {

// Decoder ----------------------------------------------------------------------------

template <std::floating_point T>
struct DecoderParams {
  int num_classes = 0;
  std::size_t channels = 0;
  std::vector<T> weight;  // K x C, row-major
  std::vector<T> bias;    // K

  static DecoderParams zeros(int k, std::size_t c) {
    return {k, c, std::vector<T>(static_cast<std::size_t>(k) * c, T(0)), std::vector<T>(static_cast<std::size_t>(k), T(0))};
  }

  T& w(int k, std::size_t c) { return weight[static_cast<std::size_t>(k) * channels + c]; }
  T w(int k, std::size_t c) const { return weight[static_cast<std::size_t>(k) * channels + c]; }

  bool all_finite() const {
    auto fin = [](T v) { return std::isfinite(v); };
    return std::all_of(weight.begin(), weight.end(), fin) && std::all_of(bias.begin(), bias.end(), fin);
  }

  friend bool operator==(const DecoderParams&, const DecoderParams&) = default;
};

template <std::floating_point T>
struct Decoded {
  FeatureMap<T> logits;  // at output resolution
  ProbMap<T> probs;
  std::size_t factor = 1;
};

// Linear map W f + b at every feature position, logits bilinearly upsampled by
// `factor`, softmax over classes.
template <std::floating_point T>
Decoded<T> decode_full(const FeatureMap<T>& f, const DecoderParams<T>& theta, std::size_t factor = 1) {
  if (f.channels() != theta.channels) throw ShapeError("decode: feature channels != decoder channels");
  const int K = theta.num_classes;
  const std::size_t C = f.channels(), plane = f.plane();
  FeatureMap<T> lo(static_cast<std::size_t>(K), f.height(), f.width());
  auto in = f.values();
  auto out = lo.values();
  for (int k = 0; k < K; ++k) {
    T* row = out.data() + static_cast<std::size_t>(k) * plane;
    std::fill(row, row + plane, theta.bias[k]);
    for (std::size_t c = 0; c < C; ++c) {
      const T wkc = theta.w(k, c);
      const T* src = in.data() + c * plane;
      for (std::size_t p = 0; p < plane; ++p) row[p] += wkc * src[p];
    }
  }
  auto logits = hfm::upsample_bilinear(lo, factor);
  FeatureMap<T> probs(logits.channels(), logits.height(), logits.width());
  const std::size_t hp = logits.plane();
  auto z = logits.values();
  auto pr = probs.values();
  for (std::size_t p = 0; p < hp; ++p) {
    T mx = z[p];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k * hp + p]);
    T s = 0;
    for (int k = 0; k < K; ++k) {
      const T e = std::exp(z[k * hp + p] - mx);
      pr[k * hp + p] = e;
      s += e;
    }
    for (int k = 0; k < K; ++k) pr[k * hp + p] /= s;
  }
  return {std::move(logits), ProbMap<T>(std::move(probs)), factor};
}

template <std::floating_point T>
ProbMap<T> decode(const FeatureMap<T>& f, const DecoderParams<T>& theta, std::size_t factor = 1) {
  return decode_full(f, theta, factor).probs;
}

// Losses ----------------------------------------------------------------------------------

// Loss value and its gradient with respect to the pre-softmax logits that
// produced `p`.
template <std::floating_point T>
struct LossGrad {
  double loss = 0;
  FeatureMap<T> grad_logits;
};

namespace detail {

inline double ipow(double b, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= b;
  return r;
}

template <std::floating_point T>
void check_loss_inputs(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w) {
  if (p.height() != y.height() || p.width() != y.width()) throw ShapeError("loss: prediction/label shape mismatch");
  if (p.num_classes() != y.num_classes()) throw ShapeError("loss: class count mismatch");
  if (!w.empty() && w.size() != y.size()) throw ShapeError("loss: pixel weight size mismatch");
}

}  // namespace detail

namespace detail {

// Loss terms accumulate dL/dp into `dp` (K x plane) and return the loss;
// softmax_backward turns the sum into dL/dz.

template <std::floating_point T>
double dice_dp(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w, double smooth,
               std::vector<double>& dp) {
  const int K = p.num_classes();
  const std::size_t plane = p.plane();
  std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
  std::vector<char> present(K, 0);
  for (std::size_t px = 0; px < plane; ++px) {
    if (y[px] == kIgnore) continue;
    const double wp = w.empty() ? 1.0 : w[px];
    for (int k = 1; k < K; ++k) psum[k] += wp * p.at(k, px);
    if (y[px] > 0 && y[px] < K) {
      inter[y[px]] += wp * p.at(y[px], px);
      gsum[y[px]] += wp;
      present[y[px]] = 1;
    }
  }
  // Classes with no labelled pixel are skipped: after pruning a whole class the
  // remaining pixels say nothing about where it is.
  const auto n_present = std::count(present.begin() + 1, present.end(), char{1});
  if (n_present == 0) return 0.0;
  const double nfg = static_cast<double>(n_present);
  double dsum = 0;
  std::vector<double> den(K), num(K), base(K, 0.0), hit(K, 0.0);
  for (int k = 1; k < K; ++k) {
    if (!present[k]) continue;
    num[k] = 2 * inter[k] + smooth;
    den[k] = psum[k] + gsum[k] + smooth;
    dsum += num[k] / den[k];
    base[k] = num[k] / (den[k] * den[k] * nfg);  // d/dp_k where y != k
    hit[k] = base[k] - 2.0 / (den[k] * nfg);     // d/dp_k where y == k
  }
  for (std::size_t px = 0; px < plane; ++px) {
    if (y[px] == kIgnore) continue;
    const double wp = w.empty() ? 1.0 : w[px];
    for (int k = 1; k < K; ++k) dp[k * plane + px] += wp * (y[px] == k ? hit[k] : base[k]);
  }
  return 1.0 - dsum / nfg;
}

template <std::floating_point T>
double focal_dp(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w, double gamma,
                std::vector<double>& dp) {
  const std::size_t plane = p.plane();
  std::size_t valid = 0;
  for (std::size_t px = 0; px < plane; ++px) valid += y[px] != kIgnore;
  if (valid == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(valid);
  constexpr double tiny = 1e-300;
  const int igamma = static_cast<int>(gamma);
  const bool int_gamma = gamma >= 1.0 && gamma <= 8.0 && static_cast<double>(igamma) == gamma;
  double total = 0;
  for (std::size_t px = 0; px < plane; ++px) {
    if (y[px] == kIgnore) continue;
    const int t = y[px];
    const double wp = w.empty() ? 1.0 : w[px];
    const double pt = p.at(t, px);
    const double logp = std::log(std::max(pt, tiny));
    const double om = 1.0 - pt;
    // (1-p)^(g-1); only used where 1-p > 0
    const double mod_1 = gamma == 0.0 || !(om > 0) ? 0.0
                         : int_gamma                ? ipow(om, igamma - 1)
                                                    : std::pow(om, gamma - 1.0);
    const double mod = gamma == 0.0 ? 1.0 : mod_1 * om;
    total += -wp * mod * logp;
    // d/dp_t of -(1-p)^g log p
    double dpt = -mod / std::max(pt, tiny);
    if (gamma != 0.0 && om > 0) dpt += gamma * mod_1 * logp;
    dp[t * plane + px] += wp * inv_n * dpt;
  }
  return total * inv_n;
}

// dL/dz_j = p_j (dL/dp_j - sum_k p_k dL/dp_k) for p = softmax(z).
template <std::floating_point T>
FeatureMap<T> softmax_backward(const ProbMap<T>& p, const std::vector<double>& dp) {
  const int K = p.num_classes();
  const std::size_t plane = p.plane();
  FeatureMap<T> g(static_cast<std::size_t>(K), p.height(), p.width());
  auto gv = g.values();
  for (std::size_t px = 0; px < plane; ++px) {
    double dot = 0;
    for (int k = 0; k < K; ++k) dot += p.at(k, px) * dp[k * plane + px];
    for (int k = 0; k < K; ++k) gv[k * plane + px] = static_cast<T>(p.at(k, px) * (dp[k * plane + px] - dot));
  }
  return g;
}

}  // namespace detail

// Soft Dice over the foreground classes present in y:
//   L = 1 - mean_k (2 I_k + s) / (P_k + G_k + s)
// with I, P, G weighted sums over non-ignored pixels. Empty `w` means unit weights;
// a label with no foreground gives 0.
template <std::floating_point T>
LossGrad<T> dice_loss(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w, double smooth) {
  detail::check_loss_inputs(p, y, w);
  std::vector<double> dp(p.values().size(), 0.0);
  const double loss = detail::dice_dp(p, y, w, smooth, dp);
  return {loss, detail::softmax_backward(p, dp)};
}

// Focal loss -(1 - p_t)^gamma log p_t, weighted per pixel and averaged over the
// non-ignored pixels. gamma = 0 is cross-entropy.
template <std::floating_point T>
LossGrad<T> focal_loss(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w, double gamma) {
  detail::check_loss_inputs(p, y, w);
  std::vector<double> dp(p.values().size(), 0.0);
  const double loss = detail::focal_dp(p, y, w, gamma, dp);
  return {loss, detail::softmax_backward(p, dp)};
}

struct TrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-3;
  double ema_momentum = 0.9;
  double gamma_max = 1.0;  // target of the unsupervised-weight ramp
  double focal_gamma = 2.0;
  double dice_smooth = 1.0;
  std::size_t ramp_epochs = 30;
  std::size_t batch_size = 20;

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
    if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ValidationError("ema_momentum must lie in [0, 1)");
    if (!(gamma_max >= 0)) throw ValidationError("gamma_max must be non-negative");
    if (!(focal_gamma >= 0)) throw ValidationError("focal_gamma must be non-negative");
    if (!(dice_smooth >= 0)) throw ValidationError("dice_smooth must be non-negative");
    if (ramp_epochs < 1) throw ValidationError("ramp_epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

// dice + focal with unit weights.
template <std::floating_point T>
LossGrad<T> seg_loss(const ProbMap<T>& p, const LabelMap& y, std::span<const double> w, const TrainConfig& cfg) {
  detail::check_loss_inputs(p, y, w);
  std::vector<double> dp(p.values().size(), 0.0);
  double loss = detail::dice_dp(p, y, w, cfg.dice_smooth, dp);
  loss += detail::focal_dp(p, y, w, cfg.focal_gamma, dp);
  return {loss, detail::softmax_backward(p, dp)};
}

// Parameter gradients --------------------------------------------------------------------

template <std::floating_point T>
struct ParamGrad {
  double loss = 0;
  DecoderParams<T> grad;
};

// Chains an output-resolution logit gradient back through the upsampling and the
// linear map.
template <std::floating_point T>
void accumulate_param_grad(const FeatureMap<T>& f, const FeatureMap<T>& grad_logits, std::size_t factor, double scale,
                           DecoderParams<T>& out) {
  const auto g = hfm::upsample_bilinear_adjoint(grad_logits, factor, f.height(), f.width());
  const std::size_t plane = f.plane(), C = f.channels();
  auto gv = g.values();
  auto fv = f.values();
  for (int k = 0; k < out.num_classes; ++k) {
    const T* gk = gv.data() + static_cast<std::size_t>(k) * plane;
    double bsum = 0;
    for (std::size_t p = 0; p < plane; ++p) bsum += gk[p];
    out.bias[k] += static_cast<T>(scale * bsum);
    for (std::size_t c = 0; c < C; ++c) {
      const T* fc = fv.data() + c * plane;
      double s = 0;
      for (std::size_t p = 0; p < plane; ++p) s += gk[p] * fc[p];
      out.w(k, c) += static_cast<T>(scale * s);
    }
  }
}

// Decode then seg_loss; gradient with respect to (W, b).
template <std::floating_point T>
ParamGrad<T> seg_loss_params(const FeatureMap<T>& f, const DecoderParams<T>& theta, const LabelMap& y,
                             std::span<const double> w, const TrainConfig& cfg) {
  const std::size_t factor = y.height() / f.height();
  if (factor * f.height() != y.height() || factor * f.width() != y.width()) {
    throw ShapeError("labels are not an integer upscale of the feature grid");
  }
  const auto dec = decode_full(f, theta, factor);
  auto lg = seg_loss(dec.probs, y, w, cfg);
  ParamGrad<T> r{lg.loss, DecoderParams<T>::zeros(theta.num_classes, theta.channels)};
  accumulate_param_grad(f, lg.grad_logits, factor, 1.0, r.grad);
  return r;
}

// Original and modulated views of one sample, all decoder-ready.
template <std::floating_point T>
struct FeatureSet {
  std::vector<FeatureMap<T>> views;
};

// Mean seg_loss over the views of one source sample.
template <std::floating_point T>
ParamGrad<T> sup_loss(const FeatureSet<T>& fs, const LabelMap& labels, const DecoderParams<T>& theta,
                      const TrainConfig& cfg) {
  if (fs.views.empty()) throw ValidationError("sup_loss: empty feature set");
  ParamGrad<T> r{0.0, DecoderParams<T>::zeros(theta.num_classes, theta.channels)};
  const double inv = 1.0 / static_cast<double>(fs.views.size());
  for (const auto& v : fs.views) {
    auto one = seg_loss_params(v, theta, labels, {}, cfg);
    r.loss += inv * one.loss;
    for (std::size_t i = 0; i < r.grad.weight.size(); ++i) r.grad.weight[i] += static_cast<T>(inv * one.grad.weight[i]);
    for (std::size_t i = 0; i < r.grad.bias.size(); ++i) r.grad.bias[i] += static_cast<T>(inv * one.grad.bias[i]);
  }
  return r;
}

template <std::floating_point T>
struct TeacherOutput {
  PredictionEnsemble<T> ensemble;
  LabelMap consensus;  // argmax of the member mean
};

// One teacher prediction per view. A single view (no modulation) is replicated
// into three identical members, the default ensemble size.
// `first`, when given, is the already-decoded prediction for views[0].
template <std::floating_point T>
TeacherOutput<T> teacher_ensemble(const FeatureSet<T>& fs, const DecoderParams<T>& teacher, std::size_t factor,
                                  const ProbMap<T>* first = nullptr) {
  if (fs.views.empty()) throw ValidationError("teacher_ensemble: empty feature set");
  TeacherOutput<T> out;
  for (std::size_t i = 0; i < fs.views.size(); ++i) {
    out.ensemble.members.push_back(i == 0 && first ? *first : decode(fs.views[i], teacher, factor));
  }
  if (out.ensemble.members.size() == 1) out.ensemble.members.resize(3, out.ensemble.members.front());
  out.consensus = argmax_map(ensemble_mean(out.ensemble));
  return out;
}

// Weighted seg_loss of the student on a selected target sample; unselected
// samples contribute nothing.
template <std::floating_point T>
ParamGrad<T> unsup_loss(const FeatureMap<T>& f, const LabelMap& pseudo, std::span<const double> w,
                        const DecoderParams<T>& theta, bool selected, const TrainConfig& cfg) {
  if (!selected) return {0.0, DecoderParams<T>::zeros(theta.num_classes, theta.channels)};
  return seg_loss_params(f, theta, pseudo, w, cfg);
}

// teacher <- m teacher + (1 - m) student
template <std::floating_point T>
void ema_update(DecoderParams<T>& teacher, const DecoderParams<T>& student, double m) {
  if (!(m >= 0 && m < 1)) throw ValidationError("ema momentum must lie in [0, 1)");
  if (teacher.weight.size() != student.weight.size() || teacher.bias.size() != student.bias.size()) {
    throw ShapeError("ema_update: parameter shapes differ");
  }
  for (std::size_t i = 0; i < teacher.weight.size(); ++i)
    teacher.weight[i] = static_cast<T>(m * teacher.weight[i] + (1 - m) * student.weight[i]);
  for (std::size_t i = 0; i < teacher.bias.size(); ++i)
    teacher.bias[i] = static_cast<T>(m * teacher.bias[i] + (1 - m) * student.bias[i]);
}

// w_max exp(-5 (1 - min(t, T)/T)^2)
inline double ramp_weight(double t, double ramp_length, double w_max) {
  if (!(ramp_length >= 1)) throw ValidationError("ramp length must be >= 1");
  const double x = 1.0 - std::min(std::max(t, 0.0), ramp_length) / ramp_length;
  return w_max * std::exp(-5.0 * x * x);
}

// Same sigmoid ramp between `start` and `end`.
inline double ramp_between(double t, double ramp_length, double start, double end) {
  return start + (end - start) * ramp_weight(t, ramp_length, 1.0);
}

// Adaptation loop ---------------------------------------------------------------------------

struct PipelineFlags {
  bool hfm = true;
  bool hpe = true;
  bool sap = true;
  bool unsup = true;
  bool pixel_weights = true;  // weight the unsupervised loss by the vertex pixel weights
};

struct AdaptConfig {
  hfm::HfmConfig hfm;
  hpe::GateConfig gate;
  sap::SapConfig sap;
  TrainConfig train;
  PipelineFlags flags;
  std::uint64_t seed = 7;

  void validate() const {
    hfm.validate();
    gate.validate();
    sap.validate();
    train.validate();
  }
};

// Scalar type of the adaptation loop. The loss and decoder templates above also
// run at double precision for gradient checking.
using Real = float;

// One sample prepared for training. `normed` is the layer-normalized view the
// decoder consumes; `raw` feeds the modulation.
struct PreparedItem {
  std::string id;
  FeatureMap<Real> raw;
  FeatureMap<Real> normed;
  LabelMap labels;  // ground truth; for target items used only for evaluation
};

inline PreparedItem prepare(std::string id, const FeatureMap<float>& f, LabelMap labels) {
  auto raw = f.cast<Real>();
  auto normed = hfm::layer_norm(raw, hfm::LayerNormParams<Real>::identity(raw.channels()));
  return {std::move(id), std::move(raw), std::move(normed), std::move(labels)};
}

struct AdaptState {
  DecoderParams<Real> student;
  DecoderParams<Real> teacher;
  hpe::ScoreAccumulator accumulator;
  SeededRng rng;
  std::size_t epoch = 0;
};

inline AdaptState init_state(int num_classes, std::size_t channels, std::uint64_t seed) {
  auto p = DecoderParams<Real>::zeros(num_classes, channels);
  return {p, p, {}, SeededRng(seed).derive(0x5E1F), 0};
}

struct EpochReport {
  std::size_t epoch = 0;
  double sup_loss = 0;
  double unsup_loss = 0;
  double total_loss = 0;
  double gamma = 0;
  double rho = 0;
  std::size_t target_seen = 0;
  std::size_t selected = 0;
  double selection_rate = 0;
  std::size_t pruned_classes = 0;
  std::size_t pruned_pixels = 0;
  double mean_s_final = 0;
};

namespace detail {

inline std::vector<std::size_t> permutation(std::size_t n, SeededRng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

inline void add_scaled(DecoderParams<Real>& acc, const DecoderParams<Real>& g, double s) {
  for (std::size_t i = 0; i < acc.weight.size(); ++i) acc.weight[i] += static_cast<Real>(s * g.weight[i]);
  for (std::size_t i = 0; i < acc.bias.size(); ++i) acc.bias[i] += static_cast<Real>(s * g.bias[i]);
}

}  // namespace detail

// One pass over the source set in shuffled batches, each paired with a batch of
// target samples. Parameters, teacher and accumulator in `state` are updated.
inline EpochReport adapt_epoch(std::span<const PreparedItem> source, std::span<const PreparedItem> target,
                               AdaptState& state, const AdaptConfig& cfg) {
  cfg.validate();
  if (source.empty()) throw ValidationError("adapt_epoch: no source samples");
  const auto& flags = cfg.flags;
  const bool use_target = flags.unsup || flags.hfm;
  if (use_target && target.empty()) throw ValidationError("adapt_epoch: no target samples");

  const std::size_t label_px = source.front().labels.height();
  const std::size_t factor = label_px / source.front().raw.height();
  const auto& tc = cfg.train;
  const double t = static_cast<double>(state.epoch);
  const double ramp = static_cast<double>(tc.ramp_epochs);

  EpochReport rep;
  rep.epoch = state.epoch;
  rep.gamma = flags.unsup ? ramp_weight(t, ramp, tc.gamma_max) : 0.0;
  rep.rho = ramp_between(t, ramp, cfg.gate.rho_0, cfg.gate.rho_max);
  state.accumulator.start_epoch(state.epoch);

  const auto perm_s = detail::permutation(source.size(), state.rng);
  const auto perm_t = detail::permutation(target.size(), state.rng);
  const std::size_t B = tc.batch_size;
  const std::size_t n_batches = (source.size() + B - 1) / B;
  double s_final_sum = 0;
  std::size_t s_final_n = 0;

  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t lo = b * B, hi = std::min(source.size(), lo + B);
    const std::size_t n = hi - lo;
    auto grad = DecoderParams<Real>::zeros(state.student.num_classes, state.student.channels);
    const double lambda = state.rng.uniform();
    auto hcfg = cfg.hfm;
    hcfg.fixed_lambda = lambda;

    // target views + teacher pseudo-labels used by the modulation
    std::vector<const PreparedItem*> tgt(n, nullptr);
    std::vector<FeatureSet<Real>> tviews(n), sviews(n);
    std::vector<std::optional<ProbMap<Real>>> tprob(n);  // teacher on the original target view
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = source[perm_s[lo + i]];
      if (!use_target) {
        sviews[i].views = {s.normed};
        continue;
      }
      tgt[i] = &target[perm_t[(lo + i) % target.size()]];
      if (flags.hfm) {
        tprob[i] = decode(tgt[i]->normed, state.teacher, factor);
        const auto pseudo = argmax_map(*tprob[i]);
        const auto h = hfm::hfm_forward(s.raw, s.labels, tgt[i]->raw, pseudo, hcfg, state.rng);
        sviews[i].views = {s.normed, h.source_to_target, h.source_cross};
        tviews[i].views = {tgt[i]->normed, h.target_to_source, h.target_cross};
      } else {
        sviews[i].views = {s.normed};
        tviews[i].views = {tgt[i]->normed};
      }
    }

    double sup = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = sup_loss(sviews[i], source[perm_s[lo + i]].labels, state.student, tc);
      sup += g.loss / static_cast<double>(n);
      detail::add_scaled(grad, g.grad, 1.0 / static_cast<double>(n));
    }
    rep.sup_loss += sup / static_cast<double>(n_batches);

    double unsup = 0;
    if (flags.unsup) {
      std::vector<PredictionEnsemble<Real>> ens(n);
      std::vector<LabelMap> consensus(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto to = teacher_ensemble(tviews[i], state.teacher, factor, tprob[i] ? &*tprob[i] : nullptr);
        ens[i] = std::move(to.ensemble);
        consensus[i] = std::move(to.consensus);
      }

      std::vector<bool> selected(n, true);
      std::vector<std::vector<double>> weights(n);
      if (flags.hpe) {
        auto reports = hpe::score_batch<Real>(ens, consensus, cfg.gate);
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) {
          scores[i] = reports[i].s_final;
          s_final_sum += scores[i];
          ++s_final_n;
          if (flags.pixel_weights) weights[i] = std::move(reports[i].pixel_weights);
        }
        std::fill(selected.begin(), selected.end(), false);
        for (auto idx : hpe::select_samples(state.accumulator, scores, rep.rho, cfg.gate.warmup)) selected[idx] = true;
      }

      std::vector<LabelMap> pseudo = consensus;
      if (flags.sap) {
        std::vector<std::vector<LabelMap>> members(n);
        for (std::size_t i = 0; i < n; ++i)
          for (const auto& m : ens[i].members) members[i].push_back(argmax_map(m));
        auto pr = sap::prune_batch(members, consensus, cfg.sap);
        for (std::size_t i = 0; i < n; ++i) {
          pseudo[i] = std::move(pr[i].pruned);
          if (selected[i]) {
            rep.pruned_classes += pr[i].anomalous.size();
            rep.pruned_pixels += pr[i].pruned_pixels;
          }
        }
      }

      const auto n_sel = static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true));
      rep.target_seen += n;
      rep.selected += n_sel;
      auto ugrad = DecoderParams<Real>::zeros(state.student.num_classes, state.student.channels);
      for (std::size_t i = 0; i < n && n_sel; ++i) {
        if (!selected[i]) continue;
        const auto g = unsup_loss(tgt[i]->normed, pseudo[i], weights[i], state.student, true, tc);
        unsup += g.loss / static_cast<double>(n_sel);
        detail::add_scaled(ugrad, g.grad, 1.0 / static_cast<double>(n_sel));
      }
      if (rep.gamma != 0.0) detail::add_scaled(grad, ugrad, rep.gamma);
      rep.unsup_loss += unsup / static_cast<double>(n_batches);
    }

    const double total = sup + rep.gamma * unsup;
    if (!std::isfinite(total)) {
      std::ostringstream os;
      os << "non-finite loss at epoch " << state.epoch << " batch " << b << " (sup " << sup << ", unsup " << unsup
         << ")";
      throw std::runtime_error(os.str());
    }
    rep.total_loss += total / static_cast<double>(n_batches);

    detail::add_scaled(state.student, grad, -tc.learning_rate);
    ema_update(state.teacher, state.student, tc.ema_momentum);
  }
  rep.selection_rate = rep.target_seen ? static_cast<double>(rep.selected) / static_cast<double>(rep.target_seen) : 0.0;
  rep.mean_s_final = s_final_n ? s_final_sum / static_cast<double>(s_final_n) : 0.0;
  ++state.epoch;
  return rep;
}

struct AdaptResult {
  AdaptState state;
  std::vector<EpochReport> epochs;
};

// Continues from `start` until cfg.train.epochs epochs have run in total.
inline AdaptResult adapt_from(AdaptState start, std::span<const PreparedItem> source,
                              std::span<const PreparedItem> target, const AdaptConfig& cfg,
                              const std::function<void(const EpochReport&, const AdaptState&)>& on_epoch = {}) {
  cfg.validate();
  AdaptResult r{std::move(start), {}};
  while (r.state.epoch < cfg.train.epochs) {
    r.epochs.push_back(adapt_epoch(source, target, r.state, cfg));
    if (on_epoch) on_epoch(r.epochs.back(), r.state);
  }
  return r;
}

inline AdaptResult adapt(std::span<const PreparedItem> source, std::span<const PreparedItem> target,
                         const AdaptConfig& cfg,
                         const std::function<void(const EpochReport&, const AdaptState&)>& on_epoch = {}) {
  if (source.empty()) throw ValidationError("adapt: no source samples");
  return adapt_from(init_state(source.front().labels.num_classes(), source.front().raw.channels(), cfg.seed), source,
                    target, cfg, on_epoch);
}

struct DatasetMetrics {
  double mean_dsc = 0;
  double mean_asd = 0;  // over samples/classes where ASD is defined
  std::size_t asd_undefined = 0;
  std::vector<double> per_class_dsc;  // index k, [0] unused
};

// Student predictions against ground truth labels, averaged over samples.
inline DatasetMetrics evaluate(std::span<const PreparedItem> items, const DecoderParams<Real>& theta,
                               double spacing = 1.0) {
  DatasetMetrics m;
  if (items.empty()) return m;
  const int K = theta.num_classes;
  m.per_class_dsc.assign(static_cast<std::size_t>(K), 0.0);
  double asd_sum = 0;
  std::size_t asd_n = 0;
  for (const auto& it : items) {
    const std::size_t factor = it.labels.height() / it.normed.height();
    const auto pred = argmax_map(decode(it.normed, theta, factor));
    const auto r = metrics::evaluate(pred, it.labels, spacing);
    m.mean_dsc += r.mean_dsc;
    for (const auto& c : r.per_class) {
      m.per_class_dsc[c.k] += c.dsc;
      if (std::isfinite(c.asd)) {
        asd_sum += c.asd;
        ++asd_n;
      } else {
        ++m.asd_undefined;
      }
    }
  }
  const double n = static_cast<double>(items.size());
  m.mean_dsc /= n;
  for (auto& v : m.per_class_dsc) v /= n;
  m.mean_asd = asd_n ? asd_sum / static_cast<double>(asd_n) : std::numeric_limits<double>::infinity();
  return m;
}

}  // namespace shape::selftrain
