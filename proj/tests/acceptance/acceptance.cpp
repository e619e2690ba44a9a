// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [--skip-e2e]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cli_app.hpp"
#include "oracles.hpp"
#include "shape/config.hpp"
#include "shape/hfm.hpp"
#include "shape/hpe.hpp"
#include "shape/metrics.hpp"
#include "shape/sap.hpp"
#include "shape/selftrain.hpp"
#include "shape/synth.hpp"

#ifndef SHAPE_CONFIG_DIR
#define SHAPE_CONFIG_DIR "configs"
#endif

using namespace shape;
namespace fs = std::filesystem;

namespace {

// Tolerances, pinned.
constexpr double kAdainTol = 1e-4;
constexpr double kAdainSeconds = 5.0;
constexpr double kHfmIdentityTol = 1e-4;
constexpr double kDiskRelTol = 0.02;
constexpr double kVertexTol = 1e-6;
constexpr double kSoftminTol = 1e-3;
constexpr double kGateTol = 1e-12;
constexpr double kUpsilonTol = 1e-12;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr double kAdaptGain = 5.0;     // full over no adaptation, DSC points
constexpr double kTieTolerance = 1.0;  // full vs partial configurations
constexpr double kE2eSeconds = 600.0;

// Target mean DSC measured on the reference run (seed 7, 100 epochs, configs/synthetic.toml).
// Frozen as regression values; a rerun must land within kFrozenTol of each.
struct Frozen {
  const char* name;
  double dsc;
};
constexpr Frozen kFrozen[] = {{"noadapt", 70.34}, {"base", 90.33},    {"hfm", 92.34}, {"hpe", 89.92},
                              {"hfm+hpe", 92.23}, {"hfm+sap", 92.04}, {"full", 92.11}};
constexpr double kFrozenTol = 0.5;

int failures = 0;

void report(bool ok, const std::string& id, const std::string& what) {
  std::printf("%s  %-4s %s\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
double max_abs_diff(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
  return m;
}

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  SeededRng rng(101);
  double stat_dev = 0, self_dev = 0;
  // per-channel gains span [1/e, e]; the eps perturbation of the output std is sigma_t * eps / sigma_s
  for (int t = 0; t < 50; ++t) {
    const auto s = oracle::random_features(rng, 16, 32, 32, 1.0, rng.uniform(-3, 3));
    const auto g = oracle::random_features(rng, 16, 32, 32, 1.0, rng.uniform(-3, 3));
    const auto out = hfm::adain(s, g, 1e-5);
    for (std::size_t c = 0; c < 16; ++c) {
      const auto o = oracle::two_pass(out.channel(c)), r = oracle::two_pass(g.channel(c));
      stat_dev = std::max({stat_dev, std::abs(o.mean - r.mean), std::abs(o.std - r.std)});
    }
    self_dev = std::max(self_dev, max_abs_diff(hfm::adain(s, s, 1e-5), s));
  }
  const double sec = seconds_since(t0);
  report(stat_dev < kAdainTol && self_dev < kAdainTol && sec < kAdainSeconds, "1",
         fmt("AdaIN: stat dev %.2e, self dev %.2e (< %.0e), %.2f s (< %.0f)", stat_dev, self_dev, kAdainTol, sec,
             kAdainSeconds));
}

void criterion_2() {
  SeededRng rng(202);
  double dev = 0;
  for (int t = 0; t < 10; ++t) {
    const auto f = oracle::random_features(rng, 16, 16, 16);
    const auto y = oracle::random_blobs(rng, 4, 32, 32);
    hfm::HfmConfig cfg;
    cfg.fixed_lambda = 0.0;
    SeededRng r(t);
    const auto out = hfm::hfm_forward(f, y, f, y, cfg, r);
    const auto ref = hfm::layer_norm(f, hfm::LayerNormParams<double>::identity(16));
    for (const auto* o : {&out.source_to_target, &out.source_cross, &out.target_to_source, &out.target_cross})
      dev = std::max(dev, max_abs_diff(*o, ref));
  }
  report(dev < kHfmIdentityTol, "2", fmt("HFM identity at lambda 0: max dev %.2e (< %.0e)", dev, kHfmIdentityTol));
}

void criterion_3() {
  const auto sq = oracle::rect(60, 60, 10, 10, 40, 40, 1, 2);
  const auto px = hpe::class_pixels(sq, 1);
  const double area = static_cast<double>(px.size());
  const double perim = static_cast<double>(hpe::perimeter_edges(px));
  const double phi_sq = hpe::isoperimetric(px);
  const bool sq_ok = area == 1600 && perim == 160 && std::abs(phi_sq - std::numbers::pi / 4) < 1e-9;
  report(sq_ok, "3a", fmt("square 40x40: area %.0f, perimeter %.0f, phi %.12f (pi/4 = %.12f)", area, perim, phi_sq,
                          std::numbers::pi / 4));

  const auto d = oracle::disk(128, 50.0);
  const double phi = hpe::isoperimetric(hpe::class_pixels(d, 1));
  const double ref = oracle::marching_squares(d, 1).phi();
  const double rel = std::abs(phi - ref) / ref;
  report(rel < kDiskRelTol, "3b",
         fmt("disk r=50: edge-count phi %.4f vs marching-squares %.4f, rel %.3f (< %.2f)", phi, ref, rel, kDiskRelTol));
}

void criterion_4() {
  SeededRng rng(404);
  double dev = 0;
  for (int t = 0; t < 20; ++t) {
    const int K = 2 + static_cast<int>(rng.below(4));
    const std::size_t M = 2 + rng.below(3);
    const auto base = oracle::random_blobs(rng, K - 1, 24, 24);
    PredictionEnsemble<double> e;
    for (std::size_t m = 0; m < M; ++m) {
      LabelMap y(24, 24, K);
      std::copy(base.values().begin(), base.values().end(), y.values().begin());
      auto p = one_hot<double>(y);
      const auto noise = oracle::random_probs<double>(rng, K, 24, 24, 1.5);
      for (std::size_t i = 0; i < p.values().size(); ++i) p.values()[i] = 0.6 * p.values()[i] + 0.4 * noise.values()[i];
      e.members.push_back(std::move(p));
    }
    const auto cons = argmax_map(ensemble_mean(e));
    const auto v = hpe::vertex_score(e, cons);
    const auto r = oracle::vertex(e.members, cons);
    dev = std::max(dev, std::abs(v.s_vertex - r.s_vertex));
    for (std::size_t p = 0; p < r.weights.size(); ++p) dev = std::max(dev, std::abs(v.pixel_weights[p] - r.weights[p]));
  }
  report(dev < kVertexTol, "4a", fmt("vertex score vs per-pixel oracle: max dev %.2e (< %.0e)", dev, kVertexTol));

  bool bounded = true;
  double gap = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s(1 + rng.below(12));
    for (auto& v : s) v = rng.uniform();
    const double lo = *std::min_element(s.begin(), s.end()), hi = *std::max_element(s.begin(), s.end());
    const double a = hpe::penalized_aggregate(s, 0.1);
    bounded = bounded && a >= lo - 1e-15 && a <= hi + 1e-15;
    gap = std::max(gap, std::abs(hpe::penalized_aggregate(s, 1e-4) - lo));
  }
  report(bounded && gap < kSoftminTol, "4b",
         fmt("penalized aggregate: bounded %s, |agg(tau=1e-4) - min| max %.2e (< %.0e)", bounded ? "yes" : "no", gap,
             kSoftminTol));
}

void criterion_5() {
  SeededRng rng(505);
  double dev = 0;
  bool mono = true;
  for (int t = 0; t < 1000; ++t) {
    const double sv = rng.uniform(), si = rng.uniform(), se = rng.uniform(), a = rng.uniform();
    const double f = hpe::final_score(sv, si, se, a);
    dev = std::max(dev, std::abs(f - sv * (a * si + (1 - a) * se)));
    const double dv = rng.uniform(0, 1 - sv), di = rng.uniform(0, 1 - si), de = rng.uniform(0, 1 - se);
    mono = mono && hpe::final_score(sv + dv, si, se, a) >= f && hpe::final_score(sv, si + di, se, a) >= f &&
           hpe::final_score(sv, si, se + de, a) >= f;
  }
  report(dev < kGateTol && mono, "5",
         fmt("product gate: identity dev %.2e (< %.0e), monotone %s", dev, kGateTol, mono ? "yes" : "no"));
}

void criterion_6() {
  const std::vector<double> c{90, 100, 110};
  const double u0 = sap::instability(c, 0.0);
  const double ud = sap::instability(c, sap::SapConfig{}.eps);
  report(std::abs(u0 - 0.1) < kUpsilonTol, "6a",
         fmt("instability(90,100,110) = %.15f at eps 0 (tol %.0e); %.15f at default eps", u0, kUpsilonTol, ud));

  SeededRng rng(606);
  bool empty = true, idem = true;
  for (int b = 0; b < 50; ++b) {
    std::vector<std::vector<LabelMap>> members;
    std::vector<LabelMap> cons;
    for (int i = 0; i < 4; ++i) {
      const auto y = oracle::random_blobs(rng, 1 + static_cast<int>(rng.below(4)), 32, 32, 4);
      LabelMap y5(32, 32, 5);
      std::copy(y.values().begin(), y.values().end(), y5.values().begin());
      members.push_back({y5, y5, y5});
      cons.push_back(y5);
    }
    for (const auto& r : sap::prune_batch(members, cons, sap::SapConfig{})) empty = empty && r.anomalous.empty();
    std::set<int> a;
    for (int k = 1; k < 5; ++k)
      if (rng.below(2)) a.insert(k);
    const auto p = sap::prune(cons[0], a);
    idem = idem && sap::prune(p, a) == p;
  }
  report(empty && idem, "6b",
         fmt("identical members: anomalous sets empty %s; prune idempotent %s", empty ? "yes" : "no",
             idem ? "yes" : "no"));
}

ProbMap<double> softmax(const FeatureMap<double>& z) {
  FeatureMap<double> p(z.channels(), z.height(), z.width());
  const std::size_t plane = z.plane(), K = z.channels();
  for (std::size_t q = 0; q < plane; ++q) {
    double mx = -1e300, s = 0;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z.values()[k * plane + q]);
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z.values()[k * plane + q] - mx);
    for (std::size_t k = 0; k < K; ++k) p.values()[k * plane + q] = std::exp(z.values()[k * plane + q] - mx) / s;
  }
  return ProbMap<double>(std::move(p));
}

void criterion_7() {
  using namespace selftrain;
  const auto t0 = std::chrono::steady_clock::now();
  SeededRng rng(707);
  constexpr int K = 4;
  constexpr std::size_t H = 16, W = 16, C = 6;
  double err_dice = 0, err_focal = 0, err_comp = 0;
  auto vec = [](std::span<const double> s) { return std::vector<double>(s.begin(), s.end()); };
  auto logits_check = [&](const std::function<LossGrad<double>(const ProbMap<double>&)>& loss) {
    const auto z0 = oracle::random_features(rng, K, H, W);
    const auto analytic = vec(loss(softmax(z0)).grad_logits.values());
    const auto numeric = oracle::central_diff(
        [&](const std::vector<double>& z) {
          FeatureMap<double> f(K, H, W);
          std::copy(z.begin(), z.end(), f.values().begin());
          return loss(softmax(f)).loss;
        },
        vec(z0.values()), 1e-5);
    return oracle::max_rel_error(analytic, numeric, 1e-6);
  };
  for (int t = 0; t < 20; ++t) {
    auto y = oracle::random_blobs(rng, K - 1, H, W);
    for (int i = 0; i < 6; ++i) y[rng.below(y.size())] = kIgnore;
    std::vector<double> w(y.size());
    for (auto& v : w) v = rng.uniform(0.1, 1.0);
    err_dice = std::max(err_dice, logits_check([&](const ProbMap<double>& p) { return dice_loss(p, y, w, 1.0); }));
    const double gamma = t % 4 == 0 ? 0.0 : 0.5 * (t % 4) + 0.5;
    err_focal = std::max(err_focal, logits_check([&](const ProbMap<double>& p) { return focal_loss(p, y, w, gamma); }));

    const auto f = oracle::random_features(rng, C, H / 2, W / 2);
    auto th = DecoderParams<double>::zeros(K, C);
    for (auto& v : th.weight) v = 0.5 * rng.normal();
    for (auto& v : th.bias) v = 0.5 * rng.normal();
    TrainConfig cfg;
    const auto g = seg_loss_params(f, th, y, w, cfg);
    std::vector<double> x(th.weight);
    x.insert(x.end(), th.bias.begin(), th.bias.end());
    std::vector<double> analytic(g.grad.weight);
    analytic.insert(analytic.end(), g.grad.bias.begin(), g.grad.bias.end());
    const auto numeric = oracle::central_diff(
        [&](const std::vector<double>& v) {
          auto p = th;
          std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(p.weight.size()), p.weight.begin());
          std::copy(v.begin() + static_cast<std::ptrdiff_t>(p.weight.size()), v.end(), p.bias.begin());
          return seg_loss_params(f, p, y, w, cfg).loss;
        },
        x, 1e-5);
    err_comp = std::max(err_comp, oracle::max_rel_error(analytic, numeric, 1e-6));
  }
  const double sec = seconds_since(t0);
  const double worst = std::max({err_dice, err_focal, err_comp});
  report(worst < kGradRelTol && sec < kGradSeconds, "7",
         fmt("gradients: dice %.2e, focal %.2e, decode+loss %.2e (< %.0e), %.2f s (< %.0f)", err_dice, err_focal,
             err_comp, kGradRelTol, sec, kGradSeconds));
}

void criterion_8() {
  SeededRng rng(808);
  bool asd_exact = true, sym = true, shift = true;
  std::size_t checked = 0;
  for (int t = 0; t < 30; ++t) {
    const std::size_t h = 16 + rng.below(49), w = 16 + rng.below(49);
    const int K = 2 + static_cast<int>(rng.below(3));
    auto widen = [&](const LabelMap& m) {
      LabelMap o(h, w, K);
      std::copy(m.values().begin(), m.values().end(), o.values().begin());
      return o;
    };
    const auto a = widen(oracle::random_blobs(rng, K - 1, h, w));
    const auto b = widen(oracle::random_blobs(rng, K - 1, h, w));
    const std::size_t dy = 1 + rng.below(8), dx = 1 + rng.below(8);
    LabelMap as(h + dy, w + dx, K), bs(h + dy, w + dx, K);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        as.at(y + dy, x + dx) = a.at(y, x);
        bs.at(y + dy, x + dx) = b.at(y, x);
      }
    for (int k = 1; k < K; ++k) {
      const double spacing = 0.5 + 0.5 * static_cast<double>(rng.below(3));
      const double got = metrics::asd(a, b, k, spacing);
      asd_exact = asd_exact && got == oracle::asd(a, b, k, spacing);
      checked += std::isfinite(got);
      const double d = metrics::dice_score(a, b, k);
      sym = sym && d == metrics::dice_score(b, a, k);
      shift = shift && d == metrics::dice_score(as, bs, k);
    }
  }
  report(asd_exact && sym && shift, "8",
         fmt("metrics: asd == all-pairs oracle on %zu finite class pairs %s; dice symmetric %s; translation-invariant %s",
             checked, asd_exact ? "yes" : "no", sym ? "yes" : "no", shift ? "yes" : "no"));
}

struct Ablation {
  const char* name;
  selftrain::PipelineFlags flags;  // hfm, hpe, sap, unsup, pixel_weights
};

void criterion_9() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rc = load_config(fs::path(SHAPE_CONFIG_DIR) / "synthetic.toml");
  const auto ds = synth::generate(rc.synth);
  std::vector<selftrain::PreparedItem> src, tgt;
  for (const auto& it : ds.source) src.push_back(selftrain::prepare(it.id, it.features, it.labels));
  for (const auto& it : ds.target) tgt.push_back(selftrain::prepare(it.id, it.features, it.labels));

  const Ablation runs[] = {{"noadapt", {false, false, false, false, false}}, {"base", {false, false, false, true, false}},
                           {"hfm", {true, false, false, true, false}},       {"hpe", {false, true, false, true, true}},
                           {"hfm+hpe", {true, true, false, true, true}},     {"hfm+sap", {true, false, true, true, false}},
                           {"full", {true, true, true, true, true}}};
  std::map<std::string, double> dsc;
  for (const auto& r : runs) {
    auto cfg = rc.adapt;
    cfg.flags = r.flags;
    const auto t1 = std::chrono::steady_clock::now();
    const auto res = selftrain::adapt(src, tgt, cfg);
    dsc[r.name] = selftrain::evaluate(tgt, res.state.student).mean_dsc;
    std::printf("      %-8s target DSC %.2f  (%.1f s)\n", r.name, dsc[r.name], seconds_since(t1));
    std::fflush(stdout);
  }
  const double sec = seconds_since(t0);
  const double full = dsc["full"];

  report(full >= dsc["noadapt"] + kAdaptGain, "9a",
         fmt("full %.2f vs no adaptation %.2f: gain %.2f (>= %.1f)", full, dsc["noadapt"], full - dsc["noadapt"],
             kAdaptGain));
  report(full >= dsc["base"], "9b", fmt("full %.2f vs ungated mean teacher %.2f (>=)", full, dsc["base"]));
  bool ordered = dsc["hfm"] > dsc["base"];
  std::string partial;
  for (const char* p : {"hfm", "hpe", "hfm+hpe", "hfm+sap"}) {
    ordered = ordered && full >= dsc[p] - kTieTolerance;
    partial += fmt(" %s %.2f", p, dsc[p]);
  }
  report(ordered, "9c",
         fmt("ablation: hfm %.2f > base %.2f; full %.2f >= each partial - %.1f:%s", dsc["hfm"], dsc["base"], full,
             kTieTolerance, partial.c_str()));
  double drift = 0;
  for (const auto& f : kFrozen) drift = std::max(drift, std::abs(dsc[f.name] - f.dsc));
  report(drift <= kFrozenTol, "9d", fmt("frozen reference DSCs reproduced: max drift %.2f (<= %.1f)", drift, kFrozenTol));
  report(sec < kE2eSeconds, "9e", fmt("end-to-end runtime %.1f s (< %.0f)", sec, kE2eSeconds));
}

std::uint64_t file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch; in.get(ch);) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

void criterion_10() {
  const auto dir = fs::temp_directory_path() / "shape_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = (dir / "run.toml").string();
  std::ofstream(cfg) << "seed = 13\n[synth]\nn_source = 24\nn_target = 24\n"
                        "[train]\nepochs = 4\nbatch_size = 8\nlearning_rate = 1.0\nramp_epochs = 2\n"
                        "[hpe]\nwarmup = 2\n";
  std::ostringstream out, err;
  bool ok = cli::run_cli({"--config", cfg, "--out", (dir / "data").string(), "synth"}, out, err) == 0;
  std::uint64_t d[2] = {0, 0};
  for (int i = 0; i < 2 && ok; ++i) {
    const auto run = dir / ("run_" + std::to_string(i));
    ok = cli::run_cli({"--config", cfg, "--out", run.string(), "adapt", "--data", (dir / "data").string()}, out, err) ==
         0;
    d[i] = ok ? file_digest(run / "epoch_log.jsonl") : 0;
  }
  if (!ok) std::fprintf(stderr, "%s\n", err.str().c_str());
  fs::remove_all(dir);
  report(ok && d[0] == d[1], "10",
         fmt("determinism: epoch-log digests %016llx / %016llx", static_cast<unsigned long long>(d[0]),
             static_cast<unsigned long long>(d[1])));
}

}  // namespace

int main(int argc, char** argv) {
  const bool skip_e2e = argc > 1 && std::string(argv[1]) == "--skip-e2e";
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  if (!skip_e2e) criterion_9();
  criterion_10();
  std::printf("%d criterion line(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
