#pragma once

// Deterministic two-domain synthetic data: organic class blobs at a stable
// layout, per-pixel prototype features pooled to a coarse feature grid, and a
// target domain obtained by a per-channel affine shift of the clean features.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "shape/core.hpp"
#include "shape/hfm.hpp"
#include "shape/rng.hpp"
#include "shape/tensor_io.hpp"

namespace shape::synth {

struct SynthConfig {
  std::uint64_t seed = 7;
  int num_classes = 5;            // including background
  std::size_t image_size = 64;
  std::size_t feature_stride = 4; // image pixels per feature cell
  std::size_t channels = 16;
  std::size_t n_source = 200;
  std::size_t n_target = 200;

  double min_radius = 6.0;
  double max_radius = 11.0;
  double ring_radius = 14.0;      // distance of blob anchors from the image centre
  double jitter = 3.0;
  double shape_noise = 0.25;

  double prototype_scale = 1.0;
  double noise_level = 0.8;
  double gain_spread = 0.8;       // log-gain drawn from U(-s, s)
  double offset_spread = 2.0;     // offset drawn from U(-s, s)

  std::size_t feature_size() const { return image_size / feature_stride; }

  void validate() const {
    auto pow2 = [](std::size_t v) { return v && !(v & (v - 1)); };
    if (num_classes < 2 || num_classes > 254) throw ValidationError("num_classes must lie in [2, 254]");
    if (!pow2(image_size) || image_size < 4 || !pow2(feature_stride) || feature_stride > image_size) {
      throw ValidationError("image_size and feature_stride must be powers of two, stride <= size");
    }
    if (channels < 1) throw ValidationError("channels must be >= 1");
    if (!(min_radius > 0 && min_radius <= max_radius)) throw ValidationError("need 0 < min_radius <= max_radius");
    if (noise_level < 0 || gain_spread < 0 || offset_spread < 0 || shape_noise < 0 || jitter < 0) {
      throw ValidationError("noise and shift parameters must be non-negative");
    }
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"num_classes", c.num_classes},
          {"image_size", c.image_size},
          {"feature_stride", c.feature_stride},
          {"channels", c.channels},
          {"n_source", c.n_source},
          {"n_target", c.n_target},
          {"min_radius", c.min_radius},
          {"max_radius", c.max_radius},
          {"ring_radius", c.ring_radius},
          {"jitter", c.jitter},
          {"shape_noise", c.shape_noise},
          {"prototype_scale", c.prototype_scale},
          {"noise_level", c.noise_level},
          {"gain_spread", c.gain_spread},
          {"offset_spread", c.offset_spread}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.num_classes = j.at("num_classes").get<int>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.feature_stride = j.at("feature_stride").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.n_source = j.at("n_source").get<std::size_t>();
  c.n_target = j.at("n_target").get<std::size_t>();
  c.min_radius = j.at("min_radius").get<double>();
  c.max_radius = j.at("max_radius").get<double>();
  c.ring_radius = j.at("ring_radius").get<double>();
  c.jitter = j.at("jitter").get<double>();
  c.shape_noise = j.at("shape_noise").get<double>();
  c.prototype_scale = j.at("prototype_scale").get<double>();
  c.noise_level = j.at("noise_level").get<double>();
  c.gain_spread = j.at("gain_spread").get<double>();
  c.offset_spread = j.at("offset_spread").get<double>();
  return c;
}

// Dataset-level constants shared by all samples.
struct DomainModel {
  std::vector<std::vector<double>> prototypes;  // K x C
  std::vector<double> gain, offset;             // C each
};

// Stream 0 of the root seed. Shift draws use fixed uniforms scaled by the
// spreads, so widening a spread moves every channel further in the same direction.
inline DomainModel make_domain_model(const SynthConfig& cfg) {
  auto rng = SeededRng(cfg.seed).derive(0);
  DomainModel m;
  m.prototypes.assign(static_cast<std::size_t>(cfg.num_classes), std::vector<double>(cfg.channels));
  for (auto& p : m.prototypes)
    for (auto& v : p) v = cfg.prototype_scale * rng.normal();
  m.gain.resize(cfg.channels);
  m.offset.resize(cfg.channels);
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    const double ug = rng.uniform(-1.0, 1.0);
    const double uo = rng.uniform(-1.0, 1.0);
    m.gain[c] = std::exp(cfg.gain_spread * ug);
    m.offset[c] = cfg.offset_spread * uo;
  }
  return m;
}

namespace detail {

// Smooth noise: a coarse normal grid bilinearly resampled to size x size.
inline std::vector<double> smooth_noise(std::size_t size, SeededRng& rng) {
  constexpr std::size_t coarse = 4;
  FeatureMap<double> g(1, coarse, coarse);
  for (auto& v : g.values()) v = rng.normal();
  const auto up = hfm::upsample_bilinear(g, size / coarse);
  return {up.values().begin(), up.values().end()};
}

}  // namespace detail

struct Sample {
  LabelMap labels;
  FeatureMap<float> source;
  FeatureMap<float> target;
};

// One label map with both domain views of it.
inline Sample gen_sample(const SynthConfig& cfg, const DomainModel& dm, SeededRng& rng) {
  cfg.validate();
  const std::size_t N = cfg.image_size;
  const int K = cfg.num_classes;
  LabelMap labels(N, N, K, 0);
  const double cx = 0.5 * static_cast<double>(N) - 0.5;
  for (int k = 1; k < K; ++k) {
    const double angle = 2.0 * std::numbers::pi * (k - 1) / (K - 1);
    const double ax = cx + cfg.ring_radius * std::cos(angle) + cfg.jitter * rng.uniform(-1.0, 1.0);
    const double ay = cx + cfg.ring_radius * std::sin(angle) + cfg.jitter * rng.uniform(-1.0, 1.0);
    const double r = rng.uniform(cfg.min_radius, cfg.max_radius);
    const auto noise = detail::smooth_noise(N, rng);
    for (std::size_t y = 0; y < N; ++y)
      for (std::size_t x = 0; x < N; ++x) {
        const double d = std::hypot(static_cast<double>(x) - ax, static_cast<double>(y) - ay) / r;
        if (d + cfg.shape_noise * noise[y * N + x] < 1.0) labels.at(y, x) = static_cast<std::uint8_t>(k);
      }
  }

  const std::size_t s = cfg.feature_stride, F = cfg.feature_size(), C = cfg.channels;
  FeatureMap<double> clean(C, F, F);
  const double inv = 1.0 / static_cast<double>(s * s);
  std::vector<double> frac(static_cast<std::size_t>(K));
  for (std::size_t fy = 0; fy < F; ++fy)
    for (std::size_t fx = 0; fx < F; ++fx) {
      std::fill(frac.begin(), frac.end(), 0.0);
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx) frac[labels.at(fy * s + dy, fx * s + dx)] += inv;
      for (std::size_t c = 0; c < C; ++c) {
        double v = 0;
        for (int k = 0; k < K; ++k) v += frac[k] * dm.prototypes[k][c];
        clean.at(c, fy, fx) = v;
      }
    }

  Sample out{std::move(labels), FeatureMap<float>(C, F, F), FeatureMap<float>(C, F, F)};
  auto cv = clean.values();
  auto sv = out.source.values();
  auto tv = out.target.values();
  const std::size_t plane = F * F;
  for (std::size_t i = 0; i < cv.size(); ++i) sv[i] = static_cast<float>(cv[i] + cfg.noise_level * rng.normal());
  for (std::size_t i = 0; i < cv.size(); ++i) {
    const std::size_t c = i / plane;
    tv[i] = static_cast<float>(dm.gain[c] * cv[i] + dm.offset[c] + cfg.noise_level * rng.normal());
  }
  return out;
}

enum class Domain { Source, Target };

inline const char* to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

struct DatasetItem {
  std::string id;
  Domain domain = Domain::Source;
  LabelMap labels;             // target labels are for evaluation only
  FeatureMap<float> features;
};

struct Dataset {
  SynthConfig config;
  std::vector<DatasetItem> source;
  std::vector<DatasetItem> target;
};

inline std::string sample_id(Domain d, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu", to_string(d), i);
  return buf;
}

// Source sample i uses stream 1 + i, target sample i stream 1 + n_source + i.
inline Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const auto dm = make_domain_model(cfg);
  const SeededRng root(cfg.seed);
  Dataset ds;
  ds.config = cfg;
  for (std::size_t i = 0; i < cfg.n_source; ++i) {
    auto rng = root.derive(1 + i);
    auto s = gen_sample(cfg, dm, rng);
    ds.source.push_back({sample_id(Domain::Source, i), Domain::Source, std::move(s.labels), std::move(s.source)});
  }
  for (std::size_t i = 0; i < cfg.n_target; ++i) {
    auto rng = root.derive(1 + cfg.n_source + i);
    auto s = gen_sample(cfg, dm, rng);
    ds.target.push_back({sample_id(Domain::Target, i), Domain::Target, std::move(s.labels), std::move(s.target)});
  }
  return ds;
}

// Writes samples/<id>.labels.sht, samples/<id>.features.sht and manifest.json.
inline nlohmann::json write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "samples");
  nlohmann::json manifest = {{"seed", ds.config.seed}, {"config", to_json(ds.config)}, {"samples", nlohmann::json::array()}};
  auto emit = [&](const DatasetItem& it) {
    const std::string lp = "samples/" + it.id + ".labels.sht";
    const std::string fp = "samples/" + it.id + ".features.sht";
    write_tensor(dir / lp, it.labels);
    write_tensor(dir / fp, it.features);
    manifest["samples"].push_back({{"id", it.id},
                                   {"domain", to_string(it.domain)},
                                   {"label_path", lp},
                                   {"feature_path", fp},
                                   {"eval_only", it.domain == Domain::Target}});
  };
  for (const auto& it : ds.source) emit(it);
  for (const auto& it : ds.target) emit(it);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
  return manifest;
}

inline Dataset gen_dataset(const SynthConfig& cfg, const std::filesystem::path& dir) {
  auto ds = generate(cfg);
  write_dataset(ds, dir);
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest.json: ") + e.what());
  }
  Dataset ds;
  ds.config = synth_config_from_json(m.at("config"));
  for (const auto& s : m.at("samples")) {
    DatasetItem it;
    it.id = s.at("id").get<std::string>();
    const auto dom = s.at("domain").get<std::string>();
    if (dom != "source" && dom != "target") throw ValidationError("unknown domain '" + dom + "'");
    it.domain = dom == "source" ? Domain::Source : Domain::Target;
    it.labels = read_label_map(dir / s.at("label_path").get<std::string>(), ds.config.num_classes);
    it.features = read_feature_map<float>(dir / s.at("feature_path").get<std::string>());
    (it.domain == Domain::Source ? ds.source : ds.target).push_back(std::move(it));
  }
  return ds;
}

}  // namespace shape::synth
