#pragma once

// Run configuration: every tunable of the pipeline in one struct, loaded from a
// sectioned key = value file (TOML subset, parsed by CLI11) and dumped to JSON.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "shape/selftrain.hpp"
#include "shape/synth.hpp"

namespace shape {

struct RunConfig {
  std::uint64_t seed = 7;
  synth::SynthConfig synth;
  selftrain::AdaptConfig adapt;
  std::string data_path;  // dataset directory written by `synth`
  double spacing = 1.0;   // physical size of a pixel for ASD

  void validate() const {
    synth.validate();
    adapt.validate();
    if (!(spacing > 0)) throw ValidationError("spacing must be positive");
  }

  // Pushes the root seed into the components that carry their own copy.
  void sync_seed() {
    synth.seed = seed;
    adapt.seed = seed;
  }
};

namespace detail {

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ValidationError("config key '" + key + "': not a number: " + v);
  return out;
}

template <typename U>
U parse_uint(const std::string& key, const std::string& v) {
  U out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ValidationError("config key '" + key + "': not a non-negative integer: " + v);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ValidationError("config key '" + key + "': expected true or false, got " + v);
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto real = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = parse_real(key, v); };
    };
    auto size = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) {
        member(c) = parse_uint<std::size_t>(key, v);
      };
    };
    auto flag = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = parse_bool(key, v); };
    };

    t["seed"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.seed = parse_uint<std::uint64_t>(key, v);
    };

    t["synth.num_classes"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.synth.num_classes = parse_uint<int>(key, v);
    };
    size("synth.image_size", [](RunConfig& c) -> auto& { return c.synth.image_size; });
    size("synth.feature_stride", [](RunConfig& c) -> auto& { return c.synth.feature_stride; });
    size("synth.channels", [](RunConfig& c) -> auto& { return c.synth.channels; });
    size("synth.n_source", [](RunConfig& c) -> auto& { return c.synth.n_source; });
    size("synth.n_target", [](RunConfig& c) -> auto& { return c.synth.n_target; });
    real("synth.min_radius", [](RunConfig& c) -> auto& { return c.synth.min_radius; });
    real("synth.max_radius", [](RunConfig& c) -> auto& { return c.synth.max_radius; });
    real("synth.ring_radius", [](RunConfig& c) -> auto& { return c.synth.ring_radius; });
    real("synth.jitter", [](RunConfig& c) -> auto& { return c.synth.jitter; });
    real("synth.shape_noise", [](RunConfig& c) -> auto& { return c.synth.shape_noise; });
    real("synth.prototype_scale", [](RunConfig& c) -> auto& { return c.synth.prototype_scale; });
    real("synth.noise_level", [](RunConfig& c) -> auto& { return c.synth.noise_level; });
    real("synth.gain_spread", [](RunConfig& c) -> auto& { return c.synth.gain_spread; });
    real("synth.offset_spread", [](RunConfig& c) -> auto& { return c.synth.offset_spread; });

    real("hfm.tau_p", [](RunConfig& c) -> auto& { return c.adapt.hfm.purity_threshold; });
    size("hfm.upsample_factor", [](RunConfig& c) -> auto& { return c.adapt.hfm.upsample_factor; });
    real("hfm.pool_fraction", [](RunConfig& c) -> auto& { return c.adapt.hfm.pool_fraction; });
    real("hfm.epsilon", [](RunConfig& c) -> auto& { return c.adapt.hfm.epsilon; });

    real("hpe.alpha", [](RunConfig& c) -> auto& { return c.adapt.gate.alpha; });
    real("hpe.tau", [](RunConfig& c) -> auto& { return c.adapt.gate.tau; });
    real("hpe.rho_0", [](RunConfig& c) -> auto& { return c.adapt.gate.rho_0; });
    real("hpe.rho_max", [](RunConfig& c) -> auto& { return c.adapt.gate.rho_max; });
    real("hpe.eps", [](RunConfig& c) -> auto& { return c.adapt.gate.eps; });
    real("hpe.eps_stat", [](RunConfig& c) -> auto& { return c.adapt.gate.eps_stat; });
    size("hpe.warmup", [](RunConfig& c) -> auto& { return c.adapt.gate.warmup; });

    real("sap.q", [](RunConfig& c) -> auto& { return c.adapt.sap.q; });
    real("sap.min_count", [](RunConfig& c) -> auto& { return c.adapt.sap.min_count; });
    real("sap.eps", [](RunConfig& c) -> auto& { return c.adapt.sap.eps; });

    size("train.epochs", [](RunConfig& c) -> auto& { return c.adapt.train.epochs; });
    real("train.learning_rate", [](RunConfig& c) -> auto& { return c.adapt.train.learning_rate; });
    real("train.ema_momentum", [](RunConfig& c) -> auto& { return c.adapt.train.ema_momentum; });
    real("train.gamma_max", [](RunConfig& c) -> auto& { return c.adapt.train.gamma_max; });
    real("train.focal_gamma", [](RunConfig& c) -> auto& { return c.adapt.train.focal_gamma; });
    real("train.dice_smooth", [](RunConfig& c) -> auto& { return c.adapt.train.dice_smooth; });
    size("train.ramp_epochs", [](RunConfig& c) -> auto& { return c.adapt.train.ramp_epochs; });
    size("train.batch_size", [](RunConfig& c) -> auto& { return c.adapt.train.batch_size; });

    flag("pipeline.use_hfm", [](RunConfig& c) -> auto& { return c.adapt.flags.hfm; });
    flag("pipeline.use_hpe", [](RunConfig& c) -> auto& { return c.adapt.flags.hpe; });
    flag("pipeline.use_sap", [](RunConfig& c) -> auto& { return c.adapt.flags.sap; });
    flag("pipeline.use_unsup", [](RunConfig& c) -> auto& { return c.adapt.flags.unsup; });
    flag("pipeline.pixel_weights", [](RunConfig& c) -> auto& { return c.adapt.flags.pixel_weights; });

    t["paths.data"] = [](RunConfig& c, const std::string&, const std::string& v) { c.data_path = v; };
    real("eval.spacing", [](RunConfig& c) -> auto& { return c.spacing; });
    return t;
  }();
  return table;
}

}  // namespace detail

// Sets one "section.key" entry from its textual value. Unknown keys are errors.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::config_setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw ValidationError(std::string("config parse error: ") + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.inputs.size() != 1) throw ValidationError("config key '" + item.fullname() + "' needs exactly one value");
    set_config_value(base, item.fullname(), item.inputs.front());
  }
  base.sync_seed();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& a = c.adapt;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["synth"] = synth::to_json(c.synth);
  j["hfm"] = {{"tau_p", a.hfm.purity_threshold},
              {"upsample_factor", a.hfm.upsample_factor},
              {"pool_fraction", a.hfm.pool_fraction},
              {"epsilon", a.hfm.epsilon}};
  j["hpe"] = {{"alpha", a.gate.alpha}, {"tau", a.gate.tau},   {"rho_0", a.gate.rho_0},      {"rho_max", a.gate.rho_max},
              {"eps", a.gate.eps},     {"eps_stat", a.gate.eps_stat}, {"warmup", a.gate.warmup}};
  j["sap"] = {{"q", a.sap.q}, {"min_count", a.sap.min_count}, {"eps", a.sap.eps}};
  j["train"] = {{"epochs", a.train.epochs},
                {"learning_rate", a.train.learning_rate},
                {"ema_momentum", a.train.ema_momentum},
                {"gamma_max", a.train.gamma_max},
                {"focal_gamma", a.train.focal_gamma},
                {"dice_smooth", a.train.dice_smooth},
                {"ramp_epochs", a.train.ramp_epochs},
                {"batch_size", a.train.batch_size}};
  j["pipeline"] = {{"use_hfm", a.flags.hfm},
                   {"use_hpe", a.flags.hpe},
                   {"use_sap", a.flags.sap},
                   {"use_unsup", a.flags.unsup},
                   {"pixel_weights", a.flags.pixel_weights}};
  j["paths"] = {{"data", c.data_path}};
  j["eval"] = {{"spacing", c.spacing}};
  return j;
}

// FNV-1a over the canonical JSON dump.
inline std::uint64_t config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace shape
