#pragma once

// JSON views of the pipeline reports and the decoder checkpoint format.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "shape/config.hpp"
#include "shape/hpe.hpp"
#include "shape/metrics.hpp"
#include "shape/sap.hpp"
#include "shape/selftrain.hpp"
#include "shape/tensor_io.hpp"

namespace shape {

namespace detail {
// Infinity and NaN have no JSON spelling; they become null.
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
}  // namespace detail

inline nlohmann::json to_json(const hpe::PlausibilityReport& r, bool with_pixel_weights = true) {
  nlohmann::json j;
  j["id"] = r.id;
  j["s_vertex"] = r.s_vertex;
  j["s_intra"] = r.s_intra;
  j["s_inter"] = r.s_inter;
  j["s_final"] = r.s_final;
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : r.per_class) j["per_class"].push_back({{"k", c.k}, {"phi", c.phi}, {"z", c.z}, {"s_phi", c.s_phi}});
  j["per_pair"] = nlohmann::json::array();
  for (const auto& p : r.per_pair) {
    j["per_pair"].push_back({{"i", p.i}, {"j", p.j}, {"psi", p.psi}, {"z", p.z}, {"s_psi", p.s_psi}});
  }
  if (with_pixel_weights) {
    auto rows = nlohmann::json::array();
    for (std::size_t y = 0; y < r.height; ++y) {
      rows.push_back(std::vector<double>(r.pixel_weights.begin() + static_cast<std::ptrdiff_t>(y * r.width),
                                         r.pixel_weights.begin() + static_cast<std::ptrdiff_t>((y + 1) * r.width)));
    }
    j["pixel_weights"] = std::move(rows);
  }
  return j;
}

inline nlohmann::json to_json(const sap::InstabilityReport& r, const std::optional<std::string>& pruned_path = {}) {
  nlohmann::json j;
  j["id"] = r.id;
  j["per_class"] = nlohmann::json::array();
  for (const auto& s : r.per_class) {
    j["per_class"].push_back({{"k", s.k},
                              {"count_vector", s.counts},
                              {"mean", s.mean},
                              {"instability", s.instability},
                              {"significant", s.significant}});
  }
  j["theta"] = detail::finite_or_null(r.theta);
  j["anomalous"] = std::vector<int>(r.anomalous.begin(), r.anomalous.end());
  j["pruned_pixels"] = r.pruned_pixels;
  j["pruned_path"] = pruned_path ? nlohmann::json(*pruned_path) : nlohmann::json();
  return j;
}

inline nlohmann::json to_json(const metrics::MetricReport& r) {
  nlohmann::json j;
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    j["per_class"].push_back({{"k", c.k}, {"dsc", c.dsc}, {"asd", detail::finite_or_null(c.asd)}});
  }
  j["mean_dsc"] = r.mean_dsc;
  j["mean_asd"] = detail::finite_or_null(r.mean_asd);
  j["asd_undefined"] = r.asd_undefined;
  j["spacing"] = r.spacing;
  return j;
}

inline nlohmann::json to_json(const selftrain::DatasetMetrics& m) {
  return {{"mean_dsc", m.mean_dsc},
          {"mean_asd", detail::finite_or_null(m.mean_asd)},
          {"asd_undefined", m.asd_undefined},
          {"per_class_dsc", m.per_class_dsc}};
}

// One line of the epoch log. No wall-clock fields, so logs of identical runs are
// byte-identical.
inline nlohmann::json to_json(const selftrain::EpochReport& e) {
  return {{"epoch", e.epoch},
          {"sup_loss", e.sup_loss},
          {"unsup_loss", e.unsup_loss},
          {"total_loss", e.total_loss},
          {"gamma", e.gamma},
          {"rho", e.rho},
          {"target_seen", e.target_seen},
          {"selected", e.selected},
          {"selection_rate", e.selection_rate},
          {"pruned_classes", e.pruned_classes},
          {"pruned_pixels", e.pruned_pixels},
          {"mean_s_final", e.mean_s_final}};
}

// Checkpoints ---------------------------------------------------------------------

inline RawTensor weight_tensor(const selftrain::DecoderParams<selftrain::Real>& p) {
  RawTensor t;
  t.dims = {static_cast<std::uint32_t>(p.num_classes), static_cast<std::uint32_t>(p.channels)};
  t.f32.assign(p.weight.begin(), p.weight.end());
  return t;
}

inline RawTensor bias_tensor(const selftrain::DecoderParams<selftrain::Real>& p) {
  RawTensor t;
  t.dims = {static_cast<std::uint32_t>(p.num_classes)};
  t.f32.assign(p.bias.begin(), p.bias.end());
  return t;
}

inline selftrain::DecoderParams<selftrain::Real> decoder_from_raw(const RawTensor& w, const RawTensor& b) {
  if (w.dtype != DType::F32 || b.dtype != DType::F32) {
    throw ParseError(ParseErrorKind::DtypeMismatch, "decoder tensors must be f32");
  }
  if (w.dims.size() != 2 || b.dims.size() != 1) throw ParseError(ParseErrorKind::RankMismatch, "decoder tensor rank");
  if (w.dims[0] != b.dims[0]) throw ShapeError("decoder weight/bias class counts differ");
  auto p = selftrain::DecoderParams<selftrain::Real>::zeros(static_cast<int>(w.dims[0]), w.dims[1]);
  std::copy(w.f32.begin(), w.f32.end(), p.weight.begin());
  std::copy(b.f32.begin(), b.f32.end(), p.bias.begin());
  if (!p.all_finite()) throw ValidationError("decoder parameters are not finite");
  return p;
}

// <dir>/{student,teacher}_{W,b}.sht + <dir>/checkpoint.json
inline void write_checkpoint(const std::filesystem::path& dir, const selftrain::AdaptState& s, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_raw(dir / "student_W.sht", weight_tensor(s.student));
  write_raw(dir / "student_b.sht", bias_tensor(s.student));
  write_raw(dir / "teacher_W.sht", weight_tensor(s.teacher));
  write_raw(dir / "teacher_b.sht", bias_tensor(s.teacher));
  nlohmann::json j;
  j["epoch"] = s.epoch;
  j["config_hash"] = config_hash(cfg);
  j["rng"] = {{"seed", s.rng.seed()}, {"state", s.rng.state()}, {"counter", s.rng.counter()}};
  j["student"] = {{"weight", "student_W.sht"}, {"bias", "student_b.sht"}};
  j["teacher"] = {{"weight", "teacher_W.sht"}, {"bias", "teacher_b.sht"}};
  std::ofstream out(dir / "checkpoint.json");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
}

// Restores student, teacher, epoch and rng. The score accumulator starts empty;
// it is cleared at every epoch boundary anyway.
inline selftrain::AdaptState read_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint manifest: " + std::string(e.what()));
  }
  selftrain::AdaptState s;
  s.student = decoder_from_raw(read_raw(dir / j.at("student").at("weight").get<std::string>()),
                               read_raw(dir / j.at("student").at("bias").get<std::string>()));
  s.teacher = decoder_from_raw(read_raw(dir / j.at("teacher").at("weight").get<std::string>()),
                               read_raw(dir / j.at("teacher").at("bias").get<std::string>()));
  s.epoch = j.at("epoch").get<std::size_t>();
  const auto& r = j.at("rng");
  s.rng = SeededRng::restore(r.at("seed").get<std::uint64_t>(), r.at("state").get<std::uint64_t>(),
                             r.at("counter").get<std::uint64_t>());
  return s;
}

}  // namespace shape
