#pragma once

// Command-line front end. Kept in a header so the test suite can drive it
// in-process with captured streams.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "shape/config.hpp"
#include "shape/hfm.hpp"
#include "shape/hpe.hpp"
#include "shape/metrics.hpp"
#include "shape/report.hpp"
#include "shape/sap.hpp"
#include "shape/selftrain.hpp"
#include "shape/synth.hpp"
#include "shape/tensor_io.hpp"

namespace shape::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
};

// One prediction ensemble read from <dir>/<id>/member_<n>.sht.
struct EnsembleInput {
  std::string id;
  PredictionEnsemble<float> ensemble;
  LabelMap consensus;
};

inline std::vector<EnsembleInput> read_ensembles(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> samples;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) samples.push_back(e.path());
  std::sort(samples.begin(), samples.end());
  if (samples.empty()) throw ValidationError("no sample directories under " + dir.string());

  std::vector<EnsembleInput> out;
  for (const auto& s : samples) {
    std::vector<std::pair<unsigned long, fs::path>> members;
    for (const auto& e : fs::directory_iterator(s)) {
      const auto name = e.path().filename().string();
      if (name.rfind("member_", 0) != 0 || e.path().extension() != ".sht") continue;
      const auto num = name.substr(7, name.size() - 7 - 4);
      if (num.empty() || !std::all_of(num.begin(), num.end(), ::isdigit)) continue;
      members.emplace_back(std::stoul(num), e.path());
    }
    std::sort(members.begin(), members.end());
    EnsembleInput in;
    in.id = s.filename().string();
    for (const auto& [n, p] : members) in.ensemble.members.push_back(read_prob_map<float>(p));
    in.ensemble.validate();
    in.consensus = argmax_map(ensemble_mean(in.ensemble));
    out.push_back(std::move(in));
  }
  return out;
}

inline std::vector<hpe::PlausibilityReport> score_inputs(const std::vector<EnsembleInput>& in,
                                                         const hpe::GateConfig& cfg) {
  std::vector<PredictionEnsemble<float>> ens;
  std::vector<LabelMap> cons;
  for (const auto& e : in) {
    ens.push_back(e.ensemble);
    cons.push_back(e.consensus);
  }
  auto reports = hpe::score_batch<float>(ens, cons, cfg);
  for (std::size_t i = 0; i < in.size(); ++i) reports[i].id = in[i].id;
  return reports;
}

inline std::vector<sap::InstabilityReport> prune_inputs(const std::vector<EnsembleInput>& in,
                                                        const sap::SapConfig& cfg) {
  std::vector<std::vector<LabelMap>> members;
  std::vector<LabelMap> cons;
  for (const auto& e : in) {
    auto& m = members.emplace_back();
    for (const auto& p : e.ensemble.members) m.push_back(argmax_map(p));
    cons.push_back(e.consensus);
  }
  auto reports = sap::prune_batch(members, cons, cfg);
  for (std::size_t i = 0; i < in.size(); ++i) reports[i].id = in[i].id;
  return reports;
}

inline std::vector<selftrain::PreparedItem> prepare_items(const std::vector<synth::DatasetItem>& items) {
  std::vector<selftrain::PreparedItem> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(selftrain::prepare(it.id, it.features, it.labels));
  return out;
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream o(path);
  o << j.dump(2) << "\n";
  if (!o) throw IoError("cannot write " + path.string());
}

// Largest non-ignore label + 1, at least 2.
inline int infer_classes(const RawTensor& a, const RawTensor& b) {
  int k = 1;
  for (const auto* t : {&a, &b})
    for (auto v : t->u8)
      if (v != kIgnore) k = std::max(k, static_cast<int>(v));
  return std::max(2, k + 1);
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shape-aware feature modulation and pseudo-label gating toolkit", "shape"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "Sectioned key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Root seed (overrides the config)");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--json", g.json, "Machine-readable JSON on stdout");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic two-domain dataset");

  // modulate
  std::string src_f, src_l, tgt_f, tgt_l;
  std::optional<double> lambda;
  std::optional<int> mod_classes;
  auto* mod_cmd = app.add_subcommand("modulate", "Run feature modulation on one source/target pair");
  mod_cmd->add_option("--source-features", src_f, "Source FeatureMap (.sht)")->required();
  mod_cmd->add_option("--source-labels", src_l, "Source LabelMap (.sht)")->required();
  mod_cmd->add_option("--target-features", tgt_f, "Target FeatureMap (.sht)")->required();
  mod_cmd->add_option("--target-labels", tgt_l, "Target pseudo-label LabelMap (.sht)")->required();
  mod_cmd->add_option("--lambda", lambda, "Fixed mixing factor in [0,1]");
  mod_cmd->add_option("--num-classes", mod_classes, "Class count K (default: config)");

  // score / prune / gate
  std::string ens_dir;
  std::optional<double> rho;
  auto* score_cmd = app.add_subcommand("score", "Plausibility scores for a batch of ensembles");
  score_cmd->add_option("--in", ens_dir, "Directory of <id>/member_<n>.sht ProbMaps")->required();
  auto* prune_cmd = app.add_subcommand("prune", "Anomaly pruning for a batch of ensembles");
  prune_cmd->add_option("--in", ens_dir, "Directory of <id>/member_<n>.sht ProbMaps")->required();
  auto* gate_cmd = app.add_subcommand("gate", "Score, select and prune in one pass");
  gate_cmd->add_option("--in", ens_dir, "Directory of <id>/member_<n>.sht ProbMaps")->required();
  gate_cmd->add_option("--rho", rho, "Selection fraction (default: hpe.rho_0)");

  // adapt
  std::string data_dir, resume;
  std::size_t ckpt_every = 0;
  auto* adapt_cmd = app.add_subcommand("adapt", "Self-training adaptation on a synthetic dataset");
  adapt_cmd->add_option("--data", data_dir, "Dataset directory (default: paths.data)");
  adapt_cmd->add_option("--resume", resume, "Checkpoint directory to continue from");
  adapt_cmd->add_option("--checkpoint-every", ckpt_every, "Also checkpoint every N epochs");

  // eval
  std::string pred, gt, ckpt;
  std::optional<int> eval_classes;
  std::optional<double> spacing;
  auto* eval_cmd = app.add_subcommand("eval", "Dice and surface distance");
  eval_cmd->add_option("--pred", pred, "Predicted LabelMap (.sht)");
  eval_cmd->add_option("--gt", gt, "Ground-truth LabelMap (.sht)");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint directory (with --data)");
  eval_cmd->add_option("--data", data_dir, "Dataset directory (default: paths.data)");
  eval_cmd->add_option("--num-classes", eval_classes, "Class count K (default: inferred)");
  eval_cmd->add_option("--spacing", spacing, "Pixel spacing for ASD");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    cfg.sync_seed();
    if (spacing) cfg.spacing = *spacing;
    cfg.validate();

    if (synth_cmd->parsed()) {
      if (g.out.empty()) throw ValidationError("synth needs --out");
      const auto ds = synth::gen_dataset(cfg.synth, g.out);
      if (g.json) {
        out << json{{"seed", cfg.seed}, {"out", g.out}, {"n_source", ds.source.size()}, {"n_target", ds.target.size()},
                    {"config", synth::to_json(cfg.synth)}}
                   .dump()
            << "\n";
      } else {
        out << "seed: " << cfg.seed << "\n"
            << "wrote " << ds.source.size() << " source + " << ds.target.size() << " target samples to " << g.out
            << "\n";
      }
      return kOk;
    }

    if (mod_cmd->parsed()) {
      if (g.out.empty()) throw ValidationError("modulate needs --out");
      const int K = mod_classes.value_or(cfg.synth.num_classes);
      auto hcfg = cfg.adapt.hfm;
      if (lambda) hcfg.fixed_lambda = *lambda;
      SeededRng rng(cfg.seed);
      const auto r = hfm::hfm_forward(read_feature_map<float>(src_f), read_label_map(src_l, K),
                                      read_feature_map<float>(tgt_f), read_label_map(tgt_l, K), hcfg, rng);
      fs::create_directories(g.out);
      const std::map<std::string, const FeatureMap<float>*> maps = {{"source_to_target", &r.source_to_target},
                                                                    {"source_cross", &r.source_cross},
                                                                    {"target_to_source", &r.target_to_source},
                                                                    {"target_cross", &r.target_cross}};
      json files;
      for (const auto& [name, f] : maps) {
        const auto p = fs::path(g.out) / (name + ".sht");
        write_tensor(p, *f);
        files[name] = p.string();
      }
      const json j{{"seed", cfg.seed},
                   {"lambda", r.lambda},
                   {"source_pure", r.source_pure},
                   {"source_impure", r.source_impure},
                   {"target_pure", r.target_pure},
                   {"target_impure", r.target_impure},
                   {"outputs", files}};
      if (g.json) {
        out << j.dump() << "\n";
      } else {
        out << "seed: " << cfg.seed << "\nlambda: " << r.lambda << "\n"
            << "source tokens pure/impure: " << r.source_pure << "/" << r.source_impure << "\n"
            << "target tokens pure/impure: " << r.target_pure << "/" << r.target_impure << "\n";
      }
      return kOk;
    }

    if (score_cmd->parsed() || prune_cmd->parsed() || gate_cmd->parsed()) {
      const auto inputs = read_ensembles(ens_dir);
      std::vector<hpe::PlausibilityReport> scores;
      std::vector<sap::InstabilityReport> prunes;
      std::vector<bool> selected;
      if (score_cmd->parsed() || gate_cmd->parsed()) scores = score_inputs(inputs, cfg.adapt.gate);
      if (prune_cmd->parsed() || gate_cmd->parsed()) prunes = prune_inputs(inputs, cfg.adapt.sap);
      if (gate_cmd->parsed()) {
        hpe::ScoreAccumulator acc;
        std::vector<double> s;
        for (const auto& r : scores) s.push_back(r.s_final);
        selected.assign(inputs.size(), false);
        for (auto i : hpe::select_samples(acc, s, rho.value_or(cfg.adapt.gate.rho_0), cfg.adapt.gate.warmup)) {
          selected[i] = true;
        }
      }
      std::vector<std::optional<std::string>> pruned_paths(prunes.size());
      if (!prunes.empty() && !g.out.empty()) {
        fs::create_directories(g.out);
        for (std::size_t i = 0; i < prunes.size(); ++i) {
          const auto p = fs::path(g.out) / (prunes[i].id + ".pruned.sht");
          write_tensor(p, prunes[i].pruned);
          pruned_paths[i] = p.string();
        }
      }

      if (g.json) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          json j;
          if (score_cmd->parsed()) {
            j = to_json(scores[i]);
          } else if (prune_cmd->parsed()) {
            j = to_json(prunes[i], pruned_paths[i]);
          } else {
            j = {{"id", inputs[i].id},
                 {"plausibility", to_json(scores[i])},
                 {"selected", static_cast<bool>(selected[i])},
                 {"instability", to_json(prunes[i], pruned_paths[i])}};
          }
          out << j.dump() << "\n";
        }
        return kOk;
      }
      out << "seed: " << cfg.seed << "\n" << std::fixed << std::setprecision(4);
      if (!scores.empty()) {
        out << std::left << std::setw(20) << "id" << std::right << std::setw(10) << "s_vertex" << std::setw(10)
            << "s_intra" << std::setw(10) << "s_inter" << std::setw(10) << "s_final";
        if (!selected.empty()) out << std::setw(10) << "selected";
        out << "\n";
        for (std::size_t i = 0; i < scores.size(); ++i) {
          const auto& r = scores[i];
          out << std::left << std::setw(20) << r.id << std::right << std::setw(10) << r.s_vertex << std::setw(10)
              << r.s_intra << std::setw(10) << r.s_inter << std::setw(10) << r.s_final;
          if (!selected.empty()) out << std::setw(10) << (selected[i] ? "yes" : "no");
          out << "\n";
        }
      }
      if (!prunes.empty()) {
        out << "theta: " << prunes.front().theta << "\n";
        out << std::left << std::setw(20) << "id" << "anomalous classes (pruned pixels)\n";
        for (const auto& r : prunes) {
          out << std::left << std::setw(20) << r.id;
          for (int k : r.anomalous) out << k << " ";
          out << "(" << r.pruned_pixels << ")\n";
        }
      }
      return kOk;
    }

    if (adapt_cmd->parsed()) {
      if (g.out.empty()) throw ValidationError("adapt needs --out");
      const std::string data = data_dir.empty() ? cfg.data_path : data_dir;
      if (data.empty()) throw ValidationError("adapt needs --data or paths.data");
      const auto ds = synth::read_dataset(data);
      const auto source = prepare_items(ds.source);
      const auto target = prepare_items(ds.target);
      const fs::path outdir(g.out);
      fs::create_directories(outdir / "checkpoints");
      write_json_file(outdir / "config.json", to_json(cfg));

      std::ofstream log(outdir / "epoch_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
      if (!log) throw IoError("cannot write " + (outdir / "epoch_log.jsonl").string());
      auto on_epoch = [&](const selftrain::EpochReport& e, const selftrain::AdaptState& s) {
        log << to_json(e).dump() << "\n";
        log.flush();
        if (ckpt_every && s.epoch % ckpt_every == 0) {
          char name[32];
          std::snprintf(name, sizeof name, "epoch_%04zu", s.epoch);
          write_checkpoint(outdir / "checkpoints" / name, s, cfg);
        }
        if (!g.json) {
          out << "epoch " << e.epoch << "  sup " << e.sup_loss << "  unsup " << e.unsup_loss << "  selected "
              << e.selection_rate << "  pruned " << e.pruned_classes << "\n";
        }
      };
      auto result = resume.empty() ? selftrain::adapt(source, target, cfg.adapt, on_epoch)
                                   : selftrain::adapt_from(read_checkpoint(resume), source, target, cfg.adapt, on_epoch);
      write_checkpoint(outdir / "checkpoints" / "final", result.state, cfg);
      const auto src_m = selftrain::evaluate(source, result.state.student, cfg.spacing);
      const auto tgt_m = selftrain::evaluate(target, result.state.student, cfg.spacing);
      const json report{{"seed", cfg.seed},
                        {"epochs", result.state.epoch},
                        {"source", to_json(src_m)},
                        {"target", to_json(tgt_m)}};
      write_json_file(outdir / "metrics.json", report);
      if (g.json) {
        out << report.dump() << "\n";
      } else {
        out << "seed: " << cfg.seed << "\n"
            << "target mean DSC " << tgt_m.mean_dsc << "  source mean DSC " << src_m.mean_dsc << "\n";
      }
      return kOk;
    }

    if (eval_cmd->parsed()) {
      if (!pred.empty() || !gt.empty()) {
        if (pred.empty() || gt.empty()) throw ValidationError("eval needs both --pred and --gt");
        const auto rp = read_raw(pred);
        const auto rg = read_raw(gt);
        const int K = eval_classes.value_or(infer_classes(rp, rg));
        const auto r = metrics::evaluate(label_map_from_raw(rp, K), label_map_from_raw(rg, K), cfg.spacing);
        if (g.json) {
          out << to_json(r).dump() << "\n";
        } else {
          out << std::fixed << std::setprecision(4) << std::left << std::setw(8) << "class" << std::right
              << std::setw(12) << "dsc" << std::setw(12) << "asd" << "\n";
          for (const auto& c : r.per_class) {
            out << std::left << std::setw(8) << c.k << std::right << std::setw(12) << c.dsc << std::setw(12) << c.asd
                << "\n";
          }
          out << std::left << std::setw(8) << "mean" << std::right << std::setw(12) << r.mean_dsc << std::setw(12)
              << r.mean_asd << "\n";
        }
        return kOk;
      }
      if (ckpt.empty()) throw ValidationError("eval needs --pred/--gt or --checkpoint");
      const std::string data = data_dir.empty() ? cfg.data_path : data_dir;
      if (data.empty()) throw ValidationError("eval --checkpoint needs --data or paths.data");
      const auto state = read_checkpoint(ckpt);
      const auto ds = synth::read_dataset(data);
      const auto src_m = selftrain::evaluate(prepare_items(ds.source), state.student, cfg.spacing);
      const auto tgt_m = selftrain::evaluate(prepare_items(ds.target), state.student, cfg.spacing);
      const json report{{"seed", cfg.seed}, {"source", to_json(src_m)}, {"target", to_json(tgt_m)}};
      if (g.json) {
        out << report.dump() << "\n";
      } else {
        out << "target mean DSC " << tgt_m.mean_dsc << "  source mean DSC " << src_m.mean_dsc << "\n";
      }
      return kOk;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace shape::cli
