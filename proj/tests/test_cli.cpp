#include <gtest/gtest.h>

#include <sstream>

#include "cli_app.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace shape;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<json> json_lines(const std::string& s) {
  std::vector<json> v;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) v.push_back(json::parse(line));
  return v;
}

// Writes a small config with a tiny dataset and a short schedule.
std::string small_config(const TempDir& dir) {
  const auto p = (dir / "small.toml").string();
  std::ofstream(p) << "[synth]\nn_source = 8\nn_target = 8\nimage_size = 32\nring_radius = 8\n"
                      "min_radius = 3\nmax_radius = 5\n"
                      "[train]\nepochs = 2\nbatch_size = 4\nlearning_rate = 1.0\n"
                      "[hpe]\nwarmup = 2\n";
  return p;
}

void write_ensembles(const std::filesystem::path& root, int samples) {
  SeededRng rng(3);
  for (int s = 0; s < samples; ++s) {
    const auto dir = root / ("case_" + std::to_string(s));
    std::filesystem::create_directories(dir);
    const auto y = oracle::random_blobs(rng, 2, 16, 16);
    LabelMap y3(16, 16, 3);
    std::copy(y.values().begin(), y.values().end(), y3.values().begin());
    for (int m = 0; m < 3; ++m) {
      auto p = one_hot<float>(y3);
      const auto noise = oracle::random_probs<float>(rng, 3, 16, 16, 1.0);
      for (std::size_t i = 0; i < p.values().size(); ++i) p.values()[i] = 0.7f * p.values()[i] + 0.3f * noise.values()[i];
      write_tensor(dir / ("member_" + std::to_string(m) + ".sht"), p);
    }
  }
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"bogus"}).code, 2);
  EXPECT_EQ(run({"score"}).code, 2);  // missing --in
}

TEST(Cli, SynthWritesDataset) {
  TempDir dir;
  const auto r = run({"--config", small_config(dir), "--seed", "5", "--json", "--out", (dir / "data").string(), "synth"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["n_source"], 8);
  const auto ds = synth::read_dataset(dir / "data");
  EXPECT_EQ(ds.config.seed, 5u);
  EXPECT_EQ(ds.target.size(), 8u);
}

TEST(Cli, ModulateWritesFourMaps) {
  TempDir dir;
  SeededRng rng(1);
  write_tensor(dir / "sf.sht", oracle::random_features<float>(rng, 4, 8, 8));
  write_tensor(dir / "tf.sht", oracle::random_features<float>(rng, 4, 8, 8));
  LabelMap y(16, 16, 5);
  y.at(3, 3) = 2;
  write_tensor(dir / "sl.sht", y);
  write_tensor(dir / "tl.sht", y);
  const auto r = run({"--json", "--out", (dir / "mod").string(), "modulate", "--source-features",
                      (dir / "sf.sht").string(), "--source-labels", (dir / "sl.sht").string(), "--target-features",
                      (dir / "tf.sht").string(), "--target-labels", (dir / "tl.sht").string(), "--lambda", "0.3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["lambda"], 0.3);
  for (const char* n : {"source_to_target", "source_cross", "target_to_source", "target_cross"}) {
    const auto f = read_feature_map(dir / "mod" / (std::string(n) + ".sht"));
    EXPECT_EQ(f.channels(), 4u);
  }
}

TEST(Cli, ModulateRejectsBadLambda) {
  TempDir dir;
  SeededRng rng(1);
  write_tensor(dir / "f.sht", oracle::random_features<float>(rng, 2, 4, 4));
  write_tensor(dir / "l.sht", LabelMap(8, 8, 3));
  const auto r = run({"--out", (dir / "m").string(), "modulate", "--source-features", (dir / "f.sht").string(),
                      "--source-labels", (dir / "l.sht").string(), "--target-features", (dir / "f.sht").string(),
                      "--target-labels", (dir / "l.sht").string(), "--lambda", "1.5", "--num-classes", "3"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lambda"), std::string::npos);
}

TEST(Cli, ScorePruneGateJsonLines) {
  TempDir dir;
  write_ensembles(dir / "ens", 4);
  const auto score = run({"--json", "score", "--in", (dir / "ens").string()});
  ASSERT_EQ(score.code, 0) << score.err;
  const auto s = json_lines(score.out);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0]["id"], "case_0");
  EXPECT_EQ(s[0]["pixel_weights"].size(), 16u);

  const auto prune = run({"--json", "--out", (dir / "pr").string(), "prune", "--in", (dir / "ens").string()});
  ASSERT_EQ(prune.code, 0) << prune.err;
  const auto p = json_lines(prune.out);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_TRUE(std::filesystem::exists(p[2]["pruned_path"].get<std::string>()));

  const auto gate = run({"--json", "gate", "--in", (dir / "ens").string(), "--rho", "0.5"});
  ASSERT_EQ(gate.code, 0) << gate.err;
  const auto g = json_lines(gate.out);
  ASSERT_EQ(g.size(), 4u);
  for (const auto& line : g) {
    EXPECT_TRUE(line.contains("plausibility"));
    EXPECT_TRUE(line.contains("instability"));
    EXPECT_TRUE(line["selected"].is_boolean());
  }
  // fewer scores than the warm-up window: everything is selected
  EXPECT_TRUE(std::all_of(g.begin(), g.end(), [](const json& l) { return l["selected"].get<bool>(); }));

  const auto table = run({"gate", "--in", (dir / "ens").string()});
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("s_final"), std::string::npos);
}

TEST(Cli, MissingEnsembleDirIsRuntimeError) {
  EXPECT_EQ(run({"score", "--in", "/nonexistent/ens"}).code, 1);
}

TEST(Cli, EvalPredAgainstGt) {
  TempDir dir;
  const auto gt = oracle::rect(20, 20, 5, 5, 6, 1, 1, 3);
  const auto pred = oracle::rect(20, 20, 5, 8, 6, 1, 1, 3);
  write_tensor(dir / "gt.sht", gt);
  write_tensor(dir / "pred.sht", pred);
  const auto r = run({"--json", "eval", "--pred", (dir / "pred.sht").string(), "--gt", (dir / "gt.sht").string(),
                      "--spacing", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["per_class"].size(), 1u);  // K inferred as 2
  EXPECT_DOUBLE_EQ(j["per_class"][0]["asd"].get<double>(), 6.0);
  EXPECT_EQ(run({"eval", "--pred", (dir / "pred.sht").string()}).code, 2);
}

TEST(Cli, AdaptResumeAndEvalCheckpoint) {
  TempDir dir;
  const auto cfg = small_config(dir);
  ASSERT_EQ(run({"--config", cfg, "--out", (dir / "data").string(), "synth"}).code, 0);
  const auto full = run({"--config", cfg, "--json", "--out", (dir / "a").string(), "adapt", "--data",
                         (dir / "data").string(), "--checkpoint-every", "1"});
  ASSERT_EQ(full.code, 0) << full.err;
  for (const char* f : {"config.json", "epoch_log.jsonl", "metrics.json", "checkpoints/final/checkpoint.json",
                        "checkpoints/epoch_0001/student_W.sht"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "a" / f)) << f;
  }
  std::ifstream log(dir / "a" / "epoch_log.jsonl");
  std::stringstream ss;
  ss << log.rdbuf();
  const auto lines = json_lines(ss.str());
  ASSERT_EQ(lines.size(), 2u);

  // continue from epoch 1 into a fresh directory; final state must match
  const auto resumed = run({"--config", cfg, "--json", "--out", (dir / "b").string(), "adapt", "--data",
                            (dir / "data").string(), "--resume", (dir / "a/checkpoints/epoch_0001").string()});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  const auto a = read_checkpoint(dir / "a/checkpoints/final");
  const auto b = read_checkpoint(dir / "b/checkpoints/final");
  EXPECT_EQ(a.student, b.student);
  EXPECT_EQ(a.teacher, b.teacher);
  EXPECT_EQ(json::parse(full.out)["target"], json::parse(resumed.out)["target"]);

  const auto ev = run({"--json", "eval", "--checkpoint", (dir / "a/checkpoints/final").string(), "--data",
                       (dir / "data").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(json::parse(ev.out)["target"], json::parse(full.out)["target"]);
}

TEST(Cli, AdaptNeedsData) {
  TempDir dir;
  EXPECT_EQ(run({"--out", (dir / "x").string(), "adapt"}).code, 2);
}
