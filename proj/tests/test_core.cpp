#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "oracles.hpp"
#include "shape/core.hpp"
#include "shape/rng.hpp"
#include "shape/stats.hpp"

using namespace shape;

TEST(FeatureMap, RejectsZeroDims) {
  EXPECT_THROW(FeatureMap<float>(0, 2, 2), ShapeError);
  EXPECT_THROW(FeatureMap<float>(1, 0, 2), ShapeError);
}

TEST(FeatureMap, ChannelMajorLayout) {
  FeatureMap<double> f(2, 3, 4);
  f.at(1, 2, 3) = 5.0;
  EXPECT_EQ(f.values()[(1 * 3 + 2) * 4 + 3], 5.0);
  EXPECT_EQ(f.channel(1)[2 * 4 + 3], 5.0);
  EXPECT_EQ(f.plane(), 12u);
}

TEST(LabelMap, ValidateAcceptsIgnore) {
  LabelMap m(2, 2, 3);
  m[0] = 2;
  m[1] = kIgnore;
  EXPECT_NO_THROW(m.validate());
  m[2] = 3;
  EXPECT_THROW(m.validate(), ValidationError);
}

TEST(LabelMap, RejectsBadClassCount) {
  EXPECT_THROW(LabelMap(2, 2, 1), ValidationError);
  EXPECT_THROW(LabelMap(2, 2, 3, 3), ValidationError);
}

TEST(ProbMap, DefaultIsUniformAndValid) {
  ProbMap<float> p(4, 3, 3);
  EXPECT_FLOAT_EQ(p.at(2, 1, 1), 0.25f);
  EXPECT_NO_THROW(p.validate());
}

TEST(ProbMap, ValidateCatchesBadSums) {
  ProbMap<double> p(2, 1, 2);
  p.at(0, 0) = 0.9;
  EXPECT_THROW(p.validate(), ValidationError);
  p.at(1, 0) = 0.1;
  EXPECT_NO_THROW(p.validate());
  p.at(0, 1) = -0.1;
  p.at(1, 1) = 1.1;
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  ProbMap<double> p(3, 1, 1);
  p.at(0, 0) = 0.2;
  p.at(1, 0) = 0.4;
  p.at(2, 0) = 0.4;
  EXPECT_EQ(argmax_map(p)[0], 1);
}

// Relabelling the channels relabels the argmax the same way.
TEST(Argmax, PermutationEquivariance) {
  SeededRng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(6));
    const auto p = oracle::random_probs<double>(rng, K, 7, 9);
    std::vector<int> perm(K);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = K - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    FeatureMap<double> raw(K, 7, 9);
    for (int k = 0; k < K; ++k)
      for (std::size_t q = 0; q < p.plane(); ++q) raw.values()[perm[k] * p.plane() + q] = p.at(k, q);
    const ProbMap<double> pp(std::move(raw));
    const auto a = argmax_map(p), b = argmax_map(pp);
    for (std::size_t q = 0; q < a.size(); ++q) ASSERT_EQ(b[q], perm[a[q]]);
  }
}

TEST(Ensemble, MeanIsPointwise) {
  SeededRng rng(3);
  PredictionEnsemble<double> e;
  for (int i = 0; i < 3; ++i) e.members.push_back(oracle::random_probs<double>(rng, 3, 4, 5));
  const auto m = ensemble_mean(e);
  for (std::size_t i = 0; i < m.values().size(); ++i) {
    const double ref = (e.members[0].values()[i] + e.members[1].values()[i] + e.members[2].values()[i]) / 3;
    EXPECT_NEAR(m.values()[i], ref, 1e-15);
  }
  EXPECT_NO_THROW(m.validate());
}

TEST(Ensemble, NeedsTwoMembersOfOneShape) {
  PredictionEnsemble<float> e;
  e.members.emplace_back(2, 2, 2);
  EXPECT_THROW(e.validate(), ValidationError);
  e.members.emplace_back(2, 3, 2);
  EXPECT_THROW(e.validate(), ShapeError);
}

TEST(OneHot, IgnoreBecomesUniform) {
  LabelMap y(1, 3, 4);
  y[0] = 2;
  y[1] = kIgnore;
  const auto p = one_hot<double>(y);
  EXPECT_EQ(p.at(2, 0), 1.0);
  EXPECT_EQ(p.at(0, 0), 0.0);
  EXPECT_EQ(p.at(3, 1), 0.25);
  EXPECT_EQ(p.at(0, 2), 1.0);
  EXPECT_NO_THROW(p.validate());
}

TEST(Rng, KnownSplitMixSequence) {
  // Reference values of SplitMix64 seeded with 0.
  SeededRng r(0);
  EXPECT_EQ(r.next(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(r.counter(), 2u);
}

TEST(Rng, RestoreContinuesStream) {
  SeededRng a(42);
  for (int i = 0; i < 17; ++i) a.next();
  auto b = SeededRng::restore(a.seed(), a.state(), a.counter());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_EQ(a.counter(), b.counter());
}

TEST(Rng, DeriveIsStableAndDistinct) {
  const SeededRng root(9);
  auto a = root.derive(1), b = root.derive(1), c = root.derive(2);
  const auto x = a.next();
  EXPECT_EQ(x, b.next());
  EXPECT_NE(x, c.next());
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  SeededRng r(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, UniformAndNormalMoments) {
  SeededRng r(1);
  std::vector<double> u, n;
  for (int i = 0; i < 20000; ++i) {
    u.push_back(r.uniform());
    n.push_back(r.normal());
  }
  const auto su = oracle::two_pass(u), sn = oracle::two_pass(n);
  EXPECT_NEAR(su.mean, 0.5, 0.01);
  EXPECT_NEAR(sn.mean, 0.0, 0.03);
  EXPECT_NEAR(sn.std, 1.0, 0.03);
  EXPECT_TRUE(std::all_of(u.begin(), u.end(), [](double v) { return v >= 0 && v < 1; }));
}

TEST(Stats, QuantileMatchesPercentileOracle) {
  SeededRng r(2);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(1 + r.below(40));
    for (auto& x : v) x = r.normal();
    const double q = r.uniform(0, 100);
    EXPECT_NEAR(quantile_linear(v, q / 100), oracle::percentile(v, q), 1e-12);
  }
}

TEST(Stats, SampleAndPopulationStd) {
  const std::vector<double> v{90, 100, 110};
  EXPECT_DOUBLE_EQ(sample_std(v), 10.0);
  EXPECT_NEAR(population_std(v), std::sqrt(200.0 / 3), 1e-12);
  EXPECT_EQ(sample_std(std::vector<double>{4.0}), 0.0);
}

TEST(Stats, EntropyTreatsZeroAsZero) {
  EXPECT_EQ(entropy(std::vector<double>{1.0, 0.0}), 0.0);
  EXPECT_NEAR(entropy(std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
}
