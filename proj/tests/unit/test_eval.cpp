#include "fd.hpp"
#include "oracles.hpp"

#include "pad/eval.hpp"
#include "pad/lifelong.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace pad;
using namespace pad::test;

namespace {

RankingRow rank(std::vector<double> d, int qid, int qcam, std::vector<int> ids, std::vector<int> cams) {
  return rank_gallery(d, qid, qcam, ids, cams);
}

double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

}  // namespace

TEST(Distances, CosineDistanceCases) {
  Matrix q(2, 2);
  q << 1, 0, 0, 1;
  const Matrix d = pairwise_distances(q, q);
  EXPECT_EQ(d(0, 0), 0.0);
  EXPECT_EQ(d(0, 1), 1.0);
  Matrix bad = q;
  bad(1, 1) = std::nan("");
  EXPECT_THROW(pairwise_distances(bad, q), std::invalid_argument);
}

TEST(Distances, MatchesPerPairLoop) {
  const Matrix q = unit_rows(randn(4, 5, 1)), g = unit_rows(randn(6, 5, 2));
  const Matrix d = pairwise_distances(q, g);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) {
      double dot = 0;
      for (int k = 0; k < 5; ++k) dot += q(i, k) * g(j, k);
      EXPECT_NEAR(d(i, j), 1.0 - dot, 1e-10);
    }
}

TEST(AveragePrecision, PosNegPos) {
  const auto row = rank({0.1, 0.2, 0.3}, 1, 0, {1, 2, 1}, {1, 1, 2});
  EXPECT_NEAR(*compute_ap(row), (1.0 + 2.0 / 3.0) / 2, 1e-15);
  EXPECT_NEAR(*compute_ap(row), 0.8333, 1e-4);
}

TEST(AveragePrecision, ClosedForms) {
  EXPECT_EQ(*compute_ap(rank({0.1, 0.2, 0.9}, 1, 0, {1, 1, 2}, {1, 2, 1})), 1.0);
  // Single positive ranked last of n.
  EXPECT_NEAR(*compute_ap(rank({0.5, 0.1, 0.2, 0.3}, 1, 0, {1, 2, 3, 4}, {1, 1, 1, 1})), 0.25, 1e-15);
  // Same-camera match is ignored entirely.
  EXPECT_FALSE(compute_ap(rank({0.1, 0.2}, 1, 0, {1, 2}, {0, 0})).has_value());
}

TEST(AveragePrecision, ExhaustiveOracleOnRandomInstances) {
  std::mt19937_64 rng(7);
  int checked = 0;
  std::vector<GalleryCase> cases;
  std::vector<RankingRow> rows;
  for (int inst = 0; inst < 100; ++inst) {
    GalleryCase g;
    const size_t n = 1 + rng() % 8;
    for (size_t j = 0; j < n; ++j) {
      g.d.push_back(static_cast<double>(rng() % 5) / 4.0);  // ties on purpose
      g.ids.push_back(static_cast<int>(rng() % 3));
      g.cams.push_back(static_cast<int>(rng() % 2));
    }
    const RankingRow row = rank_gallery(g.d, g.qid, g.qcam, g.ids, g.cams);
    const auto got = compute_ap(row);
    const auto want = ap_oracle(g);
    ASSERT_EQ(got.has_value(), want.has_value()) << inst;
    if (want) {
      EXPECT_EQ(*got, *want) << inst;
      ++checked;
    }
    cases.push_back(g);
    rows.push_back(row);
  }
  EXPECT_GT(checked, 30);
  EXPECT_EQ(compute_cmc(rows, 8), cmc_oracle(cases, 8));
}

TEST(MeanAP, AveragesAndExcludes) {
  std::vector<RankingRow> rows{rank({0.1, 0.2}, 1, 0, {1, 2}, {1, 1}), rank({0.1, 0.2}, 1, 0, {2, 1}, {1, 1}),
                               rank({0.1}, 3, 0, {4}, {1})};
  const RetrievalSummary s = compute_map(rows);
  EXPECT_NEAR(s.mAP, 0.75, 1e-15);
  EXPECT_EQ(s.valid_queries, 2);
  EXPECT_EQ(s.excluded_queries, 1);
}

TEST(CMC, MonotoneAndReachesOne) {
  const Matrix q = unit_rows(randn(6, 4, 3)), g = unit_rows(randn(12, 4, 4));
  std::vector<int> qid{0, 1, 2, 3, 4, 5}, qcam(6, 0), gid, gcam(12, 1);
  for (int i = 0; i < 12; ++i) gid.push_back(i % 6);
  const RetrievalSummary s = evaluate_retrieval(q, qid, qcam, g, gid, gcam, 12);
  ASSERT_EQ(s.cmc.size(), 12u);
  for (size_t r = 1; r < s.cmc.size(); ++r) EXPECT_GE(s.cmc[r], s.cmc[r - 1]);
  EXPECT_EQ(s.cmc.back(), 1.0);
}

TEST(Retrieval, GalleryPermutationInvariant) {
  const Matrix q = unit_rows(randn(5, 4, 5)), g = unit_rows(randn(10, 4, 6));
  std::vector<int> qid{0, 1, 2, 3, 4}, qcam(5, 0), gid, gcam;
  for (int i = 0; i < 10; ++i) {
    gid.push_back(i % 5);
    gcam.push_back(i % 2);
  }
  const RetrievalSummary a = evaluate_retrieval(q, qid, qcam, g, gid, gcam);
  std::vector<int> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  Matrix gp(10, 4);
  std::vector<int> gidp, gcamp;
  for (int i = 0; i < 10; ++i) {
    gp.row(i) = g.row(perm[static_cast<size_t>(i)]);
    gidp.push_back(gid[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    gcamp.push_back(gcam[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
  }
  const RetrievalSummary b = evaluate_retrieval(q, qid, qcam, gp, gidp, gcamp);
  EXPECT_NEAR(a.mAP, b.mAP, 1e-15);
  EXPECT_EQ(a.cmc, b.cmc);
}

TEST(Retrieval, RandomEmbeddingsScoreNearChance) {
  // Chance level for the split geometry, by simulating random rankings.
  const ExperimentConfig cfg;
  const DomainDataset d = make_seen_domain(cfg, 0);
  std::vector<int> qid, qcam, gid, gcam;
  for (const auto& x : d.test.query) {
    qid.push_back(x.identity);
    qcam.push_back(x.camera);
  }
  for (const auto& x : d.test.gallery) {
    gid.push_back(x.identity);
    gcam.push_back(x.camera);
  }
  auto score = [&](const Matrix& qf, const Matrix& gf) { return evaluate_retrieval(qf, qid, qcam, gf, gid, gcam).mAP; };
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double chance = 0;
  const int sims = 200;
  for (int s = 0; s < sims; ++s) {
    std::vector<RankingRow> rows;
    for (size_t i = 0; i < qid.size(); ++i) {
      std::vector<double> dist(gid.size());
      for (double& x : dist) x = u(rng);
      rows.push_back(rank_gallery(dist, qid[i], qcam[i], gid, gcam));
    }
    chance += compute_map(rows).mAP / sims;
  }
  double random_feats = 0;
  for (uint64_t s = 0; s < 20; ++s)
    random_feats += score(unit_rows(randn(static_cast<Eigen::Index>(qid.size()), 32, 100 + s)),
                          unit_rows(randn(static_cast<Eigen::Index>(gid.size()), 32, 200 + s))) / 20;
  EXPECT_NEAR(random_feats, chance, 0.03);
  EXPECT_GT(chance, 0.05);
  EXPECT_LT(chance, 0.25);

  // An untrained encoder is far from trained quality but sits in a band above
  // chance: random features of colored silhouettes still carry identity cues.
  const ModelState m(cfg);
  const double untrained = score(embed_images(m, d.test.query), embed_images(m, d.test.gallery));
  EXPECT_GT(untrained, chance - 0.03);
  EXPECT_LT(untrained, 0.6);
}

TEST(MetricsReport, AveragesForgettingAndCsvRoundTrip) {
  MetricsReport r;
  r.entries = {{0, 0, "seen", 0.8, 0.9},   {0, 1000, "unseen", 0.3, 0.4}, {1, 0, "seen", 0.6, 0.7},
               {1, 1, "seen", 0.7, 0.8},   {1, 1000, "unseen", 0.35, 0.5}};
  r.diagnostics = {{0, 0.5, std::nan(""), std::nan(""), false}, {1, 0.55, 0.9, 0.8, true}};
  EXPECT_EQ(r.final_stage(), 1);
  EXPECT_NEAR(r.seen_avg_map(1), 0.65, 1e-15);
  EXPECT_NEAR(r.unseen_avg_map(1), 0.35, 1e-15);
  EXPECT_EQ(r.stage_entries(1, "seen").size(), 2u);
  EXPECT_NEAR(r.forgetting().at(0), 0.2, 1e-12);
  const MetricsReport back = parse_metrics(metrics_csv(r), diagnostics_csv(r));
  EXPECT_EQ(metrics_csv(back), metrics_csv(r));
  EXPECT_EQ(diagnostics_csv(back), diagnostics_csv(r));
  EXPECT_TRUE(std::isnan(back.diagnostic(0)->rho_pearson));
  EXPECT_FALSE(back.diagnostic(0)->rho_defined);
}

TEST(Drift, PrototypeAndOrthogonalCases) {
  const Matrix bank = Matrix::Identity(2, 3);
  Matrix on(1, 3), off(1, 3);
  on << 1, 0, 0;
  off << 0, 0, 1;
  EXPECT_NEAR(semantic_drift_score(on, bank), 1.0, 1e-15);
  EXPECT_NEAR(semantic_drift_score(off, bank), 0.0, 1e-15);
  Matrix both(2, 3);
  both << 1, 0, 0, 0, 0, 1;
  EXPECT_NEAR(semantic_drift_score(both, bank), 0.5, 1e-15);
}

TEST(Correlation, MatchesTextbookFormulas) {
  const Matrix x = randn(1, 30, 1), y = randn(1, 30, 2);
  std::vector<double> xs(x.data(), x.data() + 30), ys(y.data(), y.data() + 30);
  EXPECT_NEAR(pearson(xs, ys), pearson_oracle(xs, ys), 1e-10);
  EXPECT_LT(std::abs(pearson(xs, ys)), 0.5);
  // Spearman = Pearson of ranks (no ties in continuous draws).
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (size_t i = 0; i < v.size(); ++i)
      r[i] = static_cast<double>(std::count_if(v.begin(), v.end(), [&](double w) { return w < v[i]; })) + 1;
    return r;
  };
  EXPECT_NEAR(spearman(xs, ys), pearson_oracle(ranks(xs), ranks(ys)), 1e-10);
  const std::vector<double> tied_x{1, 2, 2, 3}, tied_y{1, 2, 3, 4};
  EXPECT_NEAR(spearman(tied_x, tied_y), pearson_oracle({1, 2.5, 2.5, 4}, {1, 2, 3, 4}), 1e-12);
}

TEST(Correlation, CoMonotoneDomainsGiveOne) {
  // Domain 0 and 1 share most routing and features, domain 2 is far away.
  std::vector<Vector> h(3, Vector::Zero(4));
  h[0] << 0.5, 0.5, 0, 0;
  h[1] << 0.4, 0.5, 0.1, 0;
  h[2] << 0, 0.1, 0.4, 0.5;
  std::vector<RowVector> f(3, RowVector::Zero(3));
  f[0] << 1, 0, 0;
  f[1] << 0.9, 0.3, 0;
  f[2] << 0.1, 0.2, 1;
  const Correlation c = prompt_routing_correlation(h, f);
  ASSERT_TRUE(c.defined);
  EXPECT_NEAR(c.spearman, 1.0, 1e-12);
  EXPECT_GT(c.pearson, 0.9);
}

TEST(Correlation, DegenerateIsNaN) {
  std::vector<Vector> h(3, Vector::Constant(4, 0.25));
  std::vector<RowVector> f(3, RowVector::Constant(3, 1.0));
  const Correlation c = prompt_routing_correlation(h, f);
  EXPECT_FALSE(c.defined);
  EXPECT_TRUE(std::isnan(c.pearson));
  EXPECT_THROW(prompt_routing_correlation(std::span(h).first(1), std::span(f).first(1)), std::invalid_argument);
}

TEST(RoutingHistogram, NormalizedCounts) {
  RoutingRecord rec{{{0, 1}, {1, 2}}, {{1, 3}, {1, 0}}};
  const Vector h = routing_histogram(rec, 4);
  EXPECT_NEAR(h.sum(), 1.0, 1e-15);
  EXPECT_NEAR(h[1], 0.5, 1e-15);
}
