#include "fd.hpp"
#include "oracles.hpp"

#include "pad/config.hpp"
#include "pad/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace pad;
using namespace pad::test;

namespace {

const std::vector<int> kLabels4{0, 0, 1, 1};

}  // namespace

TEST(SupCon, TwoOrthogonalPairsSumReduction) {
  Matrix v = Matrix::Identity(2, 2);
  auto r = loss::supcon(v, v, std::vector<int>{0, 1}, 1.0, loss::Reduction::sum);
  const double per_anchor = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(per_anchor, 0.31326, 1e-5);
  EXPECT_NEAR(r.value, 4 * per_anchor, 1e-12);
  EXPECT_NEAR(r.value, 1.25302, 1e-4);  // quoted value rounds the per-anchor term first
}

TEST(SupCon, MeanReductionHalvesTwoAnchorCase) {
  Matrix v = Matrix::Identity(2, 2);
  auto r = loss::supcon(v, v, std::vector<int>{0, 1}, 1.0);
  EXPECT_NEAR(r.value, 0.62652, 1e-5);
}

TEST(SupCon, IdenticalEmbeddingsMatchOracle) {
  Matrix v = unit_rows(Matrix::Ones(4, 3));
  const std::vector<int> y{0, 0, 0, 0};
  auto r = loss::supcon(v, v, y, 0.5, loss::Reduction::sum);
  const double oracle = supcon_direction_oracle(v, v, y, 0.5) * 2;
  EXPECT_NEAR(r.value, oracle, 1e-10);
  // Every candidate is a positive at equal similarity: ln 4 per anchor and direction.
  EXPECT_NEAR(r.value, 8 * std::log(4.0), 1e-12);
}

TEST(SupCon, MatchesDoubleSumOracle) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Matrix v = unit_rows(randn(4, 5, seed)), t = unit_rows(randn(4, 5, seed + 100));
    const std::vector<int> y{0, 1, 0, 2};
    const double oracle = supcon_direction_oracle(v, t, y, 0.07) + supcon_direction_oracle(t, v, y, 0.07);
    EXPECT_NEAR(loss::supcon(v, t, y, 0.07, loss::Reduction::sum).value, oracle, 1e-10);
    EXPECT_NEAR(loss::supcon(v, t, y, 0.07).value, oracle / 4, 1e-10);
  }
}

TEST(SupCon, SymmetricInRoles) {
  Matrix v = unit_rows(randn(4, 3, 1)), t = unit_rows(randn(4, 3, 2));
  EXPECT_NEAR(loss::supcon(v, t, kLabels4, 0.1).value, loss::supcon(t, v, kLabels4, 0.1).value, 1e-12);
}

TEST(SupCon, GradientsMatchFiniteDifferences) {
  Matrix v = unit_rows(randn(4, 6, 3)), t = unit_rows(randn(4, 6, 4));
  auto r = loss::supcon(v, t, kLabels4, 0.2);
  auto fv = [&](const Matrix& x) { return loss::supcon(x, t, kLabels4, 0.2).value; };
  auto ft = [&](const Matrix& x) { return loss::supcon(v, x, kLabels4, 0.2).value; };
  EXPECT_LT(rel_error(r.grad_v, numeric_grad(fv, v)), kGradTol);
  EXPECT_LT(rel_error(r.grad_t, numeric_grad(ft, t)), kGradTol);
}

TEST(IdLoss, UniformLogitsGiveLogC) {
  Matrix z = Matrix::Zero(3, 4);
  EXPECT_NEAR(loss::id_loss(z, std::vector<int>{0, 2, 3}).value, std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(IdLoss, LargeMarginApproachesZero) {
  Matrix z = Matrix::Zero(2, 3);
  z(0, 1) = 60;
  z(1, 2) = 60;
  EXPECT_LT(loss::id_loss(z, std::vector<int>{1, 2}).value, 1e-20);
}

TEST(IdLoss, MatchesOracleAndGradient) {
  Matrix z = randn(4, 5, 7);
  const std::vector<int> y{4, 0, 2, 2};
  auto r = loss::id_loss(z, y);
  EXPECT_NEAR(r.value, id_oracle(z, y), 1e-10);
  auto f = [&](const Matrix& x) { return loss::id_loss(x, y).value; };
  EXPECT_LT(rel_error(r.grad, numeric_grad(f, z)), kGradTol);
}

TEST(IdLoss, RejectsOutOfRangeLabel) {
  EXPECT_THROW(loss::id_loss(Matrix::Zero(1, 3), std::vector<int>{3}), std::out_of_range);
}

TEST(Triplet, HandSetDistances) {
  Matrix f(3, 1);
  f << 0.0, 1.0, 0.5;
  auto r = loss::triplet(f, std::vector<int>{0, 0, 1}, 0.3);
  EXPECT_NEAR(r.value, 0.8, 1e-12);
  EXPECT_EQ(r.skipped_anchors, 1);
}

TEST(Triplet, SeparatedClustersGiveZero) {
  Matrix f(4, 2);
  f << 0, 0, 0, 0.1, 5, 5, 5, 5.1;
  EXPECT_EQ(loss::triplet(f, kLabels4, 0.3).value, 0.0);
}

TEST(Triplet, PermutationInvariantAndMatchesOracle) {
  Matrix f = randn(6, 3, 11);
  std::vector<int> y{0, 1, 2, 0, 1, 2};
  const double v = loss::triplet(f, y, 0.5).value;
  EXPECT_NEAR(v, triplet_oracle(f, y, 0.5), 1e-10);
  std::vector<int> perm{5, 3, 1, 0, 2, 4};
  Matrix fp(6, 3);
  std::vector<int> yp(6);
  for (int i = 0; i < 6; ++i) {
    fp.row(i) = f.row(perm[static_cast<size_t>(i)]);
    yp[static_cast<size_t>(i)] = y[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  EXPECT_NEAR(loss::triplet(fp, yp, 0.5).value, v, 1e-12);
}

TEST(Triplet, GradientMatchesFiniteDifferences) {
  Matrix f = randn(4, 3, 12);
  auto r = loss::triplet(f, kLabels4, 2.0);
  ASSERT_GT(r.value, 0);
  auto fn = [&](const Matrix& x) { return loss::triplet(x, kLabels4, 2.0).value; };
  EXPECT_LT(rel_error(r.grad, numeric_grad(fn, f)), kGradTol);
}

TEST(VtDistribution, SingleCandidate) {
  RowVector v = RowVector::Unit(3, 0);
  EXPECT_EQ(loss::vt_distribution(v, Matrix::Identity(1, 3), 0.07, 7.0).probs[0], 1.0);
}

TEST(VtDistribution, EqualCosinesSplitEvenly) {
  RowVector v(2);
  v << 1, 0;
  Matrix bank(2, 2);
  bank << 0.6, 0.8, 0.6, -0.8;
  auto d = loss::vt_distribution(v, bank, 0.5);
  EXPECT_NEAR(d.probs[0], 0.5, 1e-15);
  EXPECT_NEAR(d.probs[1], 0.5, 1e-15);
}

TEST(VtDistribution, SharpHighPrecisionCase) {
  // Cosines 0.9 and 0.1 scaled by gamma/tau = 100: logits 90 and 10.
  RowVector v(2);
  v << 1, 0;
  Matrix bank(2, 2);
  bank << 0.9, std::sqrt(1 - 0.81), 0.1, std::sqrt(1 - 0.01);
  auto d = loss::vt_distribution(v, bank, 0.07, 7.0);
  const long double tail = std::exp(-80.0L) / (1.0L + std::exp(-80.0L));
  EXPECT_NEAR(static_cast<double>(d.probs[1] / tail), 1.0, 1e-9);
  EXPECT_EQ(d.probs[0], 1.0);  // 1 - 1.8e-35 rounds to 1 in 64-bit
  EXPECT_NEAR(d.probs.sum(), 1.0, 1e-6);
}

TEST(VtDistribution, ShiftInvariance) {
  RowVector v = unit_rows(randn(1, 4, 5)).row(0);
  Matrix bank = unit_rows(randn(6, 4, 6));
  auto a = loss::vt_distribution(v, bank, 0.3, 2.0).probs;
  // Adding the same component to every bank row along v shifts all logits equally.
  Matrix shifted = bank.rowwise() + 0.7 * v;
  auto b = loss::vt_distribution(v, shifted, 0.3, 2.0).probs;
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(VtDistribution, RejectsNonPositiveTemperature) {
  RowVector v = RowVector::Unit(2, 0);
  EXPECT_THROW(loss::vt_distribution(v, Matrix::Identity(2, 2), 0.0), std::invalid_argument);
  EXPECT_THROW(loss::vt_distribution(v, Matrix::Identity(2, 2), -1.0), std::invalid_argument);
}

TEST(TexKD, IdenticalBanksGiveZero) {
  Matrix v = unit_rows(randn(3, 4, 1)), t = unit_rows(randn(5, 4, 2));
  EXPECT_NEAR(loss::texkd(v, t, t, 0.07, 7.0).value, 0.0, 1e-10);
}

TEST(TexKD, HandKLCase) {
  Matrix v(1, 1);
  v << 1.0;
  Matrix tea(2, 1), stu(2, 1);
  tea << std::log(0.8), std::log(0.2);
  stu << std::log(0.6), std::log(0.4);
  const double kl = 0.8 * std::log(0.8 / 0.6) + 0.2 * std::log(0.2 / 0.4);
  EXPECT_NEAR(kl, 0.09151, 1e-5);
  EXPECT_NEAR(loss::texkd(v, tea, stu, 1.0, 1.0).value, kl, 1e-12);
  // gamma = tau keeps the same distributions, so only the tau^2 factor changes.
  EXPECT_NEAR(loss::texkd(v, tea, stu, 0.07, 0.07).value, 0.0049 * kl, 1e-12);
}

TEST(TexKD, MatchesKLOracle) {
  Matrix v = unit_rows(randn(3, 4, 3)), tea = unit_rows(randn(4, 4, 4)), stu = unit_rows(randn(4, 4, 5));
  EXPECT_NEAR(loss::texkd(v, tea, stu, 0.07, 7.0).value, distill_oracle(v, tea, stu, 7.0 / 0.07, 0.07), 1e-10);
}

TEST(TexKD, StudentGradientsMatchFiniteDifferences) {
  Matrix v = unit_rows(randn(3, 4, 6)), tea = unit_rows(randn(5, 4, 7)), stu = unit_rows(randn(5, 4, 8));
  const double tau = 0.5, gamma = 1.3;
  auto r = loss::texkd(v, tea, stu, tau, gamma);
  auto ft = [&](const Matrix& x) { return loss::texkd(v, tea, x, tau, gamma).value; };
  EXPECT_LT(rel_error(r.grad_t_student, numeric_grad(ft, stu)), kGradTol);

  // v and gamma also shape the teacher distribution, which is detached: hold it fixed.
  const Matrix p = loss::similarity_probs(v, tea, gamma / tau);
  auto fv = [&](const Matrix& x) { return loss::distill_kl(p, x, stu, gamma / tau, tau).value; };
  EXPECT_LT(rel_error(r.grad_v, numeric_grad(fv, v)), kGradTol);
  auto fg = [&](const Matrix& g) { return loss::distill_kl(p, v, stu, g(0, 0) / tau, tau).value; };
  Matrix g0 = Matrix::Constant(1, 1, gamma);
  EXPECT_LT(rel_error(Matrix::Constant(1, 1, r.grad_gamma), numeric_grad(fg, g0)), kGradTol);
}

TEST(TexKD, SubsetLookupAndMissingId) {
  Matrix v = unit_rows(randn(2, 3, 9)), bank = unit_rows(randn(3, 3, 10));
  const std::vector<int> ids{10, 20, 30};
  auto r = loss::texkd_subset(v, bank, ids, bank, ids, std::vector<int>{30, 10}, 0.07, 7.0);
  EXPECT_NEAR(r.value, 0.0, 1e-10);
  EXPECT_EQ(r.grad_t_student.rows(), 3);
  EXPECT_THROW(loss::texkd_subset(v, bank, ids, bank, ids, std::vector<int>{40}, 0.07, 7.0), std::out_of_range);
}

TEST(FeatKD, ZeroAndUnitOffset) {
  Matrix a = randn(3, 4, 1), b = randn(3, 4, 2), c = randn(3, 2, 3);
  EXPECT_EQ(loss::featkd(a, b, c, a, b, c).value, 0.0);
  Matrix o1 = a.array() + 1, o2 = b.array() + 1, o3 = c.array() + 1;
  EXPECT_NEAR(loss::featkd(o1, o2, o3, a, b, c).value, 1.0, 1e-12);
}

TEST(FeatKD, MatchesOracleAndGradient) {
  Matrix s1 = randn(2, 4, 1), s2 = randn(2, 4, 2), s3 = randn(2, 3, 3);
  Matrix t1 = randn(2, 4, 4), t2 = randn(2, 4, 5), t3 = randn(2, 3, 6);
  double oracle = 0;
  for (auto [s, t] : {std::pair{&s1, &t1}, std::pair{&s2, &t2}, std::pair{&s3, &t3}}) {
    double acc = 0;
    for (Eigen::Index i = 0; i < s->size(); ++i) acc += std::pow(s->data()[i] - t->data()[i], 2);
    oracle += acc / static_cast<double>(s->size());
  }
  oracle /= 3;
  auto r = loss::featkd(s1, s2, s3, t1, t2, t3);
  EXPECT_NEAR(r.value, oracle, 1e-10);
  EXPECT_LT(rel_error(r.grad_v11, numeric_grad([&](const Matrix& x) { return loss::featkd(x, s2, s3, t1, t2, t3).value; }, s1)), kGradTol);
  EXPECT_LT(rel_error(r.grad_v12, numeric_grad([&](const Matrix& x) { return loss::featkd(s1, x, s3, t1, t2, t3).value; }, s2)), kGradTol);
  EXPECT_LT(rel_error(r.grad_proj, numeric_grad([&](const Matrix& x) { return loss::featkd(s1, s2, x, t1, t2, t3).value; }, s3)), kGradTol);
}

TEST(FeatKD, ShapeMismatchThrows) {
  EXPECT_THROW(loss::featkd(Matrix::Zero(2, 2), Matrix::Zero(2, 2), Matrix::Zero(2, 2), Matrix::Zero(2, 3),
                            Matrix::Zero(2, 2), Matrix::Zero(2, 2)),
               std::invalid_argument);
}

TEST(LogitKD, IdenticalGivesZeroAndHandCaseScalesBy16) {
  Matrix bank = Matrix::Identity(2, 2);
  Matrix vt(1, 2), vs(1, 2);
  vt << 4 * std::log(0.8), 4 * std::log(0.2);
  vs << 4 * std::log(0.6), 4 * std::log(0.4);
  EXPECT_NEAR(loss::logitkd(vt, vt, bank, 4.0).value, 0.0, 1e-12);
  const double kl = 0.8 * std::log(0.8 / 0.6) + 0.2 * std::log(0.2 / 0.4);
  EXPECT_NEAR(loss::logitkd(vs, vt, bank, 4.0).value, 16 * kl, 1e-12);
  EXPECT_THROW(loss::logitkd(vs, vt, bank, 0.0), std::invalid_argument);
}

TEST(LogitKD, GradientMatchesFiniteDifferences) {
  Matrix vs = unit_rows(randn(3, 4, 1)), vt = unit_rows(randn(3, 4, 2)), bank = unit_rows(randn(5, 4, 3));
  auto r = loss::logitkd(vs, vt, bank, 0.3);
  auto f = [&](const Matrix& x) { return loss::logitkd(x, vt, bank, 0.3).value; };
  EXPECT_LT(rel_error(r.grad, numeric_grad(f, vs)), kGradTol);
}

TEST(TotalLoss, WeightedSumArithmetic) {
  loss::LossBreakdown p{1, 1, 1, 1, 1, 1, 0, 0};
  auto r = loss::total_loss(p, {0.5, 0.5, 0.5});
  EXPECT_EQ(r.kd_total, 1.5);
  EXPECT_EQ(r.overall, 4.5);
}

TEST(TotalLoss, IdentitiesHoldExactly) {
  loss::LossBreakdown p{0.3, 1.7, 0.11, 0.023, 0.9, 0.0004, 0, 0};
  loss::LossWeights w{0.7, 0.35, 0.25};
  auto r = loss::total_loss(p, w);
  EXPECT_EQ(r.kd_total, w.lambda_text * p.texkd + w.lambda_feat * p.featkd + w.lambda_logit * p.logitkd);
  EXPECT_EQ(r.overall, p.supcon + p.id + p.triplet + r.kd_total);
  EXPECT_EQ(loss::weights_from(ExperimentConfig{}).lambda_text, 0.5);
}

TEST(TotalLoss, GraphGradientIsSumOfComponentGradients) {
  // Every term reads the same feature matrix; the gradient of the weighted
  // graph must equal finite differences of the weighted scalar sum.
  const Matrix t = unit_rows(randn(4, 3, 21)), tea = unit_rows(randn(4, 3, 22));
  const Matrix t11 = randn(4, 3, 23), W = randn(3, 2, 24), bank = unit_rows(randn(5, 3, 25));
  const std::vector<int> y{0, 0, 1, 1};
  const loss::LossWeights w{0.5, 0.25, 0.75};
  auto build = [&](const ag::Var& v) {
    ag::Var gamma = ag::constant(Matrix::Constant(1, 1, 2.0));
    std::vector<ag::Var> terms{ag::supcon(v, ag::constant(t), y, 0.5),
                               ag::id_loss(ag::matmul(v, ag::constant(W)), y),
                               ag::triplet(v, y, 3.0),
                               ag::texkd(v, tea, ag::constant(t), gamma, 0.5),
                               ag::featkd(v, v, v, t11, t11, t11),
                               ag::logitkd(v, t, bank, 0.5)};
    const std::vector<double> weights{1, 1, 1, w.lambda_text, w.lambda_feat, w.lambda_logit};
    return ag::weighted_sum(terms, weights);
  };
  const Matrix v0 = unit_rows(randn(4, 3, 26));
  const Matrix analytic = graph_grad(build, v0);
  // texkd's teacher side is detached; finite differences must hold it fixed too.
  const Matrix p = loss::similarity_probs(v0, tea, 2.0 / 0.5);
  auto f = [&](const Matrix& x) {
    loss::LossBreakdown parts;
    parts.supcon = loss::supcon(x, t, y, 0.5).value;
    parts.id = loss::id_loss(x * W, y).value;
    parts.triplet = loss::triplet(x, y, 3.0).value;
    parts.texkd = loss::distill_kl(p, x, t, 2.0 / 0.5, 0.5).value;
    parts.featkd = loss::featkd(x, x, x, t11, t11, t11).value;
    parts.logitkd = loss::logitkd(x, t, bank, 0.5).value;
    return loss::total_loss(parts, w).overall;
  };
  EXPECT_LT(rel_error(analytic, numeric_grad(f, v0)), kGradTol);
}
