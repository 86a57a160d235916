#pragma once

// Training objectives. Each loss is a pure function returning its value and
// analytic gradients; the ag:: overloads wrap them as graph nodes.

#include "pad/autograd.hpp"

#include <optional>
#include <span>
#include <vector>

namespace pad {

struct ExperimentConfig;

namespace loss {

enum class Reduction { mean, sum };

/// softmax over gamma * (v . t_i) / tau for one query row.
struct SimilarityDistribution {
  RowVector probs;
  double tau = 1;
  std::optional<double> gamma;
};

SimilarityDistribution vt_distribution(const RowVector& v, const Matrix& bank, double tau,
                                       std::optional<double> gamma = std::nullopt);

/// Row-wise softmax of `scale * v * bank^T`, max-subtracted.
Matrix similarity_probs(const Matrix& v, const Matrix& bank, double scale);
double kl_divergence(const RowVector& p, const RowVector& q);

struct SupConResult {
  double value = 0;
  Matrix grad_v, grad_t;
  int skipped_anchors = 0;
};

/// SupCon(v -> t) + SupCon(t -> v); positives share a label. Anchors without
/// a positive are left out of the reduction.
SupConResult supcon(const Matrix& v, const Matrix& t, std::span<const int> labels, double temperature,
                    Reduction reduction = Reduction::mean);

struct ValueGrad {
  double value = 0;
  Matrix grad;
};

/// Mean softmax cross-entropy. Throws when a label is outside [0, C).
ValueGrad id_loss(const Matrix& logits, std::span<const int> labels);

struct TripletResult {
  double value = 0;
  Matrix grad;
  int skipped_anchors = 0;
};

/// Batch-hard triplet on Euclidean distances, hinged at zero and averaged over
/// anchors that have both a positive and a negative in the batch.
TripletResult triplet(const Matrix& features, std::span<const int> labels, double margin);

/// tau^2 * mean_b KL(teacher_probs_b || softmax(scale * v_b . bank^T)).
/// Gradients are for the student side only.
struct DistillResult {
  double value = 0;
  Matrix grad_v;     // B x D
  Matrix grad_bank;  // K x D
  double grad_scale = 0;
};
DistillResult distill_kl(const Matrix& teacher_probs, const Matrix& v, const Matrix& bank, double scale, double tau);

struct TexKDResult {
  double value = 0;
  Matrix grad_v;
  Matrix grad_t_student;
  double grad_gamma = 0;
};

/// tau^2 * KL(q(v, t_tea, tau, gamma) || q(v, t_stu, tau, gamma)), batch mean.
/// Rows of both banks correspond to the same identity subset.
TexKDResult texkd(const Matrix& v, const Matrix& t_teacher, const Matrix& t_student, double tau, double gamma);

/// Identity-indexed wrapper: gathers `subset_ids` rows from both banks.
TexKDResult texkd_subset(const Matrix& v, const Matrix& teacher_bank, std::span<const int> teacher_ids,
                         const Matrix& student_bank, std::span<const int> student_ids,
                         std::span<const int> subset_ids, double tau, double gamma);

struct FeatKDResult {
  double value = 0;
  Matrix grad_v11, grad_v12, grad_proj;
};

/// (1/3) * sum over the three levels of the mean squared error.
FeatKDResult featkd(const Matrix& s11, const Matrix& s12, const Matrix& sproj, const Matrix& t11, const Matrix& t12,
                    const Matrix& tproj);

/// tau^2 * KL(q(v_tea, bank, tau) || q(v_stu, bank, tau)), no gamma; grad for v_stu.
ValueGrad logitkd(const Matrix& v_student, const Matrix& v_teacher, const Matrix& bank, double tau);

struct LossBreakdown {
  double supcon = 0, id = 0, triplet = 0, texkd = 0, featkd = 0, logitkd = 0;
  double kd_total = 0, overall = 0;
};

struct LossWeights {
  double lambda_text = 0.5, lambda_feat = 0.5, lambda_logit = 0.5;
};
LossWeights weights_from(const ExperimentConfig& cfg);

/// kd_total = l_text*texkd + l_feat*featkd + l_logit*logitkd;
/// overall = supcon + id + triplet + kd_total.
LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& w);

}  // namespace loss

namespace ag {

Var supcon(const Var& v, const Var& t, std::vector<int> labels, double temperature);
Var id_loss(const Var& logits, std::vector<int> labels);
Var triplet(const Var& features, std::vector<int> labels, double margin);
/// `gamma` is a 1x1 var; `t_teacher` is a detached matrix.
Var texkd(const Var& v, const Matrix& t_teacher, const Var& t_student, const Var& gamma, double tau);
Var featkd(const Var& s11, const Var& s12, const Var& sproj, const Matrix& t11, const Matrix& t12,
           const Matrix& tproj);
Var logitkd(const Var& v_student, const Matrix& v_teacher, const Matrix& bank, double tau);

}  // namespace ag
}  // namespace pad
