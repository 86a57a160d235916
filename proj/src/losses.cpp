#include "pad/losses.hpp"

#include "pad/config.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace pad::loss {

namespace {

void softmax_rows_inplace(Matrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp();
    z.row(i) /= z.row(i).sum();
  }
}

void check_tau(double tau) {
  if (!(tau > 0) || !std::isfinite(tau)) throw std::invalid_argument("temperature must be positive and finite");
}

// One direction of SupCon: anchors are rows of `a`, candidates rows of `b`.
// Adds gradients into ga/gb; returns the per-anchor loss sum.
double supcon_direction(const Matrix& a, const Matrix& b, std::span<const int> labels, double tau, Matrix& ga,
                        Matrix& gb, double weight, int& valid) {
  const Eigen::Index n = a.rows();
  Matrix logits = a * b.transpose() / tau;
  Matrix probs = logits;
  softmax_rows_inplace(probs);
  double total = 0;
  valid = 0;
  Matrix g = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int npos = 0;
    for (Eigen::Index j = 0; j < n; ++j) npos += labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)];
    if (npos == 0) continue;
    ++valid;
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    double li = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool pos = labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)];
      if (pos) li -= (logits(i, j) - lse) / npos;
      g(i, j) = probs(i, j) - (pos ? 1.0 / npos : 0.0);
    }
    total += li;
  }
  // `weight` is the reduction factor applied to every anchor.
  g *= weight / tau;
  ga += g * b;
  gb += g.transpose() * a;
  return total;
}

}  // namespace

Matrix similarity_probs(const Matrix& v, const Matrix& bank, double scale) {
  Matrix z = scale * (v * bank.transpose());
  softmax_rows_inplace(z);
  return z;
}

SimilarityDistribution vt_distribution(const RowVector& v, const Matrix& bank, double tau,
                                       std::optional<double> gamma) {
  check_tau(tau);
  if (bank.rows() == 0) throw std::invalid_argument("vt_distribution: empty bank");
  if (bank.cols() != v.size()) throw std::invalid_argument("vt_distribution: dimension mismatch");
  SimilarityDistribution d;
  d.tau = tau;
  d.gamma = gamma;
  Matrix row = v;
  d.probs = similarity_probs(row, bank, gamma.value_or(1.0) / tau).row(0);
  return d;
}

double kl_divergence(const RowVector& p, const RowVector& q) {
  double s = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

SupConResult supcon(const Matrix& v, const Matrix& t, std::span<const int> labels, double temperature,
                    Reduction reduction) {
  check_tau(temperature);
  if (v.rows() != t.rows() || v.cols() != t.cols() || static_cast<size_t>(v.rows()) != labels.size())
    throw std::invalid_argument("supcon: shape mismatch");
  SupConResult r;
  r.grad_v = Matrix::Zero(v.rows(), v.cols());
  r.grad_t = Matrix::Zero(t.rows(), t.cols());
  // Count valid anchors first so the mean factor can be folded into the gradient.
  int valid = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    for (size_t j = 0; j < labels.size(); ++j)
      if (labels[i] == labels[j]) {
        ++valid;
        break;
      }
  r.skipped_anchors = static_cast<int>(labels.size()) - valid;
  if (valid == 0) return r;
  const double w = reduction == Reduction::mean ? 1.0 / valid : 1.0;
  int dummy = 0;
  const double s1 = supcon_direction(v, t, labels, temperature, r.grad_v, r.grad_t, w, dummy);
  const double s2 = supcon_direction(t, v, labels, temperature, r.grad_t, r.grad_v, w, dummy);
  r.value = (s1 + s2) * w;
  return r;
}

ValueGrad id_loss(const Matrix& logits, std::span<const int> labels) {
  const Eigen::Index b = logits.rows(), c = logits.cols();
  if (static_cast<size_t>(b) != labels.size()) throw std::invalid_argument("id_loss: label count mismatch");
  ValueGrad r;
  r.grad = logits;
  softmax_rows_inplace(r.grad);
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= c)
      throw std::out_of_range("id_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    r.value += lse - logits(i, y);
    r.grad(i, y) -= 1.0;
  }
  if (b > 0) {
    r.value /= static_cast<double>(b);
    r.grad /= static_cast<double>(b);
  }
  return r;
}

TripletResult triplet(const Matrix& f, std::span<const int> labels, double margin) {
  const Eigen::Index n = f.rows();
  if (static_cast<size_t>(n) != labels.size()) throw std::invalid_argument("triplet: label count mismatch");
  TripletResult r;
  r.grad = Matrix::Zero(n, f.cols());
  Matrix d(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d(i, j) = (f.row(i) - f.row(j)).norm();
  struct Active {
    Eigen::Index a, p, q;
  };
  std::vector<Active> active;
  int valid = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index hp = -1, hn = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
        if (hp < 0 || d(i, j) > d(i, hp)) hp = j;
      } else if (hn < 0 || d(i, j) < d(i, hn)) {
        hn = j;
      }
    }
    if (hp < 0 || hn < 0) {
      ++r.skipped_anchors;
      continue;
    }
    ++valid;
    const double h = d(i, hp) - d(i, hn) + margin;
    if (h > 0) {
      r.value += h;
      active.push_back({i, hp, hn});
    }
  }
  if (valid == 0) return r;
  r.value /= valid;
  const double w = 1.0 / valid;
  for (const auto& t : active) {
    if (d(t.a, t.p) > 0) {
      const RowVector u = (f.row(t.a) - f.row(t.p)) / d(t.a, t.p);
      r.grad.row(t.a) += w * u;
      r.grad.row(t.p) -= w * u;
    }
    if (d(t.a, t.q) > 0) {
      const RowVector u = (f.row(t.a) - f.row(t.q)) / d(t.a, t.q);
      r.grad.row(t.a) -= w * u;
      r.grad.row(t.q) += w * u;
    }
  }
  return r;
}

DistillResult distill_kl(const Matrix& teacher_probs, const Matrix& v, const Matrix& bank, double scale, double tau) {
  const Eigen::Index b = v.rows();
  DistillResult r;
  r.grad_v = Matrix::Zero(v.rows(), v.cols());
  r.grad_bank = Matrix::Zero(bank.rows(), bank.cols());
  if (b == 0 || bank.rows() == 0) return r;
  const Matrix dots = v * bank.transpose();
  const Matrix q = similarity_probs(v, bank, scale);
  for (Eigen::Index i = 0; i < b; ++i) r.value += kl_divergence(teacher_probs.row(i), q.row(i));
  const double f = tau * tau / static_cast<double>(b);
  r.value *= f;
  const Matrix g = f * (q - teacher_probs);  // d/d(logits)
  r.grad_v = scale * g * bank;
  r.grad_bank = scale * g.transpose() * v;
  r.grad_scale = (g.array() * dots.array()).sum();
  return r;
}

TexKDResult texkd(const Matrix& v, const Matrix& t_teacher, const Matrix& t_student, double tau, double gamma) {
  check_tau(tau);
  if (t_teacher.rows() != t_student.rows()) throw std::invalid_argument("texkd: bank size mismatch");
  const double s = gamma / tau;
  const Matrix p = similarity_probs(v, t_teacher, s);
  const DistillResult d = distill_kl(p, v, t_student, s, tau);
  return {d.value, d.grad_v, d.grad_bank, d.grad_scale / tau};
}

TexKDResult texkd_subset(const Matrix& v, const Matrix& teacher_bank, std::span<const int> teacher_ids,
                         const Matrix& student_bank, std::span<const int> student_ids,
                         std::span<const int> subset_ids, double tau, double gamma) {
  auto index_of = [](std::span<const int> ids) {
    std::map<int, Eigen::Index> m;
    for (size_t i = 0; i < ids.size(); ++i) m[ids[i]] = static_cast<Eigen::Index>(i);
    return m;
  };
  const auto ti = index_of(teacher_ids), si = index_of(student_ids);
  const auto k = static_cast<Eigen::Index>(subset_ids.size());
  Matrix tt(k, teacher_bank.cols()), ts(k, student_bank.cols());
  for (Eigen::Index i = 0; i < k; ++i) {
    const int id = subset_ids[static_cast<size_t>(i)];
    auto a = ti.find(id), b = si.find(id);
    if (a == ti.end() || b == si.end())
      throw std::out_of_range("texkd: identity " + std::to_string(id) + " missing from a bank");
    tt.row(i) = teacher_bank.row(a->second);
    ts.row(i) = student_bank.row(b->second);
  }
  TexKDResult r = texkd(v, tt, ts, tau, gamma);
  Matrix full = Matrix::Zero(student_bank.rows(), student_bank.cols());
  for (Eigen::Index i = 0; i < k; ++i) full.row(si.at(subset_ids[static_cast<size_t>(i)])) += r.grad_t_student.row(i);
  r.grad_t_student = std::move(full);
  return r;
}

FeatKDResult featkd(const Matrix& s11, const Matrix& s12, const Matrix& sproj, const Matrix& t11, const Matrix& t12,
                    const Matrix& tproj) {
  FeatKDResult r;
  auto level = [&](const Matrix& s, const Matrix& t, Matrix& g) {
    if (s.rows() != t.rows() || s.cols() != t.cols()) throw std::invalid_argument("featkd: shape mismatch");
    const Matrix diff = s - t;
    const double n = static_cast<double>(diff.size());
    g = (2.0 / 3.0 / n) * diff;
    return diff.squaredNorm() / n;
  };
  r.value = (level(s11, t11, r.grad_v11) + level(s12, t12, r.grad_v12) + level(sproj, tproj, r.grad_proj)) / 3.0;
  return r;
}

ValueGrad logitkd(const Matrix& v_student, const Matrix& v_teacher, const Matrix& bank, double tau) {
  check_tau(tau);
  const Matrix p = similarity_probs(v_teacher, bank, 1.0 / tau);
  const DistillResult d = distill_kl(p, v_student, bank, 1.0 / tau, tau);
  return {d.value, d.grad_v};
}

LossWeights weights_from(const ExperimentConfig& cfg) {
  return {cfg.lambda_text, cfg.lambda_feat, cfg.lambda_logit};
}

LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& w) {
  LossBreakdown r = parts;
  r.kd_total = w.lambda_text * parts.texkd + w.lambda_feat * parts.featkd + w.lambda_logit * parts.logitkd;
  r.overall = parts.supcon + parts.id + parts.triplet + r.kd_total;
  return r;
}

}  // namespace pad::loss

namespace pad::ag {

namespace {
Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }
}  // namespace

Var supcon(const Var& v, const Var& t, std::vector<int> labels, double temperature) {
  auto r = loss::supcon(v.value(), t.value(), labels, temperature);
  return custom({v, t}, scalar(r.value), [gv = r.grad_v, gt = r.grad_t](const Matrix& g) {
    return std::vector<Matrix>{g(0, 0) * gv, g(0, 0) * gt};
  });
}

Var id_loss(const Var& logits, std::vector<int> labels) {
  auto r = loss::id_loss(logits.value(), labels);
  return custom({logits}, scalar(r.value),
                [gl = r.grad](const Matrix& g) { return std::vector<Matrix>{g(0, 0) * gl}; });
}

Var triplet(const Var& features, std::vector<int> labels, double margin) {
  auto r = loss::triplet(features.value(), labels, margin);
  return custom({features}, scalar(r.value),
                [gf = r.grad](const Matrix& g) { return std::vector<Matrix>{g(0, 0) * gf}; });
}

Var texkd(const Var& v, const Matrix& t_teacher, const Var& t_student, const Var& gamma, double tau) {
  auto r = loss::texkd(v.value(), t_teacher, t_student.value(), tau, gamma.scalar());
  return custom({v, t_student, gamma}, scalar(r.value), [r](const Matrix& g) {
    const double s = g(0, 0);
    return std::vector<Matrix>{s * r.grad_v, s * r.grad_t_student, scalar(s * r.grad_gamma)};
  });
}

Var featkd(const Var& s11, const Var& s12, const Var& sproj, const Matrix& t11, const Matrix& t12,
           const Matrix& tproj) {
  auto r = loss::featkd(s11.value(), s12.value(), sproj.value(), t11, t12, tproj);
  return custom({s11, s12, sproj}, scalar(r.value), [r](const Matrix& g) {
    const double s = g(0, 0);
    return std::vector<Matrix>{s * r.grad_v11, s * r.grad_v12, s * r.grad_proj};
  });
}

Var logitkd(const Var& v_student, const Matrix& v_teacher, const Matrix& bank, double tau) {
  auto r = loss::logitkd(v_student.value(), v_teacher, bank, tau);
  return custom({v_student}, scalar(r.value),
                [gv = r.grad](const Matrix& g) { return std::vector<Matrix>{g(0, 0) * gv}; });
}

}  // namespace pad::ag
