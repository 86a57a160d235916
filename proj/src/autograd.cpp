#include "pad/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pad::ag {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

namespace {

std::shared_ptr<Node> make_node(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

bool any_requires_grad(std::span<const Var> inputs) {
  for (const auto& v : inputs)
    if (v.requires_grad()) return true;
  return false;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

void Var::backward() const {
  if (!node_ || node_->value.size() != 1)
    throw std::logic_error("backward: root must be a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var constant(Matrix value) { return Var(make_node(std::move(value))); }

Var variable(Matrix value) {
  auto n = make_node(std::move(value));
  n->requires_grad = true;
  return Var(n);
}

Var leaf(const Parameter& p, bool track) {
  auto n = make_node(p.value);
  if (track && p.trainable) {
    n->requires_grad = true;
    const Parameter* param = &p;
    n->backward = [param](Node& self) {
      if (param->grad.size() == 0)
        param->grad = self.grad;
      else
        param->grad += self.grad;
    };
  }
  return Var(n);
}

Var custom(std::vector<Var> inputs, Matrix value,
           std::function<std::vector<Matrix>(const Matrix&)> backward) {
  auto n = make_node(std::move(value));
  if (!any_requires_grad(inputs)) return Var(n);
  n->requires_grad = true;
  for (const auto& v : inputs) n->inputs.push_back(v.node());
  n->backward = [fn = std::move(backward)](Node& self) {
    std::vector<Matrix> grads = fn(self.grad);
    for (size_t i = 0; i < self.inputs.size() && i < grads.size(); ++i) {
      auto& in = self.inputs[i];
      if (in->requires_grad && grads[i].size() != 0) in->accumulate(grads[i]);
    }
  };
  return Var(n);
}

Var detach(const Var& x) { return constant(x.value()); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  auto an = a.node(), bn = b.node();
  return custom({a, b}, std::move(out), [an, bn](const Matrix& g) {
    std::vector<Matrix> r(2);
    if (an->requires_grad) r[0] = g * bn->value.transpose();
    if (bn->requires_grad) r[1] = an->value.transpose() * g;
    return r;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  return custom({a, b}, a.value() + b.value(),
                [](const Matrix& g) { return std::vector<Matrix>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  return custom({a, b}, a.value() - b.value(),
                [](const Matrix& g) { return std::vector<Matrix>{g, -g}; });
}

Var scale(const Var& a, double s) {
  return custom({a}, a.value() * s, [s](const Matrix& g) { return std::vector<Matrix>{g * s}; });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_row: bias must be 1 x cols");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return custom({a, row}, std::move(out), [](const Matrix& g) {
    return std::vector<Matrix>{g, g.colwise().sum()};
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul(x, weight);
  return bias ? add_row(y, bias) : y;
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = xv.row(i).mean();
    const double var = (xv.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  auto gn = gain.node();
  return custom({x, gain, bias}, std::move(out),
                [xhat, inv_std, gn, d](const Matrix& g) {
                  std::vector<Matrix> r(3);
                  Matrix gxhat = (g.array().rowwise() * gn->value.row(0).array()).matrix();
                  Matrix dx(g.rows(), d);
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double m1 = gxhat.row(i).mean();
                    const double m2 = (gxhat.row(i).array() * xhat.row(i).array()).mean();
                    dx.row(i) = inv_std(i) *
                                (gxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                  r[0] = std::move(dx);
                  r[1] = (g.array() * xhat.array()).colwise().sum().matrix();
                  r[2] = g.colwise().sum();
                  return r;
                });
}

Var quick_gelu(const Var& x) {
  const Matrix& xv = x.value();
  Matrix sig = (1.0 / (1.0 + (-1.702 * xv.array()).exp())).matrix();
  Matrix out = (xv.array() * sig.array()).matrix();
  if (!x.requires_grad()) return constant(std::move(out));
  return custom({x}, std::move(out), [sig, xv](const Matrix& g) {
    Matrix d = (sig.array() + 1.702 * xv.array() * sig.array() * (1.0 - sig.array())).matrix();
    return std::vector<Matrix>{(g.array() * d.array()).matrix()};
  });
}

Var attention(const Var& qkv, int batch, int seq_len, int heads, std::span<const double> key_weight) {
  const Matrix& in = qkv.value();
  if (in.rows() != static_cast<Eigen::Index>(batch) * seq_len || in.cols() % 3 != 0)
    throw std::invalid_argument("attention: qkv shape mismatch");
  const int d = static_cast<int>(in.cols() / 3);
  if (d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (!key_weight.empty() && static_cast<int>(key_weight.size()) != seq_len)
    throw std::invalid_argument("attention: key_weight length mismatch");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<size_t>(batch) * heads);
  Matrix out(in.rows(), d);
  std::vector<double> weights(key_weight.begin(), key_weight.end());

  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
    for (int h = 0; h < heads; ++h) {
      auto q = in.block(r0, h * dh, seq_len, dh);
      auto k = in.block(r0, d + h * dh, seq_len, dh);
      auto v = in.block(r0, 2 * d + h * dh, seq_len, dh);
      Matrix s = (q * k.transpose()) * inv_sqrt;
      for (int i = 0; i < seq_len; ++i) {
        const double m = s.row(i).maxCoeff();
        double total = 0.0;
        for (int j = 0; j < seq_len; ++j) {
          double e = std::exp(s(i, j) - m);
          if (!weights.empty()) e *= weights[j];
          s(i, j) = e;
          total += e;
        }
        s.row(i) /= total;
      }
      out.block(r0, h * dh, seq_len, dh).noalias() = s * v;
      (*probs)[static_cast<size_t>(b) * heads + h] = std::move(s);
    }
  }

  auto qn = qkv.node();
  return custom({qkv}, std::move(out), [probs, qn, batch, seq_len, heads, d, dh, inv_sqrt](const Matrix& g) {
    const Matrix& in = qn->value;
    Matrix dqkv(in.rows(), in.cols());
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[static_cast<size_t>(b) * heads + h];
        auto q = in.block(r0, h * dh, seq_len, dh);
        auto k = in.block(r0, d + h * dh, seq_len, dh);
        auto v = in.block(r0, 2 * d + h * dh, seq_len, dh);
        auto go = g.block(r0, h * dh, seq_len, dh);
        dqkv.block(r0, 2 * d + h * dh, seq_len, dh).noalias() = p.transpose() * go;
        Matrix dp = go * v.transpose();
        Vector rowdot = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix();
        ds *= inv_sqrt;
        dqkv.block(r0, h * dh, seq_len, dh).noalias() = ds * k;
        dqkv.block(r0, d + h * dh, seq_len, dh).noalias() = ds.transpose() * q;
      }
    }
    return std::vector<Matrix>{std::move(dqkv)};
  });
}

Var gather_rows(const Var& x, std::vector<int> index) {
  const Matrix& xv = x.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), xv.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= xv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(index[i]);
  }
  const Eigen::Index src_rows = xv.rows();
  return custom({x}, std::move(out), [index = std::move(index), src_rows](const Matrix& g) {
    Matrix dx = Matrix::Zero(src_rows, g.cols());
    for (size_t i = 0; i < index.size(); ++i) dx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    return std::vector<Matrix>{std::move(dx)};
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) sizes.push_back(p.rows());
  return custom(std::vector<Var>(parts.begin(), parts.end()), std::move(out),
                [offsets, sizes](const Matrix& g) {
                  std::vector<Matrix> r(offsets.size());
                  for (size_t i = 0; i < offsets.size(); ++i) r[i] = g.middleRows(offsets[i], sizes[i]);
                  return r;
                });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const Matrix& xv = x.value();
  Vector norms = xv.rowwise().norm().cwiseMax(eps);
  Matrix y = xv.array().colwise() / norms.array();
  Matrix yc = y;
  return custom({x}, std::move(y), [yc, norms](const Matrix& g) {
    Vector dot = (g.array() * yc.array()).rowwise().sum();
    Matrix dx = ((g - (yc.array().colwise() * dot.array()).matrix()).array().colwise() / norms.array()).matrix();
    return std::vector<Matrix>{std::move(dx)};
  });
}

Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  std::vector<Var> used;
  std::vector<double> w;
  double total = 0.0;
  for (size_t i = 0; i < scalars.size(); ++i) {
    if (!scalars[i]) continue;
    if (scalars[i].value().size() != 1) throw std::invalid_argument("weighted_sum: inputs must be 1x1");
    used.push_back(scalars[i]);
    w.push_back(weights[i]);
    total += weights[i] * scalars[i].scalar();
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return custom(used, std::move(out), [w](const Matrix& g) {
    std::vector<Matrix> r;
    for (double wi : w) r.push_back(g * wi);
    return r;
  });
}

}  // namespace pad::ag
