#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Var is a handle to a graph node. Nodes created from inputs that do not
// require gradients carry no backward closure, so evaluating a model on
// constants (inference, EMA teacher) builds no graph.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace pad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// A trainable tensor. `grad` accumulates across backward passes until the
/// optimizer clears it; frozen parameters never receive a contribution.
struct Parameter {
  Matrix value;
  mutable Matrix grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Matrix v, bool train = true) : value(std::move(v)), trainable(train) {}

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Runs reverse accumulation from this node, seeding d(self)/d(self) = 1.
  /// Requires a 1x1 value.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
/// Graph leaf for a parameter. When `track` is false or the parameter is
/// frozen, the leaf is a constant and the parameter gets no gradient.
Var leaf(const Parameter& p, bool track = true);
/// Leaf that records gradient into its own node (used by tests and for
/// differentiating w.r.t. activations).
Var variable(Matrix value);

/// Generic node: `backward(out_grad)` receives d(loss)/d(value) and must
/// return one gradient per input (empty matrix = no contribution).
Var custom(std::vector<Var> inputs, Matrix value,
           std::function<std::vector<Matrix>(const Matrix& out_grad)> backward);

Var detach(const Var& x);
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// x * sigmoid(1.702 x)
Var quick_gelu(const Var& x);
/// Multi-head self attention over `batch` sequences of `seq_len` tokens
/// packed row-wise in qkv ((batch*seq_len) x 3d, columns [q | k | v]).
/// `key_weight` (length seq_len) multiplies each key column's softmax mass
/// before renormalization; a weight of 0 removes the key.
Var attention(const Var& qkv, int batch, int seq_len, int heads,
              std::span<const double> key_weight = {});
Var gather_rows(const Var& x, std::vector<int> index);
Var concat_rows(std::span<const Var> parts);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
/// sum_i w_i * s_i over 1x1 inputs; null Vars are skipped.
Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

}  // namespace ag
}  // namespace pad
