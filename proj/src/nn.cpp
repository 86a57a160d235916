#include "pad/nn.hpp"

namespace pad {

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(int in, int out, double stddev, bool with_bias, std::mt19937_64& rng)
    : weight(random_normal(in, out, stddev, rng)) {
  if (with_bias) bias = Parameter(Matrix::Zero(1, out));
}

ag::Var Linear::forward(const ag::Var& x, bool track) const {
  ag::Var w = ag::leaf(weight, track);
  ag::Var b = bias.size() ? ag::leaf(bias, track) : ag::Var{};
  return ag::linear(x, w, b);
}

void Linear::collect(ParamList& out, const std::string& prefix, ParamGroup group) {
  out.push_back({prefix + ".weight", &weight, group});
  if (bias.size()) out.push_back({prefix + ".bias", &bias, group});
}

void Linear::set_trainable(bool t) {
  weight.trainable = t;
  bias.trainable = t;
}

LayerNorm::LayerNorm(int width)
    : gain(Matrix::Ones(1, width)), bias(Matrix::Zero(1, width)) {}

ag::Var LayerNorm::forward(const ag::Var& x, bool track) const {
  return ag::layer_norm(x, ag::leaf(gain, track), ag::leaf(bias, track));
}

void LayerNorm::collect(ParamList& out, const std::string& prefix, ParamGroup group) {
  out.push_back({prefix + ".gain", &gain, group});
  out.push_back({prefix + ".bias", &bias, group});
}

void LayerNorm::set_trainable(bool t) {
  gain.trainable = t;
  bias.trainable = t;
}

TransformerBlock::TransformerBlock(int width, int h, int mlp_ratio, double stddev, std::mt19937_64& rng)
    : ln1(width),
      qkv(width, 3 * width, stddev, true, rng),
      out_proj(width, width, stddev, true, rng),
      ln2(width),
      fc1(width, mlp_ratio * width, stddev, true, rng),
      fc2(mlp_ratio * width, width, stddev, true, rng),
      heads(h) {}

ag::Var TransformerBlock::forward(const ag::Var& x, int batch, int seq_len, bool track,
                                  std::span<const double> key_weight) const {
  ag::Var a = qkv.forward(ln1.forward(x, track), track);
  a = ag::attention(a, batch, seq_len, heads, key_weight);
  ag::Var h = ag::add(x, out_proj.forward(a, track));
  ag::Var m = fc2.forward(ag::quick_gelu(fc1.forward(ln2.forward(h, track), track)), track);
  return ag::add(h, m);
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix, ParamGroup group) {
  ln1.collect(out, prefix + ".ln1", group);
  qkv.collect(out, prefix + ".attn.qkv", group);
  out_proj.collect(out, prefix + ".attn.out", group);
  ln2.collect(out, prefix + ".ln2", group);
  fc1.collect(out, prefix + ".mlp.fc1", group);
  fc2.collect(out, prefix + ".mlp.fc2", group);
}

void TransformerBlock::set_trainable(bool t) {
  ln1.set_trainable(t);
  qkv.set_trainable(t);
  out_proj.set_trainable(t);
  ln2.set_trainable(t);
  fc1.set_trainable(t);
  fc2.set_trainable(t);
}

ConstParamList as_const(const ParamList& params) {
  ConstParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.param});
  return out;
}

int64_t count_elements(const ParamList& params, bool trainable_only) {
  int64_t n = 0;
  for (const auto& p : params)
    if (!trainable_only || p.param->trainable) n += p.param->size();
  return n;
}

}  // namespace pad
