#pragma once

#include "pad/autograd.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pad {

/// Optimizer groups with separate learning rates.
enum class ParamGroup { backbone, prompt, head };

struct NamedParam {
  std::string name;
  Parameter* param;
  ParamGroup group;
};
using ParamList = std::vector<NamedParam>;

struct ConstNamedParam {
  std::string name;
  const Parameter* param;
};
using ConstParamList = std::vector<ConstNamedParam>;

/// Deterministic normal(0, stddev) matrix.
Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out; empty when bias-free

  Linear() = default;
  Linear(int in, int out, double stddev, bool with_bias, std::mt19937_64& rng);
  ag::Var forward(const ag::Var& x, bool track) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group);
  void set_trainable(bool t);
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  explicit LayerNorm(int width);
  ag::Var forward(const ag::Var& x, bool track) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group);
  void set_trainable(bool t);
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.)).
struct TransformerBlock {
  LayerNorm ln1;
  Linear qkv;
  Linear out_proj;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
  int heads = 1;

  TransformerBlock() = default;
  TransformerBlock(int width, int heads, int mlp_ratio, double stddev, std::mt19937_64& rng);

  /// `x` packs `batch` sequences of `seq_len` rows each.
  ag::Var forward(const ag::Var& x, int batch, int seq_len, bool track,
                  std::span<const double> key_weight = {}) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group);
  void set_trainable(bool t);
};

ConstParamList as_const(const ParamList& params);
int64_t count_elements(const ParamList& params, bool trainable_only);

}  // namespace pad
