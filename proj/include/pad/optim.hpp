#pragma once

#include "pad/nn.hpp"

#include <map>
#include <string>

namespace pad {

struct AdamState {
  Matrix m, v;
  int64_t steps = 0;
};

/// Adam with one learning rate per parameter group. Moments are keyed by
/// parameter name so state survives rebuilding the parameter list.
class Adam {
 public:
  double lr_backbone = 5e-5, lr_prompt = 3.5e-4, lr_head = 3.5e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  Adam() = default;
  Adam(double backbone, double prompt, double head) : lr_backbone(backbone), lr_prompt(prompt), lr_head(head) {}

  double lr_for(ParamGroup g) const;
  /// Updates every trainable parameter with a gradient; frozen ones are skipped
  /// and left bitwise unchanged.
  void step(const ParamList& params);
  /// Subset step: only the listed groups move.
  void step(const ParamList& params, std::initializer_list<ParamGroup> groups);
  static void zero_grad(const ParamList& params);

  std::map<std::string, AdamState>& state() { return state_; }
  const std::map<std::string, AdamState>& state() const { return state_; }

 private:
  void update(const NamedParam& p);
  std::map<std::string, AdamState> state_;
};

}  // namespace pad
