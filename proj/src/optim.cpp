#include "pad/optim.hpp"

#include <algorithm>
#include <cmath>

namespace pad {

double Adam::lr_for(ParamGroup g) const {
  switch (g) {
    case ParamGroup::backbone: return lr_backbone;
    case ParamGroup::prompt: return lr_prompt;
    case ParamGroup::head: return lr_head;
  }
  return 0;
}

void Adam::update(const NamedParam& np) {
  Parameter& p = *np.param;
  if (!p.trainable || p.grad.size() != p.value.size()) return;
  auto& s = state_[np.name];
  if (s.m.size() != p.value.size()) {
    s.m = Matrix::Zero(p.value.rows(), p.value.cols());
    s.v = Matrix::Zero(p.value.rows(), p.value.cols());
    s.steps = 0;
  }
  ++s.steps;
  s.m = beta1 * s.m + (1 - beta1) * p.grad;
  s.v = beta2 * s.v + (1 - beta2) * p.grad.cwiseProduct(p.grad);
  const double c1 = 1 - std::pow(beta1, static_cast<double>(s.steps));
  const double c2 = 1 - std::pow(beta2, static_cast<double>(s.steps));
  const double lr = lr_for(np.group);
  p.value.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
}

void Adam::step(const ParamList& params) {
  for (const auto& p : params) update(p);
}

void Adam::step(const ParamList& params, std::initializer_list<ParamGroup> groups) {
  for (const auto& p : params)
    if (std::find(groups.begin(), groups.end(), p.group) != groups.end()) update(p);
}

void Adam::zero_grad(const ParamList& params) {
  for (const auto& p : params) p.param->zero_grad();
}

}  // namespace pad
