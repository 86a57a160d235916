#include "pad/prompts.hpp"

#include "pad/config.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pad {

namespace {

uint64_t seed_for(uint64_t seed, uint64_t tag, uint64_t a, uint64_t b = 0) {
  uint64_t h = seed * 0x9e3779b97f4a7c15ULL ^ (tag + 0x632be59bd9b4e019ULL);
  for (uint64_t v : {a, b}) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
  }
  return h;
}

}  // namespace

void TAPrompt::register_identities(std::span<const int> ids, int domain) {
  for (int id : ids) {
    if (index_.contains(id)) continue;
    std::mt19937_64 rng(seed_for(seed_, 0x7a, static_cast<uint64_t>(id)));
    index_[id] = static_cast<int>(rows_.size());
    rows_.emplace_back(random_normal(tokens_, width_, 0.02, rng));
    row_identity_.push_back(id);
    row_domain_.push_back(domain);
  }
}

const Parameter& TAPrompt::slots(int id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("TA-Prompt: identity " + std::to_string(id) + " not registered");
  return rows_[static_cast<size_t>(it->second)];
}

Parameter& TAPrompt::slots(int id) {
  return const_cast<Parameter&>(static_cast<const TAPrompt&>(*this).slots(id));
}

int TAPrompt::domain_of(int id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("TA-Prompt: identity " + std::to_string(id) + " not registered");
  return row_domain_[static_cast<size_t>(it->second)];
}

std::vector<int> TAPrompt::identities() const { return row_identity_; }

std::vector<int> TAPrompt::identities_of_domain(int domain) const {
  std::vector<int> out;
  for (size_t i = 0; i < rows_.size(); ++i)
    if (row_domain_[i] == domain) out.push_back(row_identity_[i]);
  return out;
}

void TAPrompt::set_trainable(int domain, bool older_trainable) {
  for (size_t i = 0; i < rows_.size(); ++i)
    rows_[i].trainable = row_domain_[i] == domain || (row_domain_[i] < domain && older_trainable);
}

void TAPrompt::collect(ParamList& out) {
  for (size_t i = 0; i < rows_.size(); ++i)
    out.push_back({"ta_prompt." + std::to_string(row_identity_[i]), &rows_[i], ParamGroup::prompt});
}

VAPromptPool::VAPromptPool(const ExperimentConfig& cfg, uint64_t s)
    : top_k(cfg.top_k),
      g_tokens(cfg.g_tokens),
      e_tokens(cfg.e_tokens),
      width(cfg.embed_dim),
      slot_alloc(cfg.slot_alloc),
      freeze_general(cfg.freeze_g_prompt),
      seed(s) {
  layers.resize(static_cast<size_t>(cfg.num_layers));
  for (size_t l = 0; l < layers.size(); ++l) {
    std::mt19937_64 rng(seed_for(seed, 0x9e, l));
    layers[l].general = Parameter(random_normal(g_tokens, width, 0.02, rng));
    for (int t = 0; t < static_cast<int>(slot_alloc.size()); ++t)
      for (int k = 0; k < slot_alloc[static_cast<size_t>(t)]; ++k) {
        ExpertSlot slot;
        slot.key = Parameter(Matrix::Zero(1, width), false);
        slot.tokens = Parameter(Matrix::Zero(e_tokens, width), false);
        slot.owner_domain = t;
        layers[l].slots.push_back(std::move(slot));
      }
  }
}

int VAPromptPool::visible_slots() const {
  int n = 0;
  for (int t = 0; t <= current_domain && t < static_cast<int>(slot_alloc.size()); ++t) n += slot_alloc[static_cast<size_t>(t)];
  return n;
}

int VAPromptPool::selected_count() const { return std::min(top_k, visible_slots()); }

void VAPromptPool::collect(ParamList& out) {
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "va_prompt." + std::to_string(l);
    out.push_back({p + ".general", &layers[l].general, ParamGroup::prompt});
    for (size_t s = 0; s < layers[l].slots.size(); ++s) {
      out.push_back({p + ".slot" + std::to_string(s) + ".key", &layers[l].slots[s].key, ParamGroup::prompt});
      out.push_back({p + ".slot" + std::to_string(s) + ".tokens", &layers[l].slots[s].tokens, ParamGroup::prompt});
    }
  }
}

std::vector<int> select_experts(const VAPromptPool& pool, const Vector& query, int layer) {
  const double qn = query.norm();
  if (!std::isfinite(qn) || qn == 0.0) throw std::invalid_argument("select_experts: query must be finite and nonzero");
  const auto& slots = pool.layers.at(static_cast<size_t>(layer)).slots;
  const int n = pool.visible_slots();
  std::vector<double> cos(static_cast<size_t>(n));
  for (int s = 0; s < n; ++s) {
    const auto& key = slots[static_cast<size_t>(s)].key.value;
    const double kn = key.norm();
    cos[static_cast<size_t>(s)] = kn > 0 ? key.row(0).dot(query.transpose()) / (kn * qn) : -2.0;
  }
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int k = std::min(pool.top_k, n);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    if (cos[static_cast<size_t>(a)] != cos[static_cast<size_t>(b)]) return cos[static_cast<size_t>(a)] > cos[static_cast<size_t>(b)];
    return a < b;
  });
  order.resize(static_cast<size_t>(k));
  return order;
}

void advance_domain_slots(VAPromptPool& pool, int t) {
  if (t < 0 || t >= static_cast<int>(pool.slot_alloc.size()))
    throw std::out_of_range("advance_domain_slots: domain " + std::to_string(t) + " out of range");
  pool.current_domain = t;
  for (size_t l = 0; l < pool.layers.size(); ++l) {
    auto& layer = pool.layers[l];
    layer.general.trainable = !(pool.freeze_general && t > 0);
    for (size_t s = 0; s < layer.slots.size(); ++s) {
      auto& slot = layer.slots[s];
      if (slot.owner_domain == t && !slot.initialized) {
        std::mt19937_64 rng(seed_for(pool.seed, 0x51, l, s));
        Matrix key = random_normal(1, pool.width, 1.0, rng);
        slot.key.value = key / key.norm();
        slot.tokens.value = random_normal(pool.e_tokens, pool.width, 0.02, rng);
        slot.initialized = true;
      }
      slot.trainable = slot.owner_domain == t;
      slot.tokens.trainable = slot.trainable;
      slot.key.trainable = false;
    }
  }
}

}  // namespace pad
