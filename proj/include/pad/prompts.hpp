#pragma once

#include "pad/nn.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace pad {

struct ExperimentConfig;

/// Class-specific textual context: M learnable token embeddings per identity.
class TAPrompt {
 public:
  TAPrompt() = default;
  TAPrompt(int tokens, int width, uint64_t seed) : tokens_(tokens), width_(width), seed_(seed) {}

  /// Adds rows (normal, stddev 0.02) for ids not yet present. Init depends only
  /// on (seed, id), so registration order does not matter.
  void register_identities(std::span<const int> ids, int domain);

  bool contains(int id) const { return index_.contains(id); }
  const Parameter& slots(int id) const;
  Parameter& slots(int id);
  int domain_of(int id) const;
  std::vector<int> identities() const;  // registration order
  std::vector<int> identities_of_domain(int domain) const;
  int tokens() const { return tokens_; }
  int width() const { return width_; }
  size_t size() const { return rows_.size(); }

  /// Rows registered before `domain` follow `older_trainable`; rows of
  /// `domain` are always trainable.
  void set_trainable(int domain, bool older_trainable);
  void collect(ParamList& out);

 private:
  int tokens_ = 4;
  int width_ = 64;
  uint64_t seed_ = 0;
  std::vector<Parameter> rows_;
  std::vector<int> row_identity_;
  std::vector<int> row_domain_;
  std::map<int, int> index_;
};

struct ExpertSlot {
  Parameter key;     // 1 x d, unit norm; only read by routing, never differentiated
  Parameter tokens;  // Le x d
  int owner_domain = 0;
  bool trainable = false;
  bool initialized = false;
};

struct PromptLayer {
  Parameter general;  // Lg x d
  std::vector<ExpertSlot> slots;
};

/// Per-layer general tokens plus a fixed-size pool of expert slots, each slot
/// owned by one domain of the sequence.
struct VAPromptPool {
  std::vector<PromptLayer> layers;
  int top_k = 4;
  int g_tokens = 0;
  int e_tokens = 0;
  int width = 0;
  std::vector<int> slot_alloc;
  int current_domain = -1;
  bool freeze_general = false;
  /// Attention mass multiplier for prompt keys; 0 makes prompts inert.
  double gate = 1.0;
  uint64_t seed = 0;

  VAPromptPool() = default;
  VAPromptPool(const ExperimentConfig& cfg, uint64_t seed);

  int pool_size() const { return layers.empty() ? 0 : static_cast<int>(layers[0].slots.size()); }
  /// Slots of the current and earlier domains; later domains' slots stay dormant.
  int visible_slots() const;
  int selected_count() const;
  void collect(ParamList& out);
};

/// Top-k slots by cosine(query, key) among visible slots, ties to the lower
/// index. Throws on a zero or non-finite query.
std::vector<int> select_experts(const VAPromptPool& pool, const Vector& query, int layer);

/// Freezes slots of domains < t, activates (and on first use initializes)
/// the slots of domain t. Idempotent.
void advance_domain_slots(VAPromptPool& pool, int t);

}  // namespace pad
