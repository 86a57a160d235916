#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pad {

enum class Schedule { two_phase, joint };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  int num_domains = 3;
  int image_h = 32, image_w = 16, channels = 3;
  int patch = 4;
  int embed_dim = 64;
  int num_layers = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  int proj_dim = 32;
  int batch_p = 8, batch_k = 4;

  double lambda_text = 0.5;
  double lambda_feat = 0.5;
  double lambda_logit = 0.5;
  double tau_text = 0.07;
  double tau_vis = 4.0;
  double tau_supcon = 0.07;
  double gamma_init = 7.0;
  double ema_alpha = 0.997;
  int neg_batch = 256;

  int g_tokens = 4;
  int e_tokens = 2;
  int pool_size = 12;
  int top_k = 4;
  std::vector<int> slot_alloc{4, 4, 4};
  int unfrozen_blocks = 2;
  int ta_tokens = 4;
  double triplet_margin = 0.3;

  double lr_backbone = 5e-5;
  double lr_prompt = 3.5e-4;
  double lr_head = 3.5e-4;
  int epochs_per_domain = 10;
  Schedule schedule = Schedule::two_phase;

  // Component switches driven by the ablation variants.
  bool use_freeze = true;
  bool use_va_prompt = true;
  bool use_texkd = true;
  bool use_viskd = true;

  bool freeze_g_prompt = false;
  bool per_layer_query = false;
  bool ema_includes_pool = true;

  // Synthetic data geometry.
  int n_train_ids = 20;
  int n_test_ids = 10;
  int n_cameras = 3;
  int views_per_camera = 4;
  int n_unseen = 2;

  std::string variant = "S5";

  int patches() const { return (image_h / patch) * (image_w / patch); }
  int batch_size() const { return batch_p * batch_k; }

  bool operator==(const ExperimentConfig&) const = default;
};

/// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& cfg);

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Unknown keys are an error; missing keys keep their defaults.
ExperimentConfig from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// Applies `key=value` (value parsed as JSON, falling back to a string).
ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment);

/// FNV-1a over the canonical JSON encoding.
uint64_t config_hash(const ExperimentConfig& cfg);

struct VariantSpec {
  std::string name;
  nlohmann::json overrides;  // partial config, absolute values
};

/// Known names: S0..S5, T1..T5, V1..V5, P1..P5, B2, B4, B6, B8.
VariantSpec variant_spec(const std::string& name);
std::vector<std::string> variant_names();
std::vector<std::string> suite_variants(const std::string& suite);
ExperimentConfig configure_variant(const ExperimentConfig& base, const VariantSpec& v);
ExperimentConfig configure_variant(const ExperimentConfig& base, const std::string& name);

struct FreezePolicy {
  bool text_encoder_frozen = true;
  bool stem_frozen = false;  // patch embedding, class token, positions, ln_pre
  std::set<int> frozen_block_indices;
  std::set<int> frozen_slot_indices;
  bool classifier_trainable = true;
  bool distillation_active = false;
};

FreezePolicy resolve_freeze_policy(const ExperimentConfig& cfg, int domain_index);

/// First slot index owned by `domain` under cfg.slot_alloc.
int slot_offset(const ExperimentConfig& cfg, int domain);

}  // namespace pad
