#include "pad/config.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

namespace pad {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("invalid config field '" + field + "': " + why);
}

std::string schedule_name(Schedule s) { return s == Schedule::joint ? "joint" : "two_phase"; }

Schedule parse_schedule(const std::string& s) {
  if (s == "two_phase") return Schedule::two_phase;
  if (s == "joint") return Schedule::joint;
  throw ConfigError("invalid config field 'schedule': unknown value '" + s + "'");
}

}  // namespace

void validate(const ExperimentConfig& c) {
  require(c.num_domains >= 1, "num_domains", "must be >= 1");
  require(c.image_h > 0 && c.image_w > 0 && c.channels == 3, "image_size", "expects positive H, W and 3 channels");
  require(c.patch > 0 && c.image_h % c.patch == 0 && c.image_w % c.patch == 0, "patch",
          "must divide the image size");
  require(c.embed_dim > 0, "embed_dim", "must be positive");
  require(c.num_layers >= 2, "num_layers", "needs at least 2 blocks (penultimate output is distilled)");
  require(c.num_heads > 0 && c.embed_dim % c.num_heads == 0, "num_heads", "must divide embed_dim");
  require(c.mlp_ratio > 0, "mlp_ratio", "must be positive");
  require(c.proj_dim > 0, "proj_dim", "must be positive");
  require(c.batch_p >= 1 && c.batch_k >= 1, "batch", "P and K must be >= 1");
  require(c.lambda_text >= 0, "lambda_text", "must be >= 0");
  require(c.lambda_feat >= 0, "lambda_feat", "must be >= 0");
  require(c.lambda_logit >= 0, "lambda_logit", "must be >= 0");
  require(c.tau_text > 0, "tau_text", "must be > 0");
  require(c.tau_vis > 0, "tau_vis", "must be > 0");
  require(c.tau_supcon > 0, "tau_supcon", "must be > 0");
  require(c.gamma_init > 0, "gamma_init", "must be > 0");
  require(c.ema_alpha > 0 && c.ema_alpha < 1, "ema_alpha", "must lie in (0, 1)");
  require(c.neg_batch >= 0, "neg_batch", "must be >= 0");
  require(c.g_tokens >= 0, "g_tokens", "must be >= 0");
  require(c.e_tokens >= 0, "e_tokens", "must be >= 0");
  require(c.pool_size >= 1, "pool_size", "must be >= 1");
  require(c.top_k >= 1 && c.top_k <= c.pool_size, "top_k", "must satisfy 1 <= top_k <= pool_size");
  require(static_cast<int>(c.slot_alloc.size()) == c.num_domains, "slot_alloc",
          "length must equal num_domains");
  for (int s : c.slot_alloc) require(s >= 0, "slot_alloc", "entries must be >= 0");
  require(std::accumulate(c.slot_alloc.begin(), c.slot_alloc.end(), 0) == c.pool_size, "slot_alloc",
          "must sum to pool_size");
  require(c.unfrozen_blocks >= 0 && c.unfrozen_blocks <= c.num_layers, "unfrozen_blocks",
          "must lie in [0, num_layers]");
  require(c.ta_tokens >= 1, "ta_tokens", "must be >= 1");
  require(c.triplet_margin >= 0, "triplet_margin", "must be >= 0");
  require(c.lr_backbone >= 0, "lr_backbone", "must be >= 0");
  require(c.lr_prompt >= 0, "lr_prompt", "must be >= 0");
  require(c.lr_head >= 0, "lr_head", "must be >= 0");
  require(c.epochs_per_domain >= 1, "epochs_per_domain", "must be >= 1");
  require(c.n_train_ids >= c.batch_p, "n_train_ids", "must be >= P");
  require(c.n_test_ids >= 1, "n_test_ids", "must be >= 1");
  require(c.n_cameras >= 2, "n_cameras", "cross-camera retrieval needs >= 2 cameras");
  require(c.views_per_camera >= 2, "views_per_camera", "needs a query view plus >= 1 gallery view");
  require(c.n_cameras * c.views_per_camera >= c.batch_k, "views_per_camera",
          "each identity needs >= K training images");
  require(c.n_unseen >= 0, "n_unseen", "must be >= 0");
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["num_domains"] = c.num_domains;
  j["image_size"] = {c.image_h, c.image_w, c.channels};
  j["patch"] = c.patch;
  j["embed_dim"] = c.embed_dim;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["proj_dim"] = c.proj_dim;
  j["batch"] = {c.batch_p, c.batch_k};
  j["lambda_text"] = c.lambda_text;
  j["lambda_feat"] = c.lambda_feat;
  j["lambda_logit"] = c.lambda_logit;
  j["tau_text"] = c.tau_text;
  j["tau_vis"] = c.tau_vis;
  j["tau_supcon"] = c.tau_supcon;
  j["gamma_init"] = c.gamma_init;
  j["ema_alpha"] = c.ema_alpha;
  j["neg_batch"] = c.neg_batch;
  j["g_tokens"] = c.g_tokens;
  j["e_tokens"] = c.e_tokens;
  j["pool_size"] = c.pool_size;
  j["top_k"] = c.top_k;
  j["slot_alloc"] = c.slot_alloc;
  j["unfrozen_blocks"] = c.unfrozen_blocks;
  j["ta_tokens"] = c.ta_tokens;
  j["triplet_margin"] = c.triplet_margin;
  j["lr_backbone"] = c.lr_backbone;
  j["lr_prompt"] = c.lr_prompt;
  j["lr_head"] = c.lr_head;
  j["epochs_per_domain"] = c.epochs_per_domain;
  j["schedule"] = schedule_name(c.schedule);
  j["use_freeze"] = c.use_freeze;
  j["use_va_prompt"] = c.use_va_prompt;
  j["use_texkd"] = c.use_texkd;
  j["use_viskd"] = c.use_viskd;
  j["freeze_g_prompt"] = c.freeze_g_prompt;
  j["per_layer_query"] = c.per_layer_query;
  j["ema_includes_pool"] = c.ema_includes_pool;
  j["n_train_ids"] = c.n_train_ids;
  j["n_test_ids"] = c.n_test_ids;
  j["n_cameras"] = c.n_cameras;
  j["views_per_camera"] = c.views_per_camera;
  j["n_unseen"] = c.n_unseen;
  j["variant"] = c.variant;
  return j;
}

ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  const json known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");

  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid config field '") + key + "': " + e.what());
    }
  };
  get("seed", c.seed);
  get("num_domains", c.num_domains);
  if (j.contains("image_size")) {
    std::vector<int> s;
    get("image_size", s);
    require(s.size() == 3, "image_size", "expects [H, W, channels]");
    c.image_h = s[0];
    c.image_w = s[1];
    c.channels = s[2];
  }
  get("patch", c.patch);
  get("embed_dim", c.embed_dim);
  get("num_layers", c.num_layers);
  get("num_heads", c.num_heads);
  get("mlp_ratio", c.mlp_ratio);
  get("proj_dim", c.proj_dim);
  if (j.contains("batch")) {
    std::vector<int> b;
    get("batch", b);
    require(b.size() == 2, "batch", "expects [P, K]");
    c.batch_p = b[0];
    c.batch_k = b[1];
  }
  get("lambda_text", c.lambda_text);
  get("lambda_feat", c.lambda_feat);
  get("lambda_logit", c.lambda_logit);
  get("tau_text", c.tau_text);
  get("tau_vis", c.tau_vis);
  get("tau_supcon", c.tau_supcon);
  get("gamma_init", c.gamma_init);
  get("ema_alpha", c.ema_alpha);
  get("neg_batch", c.neg_batch);
  get("g_tokens", c.g_tokens);
  get("e_tokens", c.e_tokens);
  get("pool_size", c.pool_size);
  get("top_k", c.top_k);
  get("slot_alloc", c.slot_alloc);
  get("unfrozen_blocks", c.unfrozen_blocks);
  get("ta_tokens", c.ta_tokens);
  get("triplet_margin", c.triplet_margin);
  get("lr_backbone", c.lr_backbone);
  get("lr_prompt", c.lr_prompt);
  get("lr_head", c.lr_head);
  get("epochs_per_domain", c.epochs_per_domain);
  if (j.contains("schedule")) {
    std::string s;
    get("schedule", s);
    c.schedule = parse_schedule(s);
  }
  get("use_freeze", c.use_freeze);
  get("use_va_prompt", c.use_va_prompt);
  get("use_texkd", c.use_texkd);
  get("use_viskd", c.use_viskd);
  get("freeze_g_prompt", c.freeze_g_prompt);
  get("per_layer_query", c.per_layer_query);
  get("ema_includes_pool", c.ema_includes_pool);
  get("n_train_ids", c.n_train_ids);
  get("n_test_ids", c.n_test_ids);
  get("n_cameras", c.n_cameras);
  get("views_per_camera", c.views_per_camera);
  get("n_unseen", c.n_unseen);
  get("variant", c.variant);
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(cfg).dump(2) << "\n";
}

ExperimentConfig apply_override(const ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json j = to_json(cfg);
  if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  j[key] = value;
  return from_json(j);
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

VariantSpec variant_spec(const std::string& name) {
  auto components = [](bool freeze, bool va, bool tex, bool vis) {
    return json{{"use_freeze", freeze}, {"use_va_prompt", va}, {"use_texkd", tex}, {"use_viskd", vis}};
  };
  const json full = components(true, true, true, true);

  json o;
  if (name == "S0") o = components(false, false, false, false);
  else if (name == "S1") o = components(true, false, false, false);
  else if (name == "S2") o = components(true, true, false, false);
  else if (name == "S3") o = components(true, true, true, false);
  else if (name == "S4") o = components(true, true, false, true);
  else if (name == "S5") o = full;
  else if (name.size() == 2 && name[0] == 'T' && name[1] >= '1' && name[1] <= '5') {
    // (lambda_text, tau_text, gamma_init, neg_batch) from weak to strong.
    static const double table[5][4] = {{0.25, 0.07, 4.0, 256},
                                       {0.50, 0.07, 7.0, 256},
                                       {0.70, 0.07, 7.0, 256},
                                       {0.70, 0.05, 16.0, 512},
                                       {1.00, 0.05, 12.0, 512}};
    const auto& r = table[name[1] - '1'];
    o = full;
    o["lambda_text"] = r[0];
    o["tau_text"] = r[1];
    o["gamma_init"] = r[2];
    o["neg_batch"] = static_cast<int>(r[3]);
  } else if (name.size() == 2 && name[0] == 'V' && name[1] >= '1' && name[1] <= '5') {
    // (lambda_feat, lambda_logit, tau_vis)
    static const double table[5][3] = {
        {0.25, 0.25, 4.0}, {0.35, 0.35, 4.0}, {0.50, 0.50, 4.0}, {0.75, 0.75, 3.5}, {1.00, 1.00, 3.0}};
    const auto& r = table[name[1] - '1'];
    o = full;
    o["lambda_feat"] = r[0];
    o["lambda_logit"] = r[1];
    o["tau_vis"] = r[2];
  } else if (name.size() == 2 && name[0] == 'P' && name[1] >= '1' && name[1] <= '5') {
    static const std::vector<std::vector<int>> table = {
        {8, 8, 8, 8, 4}, {4, 4, 4, 4, 4}, {8, 7, 7, 7, 7}, {12, 8, 8, 4, 4}, {4, 4, 8, 8, 12}};
    const auto& alloc = table[name[1] - '1'];
    o = full;
    o["num_domains"] = 5;
    o["slot_alloc"] = alloc;
    o["pool_size"] = std::accumulate(alloc.begin(), alloc.end(), 0);
  } else if (name == "B2" || name == "B4" || name == "B6" || name == "B8") {
    // Unfrozen-block count of a 12-block backbone, halved for the 6-block one.
    o = full;
    o["unfrozen_blocks"] = (name[1] - '0') / 2;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }
  o["variant"] = name;
  return {name, o};
}

std::vector<std::string> variant_names() {
  return {"S0", "S1", "S2", "S3", "S4", "S5", "T1", "T2", "T3", "T4", "T5", "V1", "V2", "V3", "V4",
          "V5", "P1", "P2", "P3", "P4", "P5", "B2", "B4", "B6", "B8"};
}

std::vector<std::string> suite_variants(const std::string& suite) {
  if (suite == "components") return {"S0", "S1", "S2", "S3", "S4", "S5"};
  if (suite == "texkd") return {"T1", "T2", "T3", "T4", "T5"};
  if (suite == "viskd") return {"V1", "V2", "V3", "V4", "V5"};
  if (suite == "slots") return {"P1", "P2", "P3", "P4", "P5"};
  if (suite == "blocks") return {"B2", "B4", "B6", "B8"};
  throw ConfigError("unknown ablation suite '" + suite + "'");
}

ExperimentConfig configure_variant(const ExperimentConfig& base, const VariantSpec& v) {
  json j = to_json(base);
  for (auto it = v.overrides.begin(); it != v.overrides.end(); ++it) {
    if (!j.contains(it.key())) throw ConfigError("variant overrides unknown key '" + it.key() + "'");
    j[it.key()] = it.value();
  }
  return from_json(j);
}

ExperimentConfig configure_variant(const ExperimentConfig& base, const std::string& name) {
  return configure_variant(base, variant_spec(name));
}

int slot_offset(const ExperimentConfig& cfg, int domain) {
  int off = 0;
  for (int t = 0; t < domain && t < static_cast<int>(cfg.slot_alloc.size()); ++t) off += cfg.slot_alloc[t];
  return off;
}

FreezePolicy resolve_freeze_policy(const ExperimentConfig& cfg, int domain_index) {
  FreezePolicy p;
  p.distillation_active = domain_index >= 1;
  if (domain_index >= 1 && cfg.use_freeze) {
    for (int b = 0; b < cfg.num_layers - cfg.unfrozen_blocks; ++b) p.frozen_block_indices.insert(b);
    p.stem_frozen = p.frozen_block_indices.contains(0);
  }
  for (int s = 0; s < slot_offset(cfg, domain_index); ++s) p.frozen_slot_indices.insert(s);
  return p;
}

}  // namespace pad
