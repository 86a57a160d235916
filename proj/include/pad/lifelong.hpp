#pragma once

// Per-domain training loop: freeze policy, prompt growth, EMA teacher, text
// bank caching and the two optimization schedules.

#include "pad/config.hpp"
#include "pad/encoders.hpp"
#include "pad/losses.hpp"
#include "pad/optim.hpp"
#include "pad/prompts.hpp"
#include "pad/synthdata.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace pad {

struct ModelState {
  ExperimentConfig cfg;
  ImageEncoder image;
  /// Frozen copy of the initial image encoder; its promptless output is the
  /// routing query, so queries can be cached per image.
  ImageEncoder query_encoder;
  VAPromptPool pool;
  TAPrompt ta;
  TextEncoder text;
  std::vector<Linear> heads;  // one classifier per domain, proj_dim -> ids
  Parameter gamma;            // 1x1 logit scale of the text KD term
  int domain = -1;

  ModelState() = default;
  explicit ModelState(const ExperimentConfig& cfg);

  const VAPromptPool* active_pool() const { return cfg.use_va_prompt ? &pool : nullptr; }
  /// Routing queries for packed patch rows (empty when routing is off or per layer).
  Matrix routing_queries(const Matrix& patch_rows, int batch) const;
  /// Image encoder, prompt pool (when enabled) and classifier heads.
  ParamList visual_params();
  /// TA-Prompt rows and gamma.
  ParamList text_params();
  /// Everything above plus the frozen text encoder.
  ParamList all_params();
  /// Parameters averaged into the EMA teacher.
  ParamList ema_params();
};

struct TeacherState {
  ImageEncoder image;
  VAPromptPool pool;
  TAPrompt ta;  // student TA rows at domain entry
  Matrix text_bank;
  std::vector<int> bank_ids;
  double alpha = 0.997;
  bool ready = false;

  ParamList ema_params(bool include_pool);
};

/// teacher <- alpha * teacher + (1 - alpha) * student, matched by name.
void ema_update(const ParamList& teacher, const ParamList& student, double alpha);

/// Unit-norm text embedding per id under the teacher's TA rows.
Matrix build_text_bank(const TextEncoder& text, const TAPrompt& teacher_ta, std::span<const int> ids);

struct EpochLog {
  int epoch = 0;
  std::string phase;  // "text", "visual" or "joint"
  loss::LossBreakdown mean;
  double gamma = 0;
};

struct ParamReportRow {
  std::string side;    // "text" or "visual"
  std::string module;  // "ta_prompt", "va_prompt", "head", "backbone"
  int64_t count = 0;
  double ratio = 0;
};

struct StageLog {
  int domain = 0;
  std::vector<EpochLog> epochs;
  std::vector<ParamReportRow> params;
};

/// Trainable counts per module; ratios normalized within each side. The
/// frozen text encoder and the scalar gamma are not listed.
std::vector<ParamReportRow> trainable_param_report(ModelState& state);

/// Everything that evolves during a run.
struct RunState {
  ModelState model;
  TeacherState teacher;
  Adam opt_visual;
  Adam opt_text;
  std::mt19937_64 rng;

  RunState() = default;
  explicit RunState(const ExperimentConfig& cfg);
};

/// Applies the freeze policy, grows the prompt pool, registers the domain's
/// identities, adds its classifier head and re-synchronizes the teacher.
void enter_domain(RunState& s, const DomainDataset& data, int t);

/// Runs the configured schedule for one domain. Requires enter_domain(t).
StageLog train_domain(RunState& s, const DomainDataset& data, int t);

/// L2-normalized projected features, batched, no gradient.
Matrix embed_images(const ModelState& m, std::span<const RenderedImage> images, RoutingRecord* routing = nullptr);

/// Domain-t dataset and unseen suite as used by a run with `cfg`.
DomainDataset make_seen_domain(const ExperimentConfig& cfg, int t);
std::vector<EvalSplit> make_unseen_splits(const ExperimentConfig& cfg);

std::string stage_log_csv(const StageLog& log);

}  // namespace pad
