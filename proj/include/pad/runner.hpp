#pragma once

#include "pad/eval.hpp"
#include "pad/lifelong.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace pad {

struct RunOptions {
  /// Run directory; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Continue from the newest checkpoint in out_dir/checkpoints.
  bool resume = false;
  /// Stop after this stage (-1 runs the whole sequence).
  int stop_after_stage = -1;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  MetricsReport metrics;
  std::vector<StageLog> logs;  // stages trained by this call
  RunState state;
  /// Final-stage unit text bank over every registered identity.
  Matrix final_text_bank;
};

/// Trains domains 0..T-1 in order; after each, evaluates every seen test split
/// plus the unseen suite and (with out_dir) persists stage_{t}.csv,
/// metrics.csv, diagnostics.csv and checkpoints/stage_{t}.ckpt.
RunResult run_sequence(const ExperimentConfig& cfg, const RunOptions& opt = {});

/// Drift and routing diagnostics for one evaluated stage.
DiagnosticEntry stage_diagnostics(const ModelState& m, const StageEvaluation& ev, int stage, const Matrix& text_bank);

/// Unit text embedding of every identity registered so far.
Matrix current_text_bank(const ModelState& m);

}  // namespace pad
