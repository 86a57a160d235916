#include "pad/runner.hpp"

#include "pad/checkpoint.hpp"
#include "pad/io.hpp"

#include <cmath>
#include <limits>
#include <regex>

namespace fs = std::filesystem;

namespace pad {

Matrix current_text_bank(const ModelState& m) {
  const std::vector<int> ids = m.ta.identities();
  return build_text_bank(m.text, m.ta, ids);
}

DiagnosticEntry stage_diagnostics(const ModelState& m, const StageEvaluation& ev, int stage, const Matrix& text_bank) {
  DiagnosticEntry d;
  d.stage = stage;
  double drift = 0;
  int seen = 0;
  std::vector<Vector> hists;
  std::vector<RowVector> means;
  for (const auto& e : ev.embeddings) {
    if (e.split == "seen") {
      drift += semantic_drift_score(e.query, text_bank);
      ++seen;
    }
    hists.push_back(routing_histogram(e.query_routing, m.pool.pool_size()));
    means.push_back(e.query.colwise().mean());
  }
  d.drift = seen ? drift / seen : std::numeric_limits<double>::quiet_NaN();
  d.rho_pearson = d.rho_spearman = std::numeric_limits<double>::quiet_NaN();
  if (m.cfg.use_va_prompt && hists.size() >= 2) {
    Correlation c = prompt_routing_correlation(hists, means);
    d.rho_pearson = c.pearson;
    d.rho_spearman = c.spearman;
    d.rho_defined = c.defined;
  }
  return d;
}

namespace {

int newest_checkpoint(const fs::path& dir) {
  int best = -1;
  if (!fs::exists(dir)) return best;
  const std::regex re("stage_([0-9]+)\\.ckpt");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, re)) best = std::max(best, std::stoi(m[1]));
  }
  return best;
}

}  // namespace

RunResult run_sequence(const ExperimentConfig& cfg, const RunOptions& opt) {
  validate(cfg);
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  const bool persist = !opt.out_dir.empty();
  const fs::path ckpt_dir = opt.out_dir / "checkpoints";
  if (persist) {
    fs::create_directories(ckpt_dir);
    save_config(cfg, opt.out_dir / "config.json");
  }

  RunResult result;
  int start = 0;
  if (opt.resume && persist) {
    const int last = newest_checkpoint(ckpt_dir);
    if (last >= 0) {
      const Checkpoint c = load_checkpoint(ckpt_dir / ("stage_" + std::to_string(last) + ".ckpt"));
      result.state = restore_run_state(c, cfg);
      result.metrics = checkpoint_metrics(c);
      start = last + 1;
      log("resumed after stage " + std::to_string(last));
    }
  }
  if (start == 0) result.state = RunState(cfg);

  const std::vector<EvalSplit> unseen = make_unseen_splits(cfg);
  std::vector<DomainDataset> seen_data;
  for (int t = 0; t < start; ++t) seen_data.push_back(make_seen_domain(cfg, t));

  for (int t = start; t < cfg.num_domains; ++t) {
    seen_data.push_back(make_seen_domain(cfg, t));
    RunState& s = result.state;
    enter_domain(s, seen_data.back(), t);
    StageLog stage_log = train_domain(s, seen_data.back(), t);

    std::vector<const EvalSplit*> seen_ptrs, unseen_ptrs;
    for (const auto& d : seen_data) seen_ptrs.push_back(&d.test);
    for (const auto& u : unseen) unseen_ptrs.push_back(&u);
    StageEvaluation ev = evaluate_protocol(s.model, seen_ptrs, unseen_ptrs, t);
    result.metrics.entries.insert(result.metrics.entries.end(), ev.entries.begin(), ev.entries.end());
    result.final_text_bank = current_text_bank(s.model);
    result.metrics.diagnostics.push_back(stage_diagnostics(s.model, ev, t, result.final_text_bank));

    log("stage " + std::to_string(t) + ": seen mAP " + format_double(result.metrics.seen_avg_map(t)) +
        ", unseen mAP " + format_double(result.metrics.unseen_avg_map(t)));

    if (persist) {
      write_file_atomic(opt.out_dir / ("stage_" + std::to_string(t) + ".csv"), stage_log_csv(stage_log));
      write_file_atomic(opt.out_dir / "metrics.csv", metrics_csv(result.metrics));
      write_file_atomic(opt.out_dir / "diagnostics.csv", diagnostics_csv(result.metrics));
      save_checkpoint(capture_checkpoint(s, result.metrics), ckpt_dir / ("stage_" + std::to_string(t) + ".ckpt"));
    }
    result.logs.push_back(std::move(stage_log));
    if (opt.stop_after_stage == t) break;
  }
  if (result.final_text_bank.size() == 0 && result.state.model.domain >= 0)
    result.final_text_bank = current_text_bank(result.state.model);
  return result;
}

}  // namespace pad
