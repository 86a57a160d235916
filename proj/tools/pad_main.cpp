// pad: train, ablate, report, eval and export-data entry points.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "pad/checkpoint.hpp"
#include "pad/config.hpp"
#include "pad/eval.hpp"
#include "pad/io.hpp"
#include "pad/runner.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace pad;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path runs_root() {
  const char* env = std::getenv("PAD_RUNS_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

ExperimentConfig base_config(const std::string& path, const std::vector<std::string>& sets) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  for (const auto& s : sets) cfg = apply_override(cfg, s);
  validate(cfg);
  return cfg;
}

void print_stage_table(const MetricsReport& r, std::ostream& os) {
  for (const auto& e : r.entries)
    os << "stage " << e.stage << "  " << e.split << " domain " << e.domain << "  mAP " << format_double(e.mAP) << "  R1 "
       << format_double(e.R1) << '\n';
}

int cmd_train(const std::string& config, const std::string& variant, std::string out,
              const std::vector<std::string>& sets, bool resume, int stop_after, bool quiet) {
  ExperimentConfig cfg = config.empty() ? ExperimentConfig{} : load_config(config);
  if (!variant.empty()) cfg = configure_variant(cfg, variant);
  for (const auto& s : sets) cfg = apply_override(cfg, s);
  validate(cfg);
  if (out.empty()) out = (runs_root() / cfg.variant).string();
  RunOptions opt;
  opt.out_dir = out;
  opt.resume = resume;
  opt.stop_after_stage = stop_after;
  if (!quiet) opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
  RunResult r = run_sequence(cfg, opt);
  std::cout << "run written to " << out << '\n';
  const int last = r.metrics.final_stage();
  std::cout << "final seen mAP " << format_double(r.metrics.seen_avg_map(last)) << "  unseen mAP "
            << format_double(r.metrics.unseen_avg_map(last)) << '\n';
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& suite, std::string out,
               const std::vector<std::string>& sets, bool quiet) {
  std::vector<std::string> variants;
  try {
    variants = suite_variants(suite);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const ExperimentConfig base = base_config(config, {});
  if (out.empty()) out = (runs_root() / ("ablate_" + suite)).string();
  fs::create_directories(out);
  const bool blocks = suite == "blocks";
  std::ostringstream csv;
  csv << "variant,seen_mAP,seen_R1,unseen_mAP,unseen_R1";
  if (blocks) csv << ",trainable_params,trainable_ratio";
  csv << '\n';
  for (const auto& v : variants) {
    ExperimentConfig cfg = configure_variant(base, v);
    for (const auto& s : sets) cfg = apply_override(cfg, s);
    validate(cfg);
    RunOptions opt;
    opt.out_dir = fs::path(out) / v;
    if (!quiet) opt.log = [v](const std::string& s) { std::cerr << "[" << v << "] " << s << '\n'; };
    RunResult r = run_sequence(cfg, opt);
    const int last = r.metrics.final_stage();
    csv << v << ',' << format_double(r.metrics.seen_avg_map(last)) << ',' << format_double(r.metrics.seen_avg_r1(last))
        << ',' << format_double(r.metrics.unseen_avg_map(last)) << ',' << format_double(r.metrics.unseen_avg_r1(last));
    if (blocks) {
      ParamList all = r.state.model.visual_params();
      for (auto& p : r.state.model.text_params()) all.push_back(p);
      const int64_t trainable = count_elements(all, true);
      const int64_t total = count_elements(all, false);
      csv << ',' << trainable << ',' << format_double(static_cast<double>(trainable) / static_cast<double>(total));
    }
    csv << '\n';
    write_file_atomic(fs::path(out) / "ablation.csv", csv.str());
  }
  std::cout << csv.str();
  return 0;
}

std::string summary_text(const MetricsReport& r) {
  std::ostringstream os;
  const int last = r.final_stage();
  os << "final stage: " << last << '\n';
  os << "seen_avg mAP: " << format_double(r.seen_avg_map(last)) << '\n';
  os << "seen_avg R1: " << format_double(r.seen_avg_r1(last)) << '\n';
  os << "unseen_avg mAP: " << format_double(r.unseen_avg_map(last)) << '\n';
  os << "unseen_avg R1: " << format_double(r.unseen_avg_r1(last)) << '\n';
  for (const auto& e : r.stage_entries(last, "seen"))
    os << "domain " << e.domain << " final mAP: " << format_double(e.mAP) << '\n';
  for (const auto& [d, f] : r.forgetting()) os << "domain " << d << " forgetting: " << format_double(f) << '\n';
  if (const DiagnosticEntry* d = r.diagnostic(last)) {
    os << "drift: " << format_double(d->drift) << '\n';
    os << "routing rho (pearson/spearman): "
       << (d->rho_defined ? format_double(d->rho_pearson) + " / " + format_double(d->rho_spearman) : "undefined")
       << '\n';
  }
  return os.str();
}

std::vector<PlotSeries> trend_series(const MetricsReport& r, const std::string& split) {
  std::map<int, PlotSeries> by_domain;
  for (const auto& e : r.entries) {
    if (e.split != split) continue;
    auto& s = by_domain[e.domain];
    s.label = "domain " + std::to_string(e.domain);
    s.x.push_back(e.stage);
    s.y.push_back(e.mAP);
  }
  std::vector<PlotSeries> out;
  for (auto& [d, s] : by_domain) out.push_back(std::move(s));
  return out;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  for (const char* f : {"metrics.csv", "diagnostics.csv"})
    if (!fs::exists(dir / f)) throw std::runtime_error("report: missing " + (dir / f).string());
  const MetricsReport r = parse_metrics(read_file(dir / "metrics.csv"), read_file(dir / "diagnostics.csv"));
  if (r.entries.empty()) throw std::runtime_error("report: metrics.csv has no rows");
  fs::create_directories(dir / "plots");
  write_file_atomic(dir / "plots" / "seen_trend.svg",
                    svg_line_plot("Seen-domain mAP by stage", "stage", "mAP", trend_series(r, "seen")));
  write_file_atomic(dir / "plots" / "unseen_trend.svg",
                    svg_line_plot("Unseen-domain mAP by stage", "stage", "mAP", trend_series(r, "unseen")));
  const std::string summary = summary_text(r);
  write_file_atomic(dir / "summary.txt", summary);
  std::cout << summary;
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& splits, std::string out) {
  if (splits != "seen" && splits != "unseen" && splits != "all") throw UsageError("--splits must be seen, unseen or all");
  const Checkpoint c = load_checkpoint(checkpoint);
  const ExperimentConfig cfg = checkpoint_config(c);
  const RunState s = restore_run_state(c, cfg);
  const int stage = checkpoint_domain(c);
  std::vector<DomainDataset> seen_data;
  if (splits != "unseen")
    for (int t = 0; t <= stage; ++t) seen_data.push_back(make_seen_domain(cfg, t));
  std::vector<EvalSplit> unseen;
  if (splits != "seen") unseen = make_unseen_splits(cfg);
  std::vector<const EvalSplit*> sp, up;
  for (const auto& d : seen_data) sp.push_back(&d.test);
  for (const auto& u : unseen) up.push_back(&u);
  MetricsReport r;
  r.entries = evaluate_protocol(s.model, sp, up, stage).entries;
  if (out.empty()) out = (fs::path(checkpoint).parent_path() / ("eval_" + splits + ".csv")).string();
  write_file_atomic(out, metrics_csv(r));
  print_stage_table(r, std::cout);
  return 0;
}

int cmd_export(const std::string& config, const std::vector<std::string>& sets, const std::string& out) {
  const ExperimentConfig cfg = base_config(config, sets);
  std::vector<DomainDataset> domains;
  for (int t = 0; t < cfg.num_domains; ++t) domains.push_back(make_seen_domain(cfg, t));
  export_dataset(domains, make_unseen_splits(cfg), out);
  std::cout << "dataset written to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-anchored lifelong re-identification at desk scale"};
  app.require_subcommand(1);

  std::string config, variant, out, suite, run_dir, checkpoint, splits = "all";
  std::vector<std::string> sets;
  bool resume = false, quiet = false;
  int stop_after = -1;

  auto* train = app.add_subcommand("train", "Train a full domain sequence");
  train->add_option("--config", config, "JSON config file");
  train->add_option("--variant", variant, "Named variant (S0..S5, T1..T5, V1..V5, P1..P5, B2..B8)");
  train->add_option("--out", out, "Run directory (default $PAD_RUNS_DIR/<variant>)");
  train->add_option("--set", sets, "key=value override")->take_all();
  train->add_flag("--resume", resume, "Continue from the newest checkpoint in --out");
  train->add_option("--stop-after", stop_after, "Stop after this stage");
  train->add_flag("--quiet", quiet);

  auto* ablate = app.add_subcommand("ablate", "Run a variant family and write ablation.csv");
  ablate->add_option("--config", config);
  ablate->add_option("--suite", suite)->required()->check(CLI::IsMember({"components", "texkd", "viskd", "slots", "blocks"}));
  ablate->add_option("--out", out);
  ablate->add_option("--set", sets)->take_all();
  ablate->add_flag("--quiet", quiet);

  auto* report = app.add_subcommand("report", "Plots and summary for a finished run");
  report->add_option("--run-dir", run_dir)->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--splits", splits)->check(CLI::IsMember({"seen", "unseen", "all"}));
  eval->add_option("--out", out, "CSV path (default next to the checkpoint)");

  auto* exp = app.add_subcommand("export-data", "Write the synthetic images as PNG");
  exp->add_option("--config", config);
  exp->add_option("--set", sets)->take_all();
  exp->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(config, variant, out, sets, resume, stop_after, quiet);
    if (*ablate) return cmd_ablate(config, suite, out, sets, quiet);
    if (*report) return cmd_report(run_dir);
    if (*eval) return cmd_eval(checkpoint, splits, out);
    if (*exp) return cmd_export(config, sets, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
