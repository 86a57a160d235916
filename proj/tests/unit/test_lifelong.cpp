#include "fd.hpp"
#include "tiny.hpp"

#include "pad/checkpoint.hpp"
#include "pad/lifelong.hpp"
#include "pad/runner.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

using namespace pad;
using namespace pad::test;
namespace fs = std::filesystem;

namespace {

std::map<std::string, Matrix> snapshot(ParamList params) {
  std::map<std::string, Matrix> out;
  for (auto& np : params) out[np.name] = np.param->value;
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pad_unit_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Ema, FixedPointFullCopyAndArithmetic) {
  Parameter t(Matrix::Constant(1, 1, 1.0)), s(Matrix::Constant(1, 1, 0.0));
  ParamList tl{{"w", &t, ParamGroup::backbone}}, sl{{"w", &s, ParamGroup::backbone}};
  ema_update(tl, sl, 1.0);
  EXPECT_EQ(t.value(0, 0), 1.0);
  ema_update(tl, sl, 0.997);
  EXPECT_EQ(t.value(0, 0), 0.997);
  ema_update(tl, sl, 0.0);
  EXPECT_EQ(t.value(0, 0), 0.0);
}

TEST(Ema, RepeatedUpdatesDecayGeometrically) {
  Parameter t(Matrix::Constant(1, 1, 1.0)), s(Matrix::Constant(1, 1, 0.0));
  ParamList tl{{"w", &t, ParamGroup::backbone}}, sl{{"w", &s, ParamGroup::backbone}};
  for (int n = 0; n < 50; ++n) ema_update(tl, sl, 0.997);
  EXPECT_NEAR(t.value(0, 0), std::pow(0.997, 50), 1e-12);
}

TEST(TextBankCache, DefinitionalAndStable) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  const DomainDataset d = make_seen_domain(c, 0);
  enter_domain(s, d, 0);
  const Matrix again = build_text_bank(s.model.text, s.teacher.ta, s.teacher.bank_ids);
  EXPECT_EQ(again, s.teacher.text_bank);
  for (size_t i = 0; i < s.teacher.bank_ids.size(); ++i) {
    const int id = s.teacher.bank_ids[i];
    std::vector<TokenSequence> seq{tokenize_template(id, s.teacher.ta)};
    const Matrix row = ag::l2_normalize_rows(encode_text(s.model.text, seq, s.teacher.ta, false)).value();
    EXPECT_LT((row.row(0) - s.teacher.text_bank.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(s.teacher.text_bank.row(static_cast<Eigen::Index>(i)).norm(), 1.0, 1e-6);
  }
}

TEST(EnterDomain, OrderAndWarmup) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  const DomainDataset d0 = make_seen_domain(c, 0), d1 = make_seen_domain(c, 1);
  EXPECT_THROW(enter_domain(s, d1, 1), std::logic_error);
  EXPECT_THROW(train_domain(s, d0, 0), std::logic_error);
  enter_domain(s, d0, 0);
  for (const auto& b : s.model.image.blocks) EXPECT_TRUE(b.fc1.weight.trainable);
  EXPECT_EQ(s.model.heads.size(), 1u);
}

TEST(Training, FirstDomainHasNoDistillation) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  const DomainDataset d = make_seen_domain(c, 0);
  enter_domain(s, d, 0);
  const StageLog log = train_domain(s, d, 0);
  ASSERT_FALSE(log.epochs.empty());
  for (const auto& e : log.epochs) {
    EXPECT_EQ(e.mean.texkd, 0.0);
    EXPECT_EQ(e.mean.featkd, 0.0);
    EXPECT_EQ(e.mean.logitkd, 0.0);
  }
}

TEST(Training, S0NeverDistills) {
  const RunResult r = run_sequence(tiny_config("S0"));
  ASSERT_EQ(r.logs.size(), 3u);
  for (const auto& stage : r.logs)
    for (const auto& e : stage.epochs) EXPECT_EQ(e.mean.kd_total, 0.0);
  // Later stages of the full model do distill.
  const RunResult full = run_sequence(tiny_config("S5"));
  double kd = 0;
  for (const auto& e : full.logs[2].epochs) kd += e.mean.kd_total;
  EXPECT_GT(kd, 0.0);
}

TEST(Training, LossDecreasesOnEverySeed) {
  for (uint64_t seed : {0, 1, 2}) {
    ExperimentConfig c = tiny_config("S5", seed);
    c.epochs_per_domain = 6;
    RunState s(c);
    const DomainDataset d = make_seen_domain(c, 0);
    enter_domain(s, d, 0);
    const StageLog log = train_domain(s, d, 0);
    std::vector<double> visual;
    for (const auto& e : log.epochs)
      if (e.phase == "visual") visual.push_back(e.mean.overall);
    ASSERT_EQ(visual.size(), 6u);
    EXPECT_LT(visual.back(), visual.front()) << "seed " << seed;
  }
}

TEST(Freezing, FrozenPartsBitwiseUnchanged) {
  const ExperimentConfig c = tiny_config("S1");
  RunState s(c);
  for (int t = 0; t < 2; ++t) {
    const DomainDataset d = make_seen_domain(c, t);
    enter_domain(s, d, t);
    ParamList image, text;
    s.model.image.collect(image);
    s.model.text.collect(text);
    const auto img_before = snapshot(image), text_before = snapshot(text);
    train_domain(s, d, t);
    for (auto& np : text) EXPECT_EQ(np.param->value, text_before.at(np.name)) << np.name;
    if (t == 1) {
      int frozen = 0, moved = 0;
      for (auto& np : image) {
        const bool in_frozen_block = np.name.rfind("image.blocks.0.", 0) == 0 || np.name.rfind("image.blocks.1.", 0) == 0;
        const bool stem = np.name.find("patch_embed") != std::string::npos || np.name == "image.cls" ||
                          np.name == "image.pos" || np.name.find("ln_pre") != std::string::npos;
        if (in_frozen_block || stem) {
          EXPECT_EQ(np.param->value, img_before.at(np.name)) << np.name;
          ++frozen;
        } else if (np.param->value != img_before.at(np.name)) {
          ++moved;
        }
      }
      EXPECT_GT(frozen, 0);
      EXPECT_GT(moved, 0);
    }
  }
}

TEST(Freezing, EarlierSlotsAndHeadsUnchanged) {
  const ExperimentConfig c = tiny_config("S5");
  RunState s(c);
  const DomainDataset d0 = make_seen_domain(c, 0), d1 = make_seen_domain(c, 1);
  enter_domain(s, d0, 0);
  train_domain(s, d0, 0);
  const Matrix slot0 = s.model.pool.layers[1].slots[0].tokens.value;
  const Matrix head0 = s.model.heads[0].weight.value;
  enter_domain(s, d1, 1);
  const Matrix slot2 = s.model.pool.layers[1].slots[2].tokens.value;
  train_domain(s, d1, 1);
  EXPECT_EQ(s.model.pool.layers[1].slots[0].tokens.value, slot0);
  EXPECT_EQ(s.model.heads[0].weight.value, head0);
  EXPECT_NE(s.model.pool.layers[1].slots[2].tokens.value, slot2);
}

TEST(ParamReport, TextSideAndRatios) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  const DomainDataset d0 = make_seen_domain(c, 0), d1 = make_seen_domain(c, 1);
  enter_domain(s, d0, 0);
  enter_domain(s, d1, 1);
  const auto rows = trainable_param_report(s.model);
  std::map<std::string, double> ratio_sum;
  std::map<std::string, int64_t> counts;
  for (const auto& r : rows) {
    ratio_sum[r.side] += r.ratio;
    counts[r.side + "/" + r.module] = r.count;
    if (r.side == "text") EXPECT_EQ(r.module, "ta_prompt");
  }
  for (auto& [side, sum] : ratio_sum) EXPECT_NEAR(sum, 1.0, 1e-9) << side;
  EXPECT_GT(counts["text/ta_prompt"], 0);

  // Two more frozen blocks shrink the backbone share.
  ExperimentConfig c2 = tiny_config();
  c2.num_layers = 5;
  c2.unfrozen_blocks = 3;
  ExperimentConfig c3 = c2;
  c3.unfrozen_blocks = 1;
  auto backbone = [&](const ExperimentConfig& cfg) {
    RunState st(cfg);
    enter_domain(st, make_seen_domain(cfg, 0), 0);
    enter_domain(st, make_seen_domain(cfg, 1), 1);
    for (const auto& r : trainable_param_report(st.model))
      if (r.module == "backbone") return r.count;
    return int64_t{-1};
  };
  EXPECT_LT(backbone(c3), backbone(c2));
}

TEST(Runner, ProtocolShapeAndDeterminism) {
  const ExperimentConfig c = tiny_config();
  const fs::path dir = fresh_dir("shape");
  RunOptions opt;
  opt.out_dir = dir;
  const RunResult r = run_sequence(c, opt);
  for (int t = 0; t < 3; ++t) {
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / ("stage_" + std::to_string(t) + ".ckpt")));
    EXPECT_TRUE(fs::exists(dir / ("stage_" + std::to_string(t) + ".csv")));
    EXPECT_EQ(r.metrics.stage_entries(t, "seen").size(), static_cast<size_t>(t + 1));
    EXPECT_EQ(r.metrics.stage_entries(t, "unseen").size(), 1u);
  }
  const RunResult again = run_sequence(c);
  EXPECT_EQ(metrics_csv(again.metrics), metrics_csv(r.metrics));
  EXPECT_EQ(diagnostics_csv(again.metrics), diagnostics_csv(r.metrics));
  EXPECT_EQ(slurp(dir / "metrics.csv"), metrics_csv(r.metrics));
  fs::remove_all(dir);
}

TEST(Runner, ResumeMatchesUninterruptedRun) {
  const ExperimentConfig c = tiny_config();
  const std::string full = metrics_csv(run_sequence(c).metrics);
  const fs::path dir = fresh_dir("resume");
  RunOptions first;
  first.out_dir = dir;
  first.stop_after_stage = 0;
  run_sequence(c, first);
  RunOptions rest;
  rest.out_dir = dir;
  rest.resume = true;
  const RunResult resumed = run_sequence(c, rest);
  EXPECT_EQ(resumed.logs.size(), 2u);
  EXPECT_EQ(metrics_csv(resumed.metrics), full);
  EXPECT_EQ(slurp(dir / "metrics.csv"), full);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const ExperimentConfig c = tiny_config();
  RunOptions opt;
  opt.stop_after_stage = 1;
  const RunResult r = run_sequence(c, opt);
  const std::string bytes = serialize_checkpoint(capture_checkpoint(r.state, r.metrics));
  const Checkpoint loaded = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(loaded), bytes);
  const RunState restored = restore_run_state(loaded, c);
  EXPECT_EQ(serialize_checkpoint(capture_checkpoint(restored, checkpoint_metrics(loaded))), bytes);
  EXPECT_EQ(checkpoint_domain(loaded), 1);
  EXPECT_EQ(checkpoint_config(loaded), c);
}

TEST(Checkpoint, ConfigHashMismatchIsAnError) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  const Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(capture_checkpoint(s, MetricsReport{})));
  ExperimentConfig other = c;
  other.lambda_text = 0.25;
  EXPECT_THROW(restore_run_state(ck, other), CheckpointError);
}

TEST(Checkpoint, CorruptInputRejected) {
  const ExperimentConfig c = tiny_config();
  RunState s(c);
  std::string bytes = serialize_checkpoint(capture_checkpoint(s, MetricsReport{}));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(""), CheckpointError);
}
