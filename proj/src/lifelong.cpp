#include "pad/lifelong.hpp"

#include "pad/io.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pad {

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive(uint64_t seed, uint64_t tag) { return splitmix(seed ^ splitmix(tag)); }

constexpr int kEvalChunk = 64;

Matrix gather_patch_rows(const Matrix& all, const std::vector<int>& items, int patches) {
  Matrix out(static_cast<Eigen::Index>(items.size()) * patches, all.cols());
  for (size_t i = 0; i < items.size(); ++i)
    out.middleRows(static_cast<Eigen::Index>(i) * patches, patches) =
        all.middleRows(static_cast<Eigen::Index>(items[i]) * patches, patches);
  return out;
}

Matrix take_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// Loss graph for one step; null terms are disabled.
struct StepTerms {
  ag::Var supcon, id, triplet, texkd, featkd, logitkd;
};

loss::LossBreakdown finish_step(const StepTerms& st, const loss::LossWeights& w, ag::Var* total) {
  auto val = [](const ag::Var& v) { return v ? v.scalar() : 0.0; };
  loss::LossBreakdown parts;
  parts.supcon = val(st.supcon);
  parts.id = val(st.id);
  parts.triplet = val(st.triplet);
  parts.texkd = val(st.texkd);
  parts.featkd = val(st.featkd);
  parts.logitkd = val(st.logitkd);
  const std::vector<ag::Var> terms{st.supcon, st.id, st.triplet, st.texkd, st.featkd, st.logitkd};
  const std::vector<double> weights{1, 1, 1, w.lambda_text, w.lambda_feat, w.lambda_logit};
  *total = ag::weighted_sum(terms, weights);
  return loss::total_loss(parts, w);
}

void accumulate(loss::LossBreakdown& acc, const loss::LossBreakdown& b) {
  acc.supcon += b.supcon;
  acc.id += b.id;
  acc.triplet += b.triplet;
  acc.texkd += b.texkd;
  acc.featkd += b.featkd;
  acc.logitkd += b.logitkd;
  acc.kd_total += b.kd_total;
  acc.overall += b.overall;
}

loss::LossBreakdown divided(loss::LossBreakdown b, double n) {
  for (double* f : {&b.supcon, &b.id, &b.triplet, &b.texkd, &b.featkd, &b.logitkd, &b.kd_total, &b.overall}) *f /= n;
  return b;
}

class DomainTrainer {
 public:
  DomainTrainer(RunState& s, const DomainDataset& data, int t)
      : s_(s), m_(s.model), cfg_(s.model.cfg), data_(data), t_(t), w_(loss::weights_from(cfg_)) {
    const FreezePolicy policy = resolve_freeze_policy(cfg_, t);
    texkd_on_ = policy.distillation_active && cfg_.use_texkd;
    viskd_on_ = policy.distillation_active && cfg_.use_viskd;
    std::vector<const RenderedImage*> ptrs;
    for (const auto& img : data.train) ptrs.push_back(&img);
    patches_ = patchify(ptrs, cfg_.patch);
    queries_ = m_.routing_queries(patches_, static_cast<int>(ptrs.size()));
    steps_ = std::max<int>(1, static_cast<int>(data.train.size()) / cfg_.batch_size());
    for (size_t i = 0; i < s_.teacher.bank_ids.size(); ++i) bank_row_[s_.teacher.bank_ids[i]] = static_cast<int>(i);
  }

  StageLog run() {
    StageLog log;
    log.domain = t_;
    log.params = trainable_param_report(m_);
    if (cfg_.schedule == Schedule::two_phase) {
      text_phase(log);
      visual_phase(log);
    } else {
      joint_phase(log);
    }
    return log;
  }

 private:
  PKBatch sample() { return sample_pk_batch(data_, cfg_.batch_p, cfg_.batch_k, s_.rng); }

  // Text-side terms against normalized visual features `v` (constant or live).
  void text_terms(const ag::Var& v, const PKBatch& b, StepTerms& st) {
    std::vector<int> subset;
    std::map<int, int> local_to_row;
    std::vector<int> item_rows;
    for (int label : b.labels) {
      if (!local_to_row.contains(label)) {
        local_to_row[label] = static_cast<int>(subset.size());
        subset.push_back(data_.train_identities[static_cast<size_t>(label)]);
      }
      item_rows.push_back(local_to_row[label]);
    }
    if (texkd_on_) {
      std::vector<int> negatives;
      for (int id : s_.teacher.bank_ids)
        if (std::find(subset.begin(), subset.end(), id) == subset.end()) negatives.push_back(id);
      std::shuffle(negatives.begin(), negatives.end(), s_.rng);
      negatives.resize(std::min<size_t>(negatives.size(), static_cast<size_t>(std::max(0, cfg_.neg_batch))));
      subset.insert(subset.end(), negatives.begin(), negatives.end());
    }
    std::vector<TokenSequence> seqs;
    for (int id : subset) seqs.push_back(tokenize_template(id, m_.ta));
    ag::Var t_all = ag::l2_normalize_rows(encode_text(m_.text, seqs, m_.ta, true));
    st.supcon = ag::supcon(v, ag::gather_rows(t_all, item_rows), b.labels, cfg_.tau_supcon);
    if (texkd_on_) {
      std::vector<int> rows;
      for (int id : subset) rows.push_back(bank_row_.at(id));
      st.texkd = ag::texkd(v, take_rows(s_.teacher.text_bank, rows), t_all, ag::leaf(m_.gamma, true), cfg_.tau_text);
    }
  }

  // Visual-side terms; returns the live normalized features.
  ag::Var visual_terms(const PKBatch& b, const Matrix& current_bank, bool supcon_on_bank, StepTerms& st) {
    const int B = static_cast<int>(b.indices.size());
    Matrix rows = gather_patch_rows(patches_, b.indices, cfg_.patches());
    const Matrix q = queries_.size() ? take_rows(queries_, b.indices) : Matrix();
    const Matrix* qp = queries_.size() ? &q : nullptr;
    EncodeOutput out = encode_image(m_.image, m_.active_pool(), rows, B, true, cfg_.per_layer_query, qp);
    ag::Var proj = out.triple.proj;
    ag::Var vn = ag::l2_normalize_rows(proj);
    st.id = ag::id_loss(m_.heads[static_cast<size_t>(t_)].forward(proj, true), b.labels);
    st.triplet = ag::triplet(proj, b.labels, cfg_.triplet_margin);
    if (supcon_on_bank) st.supcon = ag::supcon(vn, ag::constant(take_rows(current_bank, b.labels)), b.labels, cfg_.tau_supcon);
    if (viskd_on_) {
      const VAPromptPool* tpool = cfg_.use_va_prompt ? &s_.teacher.pool : nullptr;
      EncodeOutput tout = encode_image(s_.teacher.image, tpool, rows, B, false, cfg_.per_layer_query, qp);
      st.featkd = ag::featkd(out.triple.v11, out.triple.v12, proj, tout.triple.v11.value(), tout.triple.v12.value(),
                             tout.triple.proj.value());
      st.logitkd = ag::logitkd(vn, ag::l2_normalize_rows(tout.triple.proj).value(), current_bank, cfg_.tau_vis);
    }
    return vn;
  }

  void ema_step() {
    ema_update(s_.teacher.ema_params(cfg_.use_va_prompt && cfg_.ema_includes_pool), m_.ema_params(), s_.teacher.alpha);
  }

  void text_phase(StageLog& log) {
    ParamList tp = m_.text_params();
    // The image encoder does not move during this phase, so one pass serves every epoch.
    const Matrix feats = embed_images(m_, data_.train);
    for (int e = 0; e < cfg_.epochs_per_domain; ++e) {
      loss::LossBreakdown acc;
      for (int k = 0; k < steps_; ++k) {
        PKBatch b = sample();
        Adam::zero_grad(tp);
        StepTerms st;
        text_terms(ag::constant(take_rows(feats, b.indices)), b, st);
        ag::Var total;
        accumulate(acc, finish_step(st, w_, &total));
        if (total.requires_grad()) total.backward();
        s_.opt_text.step(tp);
      }
      log.epochs.push_back({e, "text", divided(acc, steps_), m_.gamma.value(0, 0)});
    }
  }

  void visual_phase(StageLog& log) {
    ParamList vp = m_.visual_params();
    const Matrix bank = build_text_bank(m_.text, m_.ta, data_.train_identities);
    for (int e = 0; e < cfg_.epochs_per_domain; ++e) {
      loss::LossBreakdown acc;
      for (int k = 0; k < steps_; ++k) {
        PKBatch b = sample();
        Adam::zero_grad(vp);
        StepTerms st;
        visual_terms(b, bank, true, st);
        ag::Var total;
        accumulate(acc, finish_step(st, w_, &total));
        total.backward();
        s_.opt_visual.step(vp);
        ema_step();
      }
      log.epochs.push_back({e, "visual", divided(acc, steps_), m_.gamma.value(0, 0)});
    }
  }

  void joint_phase(StageLog& log) {
    ParamList vp = m_.visual_params();
    ParamList tp = m_.text_params();
    for (int e = 0; e < cfg_.epochs_per_domain; ++e) {
      const Matrix bank = build_text_bank(m_.text, m_.ta, data_.train_identities);
      loss::LossBreakdown acc;
      for (int k = 0; k < steps_; ++k) {
        PKBatch b = sample();
        Adam::zero_grad(vp);
        Adam::zero_grad(tp);
        StepTerms st;
        ag::Var vn = visual_terms(b, bank, false, st);
        text_terms(vn, b, st);
        ag::Var total;
        accumulate(acc, finish_step(st, w_, &total));
        total.backward();
        s_.opt_visual.step(vp);
        s_.opt_text.step(tp);
        ema_step();
      }
      log.epochs.push_back({e, "joint", divided(acc, steps_), m_.gamma.value(0, 0)});
    }
  }

  RunState& s_;
  ModelState& m_;
  const ExperimentConfig& cfg_;
  const DomainDataset& data_;
  int t_;
  loss::LossWeights w_;
  bool texkd_on_ = false, viskd_on_ = false;
  Matrix patches_;
  Matrix queries_;  // per train image, empty when routing is off
  int steps_ = 1;
  std::map<int, int> bank_row_;
};

int64_t trainable_elements(const ParamList& params) { return count_elements(params, true); }

}  // namespace

ModelState::ModelState(const ExperimentConfig& c)
    : cfg(c),
      image(c, derive(c.seed, 1)),
      query_encoder(image),
      pool(c, derive(c.seed, 2)),
      ta(c.ta_tokens, c.embed_dim, derive(c.seed, 3)),
      text(c, derive(c.seed, 4)),
      gamma(Matrix::Constant(1, 1, c.gamma_init)) {
  validate(c);
  query_encoder.set_trainable(false, std::vector<bool>(static_cast<size_t>(c.num_layers), false), false);
}

Matrix ModelState::routing_queries(const Matrix& patch_rows, int batch) const {
  if (!cfg.use_va_prompt || cfg.per_layer_query) return {};
  return routing_query(query_encoder, patch_rows, batch);
}

ParamList ModelState::visual_params() {
  ParamList out;
  image.collect(out);
  if (cfg.use_va_prompt) pool.collect(out);
  for (size_t t = 0; t < heads.size(); ++t) heads[t].collect(out, "head." + std::to_string(t), ParamGroup::head);
  return out;
}

ParamList ModelState::text_params() {
  ParamList out;
  ta.collect(out);
  out.push_back({"gamma", &gamma, ParamGroup::prompt});
  return out;
}

ParamList ModelState::all_params() {
  ParamList out = visual_params();
  if (!cfg.use_va_prompt) pool.collect(out);
  for (auto& p : text_params()) out.push_back(p);
  text.collect(out);
  return out;
}

ParamList ModelState::ema_params() {
  ParamList out;
  image.collect(out);
  if (cfg.use_va_prompt && cfg.ema_includes_pool) pool.collect(out);
  return out;
}

ParamList TeacherState::ema_params(bool include_pool) {
  ParamList out;
  image.collect(out);
  if (include_pool) pool.collect(out);
  return out;
}

void ema_update(const ParamList& teacher, const ParamList& student, double alpha) {
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Parameter& tp = *teacher[i].param;
    const Parameter& sp = *student[i].param;
    if (teacher[i].name != student[i].name || tp.value.rows() != sp.value.rows() || tp.value.cols() != sp.value.cols())
      throw std::invalid_argument("ema_update: mismatch at " + teacher[i].name);
    tp.value = alpha * tp.value + (1 - alpha) * sp.value;
  }
}

Matrix build_text_bank(const TextEncoder& text, const TAPrompt& teacher_ta, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("build_text_bank: no identities");
  return text_bank(text, teacher_ta, ids);
}

std::vector<ParamReportRow> trainable_param_report(ModelState& m) {
  ParamList ta, pool, heads, backbone;
  m.ta.collect(ta);
  if (m.cfg.use_va_prompt) m.pool.collect(pool);
  for (size_t t = 0; t < m.heads.size(); ++t) m.heads[t].collect(heads, "head." + std::to_string(t), ParamGroup::head);
  m.image.collect(backbone);
  std::vector<ParamReportRow> rows{{"text", "ta_prompt", trainable_elements(ta), 0},
                                   {"visual", "va_prompt", trainable_elements(pool), 0},
                                   {"visual", "head", trainable_elements(heads), 0},
                                   {"visual", "backbone", trainable_elements(backbone), 0}};
  for (const std::string side : {"text", "visual"}) {
    int64_t total = 0;
    for (const auto& r : rows)
      if (r.side == side) total += r.count;
    for (auto& r : rows)
      if (r.side == side && total > 0) r.ratio = static_cast<double>(r.count) / static_cast<double>(total);
  }
  return rows;
}

RunState::RunState(const ExperimentConfig& cfg)
    : model(cfg),
      opt_visual(cfg.lr_backbone, cfg.lr_prompt, cfg.lr_head),
      opt_text(cfg.lr_backbone, cfg.lr_prompt, cfg.lr_head),
      rng(derive(cfg.seed, 6)) {
  teacher.alpha = cfg.ema_alpha;
}

void enter_domain(RunState& s, const DomainDataset& data, int t) {
  ModelState& m = s.model;
  const ExperimentConfig& cfg = m.cfg;
  if (t != m.domain + 1) throw std::logic_error("enter_domain: domains must be entered in order");
  const FreezePolicy policy = resolve_freeze_policy(cfg, t);
  m.domain = t;

  std::vector<bool> blocks(static_cast<size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l) blocks[static_cast<size_t>(l)] = !policy.frozen_block_indices.contains(l);
  m.image.set_trainable(!policy.stem_frozen, blocks, true);
  advance_domain_slots(m.pool, t);

  m.ta.register_identities(data.train_identities, t);
  m.ta.set_trainable(t, policy.distillation_active && cfg.use_texkd);

  std::mt19937_64 head_rng(derive(cfg.seed, 100 + static_cast<uint64_t>(t)));
  m.heads.emplace_back(cfg.proj_dim, static_cast<int>(data.train_identities.size()), 0.01, true, head_rng);
  for (size_t h = 0; h + 1 < m.heads.size(); ++h) m.heads[h].set_trainable(false);

  // A fresh teacher per stage: copy of the student at entry plus a text bank
  // over every identity registered so far.
  s.teacher.image = m.image;
  s.teacher.pool = m.pool;
  s.teacher.ta = m.ta;
  s.teacher.alpha = cfg.ema_alpha;
  s.teacher.bank_ids = m.ta.identities();
  s.teacher.text_bank = build_text_bank(m.text, s.teacher.ta, s.teacher.bank_ids);
  s.teacher.ready = true;
}

StageLog train_domain(RunState& s, const DomainDataset& data, int t) {
  if (s.model.domain != t || !s.teacher.ready) throw std::logic_error("train_domain: enter_domain(t) must run first");
  return DomainTrainer(s, data, t).run();
}

Matrix embed_images(const ModelState& m, std::span<const RenderedImage> images, RoutingRecord* routing) {
  if (images.empty()) throw std::invalid_argument("embed_images: no images");
  Matrix out(static_cast<Eigen::Index>(images.size()), m.cfg.proj_dim);
  for (size_t start = 0; start < images.size(); start += kEvalChunk) {
    const size_t n = std::min<size_t>(kEvalChunk, images.size() - start);
    std::vector<const RenderedImage*> ptrs;
    for (size_t i = 0; i < n; ++i) ptrs.push_back(&images[start + i]);
    const Matrix rows = patchify(ptrs, m.cfg.patch);
    const Matrix q = m.routing_queries(rows, static_cast<int>(n));
    EncodeOutput eo = encode_image(m.image, m.active_pool(), rows, static_cast<int>(n), false, m.cfg.per_layer_query,
                                   q.size() ? &q : nullptr);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        ag::l2_normalize_rows(eo.triple.proj).value();
    if (routing) routing->insert(routing->end(), eo.routing.begin(), eo.routing.end());
  }
  return out;
}

DomainDataset make_seen_domain(const ExperimentConfig& cfg, int t) {
  return generate_domain(cfg.seed, seen_domain_spec(cfg, t));
}

std::vector<EvalSplit> make_unseen_splits(const ExperimentConfig& cfg) {
  return make_unseen_suite(cfg.seed, cfg, cfg.n_unseen);
}

std::string stage_log_csv(const StageLog& log) {
  std::ostringstream os;
  os << "epoch,phase,supcon,id,triplet,texkd,featkd,logitkd,kd_total,overall,gamma\n";
  for (const auto& e : log.epochs) {
    const auto& b = e.mean;
    os << e.epoch << ',' << e.phase;
    for (double v : {b.supcon, b.id, b.triplet, b.texkd, b.featkd, b.logitkd, b.kd_total, b.overall, e.gamma})
      os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace pad
