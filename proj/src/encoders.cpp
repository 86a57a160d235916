#include "pad/encoders.hpp"

#include "pad/config.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace pad {

namespace {

std::mt19937_64 seeded(uint64_t seed, uint64_t tag) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(tag)};
  return std::mt19937_64(seq);
}

}  // namespace

ImageEncoder::ImageEncoder(const ExperimentConfig& cfg, uint64_t seed)
    : image_h(cfg.image_h),
      image_w(cfg.image_w),
      patch(cfg.patch),
      width(cfg.embed_dim),
      heads(cfg.num_heads),
      proj_dim(cfg.proj_dim) {
  auto rng = seeded(seed, 0x1e);
  const double std_in = 1.0 / std::sqrt(static_cast<double>(patch_dim()));
  const double std_w = 1.0 / std::sqrt(static_cast<double>(width));
  patch_embed = Linear(patch_dim(), width, std_in, true, rng);
  cls = Parameter(random_normal(1, width, 0.02, rng));
  pos = Parameter(random_normal(1 + patches(), width, 0.02, rng));
  ln_pre = LayerNorm(width);
  for (int l = 0; l < cfg.num_layers; ++l) blocks.emplace_back(width, heads, cfg.mlp_ratio, std_w, rng);
  ln_post = LayerNorm(width);
  proj = Linear(width, proj_dim, std_w, false, rng);
}

void ImageEncoder::collect(ParamList& out) {
  patch_embed.collect(out, "image.patch_embed", ParamGroup::backbone);
  out.push_back({"image.cls", &cls, ParamGroup::backbone});
  out.push_back({"image.pos", &pos, ParamGroup::backbone});
  ln_pre.collect(out, "image.ln_pre", ParamGroup::backbone);
  for (size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(out, "image.blocks." + std::to_string(l), ParamGroup::backbone);
  ln_post.collect(out, "image.ln_post", ParamGroup::backbone);
  proj.collect(out, "image.proj", ParamGroup::backbone);
}

void ImageEncoder::set_trainable(bool stem, const std::vector<bool>& block_trainable, bool head_trainable) {
  patch_embed.set_trainable(stem);
  cls.trainable = stem;
  pos.trainable = stem;
  ln_pre.set_trainable(stem);
  for (size_t l = 0; l < blocks.size(); ++l) blocks[l].set_trainable(block_trainable.at(l));
  ln_post.set_trainable(head_trainable);
  proj.set_trainable(head_trainable);
}

Matrix patchify(std::span<const RenderedImage* const> images, int patch) {
  if (images.empty()) throw std::invalid_argument("patchify: empty batch");
  const int H = images[0]->height, W = images[0]->width;
  const int ph = H / patch, pw = W / patch;
  Matrix out(static_cast<Eigen::Index>(images.size()) * ph * pw, patch * patch * 3);
  Eigen::Index r = 0;
  for (const RenderedImage* img : images) {
    if (img->height != H || img->width != W) throw std::invalid_argument("patchify: image shape mismatch");
    for (int py = 0; py < ph; ++py)
      for (int px = 0; px < pw; ++px, ++r) {
        int c = 0;
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            for (int ch = 0; ch < 3; ++ch) out(r, c++) = img->at(py * patch + y, px * patch + x, ch);
      }
  }
  return out;
}

namespace {

/// Embeds patches into the packed [CLS, patches] layout and applies ln_pre.
ag::Var embed_tokens(const ImageEncoder& enc, const Matrix& patch_rows, int batch, bool track) {
  const int P = enc.patches();
  if (patch_rows.rows() != static_cast<Eigen::Index>(batch) * P || patch_rows.cols() != enc.patch_dim())
    throw std::invalid_argument("encode_image: pixel shape does not match the encoder");
  ag::Var pe = enc.patch_embed.forward(ag::constant(patch_rows), track);
  ag::Var cls = ag::leaf(enc.cls, track);
  std::vector<int> order, pos_index;
  order.reserve(static_cast<size_t>(batch) * (P + 1));
  for (int b = 0; b < batch; ++b) {
    order.push_back(0);
    pos_index.push_back(0);
    for (int p = 0; p < P; ++p) {
      order.push_back(1 + b * P + p);
      pos_index.push_back(1 + p);
    }
  }
  std::vector<ag::Var> parts{cls, pe};
  ag::Var x = ag::gather_rows(ag::concat_rows(parts), std::move(order));
  x = ag::add(x, ag::gather_rows(ag::leaf(enc.pos, track), std::move(pos_index)));
  return enc.ln_pre.forward(x, track);
}

std::vector<int> cls_rows(int batch, int seq) {
  std::vector<int> idx;
  for (int b = 0; b < batch; ++b) idx.push_back(b * seq);
  return idx;
}

}  // namespace

int block_sequence_length(const VAPromptPool* pool, int patches) {
  if (!pool) return 1 + patches;
  return 1 + pool->g_tokens + pool->selected_count() * pool->e_tokens + patches;
}

Matrix routing_query(const ImageEncoder& enc, const Matrix& patch_rows, int batch) {
  const int seq = enc.patches() + 1;
  ag::Var x = embed_tokens(enc, patch_rows, batch, false);
  for (const auto& blk : enc.blocks) x = blk.forward(x, batch, seq, false);
  ag::Var c = enc.ln_post.forward(ag::gather_rows(x, cls_rows(batch, seq)), false);
  return ag::l2_normalize_rows(c).value();
}

EncodeOutput encode_image(const ImageEncoder& enc, const VAPromptPool* pool, const Matrix& patch_rows, int batch,
                          bool track, bool per_layer_query, const Matrix* given_queries) {
  const int P = enc.patches();
  const int seq = P + 1;
  const int L = static_cast<int>(enc.blocks.size());
  EncodeOutput out;

  ag::Var x = embed_tokens(enc, patch_rows, batch, track);
  Matrix queries;
  if (pool && !per_layer_query) {
    if (given_queries && given_queries->rows() != batch) throw std::invalid_argument("encode_image: query count mismatch");
    queries = given_queries ? *given_queries : routing_query(enc, patch_rows, batch);
  }
  if (pool) {
    if (static_cast<int>(pool->layers.size()) != L) throw std::invalid_argument("encode_image: pool depth mismatch");
    out.routing.assign(static_cast<size_t>(batch), std::vector<std::vector<int>>(static_cast<size_t>(L)));
  }

  ag::Var penultimate;
  for (int l = 0; l < L; ++l) {
    const auto& blk = enc.blocks[static_cast<size_t>(l)];
    if (!pool) {
      x = blk.forward(x, batch, seq, track);
    } else {
      const auto& layer = pool->layers[static_cast<size_t>(l)];
      const int visible = pool->visible_slots();
      const int k = pool->selected_count();
      const int G = pool->g_tokens, E = pool->e_tokens;
      const int ext = block_sequence_length(pool, P);

      if (per_layer_query) {
        Matrix c = x.value()(Eigen::seq(0, Eigen::last, seq), Eigen::all);
        queries = ag::l2_normalize_rows(ag::constant(c)).value();
      }

      // Source rows: [packed hidden | general | tokens of each visible slot].
      std::vector<ag::Var> parts{x, ag::leaf(layer.general, track)};
      for (int s = 0; s < visible; ++s) parts.push_back(ag::leaf(layer.slots[static_cast<size_t>(s)].tokens, track));
      const int general_base = batch * seq;
      const int slot_base = general_base + G;

      std::vector<int> order;
      order.reserve(static_cast<size_t>(batch) * ext);
      for (int b = 0; b < batch; ++b) {
        std::vector<int> chosen = select_experts(*pool, queries.row(b).transpose(), l);
        order.push_back(b * seq);
        for (int g = 0; g < G; ++g) order.push_back(general_base + g);
        for (int s : chosen)
          for (int e = 0; e < E; ++e) order.push_back(slot_base + s * E + e);
        for (int p = 0; p < P; ++p) order.push_back(b * seq + 1 + p);
        out.routing[static_cast<size_t>(b)][static_cast<size_t>(l)] = std::move(chosen);
      }
      ag::Var extended = ag::gather_rows(ag::concat_rows(parts), std::move(order));

      std::vector<double> key_weight(static_cast<size_t>(ext), 1.0);
      for (int j = 1; j < 1 + G + k * E; ++j) key_weight[static_cast<size_t>(j)] = pool->gate;
      ag::Var y = blk.forward(extended, batch, ext, track, key_weight);

      std::vector<int> keep;
      keep.reserve(static_cast<size_t>(batch) * seq);
      for (int b = 0; b < batch; ++b) {
        keep.push_back(b * ext);
        for (int p = 0; p < P; ++p) keep.push_back(b * ext + 1 + G + k * E + p);
      }
      x = ag::gather_rows(y, std::move(keep));
    }
    if (l == L - 2) penultimate = ag::gather_rows(x, cls_rows(batch, seq));
  }

  ag::Var final_cls = ag::gather_rows(x, cls_rows(batch, seq));
  out.triple.v11 = penultimate;
  out.triple.v12 = enc.ln_post.forward(final_cls, track);
  out.triple.proj = enc.proj.forward(out.triple.v12, track);
  return out;
}

EncodeOutput encode_image(const ImageEncoder& enc, const VAPromptPool* pool,
                          std::span<const RenderedImage* const> images, bool track, bool per_layer_query) {
  return encode_image(enc, pool, patchify(images, enc.patch), static_cast<int>(images.size()), track,
                      per_layer_query);
}

TokenSequence tokenize_template(int identity, const TAPrompt& ta) {
  if (!ta.contains(identity)) throw std::out_of_range("tokenize_template: unknown identity " + std::to_string(identity));
  TokenSequence s;
  s.identity = identity;
  s.ids = {vocab::bos, vocab::a, vocab::photo, vocab::of, vocab::a};
  for (int m = 0; m < ta.tokens(); ++m) s.ids.push_back(-1);
  s.ids.insert(s.ids.end(), {vocab::person, vocab::period, vocab::eos});
  return s;
}

TextEncoder::TextEncoder(const ExperimentConfig& cfg, uint64_t seed)
    : width(cfg.embed_dim), context(16), proj_dim(cfg.proj_dim), heads(cfg.num_heads) {
  auto rng = seeded(seed, 0x7e);
  const double std_w = 1.0 / std::sqrt(static_cast<double>(width));
  token_embedding = Parameter(random_normal(vocab::size, width, 0.02, rng), false);
  pos = Parameter(random_normal(context, width, 0.01, rng), false);
  for (int l = 0; l < 2; ++l) {
    blocks.emplace_back(width, heads, 4, std_w, rng);
    blocks.back().set_trainable(false);
  }
  ln_final = LayerNorm(width);
  ln_final.set_trainable(false);
  proj = Linear(width, proj_dim, std_w, false, rng);
  proj.set_trainable(false);
}

void TextEncoder::collect(ParamList& out) {
  out.push_back({"text.token_embedding", &token_embedding, ParamGroup::backbone});
  out.push_back({"text.pos", &pos, ParamGroup::backbone});
  for (size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(out, "text.blocks." + std::to_string(l), ParamGroup::backbone);
  ln_final.collect(out, "text.ln_final", ParamGroup::backbone);
  proj.collect(out, "text.proj", ParamGroup::backbone);
}

ag::Var encode_text(const TextEncoder& enc, std::span<const TokenSequence> seqs, const TAPrompt& ta, bool track) {
  if (seqs.empty()) throw std::invalid_argument("encode_text: no sequences");
  const int len = static_cast<int>(seqs[0].ids.size());
  if (len > enc.context) throw std::invalid_argument("encode_text: sequence longer than context");
  const int batch = static_cast<int>(seqs.size());

  // Source rows: [vocabulary | slot rows of each distinct identity].
  std::vector<ag::Var> parts{ag::leaf(enc.token_embedding, track)};
  std::map<int, int> slot_base;
  int next = vocab::size;
  for (const auto& s : seqs) {
    if (static_cast<int>(s.ids.size()) != len) throw std::invalid_argument("encode_text: ragged batch");
    if (slot_base.contains(s.identity)) continue;
    slot_base[s.identity] = next;
    parts.push_back(ag::leaf(ta.slots(s.identity), track));
    next += ta.tokens();
  }
  std::vector<int> order, pos_index;
  for (const auto& s : seqs) {
    int m = 0;
    for (int i = 0; i < len; ++i) {
      const int id = s.ids[static_cast<size_t>(i)];
      order.push_back(id >= 0 ? id : slot_base[s.identity] + m++);
      pos_index.push_back(i);
    }
  }
  ag::Var x = ag::gather_rows(ag::concat_rows(parts), std::move(order));
  x = ag::add(x, ag::gather_rows(ag::leaf(enc.pos, track), std::move(pos_index)));
  for (const auto& blk : enc.blocks) x = blk.forward(x, batch, len, track);
  std::vector<int> eos;
  for (int b = 0; b < batch; ++b) eos.push_back(b * len + seqs[static_cast<size_t>(b)].eos_position());
  ag::Var e = enc.ln_final.forward(ag::gather_rows(x, std::move(eos)), track);
  return enc.proj.forward(e, track);
}

Matrix text_bank(const TextEncoder& enc, const TAPrompt& ta, std::span<const int> ids) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(ids.size());
  for (int id : ids) seqs.push_back(tokenize_template(id, ta));
  return ag::l2_normalize_rows(encode_text(enc, seqs, ta, false)).value();
}

}  // namespace pad
