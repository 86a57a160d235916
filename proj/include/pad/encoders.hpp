#pragma once

#include "pad/nn.hpp"
#include "pad/prompts.hpp"
#include "pad/synthdata.hpp"

#include <optional>
#include <span>
#include <vector>

namespace pad {

struct ExperimentConfig;

/// Patch transformer with prompt injection hooks. Layout per image:
/// [CLS, patch_1..patch_P]; blocks see [CLS, G, E_selected, patches] when a
/// prompt pool is attached, and prompts are stripped after every block.
struct ImageEncoder {
  int image_h = 0, image_w = 0, patch = 0, width = 0, heads = 0, proj_dim = 0;
  Linear patch_embed;
  Parameter cls;
  Parameter pos;
  LayerNorm ln_pre;
  std::vector<TransformerBlock> blocks;
  LayerNorm ln_post;
  Linear proj;

  ImageEncoder() = default;
  ImageEncoder(const ExperimentConfig& cfg, uint64_t seed);

  int patches() const { return (image_h / patch) * (image_w / patch); }
  int patch_dim() const { return patch * patch * 3; }
  void collect(ParamList& out);
  /// Stem (embedding + ln_pre) and per-block trainable flags.
  void set_trainable(bool stem, const std::vector<bool>& block_trainable, bool head_trainable);
};

/// Multi-level features distilled from the teacher: penultimate-block CLS,
/// final CLS after the output norm, and its projection.
struct VisualTriple {
  ag::Var v11;
  ag::Var v12;
  ag::Var proj;
};

/// routing[image][layer] = selected slot indices.
using RoutingRecord = std::vector<std::vector<std::vector<int>>>;

struct EncodeOutput {
  VisualTriple triple;
  RoutingRecord routing;
};

/// Tokens per image inside a block: 1 + Lg + k * Le + patches with a pool,
/// 1 + patches without.
int block_sequence_length(const VAPromptPool* pool, int patches);

/// (batch * patches) x patch_dim rows, patch-major within each image.
Matrix patchify(std::span<const RenderedImage* const> images, int patch);

/// `queries` (batch x width, unit rows) are the routing queries; when null
/// they come from a promptless forward of `enc` itself.
EncodeOutput encode_image(const ImageEncoder& enc, const VAPromptPool* pool, const Matrix& patch_rows, int batch,
                          bool track, bool per_layer_query = false, const Matrix* queries = nullptr);
EncodeOutput encode_image(const ImageEncoder& enc, const VAPromptPool* pool,
                          std::span<const RenderedImage* const> images, bool track, bool per_layer_query = false);

/// Routing query per image: L2-normalized final CLS of a promptless forward.
/// Lifelong runs evaluate it on a frozen copy of the initial encoder.
Matrix routing_query(const ImageEncoder& enc, const Matrix& patch_rows, int batch);

/// Fixed synthetic vocabulary.
namespace vocab {
inline constexpr int pad = 0, bos = 1, eos = 2, a = 3, photo = 4, of = 5, person = 6, period = 7;
inline constexpr int size = 64;
}  // namespace vocab

/// Token ids with -1 marking the positions filled by TA slot embeddings.
struct TokenSequence {
  std::vector<int> ids;
  int identity = 0;
  int eos_position() const { return static_cast<int>(ids.size()) - 1; }
};

/// [BOS, a, photo, of, a, slot_1..slot_M, person, ., EOS]
TokenSequence tokenize_template(int identity, const TAPrompt& ta);

/// Randomly initialized transformer that is never updated; defines the
/// embedding space the text prompts are anchored in.
struct TextEncoder {
  int width = 0, context = 16, proj_dim = 0, heads = 4;
  Parameter token_embedding;  // vocab x width
  Parameter pos;              // context x width
  std::vector<TransformerBlock> blocks;
  LayerNorm ln_final;
  Linear proj;

  TextEncoder() = default;
  TextEncoder(const ExperimentConfig& cfg, uint64_t seed);
  void collect(ParamList& out);
};

/// Embeds each sequence (projected EOS output, unnormalized). Slot
/// embeddings are read from `ta`; gradients reach only its trainable rows.
ag::Var encode_text(const TextEncoder& enc, std::span<const TokenSequence> seqs, const TAPrompt& ta, bool track);

/// Unit-norm text embedding per identity, no gradient.
Matrix text_bank(const TextEncoder& enc, const TAPrompt& ta, std::span<const int> ids);

}  // namespace pad
