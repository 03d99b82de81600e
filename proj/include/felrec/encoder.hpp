#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "felrec/cache.hpp"
#include "felrec/pipeline.hpp"
#include "felrec/tensor.hpp"

namespace felrec {

enum class RunMode { train, eval };

// Pad slot in a sequence batch; reads as the zero vector via the cache-miss path.
constexpr std::uint64_t kPadId = ~0ull;

// A padded block of id sequences. element_kind is the kind of the entities
// inside the sequences: items for user rows, users for item rows. Real
// positions precede pads.
struct SequenceBatch {
  std::int64_t rows = 0;
  std::int64_t len = 0;
  std::vector<std::uint64_t> ids;   // rows * len
  std::vector<std::uint8_t> mask;   // rows * len, 1 = real
  EntityKind element_kind = EntityKind::item;
};

// Builds the batch from per-row histories. The width is the longest history
// in the block (at least 1, at most max_len); trimming trailing pad columns
// does not change encode outputs.
SequenceBatch pack_sequences(const std::vector<std::vector<std::uint64_t>>& histories,
                             EntityKind element_kind, std::int64_t max_len);
SequenceBatch user_batch(std::span<const Interaction> block, const HistoryStore& hist);
SequenceBatch item_batch(std::span<const Interaction> block, const HistoryStore& hist);

struct LinearLayer {
  Tensor w;  // (in, out)
  Tensor b;  // (out)
};
Tensor linear(const LinearLayer& l, const Tensor& x);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct EncoderLayerParams {
  LinearLayer wq, wk, wv, wo;
  LinearLayer ff1, ff2;
  LayerNormParams ln_attn, ln_ff;
};

struct EncoderConfig {
  std::int64_t model_dim = 128;
  std::int64_t ff_dim = 256;
  std::int64_t layers = 3;
  std::int64_t heads = 4;
  real dropout = 0.1;
  std::int64_t max_seq_len = 64;
  bool type_embedding = true;

  void validate() const;
};

struct EncoderParams {
  EncoderConfig cfg;
  std::vector<EncoderLayerParams> layers;
  Tensor type_table;  // (2, d): row 0 = user, row 1 = item; undefined when disabled
  LinearLayer out;
};

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng);

// One bidirectional self-attention block (post-norm): multi-head attention
// over unmasked keys, residual + layer norm, position-wise feed-forward,
// residual + layer norm. Dropout on attention weights and sublayer outputs
// in train mode.
Tensor attention_layer(const Tensor& x, const std::vector<std::uint8_t>& key_mask,
                       const EncoderLayerParams& p, const EncoderConfig& cfg, RunMode mode,
                       Rng* rng);

// Sequence -> d-vector per row: gather cached vectors (detached constants,
// zeros on miss), add the type-embedding row for the element kind, run the
// attention stack, average unmasked positions, apply the output linear.
// Rows with no unmasked positions yield the zero vector.
Tensor encode(const SequenceBatch& batch, const RepresentationCache& cache,
              const EncoderParams& params, RunMode mode, Rng* rng);

}  // namespace felrec
