#include "felrec/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "felrec/optim.hpp"

namespace felrec {

SequenceBatch pack_sequences(const std::vector<std::vector<std::uint64_t>>& histories,
                             EntityKind element_kind, std::int64_t max_len) {
  SequenceBatch b;
  b.rows = static_cast<std::int64_t>(histories.size());
  b.element_kind = element_kind;
  std::int64_t width = 1;
  for (const auto& h : histories)
    width = std::max(width, std::min<std::int64_t>(static_cast<std::int64_t>(h.size()), max_len));
  b.len = width;
  b.ids.assign(static_cast<std::size_t>(b.rows * width), kPadId);
  b.mask.assign(static_cast<std::size_t>(b.rows * width), 0);
  for (std::int64_t r = 0; r < b.rows; ++r) {
    const auto& h = histories[static_cast<std::size_t>(r)];
    const std::int64_t n = std::min<std::int64_t>(static_cast<std::int64_t>(h.size()), max_len);
    // Keep the most recent max_len entries, oldest first.
    const std::size_t skip = h.size() - static_cast<std::size_t>(n);
    for (std::int64_t j = 0; j < n; ++j) {
      b.ids[static_cast<std::size_t>(r * width + j)] = h[skip + static_cast<std::size_t>(j)];
      b.mask[static_cast<std::size_t>(r * width + j)] = 1;
    }
  }
  return b;
}

SequenceBatch user_batch(std::span<const Interaction> block, const HistoryStore& hist) {
  std::vector<std::vector<std::uint64_t>> rows;
  rows.reserve(block.size());
  for (const auto& it : block) rows.push_back(hist.user_items(it.user));
  return pack_sequences(rows, EntityKind::item, hist.max_len());
}

SequenceBatch item_batch(std::span<const Interaction> block, const HistoryStore& hist) {
  std::vector<std::vector<std::uint64_t>> rows;
  rows.reserve(block.size());
  for (const auto& it : block) rows.push_back(hist.item_users(it.item));
  return pack_sequences(rows, EntityKind::user, hist.max_len());
}

Tensor linear(const LinearLayer& l, const Tensor& x) { return matmul_bias(x, l.w, l.b); }

void EncoderConfig::validate() const {
  if (model_dim <= 0 || ff_dim <= 0 || layers <= 0 || heads <= 0 || max_seq_len <= 0)
    throw NumericError("encoder config: dimensions must be positive");
  if (model_dim % heads != 0)
    throw NumericError("encoder config: model dim " + std::to_string(model_dim) +
                       " not divisible by " + std::to_string(heads) + " heads");
  if (dropout < 0 || dropout >= 1) throw NumericError("encoder config: dropout must be in [0,1)");
}

namespace {

LinearLayer init_linear(std::int64_t in, std::int64_t out, const std::string& name, Rng& rng) {
  // Fan-in scaled. A flat small stddev collapses the representation
  // recursion: with a near-zero Jacobian the encoder maps every cached
  // history to almost the same vector and the cache contracts to one
  // direction within an epoch.
  const real stddev = real(1) / std::sqrt(static_cast<real>(in));
  return {Tensor::param({in, out}, truncated_normal(in * out, stddev, rng), name + ".w"),
          Tensor::param({out}, std::vector<real>(static_cast<std::size_t>(out), real(0)),
                        name + ".b")};
}

LayerNormParams init_ln(std::int64_t d, const std::string& name, Rng& rng) {
  (void)rng;
  return {Tensor::param({d}, std::vector<real>(static_cast<std::size_t>(d), real(1)), name + ".g"),
          Tensor::param({d}, std::vector<real>(static_cast<std::size_t>(d), real(0)), name + ".b")};
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams p;
  p.cfg = cfg;
  const auto d = cfg.model_dim;
  for (std::int64_t i = 0; i < cfg.layers; ++i) {
    const std::string base = "encoder.layer" + std::to_string(i);
    EncoderLayerParams lp;
    lp.wq = init_linear(d, d, base + ".attn.q", rng);
    lp.wk = init_linear(d, d, base + ".attn.k", rng);
    lp.wv = init_linear(d, d, base + ".attn.v", rng);
    lp.wo = init_linear(d, d, base + ".attn.o", rng);
    lp.ff1 = init_linear(d, cfg.ff_dim, base + ".ff1", rng);
    lp.ff2 = init_linear(cfg.ff_dim, d, base + ".ff2", rng);
    lp.ln_attn = init_ln(d, base + ".ln_attn", rng);
    lp.ln_ff = init_ln(d, base + ".ln_ff", rng);
    p.layers.push_back(std::move(lp));
  }
  if (cfg.type_embedding)
    p.type_table = Tensor::param(
        {2, d}, truncated_normal(2 * d, real(1) / std::sqrt(static_cast<real>(d)), rng),
        "encoder.type");
  p.out = init_linear(d, d, "encoder.out", rng);
  return p;
}

Tensor attention_layer(const Tensor& x, const std::vector<std::uint8_t>& key_mask,
                       const EncoderLayerParams& p, const EncoderConfig& cfg, RunMode mode,
                       Rng* rng) {
  if (x.rank() != 3) throw NumericError("attention_layer: input must be (B,L,d), got " +
                                        shape_str(x.shape()));
  const std::int64_t b = x.dim(0), d = x.dim(2);
  const std::int64_t h = cfg.heads, dh = d / h;
  const bool train = mode == RunMode::train;
  if (train && !rng) throw NumericError("attention_layer: train mode needs an RNG");

  Tensor q = split_heads(linear(p.wq, x), h);
  Tensor k = split_heads(linear(p.wk, x), h);
  Tensor v = split_heads(linear(p.wv, x), h);

  Tensor scores = matmul_nt(q, k, real(1) / std::sqrt(static_cast<real>(dh)));
  Tensor attn = masked_softmax_rows(scores, key_mask, b);
  if (train) attn = dropout(attn, cfg.dropout, true, *rng);
  Tensor ctx = merge_heads(matmul(attn, v));
  Tensor out = linear(p.wo, ctx);
  if (train) out = dropout(out, cfg.dropout, true, *rng);
  Tensor y = layer_norm(add(x, out), p.ln_attn.gamma, p.ln_attn.beta);

  Tensor ff = linear(p.ff2, relu(linear(p.ff1, y)));
  if (train) ff = dropout(ff, cfg.dropout, true, *rng);
  return layer_norm(add(y, ff), p.ln_ff.gamma, p.ln_ff.beta);
}

Tensor encode(const SequenceBatch& batch, const RepresentationCache& cache,
              const EncoderParams& params, RunMode mode, Rng* rng) {
  const auto& cfg = params.cfg;
  const std::int64_t b = batch.rows, l = batch.len, d = cfg.model_dim;
  if (l > cfg.max_seq_len)
    throw NumericError("encode: sequence length " + std::to_string(l) + " exceeds limit " +
                       std::to_string(cfg.max_seq_len));
  if (cache.dim() != d) throw NumericError("encode: cache dimension mismatch");

  // Gathered cache vectors are detached constants; misses and pads are zeros.
  std::vector<real> input(static_cast<std::size_t>(b * l * d), real(0));
  for (std::int64_t r = 0; r < b; ++r)
    for (std::int64_t j = 0; j < l; ++j) {
      const std::uint64_t id = batch.ids[static_cast<std::size_t>(r * l + j)];
      if (id != kPadId) cache.get_into(batch.element_kind, id, input.data() + (r * l + j) * d);
    }
  Tensor x = Tensor::from({b, l, d}, std::move(input));

  if (cfg.type_embedding) {
    const std::int64_t row = batch.element_kind == EntityKind::user ? 0 : 1;
    Tensor type_row = reshape(gather_rows(params.type_table, {row}), {d});
    x = add(x, type_row);  // every position, pads included
  }

  for (const auto& layer : params.layers)
    x = attention_layer(x, batch.mask, layer, cfg, mode, rng);

  Tensor pooled = masked_mean(x, batch.mask);  // empty rows pool to zero
  Tensor out = linear(params.out, pooled);

  // Empty-history rows yield the zero vector, matching cache-miss semantics.
  std::vector<real> keep(static_cast<std::size_t>(b), real(0));
  bool any_empty = false;
  for (std::int64_t r = 0; r < b; ++r) {
    std::int64_t cnt = 0;
    for (std::int64_t j = 0; j < l; ++j) cnt += batch.mask[static_cast<std::size_t>(r * l + j)];
    keep[static_cast<std::size_t>(r)] = cnt > 0 ? real(1) : real(0);
    any_empty = any_empty || cnt == 0;
  }
  if (any_empty) out = row_scale(out, keep);
  return out;
}

}  // namespace felrec
