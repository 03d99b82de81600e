#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "felrec/encoder.hpp"
#include "support.hpp"

using namespace felrec;
using testsupport::max_grad_error;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig cfg;
  cfg.model_dim = 8;
  cfg.ff_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dropout = 0.1;
  cfg.max_seq_len = 8;
  return cfg;
}

RepresentationCache filled_cache(std::int64_t d, std::uint64_t n, Rng& rng) {
  RepresentationCache cache(d);
  std::uniform_real_distribution<real> dist(-1, 1);
  for (std::uint64_t id = 0; id < n; ++id) {
    std::vector<real> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = dist(rng);
    cache.put(EntityKind::item, id, v);
    cache.put(EntityKind::user, id, v);
  }
  return cache;
}

double max_abs_diff(const std::vector<real>& a, const std::vector<real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("encode output shape is (batch, model_dim)") {
  Rng rng(1);
  EncoderConfig cfg;  // defaults: d=128, L<=64
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache(128);
  SequenceBatch batch = pack_sequences({{1, 2, 3}, {4}}, EntityKind::item, 64);
  const Tensor out = encode(batch, cache, params, RunMode::eval, nullptr);
  CHECK(out.shape() == Shape{2, 128});
}

TEST_CASE("per-layer parameter count at the default dimensions") {
  Rng rng(2);
  EncoderParams params = init_encoder(EncoderConfig{}, rng);
  const auto& l = params.layers[0];
  const std::int64_t attn =
      l.wq.w.size() + l.wq.b.size() + l.wk.w.size() + l.wk.b.size() + l.wv.w.size() +
      l.wv.b.size() + l.wo.w.size() + l.wo.b.size();
  const std::int64_t ffn = l.ff1.w.size() + l.ff1.b.size() + l.ff2.w.size() + l.ff2.b.size();
  const std::int64_t norms = l.ln_attn.gamma.size() + l.ln_attn.beta.size() +
                             l.ln_ff.gamma.size() + l.ln_ff.beta.size();
  CHECK(attn == 66048);
  CHECK(ffn == 65920);
  CHECK(norms == 512);
  CHECK(attn + ffn + norms == 132480);
}

TEST_CASE("pack_sequences trims width and truncates to the window") {
  SequenceBatch b = pack_sequences({{1, 2}, {}, {3}}, EntityKind::item, 8);
  CHECK(b.rows == 3);
  CHECK(b.len == 2);
  CHECK(b.ids[0] == 1);
  CHECK(b.ids[1] == 2);
  CHECK(b.mask[2] == 0);  // empty row
  CHECK(b.ids[2] == kPadId);
  CHECK(b.mask[4] == 1);
  CHECK(b.mask[5] == 0);

  std::vector<std::uint64_t> long_hist;
  for (std::uint64_t i = 0; i < 20; ++i) long_hist.push_back(i);
  SequenceBatch t = pack_sequences({long_hist}, EntityKind::item, 8);
  CHECK(t.len == 8);
  CHECK(t.ids[0] == 12);  // most recent eight
  CHECK(t.ids[7] == 19);
}

TEST_CASE("eval mode is deterministic") {
  Rng rng(3);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);
  SequenceBatch batch = pack_sequences({{1, 2, 3, 4}, {5, 6}}, EntityKind::item, cfg.max_seq_len);
  const auto a = encode(batch, cache, params, RunMode::eval, nullptr).values();
  const auto b = encode(batch, cache, params, RunMode::eval, nullptr).values();
  CHECK(a == b);
}

TEST_CASE("permutation of a row's unmasked positions leaves the output unchanged") {
  Rng rng(4);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);

  SequenceBatch batch = pack_sequences({{1, 2, 3, 4, 5}}, EntityKind::item, cfg.max_seq_len);
  const auto base = encode(batch, cache, params, RunMode::eval, nullptr).values();

  SequenceBatch shuffled = pack_sequences({{4, 1, 5, 3, 2}}, EntityKind::item, cfg.max_seq_len);
  const auto perm = encode(shuffled, cache, params, RunMode::eval, nullptr).values();
  CHECK(max_abs_diff(base, perm) <= 1e-5);
}

TEST_CASE("appending pad positions never changes the output") {
  Rng rng(5);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);

  SequenceBatch tight = pack_sequences({{1, 2, 3}, {4, 5, 6}}, EntityKind::item, cfg.max_seq_len);
  const auto a = encode(tight, cache, params, RunMode::eval, nullptr).values();

  SequenceBatch padded = tight;
  padded.len = 7;
  padded.ids.assign(static_cast<std::size_t>(2 * 7), kPadId);
  padded.mask.assign(static_cast<std::size_t>(2 * 7), 0);
  for (std::int64_t r = 0; r < 2; ++r)
    for (std::int64_t j = 0; j < 3; ++j) {
      padded.ids[static_cast<std::size_t>(r * 7 + j)] =
          tight.ids[static_cast<std::size_t>(r * 3 + j)];
      padded.mask[static_cast<std::size_t>(r * 7 + j)] = 1;
    }
  const auto b = encode(padded, cache, params, RunMode::eval, nullptr).values();
  CHECK(max_abs_diff(a, b) <= 1e-7);
}

TEST_CASE("an all-pad row yields the zero vector") {
  Rng rng(6);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);
  SequenceBatch batch = pack_sequences({{}, {1, 2}}, EntityKind::item, cfg.max_seq_len);
  const auto out = encode(batch, cache, params, RunMode::eval, nullptr).values();
  for (std::int64_t j = 0; j < cfg.model_dim; ++j) CHECK(out[static_cast<std::size_t>(j)] == 0.0);
  double second_norm = 0;
  for (std::int64_t j = 0; j < cfg.model_dim; ++j) {
    const auto v = out[static_cast<std::size_t>(cfg.model_dim + j)];
    second_norm += v * v;
  }
  CHECK(second_norm > 0.0);
}

TEST_CASE("train mode with a mask: sequence length above the limit fails") {
  Rng rng(7);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache(cfg.model_dim);
  SequenceBatch batch;
  batch.rows = 1;
  batch.len = cfg.max_seq_len + 1;
  batch.ids.assign(static_cast<std::size_t>(batch.len), kPadId);
  batch.mask.assign(static_cast<std::size_t>(batch.len), 0);
  CHECK_THROWS_AS(encode(batch, cache, params, RunMode::eval, nullptr), NumericError);
}

TEST_CASE("gradient flows into every encoder parameter, cache inputs stay constant") {
  Rng rng(8);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);
  const auto before = cache.snapshot_bytes();

  SequenceBatch ub = pack_sequences({{1, 2, 3}, {4, 5, 6}}, EntityKind::item, cfg.max_seq_len);
  Rng drop_rng(99);
  Tensor out = encode(ub, cache, params, RunMode::train, &drop_rng);
  backward(mean_all(mul(out, out)));

  CHECK(params.type_table.has_grad());
  CHECK(params.out.w.has_grad());
  for (const auto& layer : params.layers) {
    CHECK(layer.wq.w.has_grad());
    CHECK(layer.ff2.w.has_grad());
    CHECK(layer.ln_ff.gamma.has_grad());
  }
  CHECK(cache.snapshot_bytes() == before);
}

TEST_CASE("type embedding row depends on the element kind") {
  Rng rng(9);
  const auto cfg = small_cfg();
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 16, rng);
  SequenceBatch items = pack_sequences({{1, 2, 3}}, EntityKind::item, cfg.max_seq_len);
  SequenceBatch users = items;
  users.element_kind = EntityKind::user;
  const auto a = encode(items, cache, params, RunMode::eval, nullptr).values();
  const auto b = encode(users, cache, params, RunMode::eval, nullptr).values();
  CHECK(max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("full encoder gradient matches finite differences in eval mode") {
  Rng rng(10);
  EncoderConfig cfg;
  cfg.model_dim = 4;
  cfg.ff_dim = 6;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_seq_len = 4;
  EncoderParams params = init_encoder(cfg, rng);
  RepresentationCache cache = filled_cache(cfg.model_dim, 8, rng);
  SequenceBatch batch = pack_sequences({{1, 2, 3}, {4}}, EntityKind::item, cfg.max_seq_len);

  auto fn = [&] {
    Tensor out = encode(batch, cache, params, RunMode::eval, nullptr);
    Rng wr(5);
    return mean_all(mul(out, testsupport::rand_tensor(out.shape(), wr)));
  };
  std::vector<Tensor> inputs;
  const auto& l = params.layers[0];
  for (const Tensor& t : {l.wq.w, l.wq.b, l.wk.w, l.wv.w, l.wo.w, l.ff1.w, l.ff1.b, l.ff2.w,
                          l.ln_attn.gamma, l.ln_attn.beta, l.ln_ff.gamma, params.type_table,
                          params.out.w, params.out.b})
    inputs.push_back(t);
  CHECK(max_grad_error(fn, inputs) < 1e-4);
}
