#include "felrec/model.hpp"

#include <unordered_set>

namespace felrec {

const char* variant_name(Variant v) { return v == Variant::Q ? "q" : "p"; }

Variant parse_variant(const std::string& s) {
  if (s == "q" || s == "Q") return Variant::Q;
  if (s == "p" || s == "P") return Variant::P;
  throw DataError("unknown variant '" + s + "' (expected q or p)");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (tau <= 0) throw NumericError("config: temperature must be positive");
  if (queue_size <= 0) throw NumericError("config: queue size must be positive");
  if (variant == Variant::P && encoder.model_dim % 2 != 0)
    throw NumericError("config: P variant needs an even model dimension");
}

namespace {

void collect_linear(const LinearLayer& l, std::vector<Tensor>& out) {
  out.push_back(l.w);
  out.push_back(l.b);
}

void collect_mlp(MlpParams& m, std::vector<Tensor>& params,
                 std::vector<std::pair<std::string, std::vector<real>*>>& buffers) {
  collect_linear(m.l1, params);
  params.push_back(m.gamma);
  params.push_back(m.beta);
  collect_linear(m.l2, params);
  if (m.norm_kind == HeadNorm::batch) {
    buffers.emplace_back(m.gamma.name() + ".running_mean", &m.running_mean);
    buffers.emplace_back(m.gamma.name() + ".running_var", &m.running_var);
  }
}

std::int64_t count_unique(const std::vector<Tensor>& ts) {
  std::unordered_set<const TensorNode*> seen;
  std::int64_t total = 0;
  for (const auto& t : ts)
    if (seen.insert(t.node().get()).second) total += t.size();
  return total;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  p.encoder = init_encoder(cfg.encoder, rng);
  const auto d = cfg.encoder.model_dim;
  if (cfg.variant == Variant::Q)
    p.heads_q = init_heads_q(d, cfg.head_norm, cfg.no_mlp, cfg.share_mlp, rng);
  else
    p.heads_p = init_heads_p(d, cfg.head_norm, cfg.no_mlp, cfg.share_mlp, rng);
  p.rebuild_registry();
  return p;
}

void ModelParams::rebuild_registry() {
  std::vector<Tensor> all;
  buffers.clear();
  for (auto& layer : encoder.layers) {
    collect_linear(layer.wq, all);
    collect_linear(layer.wk, all);
    collect_linear(layer.wv, all);
    collect_linear(layer.wo, all);
    collect_linear(layer.ff1, all);
    collect_linear(layer.ff2, all);
    all.push_back(layer.ln_attn.gamma);
    all.push_back(layer.ln_attn.beta);
    all.push_back(layer.ln_ff.gamma);
    all.push_back(layer.ln_ff.beta);
  }
  if (encoder.cfg.type_embedding) all.push_back(encoder.type_table);
  collect_linear(encoder.out, all);
  if (!cfg.no_mlp) {
    if (cfg.variant == Variant::Q) {
      collect_mlp(heads_q.g_user, all, buffers);
      if (!cfg.share_mlp) collect_mlp(heads_q.g_item, all, buffers);
    } else {
      collect_mlp(heads_p.g_user, all, buffers);
      if (!cfg.share_mlp) collect_mlp(heads_p.g_item, all, buffers);
      collect_mlp(heads_p.h_user, all, buffers);
      collect_mlp(heads_p.h_item, all, buffers);
    }
  }
  trainables.clear();
  std::unordered_set<const TensorNode*> seen;
  for (auto& t : all)
    if (seen.insert(t.node().get()).second) trainables.push_back(t);
}

std::int64_t ModelParams::trainable_count() const { return count_unique(trainables); }

std::vector<ComponentCount> ModelParams::component_counts() const {
  std::vector<ComponentCount> out;
  std::vector<Tensor> enc;
  for (auto& layer : const_cast<ModelParams*>(this)->encoder.layers) {
    collect_linear(layer.wq, enc);
    collect_linear(layer.wk, enc);
    collect_linear(layer.wv, enc);
    collect_linear(layer.wo, enc);
    collect_linear(layer.ff1, enc);
    collect_linear(layer.ff2, enc);
    enc.push_back(layer.ln_attn.gamma);
    enc.push_back(layer.ln_attn.beta);
    enc.push_back(layer.ln_ff.gamma);
    enc.push_back(layer.ln_ff.beta);
  }
  collect_linear(encoder.out, enc);
  out.push_back({"encoder", count_unique(enc)});
  out.push_back({"type-table", encoder.cfg.type_embedding ? encoder.type_table.size() : 0});

  auto mlp_count = [](const MlpParams& m) {
    std::vector<Tensor> ts;
    collect_linear(m.l1, ts);
    ts.push_back(m.gamma);
    ts.push_back(m.beta);
    collect_linear(m.l2, ts);
    return count_unique(ts);
  };
  if (!cfg.no_mlp) {
    if (cfg.variant == Variant::Q) {
      if (cfg.share_mlp) {
        out.push_back({"projection (shared)", mlp_count(heads_q.g_user)});
      } else {
        out.push_back({"projection g_user", mlp_count(heads_q.g_user)});
        out.push_back({"projection g_item", mlp_count(heads_q.g_item)});
      }
    } else {
      if (cfg.share_mlp) {
        out.push_back({"projection (shared)", mlp_count(heads_p.g_user)});
      } else {
        out.push_back({"projection g_user", mlp_count(heads_p.g_user)});
        out.push_back({"projection g_item", mlp_count(heads_p.g_item)});
      }
      out.push_back({"prediction h_user", mlp_count(heads_p.h_user)});
      out.push_back({"prediction h_item", mlp_count(heads_p.h_item)});
    }
  }
  out.push_back({"total", trainable_count()});
  return out;
}

}  // namespace felrec
