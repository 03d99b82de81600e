#include <doctest.h>

#include "felrec/model.hpp"

using namespace felrec;

namespace {

ModelParams build(Variant v, bool no_type = false, bool no_mlp = false, bool share = false,
                  HeadNorm norm = HeadNorm::batch) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.encoder.type_embedding = !no_type;
  cfg.no_mlp = no_mlp;
  cfg.share_mlp = share;
  cfg.head_norm = norm;
  Rng rng(1);
  return ModelParams::init(cfg, rng);
}

std::int64_t component(const ModelParams& p, const std::string& name) {
  for (const auto& c : p.component_counts())
    if (c.name == name) return c.params;
  return -1;
}

}  // namespace

// Analytic counts at the default dimensions (d=128, ff=256, N=3, h=4):
//   per layer 132,480; encoder with output linear 413,952; type table 256;
//   128->128 projection MLP with batch norm 33,280;
//   P projection 49,984; P predictor 33,600.
constexpr std::int64_t kEncoder = 413952;
constexpr std::int64_t kType = 256;
constexpr std::int64_t kMlpQ = 33280;
constexpr std::int64_t kProjP = 49984;
constexpr std::int64_t kPredP = 33600;

TEST_CASE("default Q parameter count") {
  const auto p = build(Variant::Q);
  const auto total = p.trainable_count();
  CHECK(total == kEncoder + kType + 2 * kMlpQ);
  CHECK(total == 480768);
  // Within two percent of the reported 0.48M.
  CHECK(total >= 480000 * 0.98);
  CHECK(total <= 480000 * 1.02);
  CHECK(component(p, "encoder") == kEncoder);
  CHECK(component(p, "type-table") == kType);
  CHECK(component(p, "projection g_user") == kMlpQ);
  CHECK(component(p, "projection g_item") == kMlpQ);
  CHECK(component(p, "total") == total);
}

TEST_CASE("default P parameter count") {
  const auto p = build(Variant::P);
  const auto total = p.trainable_count();
  CHECK(total == kEncoder + kType + 2 * kProjP + 2 * kPredP);
  CHECK(total == 581376);
  CHECK(total >= 580000 * 0.98);
  CHECK(total <= 580000 * 1.02);
  CHECK(component(p, "projection g_user") == kProjP);
  CHECK(component(p, "prediction h_user") == kPredP);
}

TEST_CASE("ablation switches shift the count by the analytic amount") {
  const auto base = build(Variant::Q).trainable_count();
  CHECK(build(Variant::Q, true).trainable_count() == base - kType);          // no type
  CHECK(build(Variant::Q, false, true).trainable_count() == base - 2 * kMlpQ);  // no mlp
  CHECK(build(Variant::Q, false, false, true).trainable_count() == base - kMlpQ);  // shared
  CHECK(build(Variant::Q, false, false, false, HeadNorm::layer).trainable_count() == base);

  const auto base_p = build(Variant::P).trainable_count();
  CHECK(build(Variant::P, false, false, true).trainable_count() == base_p - kProjP);
}

TEST_CASE("shared projection registers one parameter set") {
  auto p = build(Variant::Q, false, false, true);
  CHECK(component(p, "projection (shared)") == kMlpQ);
  CHECK(component(p, "projection g_user") == -1);
  // The alias really is the same storage.
  CHECK(p.heads_q.g_user.l1.w.node().get() == p.heads_q.g_item.l1.w.node().get());
}

TEST_CASE("variant parsing") {
  CHECK(parse_variant("q") == Variant::Q);
  CHECK(parse_variant("P") == Variant::P);
  CHECK_THROWS_AS(parse_variant("x"), DataError);
}
