#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "felrec/encoder.hpp"
#include "felrec/heads.hpp"

namespace felrec {

enum class Variant : std::uint8_t { Q = 0, P = 1 };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::Q;
  EncoderConfig encoder;
  HeadNorm head_norm = HeadNorm::batch;
  bool no_mlp = false;
  bool share_mlp = false;
  real tau = 0.07;
  std::int64_t queue_size = 8192;

  void validate() const;
};

struct ComponentCount {
  std::string name;
  std::int64_t params;
};

struct ModelParams {
  ModelConfig cfg;
  EncoderParams encoder;
  HeadsQ heads_q;  // active when variant == Q
  HeadsP heads_p;  // active when variant == P

  // Unique trainable tensors, stable order; shared tensors appear once.
  std::vector<Tensor> trainables;
  // Batch-norm running buffers, named, for serialization.
  std::vector<std::pair<std::string, std::vector<real>*>> buffers;

  static ModelParams init(const ModelConfig& cfg, Rng& rng);

  std::int64_t trainable_count() const;
  std::vector<ComponentCount> component_counts() const;
  void rebuild_registry();
};

}  // namespace felrec
