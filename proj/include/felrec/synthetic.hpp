#pragma once

#include <cstdint>

#include "felrec/pipeline.hpp"

namespace felrec {

// Clustered interaction stream: users and items belong to latent clusters,
// users mostly pick items from their own cluster, entities enter the stream
// at random positions so the chronological tail contains new users and items.
struct SyntheticSpec {
  std::int64_t interactions = 100000;
  std::int64_t users = 2000;
  std::int64_t items = 500;
  std::int64_t clusters = 10;
  double off_cluster_rate = 0.1;
  std::uint64_t seed = 7;
  std::uint64_t id_offset = 0;  // shift raw ids to make datasets disjoint
};

Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace felrec
