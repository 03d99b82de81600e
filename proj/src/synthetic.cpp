#include "felrec/synthetic.hpp"

#include <algorithm>

namespace felrec {

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.interactions < 10 || spec.users < 1 || spec.items < 1 || spec.clusters < 1 ||
      spec.items < spec.clusters)
    throw DataError("synthetic: need >=10 interactions and items >= clusters >= 1");
  Rng rng(spec.seed);
  const std::int64_t n = spec.interactions;

  // Entry position of each entity; the stream only picks among entered ones.
  auto entries = [&](std::int64_t count) {
    std::vector<std::int64_t> e(static_cast<std::size_t>(count));
    std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
    for (auto& v : e) v = dist(rng);
    std::sort(e.begin(), e.end());
    e[0] = 0;
    return e;
  };
  // Entities are ordered by entry time; index c mod clusters is the cluster.
  std::vector<std::int64_t> user_entry = entries(spec.users);
  std::vector<std::int64_t> item_entry = entries(spec.items);
  // Guarantee one active item per cluster from the start.
  for (std::int64_t c = 0; c < spec.clusters; ++c) item_entry[static_cast<std::size_t>(c)] = 0;

  std::vector<std::vector<std::int64_t>> cluster_items(static_cast<std::size_t>(spec.clusters));
  std::vector<std::size_t> active_per_cluster(static_cast<std::size_t>(spec.clusters), 0);

  Dataset data;
  data.stream.reserve(static_cast<std::size_t>(n));
  std::size_t next_user = 0, next_item = 0;
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<std::int64_t> active_items;  // in entry order
  for (std::int64_t k = 0; k < n; ++k) {
    while (next_user < user_entry.size() && user_entry[next_user] <= k) ++next_user;
    while (next_item < item_entry.size() && item_entry[next_item] <= k) {
      const auto item = static_cast<std::int64_t>(next_item);
      active_items.push_back(item);
      cluster_items[static_cast<std::size_t>(item % spec.clusters)].push_back(item);
      ++next_item;
    }
    std::uniform_int_distribution<std::size_t> upick(0, next_user - 1);
    const std::int64_t user = static_cast<std::int64_t>(upick(rng));
    const std::int64_t cluster = user % spec.clusters;

    const auto& pool = cluster_items[static_cast<std::size_t>(cluster)];
    std::int64_t item;
    if (!pool.empty() && coin(rng) >= spec.off_cluster_rate) {
      std::uniform_int_distribution<std::size_t> ipick(0, pool.size() - 1);
      item = pool[ipick(rng)];
    } else {
      std::uniform_int_distribution<std::size_t> ipick(0, active_items.size() - 1);
      item = active_items[ipick(rng)];
    }

    Interaction it;
    it.user = data.users.intern("u" + std::to_string(spec.id_offset + static_cast<std::uint64_t>(user)));
    it.item = data.items.intern("i" + std::to_string(spec.id_offset + static_cast<std::uint64_t>(item)));
    it.timestamp = k;
    it.index = k;
    data.stream.push_back(it);
  }
  return data;
}

}  // namespace felrec
