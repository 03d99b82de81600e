#include "felrec/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <unordered_set>

namespace felrec {

void Catalog::add(std::uint64_t item) {
  if (index_.emplace(item, items_.size()).second) items_.push_back(item);
}

double normalized_rank(std::span<const double> scores, std::size_t gt_index) {
  if (scores.empty()) throw NumericError("normalized_rank: empty catalog");
  const double gt = scores[gt_index];
  std::int64_t greater = 0, ties = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == gt_index) continue;
    if (scores[i] > gt)
      ++greater;
    else if (scores[i] == gt)
      ++ties;
  }
  return (static_cast<double>(greater) + 0.5 * static_cast<double>(ties)) /
         static_cast<double>(scores.size());
}

bool hit_at_10(std::span<const double> scores, std::size_t gt_index, Rng& rng,
               bool* with_replacement) {
  constexpr int kNegatives = 100;
  constexpr int kTop = 10;
  const std::size_t n = scores.size();
  if (n == 0) throw NumericError("hit_at_10: empty catalog");
  const double gt = scores[gt_index];
  const std::size_t pool = n - 1;
  if (with_replacement) *with_replacement = pool < kNegatives;
  if (pool == 0) return true;  // the ground truth is the whole catalog

  std::int64_t at_or_above = 0;
  auto consider = [&](std::size_t idx) {
    if (scores[idx] >= gt) ++at_or_above;  // ties count against the ground truth
  };
  if (pool < kNegatives) {
    // Too few distinct candidates: sample with replacement, flagged.
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    for (int s = 0; s < kNegatives; ++s) {
      std::size_t idx;
      do {
        idx = dist(rng);
      } while (idx == gt_index);
      consider(idx);
    }
  } else {
    // Floyd's sampling of kNegatives distinct indices from the pool.
    std::unordered_set<std::size_t> chosen;
    for (std::size_t j = pool - kNegatives; j < pool; ++j) {
      std::uniform_int_distribution<std::size_t> dist(0, j);
      std::size_t t = dist(rng);
      if (!chosen.insert(t).second) t = j, chosen.insert(j);
      // Map pool position to a catalog index, skipping the ground truth.
      consider(t >= gt_index ? t + 1 : t);
    }
  }
  return at_or_above < kTop;
}

double cosine(std::span<const real> a, std::span<const real> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;  // zero-norm vectors score 0
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

const std::array<std::pair<std::int64_t, std::int64_t>, PopularityCurve::kBuckets>
    PopularityCurve::bucket_bounds = {{{0, 0},
                                       {1, 3},
                                       {4, 15},
                                       {16, 63},
                                       {64, 255},
                                       {256, 1023},
                                       {1024, std::numeric_limits<std::int64_t>::max()}}};

int PopularityCurve::bucket_of(std::int64_t prior) {
  for (int i = 0; i < kBuckets; ++i)
    if (prior <= bucket_bounds[static_cast<std::size_t>(i)].second) return i;
  return kBuckets - 1;
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "continue") return EvalMode::continue_streaming;
  if (s == "reset") return EvalMode::reset;
  if (s == "zero-shot") return EvalMode::zero_shot;
  throw DataError("unknown eval mode '" + s + "' (expected continue|reset|zero-shot)");
}

void StreamState::replay(std::span<const Interaction> stream) {
  for (const auto& it : stream) {
    histories.add(it);
    catalog.add(it.item);
    ++item_interactions[it.item];
  }
}

namespace {

std::vector<double> score_catalog(const std::vector<real>& user_vec, const StreamState& state) {
  const auto& items = state.catalog.items();
  std::vector<double> scores(items.size());
  std::vector<real> item_vec(static_cast<std::size_t>(state.cache.dim()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    state.cache.get_into(EntityKind::item, items[i], item_vec.data());
    scores[i] = cosine(user_vec, item_vec);
  }
  return scores;
}

// Refresh both representations from histories that include the interaction.
void refresh_representations(const Interaction& it, ModelParams& params, StreamState& state) {
  SequenceBatch ub = pack_sequences({state.histories.user_items(it.user)}, EntityKind::item,
                                    state.histories.max_len());
  SequenceBatch xb = pack_sequences({state.histories.item_users(it.item)}, EntityKind::user,
                                    state.histories.max_len());
  Tensor u = encode(ub, state.cache, params.encoder, RunMode::eval, nullptr);
  Tensor x = encode(xb, state.cache, params.encoder, RunMode::eval, nullptr);
  state.cache.put(EntityKind::user, it.user, u.values());
  state.cache.put(EntityKind::item, it.item, x.values());
}

}  // namespace

std::vector<double> nn_scores(std::uint64_t user, const StreamState& state, int k) {
  const std::vector<real> self = state.cache.get(EntityKind::user, user);
  struct Neighbor {
    double sim;
    std::uint64_t id;
  };
  std::vector<Neighbor> best;
  std::vector<real> vec(static_cast<std::size_t>(state.cache.dim()));
  for (std::uint64_t id : state.cache.ids(EntityKind::user)) {
    if (id == user) continue;
    state.cache.get_into(EntityKind::user, id, vec.data());
    best.push_back({cosine(self, vec), id});
  }
  if (best.empty()) return score_catalog(self, state);
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), best.size());
  std::partial_sort(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(keep), best.end(),
                    [](const Neighbor& a, const Neighbor& b) {
                      return a.sim != b.sim ? a.sim > b.sim : a.id < b.id;
                    });
  std::vector<double> avg(state.catalog.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto neighbor_vec = state.cache.get(EntityKind::user, best[i].id);
    const auto s = score_catalog(neighbor_vec, state);
    for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += s[j];
  }
  for (auto& v : avg) v /= static_cast<double>(keep);
  return avg;
}

EvalOutcome evaluate_stream(std::span<const Interaction> stream,
                            const std::vector<PartitionLabel>* labels, ModelParams& params,
                            StreamState& state, const EvalStreamConfig& cfg) {
  if (labels && labels->size() != stream.size())
    throw DataError("evaluate_stream: " + std::to_string(labels->size()) + " labels for " +
                    std::to_string(stream.size()) + " interactions");
  EvalOutcome out;
  Rng hr_rng(cfg.hr_seed);
  if (cfg.trace) *cfg.trace << "index,partition,rank,hit\n";

  for (std::size_t i = 0; i < stream.size(); ++i) {
    const Interaction& it = stream[i];
    state.catalog.add(it.item);  // the ground truth always joins the catalog

    std::vector<double> scores;
    if (cfg.nn_scoring) {
      scores = nn_scores(it.user, state, cfg.nn_k);
    } else {
      scores = score_catalog(state.cache.get(EntityKind::user, it.user), state);
    }
    const std::size_t gt_idx = state.catalog.position(it.item);
    const double rank = normalized_rank(scores, gt_idx);

    int hit = -1;
    if (cfg.compute_hr) {
      bool with_repl = false;
      hit = hit_at_10(scores, gt_idx, hr_rng, &with_repl) ? 1 : 0;
      if (with_repl) ++out.report.hr_with_replacement;
    }

    const PartitionLabel label = labels ? (*labels)[i] : PartitionLabel::observed;
    auto record = [&](PartitionStats& st) {
      ++st.count;
      st.rank_sum += rank;
      if (hit == 1) ++st.hits;
    };
    if (labels) record(out.report.partitions[static_cast<std::size_t>(label)]);
    record(out.report.total);

    if (cfg.popularity) {
      const std::int64_t prior = [&] {
        auto itc = state.item_interactions.find(it.item);
        return itc == state.item_interactions.end() ? std::int64_t(0) : itc->second;
      }();
      auto& cell = (labels && label == PartitionLabel::new_items)
                       ? out.curve.new_items[static_cast<std::size_t>(PopularityCurve::bucket_of(prior))]
                       : out.curve.rest[static_cast<std::size_t>(PopularityCurve::bucket_of(prior))];
      ++cell.count;
      cell.rank_sum += rank;
    }

    if (cfg.trace)
      *cfg.trace << it.index << ',' << (labels ? partition_name(label) : "total") << ',' << rank
                 << ',' << (hit == 1 ? 1 : 0) << "\n";

    // State update: the interaction enters the histories before re-encoding.
    state.histories.add(it);
    ++state.item_interactions[it.item];
    refresh_representations(it, params, state);
  }
  return out;
}

void stream_update_only(std::span<const Interaction> stream, ModelParams& params,
                        StreamState& state) {
  for (const auto& it : stream) {
    state.catalog.add(it.item);
    state.histories.add(it);
    ++state.item_interactions[it.item];
    refresh_representations(it, params, state);
  }
}

double validation_rank(std::span<const Interaction> stream, ModelParams& params,
                       StreamState& state) {
  EvalStreamConfig cfg;
  cfg.compute_hr = false;
  cfg.popularity = false;
  const auto outcome = evaluate_stream(stream, nullptr, params, state, cfg);
  return outcome.report.total.mean_rank();
}

void write_report_csv(std::ostream& out, const EvalReport& report) {
  out << "partition,count,mean_rank,hr_at_10\n";
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& p = report.partitions[i];
    out << partition_name(static_cast<PartitionLabel>(i)) << ',' << p.count << ',' << p.mean_rank()
        << ',' << p.hit_rate() << "\n";
  }
  out << "total," << report.total.count << ',' << report.total.mean_rank() << ','
      << report.total.hit_rate() << "\n";
}

void write_report_table(std::ostream& out, const EvalReport& report) {
  auto line = [&](const char* name, const PartitionStats& p) {
    out << "  " << name << ": count=" << p.count << " rank=" << p.mean_rank()
        << " hr@10=" << p.hit_rate() * 100.0 << "%\n";
  };
  for (std::size_t i = 0; i < 3; ++i)
    line(partition_name(static_cast<PartitionLabel>(i)), report.partitions[i]);
  line("total", report.total);
  if (report.hr_with_replacement)
    out << "  note: " << report.hr_with_replacement
        << " interactions sampled HR negatives with replacement (small catalog)\n";
}

void write_popularity_csv(std::ostream& out, const PopularityCurve& curve) {
  out << "bucket_lo,bucket_hi,series,count,mean_rank\n";
  for (int b = 0; b < PopularityCurve::kBuckets; ++b) {
    const auto [lo, hi] = PopularityCurve::bucket_bounds[static_cast<std::size_t>(b)];
    const auto& ni = curve.new_items[static_cast<std::size_t>(b)];
    const auto& re = curve.rest[static_cast<std::size_t>(b)];
    out << lo << ',' << hi << ",I," << ni.count << ',' << ni.mean_rank() << "\n";
    out << lo << ',' << hi << ",O+U," << re.count << ',' << re.mean_rank() << "\n";
  }
}

}  // namespace felrec
