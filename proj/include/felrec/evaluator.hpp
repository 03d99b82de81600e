#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "felrec/model.hpp"
#include "felrec/pipeline.hpp"

namespace felrec {

// Items eligible for recommendation; grows as the evaluated stream (and any
// warmup replay) introduces items, never shrinks.
class Catalog {
 public:
  void add(std::uint64_t item);
  bool contains(std::uint64_t item) const { return index_.count(item) != 0; }
  std::size_t size() const { return items_.size(); }
  std::size_t position(std::uint64_t item) const { return index_.at(item); }
  const std::vector<std::uint64_t>& items() const { return items_; }

 private:
  std::vector<std::uint64_t> items_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

// (strictly greater + 0.5 * ties with other items) / list size; in [0,1).
double normalized_rank(std::span<const double> scores, std::size_t gt_index);

// Ground truth against 100 negatives sampled uniformly from the catalog
// excluding it; hit when it ranks in the top 10 of the 101, ties resolved
// against the ground truth. Samples without replacement when possible;
// *with_replacement reports when the catalog was too small for that.
bool hit_at_10(std::span<const double> scores, std::size_t gt_index, Rng& rng,
               bool* with_replacement = nullptr);

double cosine(std::span<const real> a, std::span<const real> b);

struct PartitionStats {
  std::int64_t count = 0;
  double rank_sum = 0;
  std::int64_t hits = 0;

  double mean_rank() const { return count ? rank_sum / static_cast<double>(count) : 0.0; }
  double hit_rate() const { return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0; }
};

struct EvalReport {
  std::array<PartitionStats, 3> partitions;  // indexed by PartitionLabel
  PartitionStats total;
  std::int64_t hr_with_replacement = 0;
};

struct PopularityCurve {
  struct Cell {
    std::int64_t count = 0;
    double rank_sum = 0;
    double mean_rank() const { return count ? rank_sum / static_cast<double>(count) : 0.0; }
  };
  static constexpr int kBuckets = 7;
  static const std::array<std::pair<std::int64_t, std::int64_t>, kBuckets> bucket_bounds;
  static int bucket_of(std::int64_t prior_interactions);

  std::array<Cell, kBuckets> new_items;  // "I" series
  std::array<Cell, kBuckets> rest;       // "O+U" series
};

enum class EvalMode { continue_streaming, reset, zero_shot };
EvalMode parse_eval_mode(const std::string& s);

// Mutable evaluation-time state: model outputs live in the cache, everything
// else is derived from the portion of the stream walked so far.
struct StreamState {
  RepresentationCache cache;
  HistoryStore histories;
  Catalog catalog;
  std::unordered_map<std::uint64_t, std::int64_t> item_interactions;

  StreamState(std::int64_t dim, std::int64_t max_len) : cache(dim), histories(max_len) {}

  // Registers interactions without touching the model: histories, catalog,
  // popularity counts. Used to warm continue-mode state from the train split.
  void replay(std::span<const Interaction> stream);
};

struct EvalStreamConfig {
  bool compute_hr = true;
  bool popularity = true;
  bool nn_scoring = false;
  int nn_k = 10;
  std::uint64_t hr_seed = 1;
  std::ostream* trace = nullptr;  // optional CSV: index, partition, rank, hit
};

struct EvalOutcome {
  EvalReport report;
  PopularityCurve curve;
};

// Streams interactions in order: score the user's cached vector against the
// current catalog (the ground truth joins it first), record rank/HR under
// the interaction's partition, then refresh both representations from the
// updated histories. With labels == nullptr everything lands in `total`.
EvalOutcome evaluate_stream(std::span<const Interaction> stream,
                            const std::vector<PartitionLabel>* labels, ModelParams& params,
                            StreamState& state, const EvalStreamConfig& cfg);

// Walks the stream performing only the state updates (no scoring): used for
// continue-mode validation-split streaming before the measured test pass.
void stream_update_only(std::span<const Interaction> stream, ModelParams& params,
                        StreamState& state);

// Mean normalized rank over the stream; the cheap per-epoch validation pass.
double validation_rank(std::span<const Interaction> stream, ModelParams& params,
                       StreamState& state);

// Averaged cosine score lists of the k nearest users (by cosine, self
// excluded). Falls back to the user's own scores when no neighbor exists.
std::vector<double> nn_scores(std::uint64_t user, const StreamState& state, int k);

void write_report_csv(std::ostream& out, const EvalReport& report);
void write_report_table(std::ostream& out, const EvalReport& report);
void write_popularity_csv(std::ostream& out, const PopularityCurve& curve);

}  // namespace felrec
