#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "felrec/evaluator.hpp"
#include "felrec/heads.hpp"
#include "felrec/model.hpp"
#include "felrec/optim.hpp"

namespace felrec {

struct TrainConfig {
  ModelConfig model;
  std::int64_t epochs = 100;
  std::int64_t warmup_epochs = 10;
  std::int64_t batch_size = 1024;
  real base_lr = 0.01;
  real momentum = 0.9;
  std::uint64_t seed = 42;
  int workers = 1;

  void validate() const;
};

struct EpochStats {
  double mean_loss = 0;
  std::int64_t batches = 0;
};

struct CurvePoint {
  std::int64_t epoch;
  double train_loss;
  double val_rank;
};

struct FitResult {
  std::int64_t best_epoch = -1;
  double best_val_rank = 0;
  std::vector<CurvePoint> curve;
};

// Observes the trainer after each applied batch; for instrumentation.
using BatchHook =
    std::function<void(std::int64_t batch_index, double loss, const RepresentationCache& cache)>;

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  // One pass over the stream: empty cache and queues, batch-start history
  // snapshots, encode both sides, variant loss, SGD step with the cosine
  // schedule, then fresh representations written back.
  EpochStats train_epoch(std::span<const Interaction> train, std::int64_t epoch,
                         const BatchHook& hook = nullptr);

  // Full protocol: per-epoch sandboxed validation (cloned state, rank-only),
  // best checkpoint kept and restored at the end.
  FitResult fit(const Splits& splits);

  const TrainConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const RepresentationCache& cache() const { return cache_; }
  RepresentationCache& cache() { return cache_; }
  OptimizerState& optimizer() { return opt_; }
  const NegativeQueue& user_queue() const { return user_queue_; }
  const NegativeQueue& item_queue() const { return item_queue_; }
  const ScheduleConfig& schedule() const { return schedule_; }
  void set_schedule_steps(std::int64_t steps_per_epoch);

 private:
  double run_validation(std::span<const Interaction> train, std::span<const Interaction> val);

  TrainConfig cfg_;
  ModelParams params_;
  OptimizerState opt_;
  RepresentationCache cache_;
  NegativeQueue user_queue_, item_queue_;
  HistoryStore hist_;
  ScheduleConfig schedule_;
};

// Self-contained training artifact: configuration, parameters, optimizer
// state, cache snapshot, best epoch and rank, training curve.
struct CheckpointData {
  TrainConfig config;
  ModelParams params;
  OptimizerState optimizer;
  RepresentationCache cache{128};
  std::int64_t epoch = -1;
  double val_rank = 0;
  std::vector<CurvePoint> curve;
};

void save_checkpoint(const std::string& path, const TrainConfig& cfg, ModelParams& params,
                     const OptimizerState& opt, const RepresentationCache& cache,
                     std::int64_t epoch, double val_rank, const std::vector<CurvePoint>& curve);
CheckpointData load_checkpoint(const std::string& path,
                               std::optional<Variant> expected_variant = std::nullopt);

}  // namespace felrec
