#include "felrec/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace felrec {

void TrainConfig::validate() const {
  model.validate();
  if (epochs <= 0 || batch_size <= 0 || warmup_epochs < 0)
    throw NumericError("train config: epochs and batch size must be positive");
  if (warmup_epochs >= epochs)
    throw NumericError("train config: warmup epochs must be smaller than total epochs");
  if (base_lr <= 0 || momentum < 0 || momentum >= 1)
    throw NumericError("train config: bad learning rate or momentum");
  if (workers < 1) throw NumericError("train config: workers must be >= 1");
}

namespace {

std::int64_t queue_dim(const ModelConfig& cfg) {
  const auto d = cfg.encoder.model_dim;
  if (cfg.variant == Variant::P) return cfg.no_mlp ? d : d / 2;
  return d;  // Q projections keep the model dimension
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      params_([&] {
        cfg.validate();
        Rng rng(cfg.seed);
        return ModelParams::init(cfg.model, rng);
      }()),
      opt_(OptimizerState::init(params_.trainables, cfg.base_lr, cfg.momentum)),
      cache_(cfg.model.encoder.model_dim),
      user_queue_(cfg.model.queue_size, queue_dim(cfg.model)),
      item_queue_(cfg.model.queue_size, queue_dim(cfg.model)),
      hist_(cfg.model.encoder.max_seq_len) {
  schedule_.total_epochs = cfg.epochs;
  schedule_.warmup_epochs = cfg.warmup_epochs;
  schedule_.steps_per_epoch = 1;
  schedule_.base_lr = cfg.base_lr;
  set_num_threads(cfg.workers);
}

void Trainer::set_schedule_steps(std::int64_t steps_per_epoch) {
  schedule_.steps_per_epoch = steps_per_epoch > 0 ? steps_per_epoch : 1;
}

EpochStats Trainer::train_epoch(std::span<const Interaction> train, std::int64_t epoch,
                                const BatchHook& hook) {
  // Every epoch starts from scratch: representations are recomputed, the
  // negatives must match the current representation scale, and histories
  // grow with the replayed prefix only.
  cache_.clear();
  user_queue_.clear();
  item_queue_.clear();
  hist_.clear();

  EpochStats stats;
  double loss_sum = 0;
  const auto batches = batch_stream(train, cfg_.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto block = batches[b];
    Rng rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), b));

    SequenceBatch ub = user_batch(block, hist_);
    SequenceBatch xb = item_batch(block, hist_);
    Tensor u_repr = encode(ub, cache_, params_.encoder, RunMode::train, &rng);
    Tensor x_repr = encode(xb, cache_, params_.encoder, RunMode::train, &rng);

    Tensor loss = cfg_.model.variant == Variant::Q
                      ? loss_q(u_repr, x_repr, params_.heads_q, user_queue_, item_queue_,
                               cfg_.model.tau, RunMode::train)
                      : loss_p(u_repr, x_repr, params_.heads_p, RunMode::train);
    if (!std::isfinite(loss.value()))
      throw NumericError("train_epoch: non-finite loss at batch " + std::to_string(b) +
                         " of epoch " + std::to_string(epoch));
    backward(loss);
    sgd_step(params_.trainables, opt_, cosine_lr(opt_.step_count, schedule_));

    // Fresh representations, batch-start inputs; the latest row of a
    // duplicated entity wins.
    const auto d = cache_.dim();
    std::vector<real> row(static_cast<std::size_t>(d));
    for (std::size_t r = 0; r < block.size(); ++r) {
      std::copy_n(u_repr.values().begin() + static_cast<std::int64_t>(r) * d, d, row.begin());
      cache_.put(EntityKind::user, block[r].user, row);
      std::copy_n(x_repr.values().begin() + static_cast<std::int64_t>(r) * d, d, row.begin());
      cache_.put(EntityKind::item, block[r].item, row);
    }
    for (const auto& it : block) hist_.add(it);

    loss_sum += loss.value();
    ++stats.batches;
    if (hook) hook(static_cast<std::int64_t>(b), loss.value(), cache_);
  }
  stats.mean_loss = stats.batches ? loss_sum / static_cast<double>(stats.batches) : 0.0;
  return stats;
}

double Trainer::run_validation(std::span<const Interaction> train,
                               std::span<const Interaction> val) {
  // Sandboxed: cloned cache and data-derived state, no parameter updates.
  StreamState state(cache_.dim(), cfg_.model.encoder.max_seq_len);
  state.cache = cache_.clone();
  state.replay(train);
  return validation_rank(val, params_, state);
}

namespace {

struct Snapshot {
  std::vector<std::vector<real>> param_values;
  std::vector<std::vector<real>> buffer_values;
  OptimizerState opt;
  RepresentationCache cache{1};
};

Snapshot take_snapshot(ModelParams& params, const OptimizerState& opt,
                       const RepresentationCache& cache) {
  Snapshot s;
  for (auto& t : params.trainables) s.param_values.push_back(t.values());
  for (auto& [name, buf] : params.buffers) s.buffer_values.push_back(*buf);
  s.opt = opt;
  s.cache = cache.clone();
  return s;
}

void restore_snapshot(const Snapshot& s, ModelParams& params, OptimizerState& opt,
                      RepresentationCache& cache) {
  for (std::size_t i = 0; i < params.trainables.size(); ++i)
    params.trainables[i].raw_values() = s.param_values[i];
  for (std::size_t i = 0; i < params.buffers.size(); ++i)
    *params.buffers[i].second = s.buffer_values[i];
  opt = s.opt;
  cache = s.cache;
}

}  // namespace

FitResult Trainer::fit(const Splits& splits) {
  const auto n = static_cast<std::int64_t>(splits.train.size());
  set_schedule_steps((n + cfg_.batch_size - 1) / cfg_.batch_size);

  FitResult result;
  Snapshot best;
  for (std::int64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const EpochStats stats = train_epoch(splits.train, epoch);
    const double val_rank = run_validation(splits.train, splits.val);
    result.curve.push_back({epoch, stats.mean_loss, val_rank});
    if (result.best_epoch < 0 || val_rank < result.best_val_rank) {
      result.best_epoch = epoch;
      result.best_val_rank = val_rank;
      best = take_snapshot(params_, opt_, cache_);
    }
  }
  restore_snapshot(best, params_, opt_, cache_);
  return result;
}

// ------------------------------- checkpoints -------------------------------

namespace {

constexpr char kCkptMagic[4] = {'F', 'E', 'L', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

template <class T>
void wr(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T rd(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

void wr_string(std::ostream& out, const std::string& s) {
  wr(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string rd_string(std::istream& in) {
  const auto len = rd<std::uint32_t>(in, "string length");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw DataError("checkpoint: truncated string");
  return s;
}

void wr_reals(std::ostream& out, const std::vector<real>& v) {
  wr(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(real)));
}

std::vector<real> rd_reals(std::istream& in, const char* what) {
  const auto len = rd<std::uint64_t>(in, what);
  std::vector<real> v(static_cast<std::size_t>(len));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(real)));
  if (!in) throw DataError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& cfg, ModelParams& params,
                     const OptimizerState& opt, const RepresentationCache& cache,
                     std::int64_t epoch, double val_rank, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  out.write(kCkptMagic, 4);
  wr(out, kCkptVersion);
  wr(out, static_cast<std::uint8_t>(cfg.model.variant));
  wr(out, static_cast<std::uint8_t>(cfg.model.head_norm));
  wr(out, static_cast<std::uint8_t>(cfg.model.no_mlp));
  wr(out, static_cast<std::uint8_t>(cfg.model.share_mlp));
  const auto& e = cfg.model.encoder;
  wr(out, e.model_dim);
  wr(out, e.ff_dim);
  wr(out, e.layers);
  wr(out, e.heads);
  wr(out, e.max_seq_len);
  wr(out, e.dropout);
  wr(out, static_cast<std::uint8_t>(e.type_embedding));
  wr(out, cfg.model.tau);
  wr(out, cfg.model.queue_size);
  wr(out, cfg.epochs);
  wr(out, cfg.warmup_epochs);
  wr(out, cfg.batch_size);
  wr(out, cfg.base_lr);
  wr(out, cfg.momentum);
  wr(out, cfg.seed);
  wr(out, epoch);
  wr(out, val_rank);

  wr(out, static_cast<std::uint64_t>(params.trainables.size()));
  for (auto& t : params.trainables) {
    wr_string(out, t.name());
    wr(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) wr(out, d);
    wr_reals(out, t.values());
  }
  wr(out, static_cast<std::uint64_t>(params.buffers.size()));
  for (auto& [name, buf] : params.buffers) {
    wr_string(out, name);
    wr_reals(out, *buf);
  }
  wr(out, opt.step_count);
  wr(out, opt.base_lr);
  wr(out, opt.mu);
  wr(out, static_cast<std::uint64_t>(opt.momentum.size()));
  for (const auto& m : opt.momentum) wr_reals(out, m);

  wr(out, static_cast<std::uint64_t>(curve.size()));
  for (const auto& p : curve) {
    wr(out, p.epoch);
    wr(out, p.train_loss);
    wr(out, p.val_rank);
  }
  cache.snapshot_stream(out);
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path, std::optional<Variant> expected_variant) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "'");
  const auto version = rd<std::uint32_t>(in, "version");
  if (version != kCkptVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));

  TrainConfig cfg;
  cfg.model.variant = static_cast<Variant>(rd<std::uint8_t>(in, "variant"));
  cfg.model.head_norm = static_cast<HeadNorm>(rd<std::uint8_t>(in, "head norm"));
  cfg.model.no_mlp = rd<std::uint8_t>(in, "no_mlp") != 0;
  cfg.model.share_mlp = rd<std::uint8_t>(in, "share_mlp") != 0;
  auto& e = cfg.model.encoder;
  e.model_dim = rd<std::int64_t>(in, "model dim");
  e.ff_dim = rd<std::int64_t>(in, "ff dim");
  e.layers = rd<std::int64_t>(in, "layers");
  e.heads = rd<std::int64_t>(in, "heads");
  e.max_seq_len = rd<std::int64_t>(in, "max seq len");
  e.dropout = rd<real>(in, "dropout");
  e.type_embedding = rd<std::uint8_t>(in, "type embedding") != 0;
  cfg.model.tau = rd<real>(in, "tau");
  cfg.model.queue_size = rd<std::int64_t>(in, "queue size");
  cfg.epochs = rd<std::int64_t>(in, "epochs");
  cfg.warmup_epochs = rd<std::int64_t>(in, "warmup epochs");
  cfg.batch_size = rd<std::int64_t>(in, "batch size");
  cfg.base_lr = rd<real>(in, "base lr");
  cfg.momentum = rd<real>(in, "momentum");
  cfg.seed = rd<std::uint64_t>(in, "seed");

  if (expected_variant && *expected_variant != cfg.model.variant)
    throw DataError(std::string("checkpoint: variant mismatch, file holds '") +
                    variant_name(cfg.model.variant) + "' but '" +
                    variant_name(*expected_variant) + "' was requested");

  CheckpointData data;
  data.config = cfg;
  data.epoch = rd<std::int64_t>(in, "epoch");
  data.val_rank = rd<double>(in, "val rank");

  Rng rng(cfg.seed);
  data.params = ModelParams::init(cfg.model, rng);
  const auto n_params = rd<std::uint64_t>(in, "param count");
  if (n_params != data.params.trainables.size())
    throw DataError("checkpoint: parameter count mismatch");
  for (auto& t : data.params.trainables) {
    const std::string name = rd_string(in);
    const auto rank = rd<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = rd<std::int64_t>(in, "dim");
    if (name != t.name() || shape != t.shape())
      throw DataError("checkpoint: parameter '" + name + "' does not match model structure");
    auto vals = rd_reals(in, "param data");
    if (static_cast<std::int64_t>(vals.size()) != t.size())
      throw DataError("checkpoint: parameter '" + name + "' has wrong size");
    t.raw_values() = std::move(vals);
  }
  const auto n_buffers = rd<std::uint64_t>(in, "buffer count");
  if (n_buffers != data.params.buffers.size())
    throw DataError("checkpoint: buffer count mismatch");
  for (auto& [name, buf] : data.params.buffers) {
    const std::string got = rd_string(in);
    if (got != name) throw DataError("checkpoint: buffer '" + got + "' does not match model");
    *buf = rd_reals(in, "buffer data");
  }
  data.optimizer.step_count = rd<std::int64_t>(in, "step count");
  data.optimizer.base_lr = rd<real>(in, "opt base lr");
  data.optimizer.mu = rd<real>(in, "opt momentum");
  const auto n_mom = rd<std::uint64_t>(in, "momentum count");
  if (n_mom != data.params.trainables.size())
    throw DataError("checkpoint: optimizer state does not match parameters");
  data.optimizer.momentum.clear();
  for (std::uint64_t i = 0; i < n_mom; ++i)
    data.optimizer.momentum.push_back(rd_reals(in, "momentum data"));

  const auto n_curve = rd<std::uint64_t>(in, "curve length");
  for (std::uint64_t i = 0; i < n_curve; ++i) {
    CurvePoint p{};
    p.epoch = rd<std::int64_t>(in, "curve epoch");
    p.train_loss = rd<double>(in, "curve loss");
    p.val_rank = rd<double>(in, "curve rank");
    data.curve.push_back(p);
  }
  data.cache = RepresentationCache(e.model_dim);
  data.cache.restore_stream(in);
  return data;
}

}  // namespace felrec
