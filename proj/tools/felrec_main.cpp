// Command-line surface: data preparation, training, evaluation, parameter
// counting, artifact export, synthetic stream generation.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "felrec/evaluator.hpp"
#include "felrec/synthetic.hpp"
#include "felrec/trainer.hpp"

namespace fs = std::filesystem;
using namespace felrec;

namespace {

struct ModelOpts {
  std::string variant = "q";
  std::int64_t dim = 128;
  std::int64_t ff_dim = 0;  // 0 -> twice the model dimension
  std::int64_t layers = 3;
  std::int64_t heads = 4;
  std::int64_t max_seq_len = 64;
  double dropout = 0.1;
  double tau = 0.07;
  std::int64_t queue_size = 8192;
  std::string norm = "batch";
  bool no_mlp = false;
  bool share_mlp = false;
  bool no_type = false;

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.variant = parse_variant(variant);
    cfg.encoder.model_dim = dim;
    cfg.encoder.ff_dim = ff_dim > 0 ? ff_dim : 2 * dim;
    cfg.encoder.layers = layers;
    cfg.encoder.heads = heads;
    cfg.encoder.max_seq_len = max_seq_len;
    cfg.encoder.dropout = dropout;
    cfg.encoder.type_embedding = !no_type;
    if (norm == "batch")
      cfg.head_norm = HeadNorm::batch;
    else if (norm == "layer")
      cfg.head_norm = HeadNorm::layer;
    else
      throw DataError("unknown --norm '" + norm + "' (expected batch|layer)");
    cfg.no_mlp = no_mlp;
    cfg.share_mlp = share_mlp;
    cfg.tau = tau;
    cfg.queue_size = queue_size;
    return cfg;
  }
};

struct TrainOpts {
  std::int64_t epochs = 100;
  std::int64_t warmup = 10;
  std::int64_t batch_size = 1024;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 42;
  int workers = 1;
};

void add_model_options(CLI::App* cmd, ModelOpts& m) {
  cmd->add_option("--variant", m.variant, "Training objective: q or p")
      ->check(CLI::IsMember({"q", "p"}))
      ->capture_default_str();
  cmd->add_option("--dim", m.dim, "Model dimension")->capture_default_str();
  cmd->add_option("--ff-dim", m.ff_dim, "Feed-forward inner dimension (0 = 2x dim)")
      ->capture_default_str();
  cmd->add_option("--layers", m.layers, "Encoder layers")->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--max-seq-len", m.max_seq_len, "Most recent ids kept per sequence")
      ->capture_default_str();
  cmd->add_option("--dropout", m.dropout, "Dropout rate")->capture_default_str();
  cmd->add_option("--tau", m.tau, "InfoNCE temperature")->capture_default_str();
  cmd->add_option("--queue-size", m.queue_size, "Negative queue capacity (each side)")
      ->capture_default_str();
  cmd->add_option("--norm", m.norm, "Head normalization: batch or layer")
      ->check(CLI::IsMember({"batch", "layer"}))
      ->capture_default_str();
  cmd->add_flag("--no-mlp", m.no_mlp, "Drop the projection networks");
  cmd->add_flag("--share-mlp", m.share_mlp, "Share the projection networks");
  cmd->add_flag("--no-type", m.no_type, "Drop the type embedding");
}

void add_train_options(CLI::App* cmd, TrainOpts& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--warmup-epochs", t.warmup, "Warmup epochs")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Interactions per batch")->capture_default_str();
  cmd->add_option("--lr", t.lr, "Base learning rate")->capture_default_str();
  cmd->add_option("--momentum", t.momentum, "SGD momentum")->capture_default_str();
  cmd->add_option("--seed", t.seed, "RNG seed")->envname("FELREC_SEED")->capture_default_str();
  cmd->add_option("--workers", t.workers, "Worker threads for the kernels")->capture_default_str();
}

void enable_config(CLI::App* cmd) {
  cmd->set_config("--config", "", "Flat key=value config file; flags override it");
  cmd->allow_config_extras(CLI::config_extras_mode::error);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_curve_csv(const fs::path& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "epoch,train_loss,val_rank\n";
  out << std::setprecision(17);
  for (const auto& p : curve) out << p.epoch << ',' << p.train_loss << ',' << p.val_rank << "\n";
}

// ----------------------------------- prepare --------------------------------

int cmd_prepare(const std::string& input, const std::string& format, const std::string& out_dir) {
  const Dataset data = ingest_file(input, parse_format(format));
  const Splits splits = split(data.stream);
  const auto vocab = TrainVocabulary::from(splits.train);
  const auto labels = partition_test(splits.test, vocab);
  write_prepared(out_dir, data, splits, labels);

  std::array<std::int64_t, 3> counts{0, 0, 0};
  for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
  const double test_n = static_cast<double>(splits.test.size());
  std::ostringstream stats;
  stats << "interactions=" << data.stream.size() << "\n"
        << "users=" << data.users.size() << "\n"
        << "items=" << data.items.size() << "\n"
        << "train=" << splits.train.size() << "\n"
        << "val=" << splits.val.size() << "\n"
        << "test=" << splits.test.size() << "\n";
  stats << std::fixed << std::setprecision(4);
  const char* keys[3] = {"observed", "new_users", "new_items"};
  for (std::size_t i = 0; i < 3; ++i) {
    stats << keys[i] << "=" << counts[i] << "\n";
    stats << keys[i] << "_pct=" << 100.0 * static_cast<double>(counts[i]) / test_n << "\n";
  }
  write_text(fs::path(out_dir) / "stats.txt", stats.str());
  std::cout << stats.str();
  return 0;
}

// ------------------------------------ train ---------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_dir, const ModelOpts& m,
              const TrainOpts& t, const std::string& resolved_config) {
  TrainConfig cfg;
  cfg.model = m.to_config();
  cfg.epochs = t.epochs;
  cfg.warmup_epochs = t.warmup;
  cfg.batch_size = t.batch_size;
  cfg.base_lr = t.lr;
  cfg.momentum = t.momentum;
  cfg.seed = t.seed;
  cfg.workers = t.workers;
  cfg.validate();

  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.cfg", resolved_config);

  const PreparedData pd = load_prepared(data_dir);
  Trainer trainer(cfg);
  const FitResult result = trainer.fit(pd.splits);

  save_checkpoint((fs::path(out_dir) / "checkpoint.felrec").string(), cfg, trainer.params(),
                  trainer.optimizer(), trainer.cache(), result.best_epoch, result.best_val_rank,
                  result.curve);
  write_curve_csv(fs::path(out_dir) / "curve.csv", result.curve);
  std::cout << "best epoch " << result.best_epoch << " validation rank " << result.best_val_rank
            << "\n";
  return 0;
}

// ------------------------------------ eval ----------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& mode_s,
             bool nn, bool trace, std::uint64_t hr_seed, int workers, const std::string& out_dir) {
  set_num_threads(workers);
  CheckpointData ckpt = load_checkpoint(checkpoint);
  const PreparedData pd = load_prepared(data_dir);
  const EvalMode mode = parse_eval_mode(mode_s);

  StreamState state(ckpt.config.model.encoder.model_dim, ckpt.config.model.encoder.max_seq_len);
  if (mode == EvalMode::continue_streaming) {
    state.cache = ckpt.cache;
    state.replay(pd.splits.train);
    stream_update_only(pd.splits.val, ckpt.params, state);
  }
  // reset and zero-shot both start from scratch; zero-shot just points the
  // checkpoint at a dataset it has never seen.

  EvalStreamConfig ecfg;
  ecfg.nn_scoring = nn;
  ecfg.hr_seed = hr_seed;
  fs::create_directories(out_dir);
  std::ofstream trace_out;
  if (trace) {
    trace_out.open(fs::path(out_dir) / "trace.csv");
    if (!trace_out) throw DataError("cannot write trace.csv");
    ecfg.trace = &trace_out;
  }

  const EvalOutcome outcome =
      evaluate_stream(pd.splits.test, &pd.test_labels, ckpt.params, state, ecfg);

  std::ofstream report(fs::path(out_dir) / "report.csv");
  if (!report) throw DataError("cannot write report.csv");
  report << std::setprecision(17);
  write_report_csv(report, outcome.report);
  std::ofstream pop(fs::path(out_dir) / "popularity.csv");
  if (!pop) throw DataError("cannot write popularity.csv");
  pop << std::setprecision(17);
  write_popularity_csv(pop, outcome.curve);

  std::cout << "mode " << mode_s << (nn ? " (nearest-neighbor scoring)" : "") << "\n";
  write_report_table(std::cout, outcome.report);
  return 0;
}

// ----------------------------------- params ---------------------------------

int cmd_params(const ModelOpts& m) {
  Rng rng(0);
  ModelParams params = ModelParams::init(m.to_config(), rng);
  for (const auto& c : params.component_counts())
    std::cout << c.name << "\t" << c.params << "\n";
  return 0;
}

// ----------------------------------- export ---------------------------------

int cmd_export(const std::string& checkpoint, const std::string& what, const std::string& out) {
  CheckpointData ckpt = load_checkpoint(checkpoint);
  std::ofstream os(out);
  if (!os) throw DataError("cannot write '" + out + "'");
  if (what == "cache") {
    ckpt.cache.export_tsv(os);
  } else if (what == "curves") {
    os << "epoch,train_loss,val_rank\n";
    os << std::setprecision(17);
    for (const auto& p : ckpt.curve) os << p.epoch << ',' << p.train_loss << ',' << p.val_rank << "\n";
  } else {
    throw DataError("unknown export target '" + what + "' (expected cache|curves)");
  }
  return 0;
}

// ------------------------------------ synth ---------------------------------

int cmd_synth(const SyntheticSpec& spec, const std::string& out) {
  const Dataset data = generate_synthetic(spec);
  std::ofstream os(out);
  if (!os) throw DataError("cannot write '" + out + "'");
  export_canonical(os, data.stream, data.users, data.items);
  std::cout << "wrote " << data.stream.size() << " interactions, " << data.users.size()
            << " users, " << data.items.size() << " items\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"felrec: embedding-free sequential recommender"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "Ingest a raw log, split it, label partitions");
  std::string in_path, in_format = "canonical", prep_out;
  prepare->add_option("--input", in_path, "Input interaction log")->required();
  prepare->add_option("--format", in_format, "movielens|twitch|canonical")
      ->check(CLI::IsMember({"movielens", "twitch", "canonical"}))
      ->capture_default_str();
  prepare->add_option("--out", prep_out, "Output directory")->required();
  enable_config(prepare);

  // train
  auto* train = app.add_subcommand("train", "Train on a prepared dataset");
  std::string train_data, train_out;
  ModelOpts train_model;
  TrainOpts train_opts;
  train->add_option("--data", train_data, "Prepared dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  add_model_options(train, train_model);
  add_train_options(train, train_opts);
  enable_config(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a prepared test stream");
  std::string eval_ckpt, eval_data, eval_mode = "continue", eval_out;
  bool eval_nn = false, eval_trace = false;
  std::uint64_t eval_seed = 1;
  int eval_workers = 1;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Prepared dataset directory")->required();
  eval->add_option("--mode", eval_mode, "continue|reset|zero-shot")
      ->check(CLI::IsMember({"continue", "reset", "zero-shot"}))
      ->capture_default_str();
  eval->add_flag("--nn", eval_nn, "Score via the ten nearest neighbor users");
  eval->add_flag("--trace", eval_trace, "Write per-interaction trace.csv");
  eval->add_option("--seed", eval_seed, "HR@10 negative-sampling seed")
      ->envname("FELREC_SEED")
      ->capture_default_str();
  eval->add_option("--workers", eval_workers, "Worker threads")->capture_default_str();
  eval->add_option("--out", eval_out, "Output directory")->required();
  enable_config(eval);

  // params
  auto* params = app.add_subcommand("params", "Print trainable parameter counts per component");
  ModelOpts params_model;
  add_model_options(params, params_model);
  enable_config(params);

  // export
  auto* exp = app.add_subcommand("export", "Export artifacts from a checkpoint");
  std::string exp_ckpt, exp_what = "cache", exp_out;
  exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required();
  exp->add_option("--what", exp_what, "cache|curves")
      ->check(CLI::IsMember({"cache", "curves"}))
      ->capture_default_str();
  exp->add_option("--out", exp_out, "Output file")->required();
  enable_config(exp);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a clustered synthetic interaction stream");
  SyntheticSpec spec;
  std::string synth_out;
  synth->add_option("--interactions", spec.interactions)->capture_default_str();
  synth->add_option("--users", spec.users)->capture_default_str();
  synth->add_option("--items", spec.items)->capture_default_str();
  synth->add_option("--clusters", spec.clusters)->capture_default_str();
  synth->add_option("--off-cluster-rate", spec.off_cluster_rate)->capture_default_str();
  synth->add_option("--seed", spec.seed)->envname("FELREC_SEED")->capture_default_str();
  synth->add_option("--id-offset", spec.id_offset)->capture_default_str();
  synth->add_option("--out", synth_out, "Output canonical TSV")->required();
  enable_config(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(in_path, in_format, prep_out);
    if (train->parsed())
      return cmd_train(train_data, train_out, train_model, train_opts,
                       train->config_to_str(true, false));
    if (eval->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_mode, eval_nn, eval_trace, eval_seed,
                      eval_workers, eval_out);
    if (params->parsed()) return cmd_params(params_model);
    if (exp->parsed()) return cmd_export(exp_ckpt, exp_what, exp_out);
    if (synth->parsed()) return cmd_synth(spec, synth_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
