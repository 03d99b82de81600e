#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "felrec/common.hpp"

namespace felrec {

struct Interaction {
  std::uint64_t user = 0;
  std::uint64_t item = 0;
  std::int64_t timestamp = 0;
  std::int64_t index = 0;  // position after the global chronological sort

  bool operator==(const Interaction&) const = default;
};

enum class SourceFormat { movielens, twitch, canonical };
SourceFormat parse_format(const std::string& name);

// Raw-id <-> dense-id mapping in first-appearance order.
struct Vocabulary {
  std::unordered_map<std::string, std::uint64_t> to_dense;
  std::vector<std::string> to_raw;

  std::uint64_t intern(const std::string& raw);
  std::size_t size() const { return to_raw.size(); }
};

struct Dataset {
  std::vector<Interaction> stream;  // sorted by timestamp, ties in file order
  Vocabulary users;
  Vocabulary items;
};

// Parses one interaction per input record, discards rating/duration payloads,
// stable-sorts by timestamp and assigns stream indices and dense ids.
Dataset ingest(std::istream& in, SourceFormat format);
Dataset ingest_file(const std::string& path, SourceFormat format);

// Canonical TSV: user<TAB>item<TAB>timestamp, one interaction per line.
void export_canonical(std::ostream& out, std::span<const Interaction> stream,
                      const Vocabulary& users, const Vocabulary& items);

struct SplitSpec {
  double train_fraction = 0.8;
  double val_fraction = 0.1;  // test takes the remainder
};

struct Splits {
  std::vector<Interaction> train, val, test;
};

// Contiguous prefix/middle/suffix split; boundaries at floor(fraction * n).
Splits split(std::span<const Interaction> stream, const SplitSpec& spec = {});

enum class PartitionLabel : std::uint8_t { observed = 0, new_users = 1, new_items = 2 };
const char* partition_name(PartitionLabel p);

struct TrainVocabulary {
  std::unordered_set<std::uint64_t> users;
  std::unordered_set<std::uint64_t> items;

  static TrainVocabulary from(std::span<const Interaction> train);
};

// new-items takes precedence over new-users; everything else is observed.
PartitionLabel partition_one(const Interaction& it, const TrainVocabulary& vocab);
std::vector<PartitionLabel> partition_test(std::span<const Interaction> test,
                                           const TrainVocabulary& vocab);

// Per-entity rolling window of the most recent counterpart ids.
class HistoryStore {
 public:
  explicit HistoryStore(std::int64_t max_len = 64);

  std::int64_t max_len() const { return max_len_; }
  void add(const Interaction& it);
  // Chronological (oldest first), at most max_len entries.
  std::vector<std::uint64_t> user_items(std::uint64_t user) const;
  std::vector<std::uint64_t> item_users(std::uint64_t item) const;
  void clear();
  HistoryStore clone() const { return *this; }

 private:
  struct Window {
    std::vector<std::uint64_t> buf;  // circular once full
    std::size_t head = 0;            // next write slot when full
    bool full = false;
  };
  static void push(Window& w, std::uint64_t v, std::int64_t cap);
  static std::vector<std::uint64_t> read(const Window& w);

  std::int64_t max_len_;
  std::unordered_map<std::uint64_t, Window> user_hist_;
  std::unordered_map<std::uint64_t, Window> item_hist_;
};

// Consecutive chunks of at most batch_size interactions, in stream order.
std::vector<std::span<const Interaction>> batch_stream(std::span<const Interaction> stream,
                                                       std::int64_t batch_size = 1024);

// On-disk layout produced by `prepare` and consumed by train/eval: canonical
// TSV splits with raw ids, vocabulary TSVs, partition labels, stats.
struct PreparedData {
  Splits splits;
  std::vector<PartitionLabel> test_labels;
  std::size_t user_count = 0;
  std::size_t item_count = 0;
};

void write_prepared(const std::string& dir, const Dataset& data, const Splits& splits,
                    const std::vector<PartitionLabel>& labels);
PreparedData load_prepared(const std::string& dir);

}  // namespace felrec
