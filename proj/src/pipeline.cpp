#include "felrec/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace felrec {

namespace {

namespace fs = std::filesystem;

std::int64_t parse_i64(std::string_view s, std::size_t lineno, const char* what) {
  std::int64_t v = 0;
  // MovieLens timestamps are plain integers; tolerate a trailing fraction.
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || (ptr != s.data() + s.size() && *ptr != '.'))
    throw DataError(std::string("ingest: bad ") + what + " '" + std::string(s) + "' at line " +
                    std::to_string(lineno));
  return v;
}

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

SourceFormat parse_format(const std::string& name) {
  if (name == "movielens") return SourceFormat::movielens;
  if (name == "twitch") return SourceFormat::twitch;
  if (name == "canonical") return SourceFormat::canonical;
  throw DataError("unknown input format '" + name + "' (expected movielens|twitch|canonical)");
}

std::uint64_t Vocabulary::intern(const std::string& raw) {
  auto it = to_dense.find(raw);
  if (it != to_dense.end()) return it->second;
  const std::uint64_t id = to_raw.size();
  to_dense.emplace(raw, id);
  to_raw.push_back(raw);
  return id;
}

Dataset ingest(std::istream& in, SourceFormat format) {
  struct RawRow {
    std::string user, item;
    std::int64_t ts;
  };
  std::vector<RawRow> rows;
  std::string line;
  std::size_t lineno = 0;

  const char sep = format == SourceFormat::canonical ? '\t' : ',';
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    if (first && format == SourceFormat::movielens) {
      first = false;
      if (line.rfind("userId", 0) == 0) continue;  // header
    }
    first = false;
    auto f = split_fields(line, sep);
    RawRow row;
    switch (format) {
      case SourceFormat::movielens:
        // userId,movieId,rating,timestamp — the rating is discarded.
        if (f.size() != 4) throw DataError("ingest: expected 4 fields at line " + std::to_string(lineno));
        row = {std::string(f[0]), std::string(f[1]), parse_i64(f[3], lineno, "timestamp")};
        break;
      case SourceFormat::twitch:
        // user,stream,streamer,start,stop — one interaction per record, the
        // time spent is ignored; start interval is the timestamp.
        if (f.size() < 4) throw DataError("ingest: expected >=4 fields at line " + std::to_string(lineno));
        row = {std::string(f[0]), std::string(f[1]), parse_i64(f[3], lineno, "timestamp")};
        break;
      case SourceFormat::canonical:
        if (f.size() != 3) throw DataError("ingest: expected 3 fields at line " + std::to_string(lineno));
        row = {std::string(f[0]), std::string(f[1]), parse_i64(f[2], lineno, "timestamp")};
        break;
    }
    if (row.user.empty() || row.item.empty())
      throw DataError("ingest: empty id at line " + std::to_string(lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("ingest: no interactions in input");

  // Stable sort keeps file order among equal timestamps.
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].ts < rows[b].ts; });

  Dataset data;
  data.stream.reserve(rows.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const RawRow& r = rows[order[pos]];
    Interaction it;
    it.user = data.users.intern(r.user);
    it.item = data.items.intern(r.item);
    it.timestamp = r.ts;
    it.index = static_cast<std::int64_t>(pos);
    data.stream.push_back(it);
  }
  return data;
}

Dataset ingest_file(const std::string& path, SourceFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("ingest: cannot open '" + path + "'");
  return ingest(in, format);
}

void export_canonical(std::ostream& out, std::span<const Interaction> stream,
                      const Vocabulary& users, const Vocabulary& items) {
  for (const auto& it : stream)
    out << users.to_raw[it.user] << '\t' << items.to_raw[it.item] << '\t' << it.timestamp << "\n";
}

Splits split(std::span<const Interaction> stream, const SplitSpec& spec) {
  const std::size_t n = stream.size();
  if (n < 10) throw DataError("split: need at least 10 interactions, got " + std::to_string(n));
  const auto a = static_cast<std::size_t>(spec.train_fraction * static_cast<double>(n));
  const auto b = static_cast<std::size_t>((spec.train_fraction + spec.val_fraction) *
                                          static_cast<double>(n));
  Splits s;
  s.train.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(a));
  s.val.assign(stream.begin() + static_cast<std::ptrdiff_t>(a),
               stream.begin() + static_cast<std::ptrdiff_t>(b));
  s.test.assign(stream.begin() + static_cast<std::ptrdiff_t>(b), stream.end());
  return s;
}

const char* partition_name(PartitionLabel p) {
  switch (p) {
    case PartitionLabel::observed: return "observed";
    case PartitionLabel::new_users: return "new-users";
    case PartitionLabel::new_items: return "new-items";
  }
  return "?";
}

TrainVocabulary TrainVocabulary::from(std::span<const Interaction> train) {
  TrainVocabulary v;
  for (const auto& it : train) {
    v.users.insert(it.user);
    v.items.insert(it.item);
  }
  return v;
}

PartitionLabel partition_one(const Interaction& it, const TrainVocabulary& vocab) {
  if (!vocab.items.count(it.item)) return PartitionLabel::new_items;
  if (!vocab.users.count(it.user)) return PartitionLabel::new_users;
  return PartitionLabel::observed;
}

std::vector<PartitionLabel> partition_test(std::span<const Interaction> test,
                                           const TrainVocabulary& vocab) {
  std::vector<PartitionLabel> out;
  out.reserve(test.size());
  for (const auto& it : test) out.push_back(partition_one(it, vocab));
  return out;
}

HistoryStore::HistoryStore(std::int64_t max_len) : max_len_(max_len) {
  if (max_len <= 0) throw DataError("history: max length must be positive");
}

void HistoryStore::push(Window& w, std::uint64_t v, std::int64_t cap) {
  if (!w.full) {
    w.buf.push_back(v);
    if (static_cast<std::int64_t>(w.buf.size()) == cap) w.full = true;
    return;
  }
  w.buf[w.head] = v;
  w.head = (w.head + 1) % w.buf.size();
}

std::vector<std::uint64_t> HistoryStore::read(const Window& w) {
  if (!w.full) return w.buf;
  std::vector<std::uint64_t> out;
  out.reserve(w.buf.size());
  for (std::size_t i = 0; i < w.buf.size(); ++i) out.push_back(w.buf[(w.head + i) % w.buf.size()]);
  return out;
}

void HistoryStore::add(const Interaction& it) {
  push(user_hist_[it.user], it.item, max_len_);
  push(item_hist_[it.item], it.user, max_len_);
}

std::vector<std::uint64_t> HistoryStore::user_items(std::uint64_t user) const {
  auto it = user_hist_.find(user);
  return it == user_hist_.end() ? std::vector<std::uint64_t>{} : read(it->second);
}

std::vector<std::uint64_t> HistoryStore::item_users(std::uint64_t item) const {
  auto it = item_hist_.find(item);
  return it == item_hist_.end() ? std::vector<std::uint64_t>{} : read(it->second);
}

void HistoryStore::clear() {
  user_hist_.clear();
  item_hist_.clear();
}

std::vector<std::span<const Interaction>> batch_stream(std::span<const Interaction> stream,
                                                       std::int64_t batch_size) {
  if (batch_size <= 0) throw DataError("batch_stream: batch size must be positive");
  std::vector<std::span<const Interaction>> out;
  for (std::size_t start = 0; start < stream.size(); start += static_cast<std::size_t>(batch_size))
    out.push_back(stream.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                              stream.size() - start)));
  return out;
}

namespace {

void write_split_tsv(const fs::path& path, std::span<const Interaction> part,
                     const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("prepare: cannot write '" + path.string() + "'");
  export_canonical(out, part, data.users, data.items);
}

void write_vocab(const fs::path& path, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw DataError("prepare: cannot write '" + path.string() + "'");
  for (std::size_t i = 0; i < vocab.to_raw.size(); ++i) out << vocab.to_raw[i] << '\t' << i << "\n";
}

std::unordered_map<std::string, std::uint64_t> load_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load: cannot open '" + path.string() + "'");
  std::unordered_map<std::string, std::uint64_t> map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 2)
      throw DataError("vocab: malformed line " + std::to_string(lineno) + " in '" + path.string() + "'");
    map.emplace(std::string(f[0]), static_cast<std::uint64_t>(parse_i64(f[1], lineno, "dense id")));
  }
  return map;
}

std::vector<Interaction> load_split_tsv(const fs::path& path,
                                        const std::unordered_map<std::string, std::uint64_t>& users,
                                        const std::unordered_map<std::string, std::uint64_t>& items,
                                        std::int64_t index_base) {
  std::ifstream in(path);
  if (!in) throw DataError("load: cannot open '" + path.string() + "'");
  std::vector<Interaction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 3)
      throw DataError("split file: malformed line " + std::to_string(lineno) + " in '" +
                      path.string() + "'");
    auto u = users.find(std::string(f[0]));
    auto x = items.find(std::string(f[1]));
    if (u == users.end() || x == items.end())
      throw DataError("split file: id missing from vocabulary at line " + std::to_string(lineno) +
                      " in '" + path.string() + "'");
    Interaction it;
    it.user = u->second;
    it.item = x->second;
    it.timestamp = parse_i64(f[2], lineno, "timestamp");
    it.index = index_base + static_cast<std::int64_t>(out.size());
    out.push_back(it);
  }
  return out;
}

}  // namespace

void write_prepared(const std::string& dir, const Dataset& data, const Splits& splits,
                    const std::vector<PartitionLabel>& labels) {
  fs::create_directories(dir);
  const fs::path root(dir);
  write_split_tsv(root / "train.tsv", splits.train, data);
  write_split_tsv(root / "val.tsv", splits.val, data);
  write_split_tsv(root / "test.tsv", splits.test, data);
  write_vocab(root / "vocab_users.tsv", data.users);
  write_vocab(root / "vocab_items.tsv", data.items);

  std::ofstream lab(root / "labels.tsv");
  if (!lab) throw DataError("prepare: cannot write labels.tsv");
  for (std::size_t i = 0; i < labels.size(); ++i)
    lab << i << '\t' << partition_name(labels[i]) << "\n";
}

PreparedData load_prepared(const std::string& dir) {
  const fs::path root(dir);
  const auto users = load_vocab(root / "vocab_users.tsv");
  const auto items = load_vocab(root / "vocab_items.tsv");
  PreparedData out;
  out.user_count = users.size();
  out.item_count = items.size();
  out.splits.train = load_split_tsv(root / "train.tsv", users, items, 0);
  out.splits.val = load_split_tsv(root / "val.tsv", users, items,
                                  static_cast<std::int64_t>(out.splits.train.size()));
  out.splits.test = load_split_tsv(
      root / "test.tsv", users, items,
      static_cast<std::int64_t>(out.splits.train.size() + out.splits.val.size()));

  std::ifstream lab(root / "labels.tsv");
  if (!lab) throw DataError("load: cannot open '" + (root / "labels.tsv").string() + "'");
  std::string line;
  while (std::getline(lab, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 2) throw DataError("labels.tsv: malformed line");
    if (f[1] == "observed")
      out.test_labels.push_back(PartitionLabel::observed);
    else if (f[1] == "new-users")
      out.test_labels.push_back(PartitionLabel::new_users);
    else if (f[1] == "new-items")
      out.test_labels.push_back(PartitionLabel::new_items);
    else
      throw DataError("labels.tsv: unknown partition '" + std::string(f[1]) + "'");
  }
  if (out.test_labels.size() != out.splits.test.size())
    throw DataError("labels.tsv: " + std::to_string(out.test_labels.size()) + " labels for " +
                    std::to_string(out.splits.test.size()) + " test interactions");
  return out;
}

}  // namespace felrec
