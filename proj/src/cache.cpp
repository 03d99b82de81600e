#include "felrec/cache.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace felrec {

namespace {

constexpr char kMagic[4] = {'F', 'E', 'L', 'C'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError(std::string("cache snapshot: truncated while reading ") + what);
  return v;
}

}  // namespace

RepresentationCache::RepresentationCache(std::int64_t dim) : dim_(dim) {
  if (dim <= 0) throw DataError("cache: dimension must be positive");
}

std::vector<real> RepresentationCache::get(EntityKind kind, std::uint64_t id) const {
  std::vector<real> out(static_cast<std::size_t>(dim_), real(0));
  get_into(kind, id, out.data());
  return out;
}

void RepresentationCache::get_into(EntityKind kind, std::uint64_t id, real* dst) const {
  const auto& t = table(kind);
  auto it = t.find(id);
  if (it == t.end()) {
    std::fill(dst, dst + dim_, real(0));
    return;
  }
  for (std::int64_t i = 0; i < dim_; ++i) dst[i] = static_cast<real>(it->second[static_cast<std::size_t>(i)]);
}

bool RepresentationCache::contains(EntityKind kind, std::uint64_t id) const {
  return table(kind).count(id) != 0;
}

void RepresentationCache::put(EntityKind kind, std::uint64_t id, const std::vector<real>& v) {
  if (static_cast<std::int64_t>(v.size()) != dim_)
    throw DataError("cache put: vector length " + std::to_string(v.size()) +
                    " does not match dimension " + std::to_string(dim_));
  auto& slot = table(kind)[id];
  slot.resize(static_cast<std::size_t>(dim_));
  for (std::int64_t i = 0; i < dim_; ++i)
    slot[static_cast<std::size_t>(i)] = static_cast<float>(v[static_cast<std::size_t>(i)]);
}

void RepresentationCache::clear() {
  users_.clear();
  items_.clear();
}

std::vector<std::uint64_t> RepresentationCache::ids(EntityKind kind) const {
  std::vector<std::uint64_t> out;
  out.reserve(table(kind).size());
  for (const auto& [id, _] : table(kind)) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

void RepresentationCache::snapshot_stream(std::ostream& out) const {
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(dim_));
  write_pod(out, static_cast<std::uint64_t>(users_.size()));
  write_pod(out, static_cast<std::uint64_t>(items_.size()));
  for (EntityKind kind : {EntityKind::user, EntityKind::item}) {
    const auto& t = table(kind);
    for (std::uint64_t id : ids(kind)) {
      write_pod(out, id);
      const auto& v = t.at(id);
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
  }
}

void RepresentationCache::restore_stream(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("cache snapshot: bad magic, not a cache snapshot");
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion)
    throw DataError("cache snapshot: unsupported version " + std::to_string(version));
  const auto d = read_pod<std::uint32_t>(in, "dimension");
  if (static_cast<std::int64_t>(d) != dim_)
    throw DataError("cache snapshot: dimension " + std::to_string(d) +
                    " does not match cache dimension " + std::to_string(dim_));
  const auto n_users = read_pod<std::uint64_t>(in, "user count");
  const auto n_items = read_pod<std::uint64_t>(in, "item count");
  users_.clear();
  items_.clear();
  auto read_table = [&](Table& t, std::uint64_t count) {
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto id = read_pod<std::uint64_t>(in, "entry id");
      std::vector<float> v(static_cast<std::size_t>(dim_));
      in.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
      if (!in) throw DataError("cache snapshot: truncated entry data");
      t.emplace(id, std::move(v));
    }
  };
  read_table(users_, n_users);
  read_table(items_, n_items);
}

void RepresentationCache::snapshot(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cache snapshot: cannot open '" + path + "' for writing");
  snapshot_stream(out);
  if (!out) throw DataError("cache snapshot: write failed for '" + path + "'");
}

void RepresentationCache::restore(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cache restore: cannot open '" + path + "'");
  restore_stream(in);
}

std::vector<std::uint8_t> RepresentationCache::snapshot_bytes() const {
  std::ostringstream out(std::ios::binary);
  snapshot_stream(out);
  const std::string s = out.str();
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

void RepresentationCache::export_tsv(std::ostream& out) const {
  out << "kind\tid";
  for (std::int64_t i = 0; i < dim_; ++i) out << "\tv" << i;
  out << "\n";
  char buf[48];
  for (EntityKind kind : {EntityKind::user, EntityKind::item}) {
    const auto& t = table(kind);
    for (std::uint64_t id : ids(kind)) {
      out << (kind == EntityKind::user ? "user" : "item") << '\t' << id;
      for (float v : t.at(id)) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
        out << '\t' << buf;
      }
      out << "\n";
    }
  }
}

void RepresentationCache::import_tsv(std::istream& in) {
  users_.clear();
  items_.clear();
  std::string line;
  if (!std::getline(in, line)) throw DataError("cache tsv: empty input");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string kind_s, id_s;
    if (!std::getline(row, kind_s, '\t') || !std::getline(row, id_s, '\t'))
      throw DataError("cache tsv: malformed row at line " + std::to_string(lineno));
    EntityKind kind;
    if (kind_s == "user")
      kind = EntityKind::user;
    else if (kind_s == "item")
      kind = EntityKind::item;
    else
      throw DataError("cache tsv: unknown kind '" + kind_s + "' at line " + std::to_string(lineno));
    std::vector<float> v;
    v.reserve(static_cast<std::size_t>(dim_));
    std::string cell;
    while (std::getline(row, cell, '\t')) v.push_back(std::strtof(cell.c_str(), nullptr));
    if (static_cast<std::int64_t>(v.size()) != dim_)
      throw DataError("cache tsv: row at line " + std::to_string(lineno) + " has " +
                      std::to_string(v.size()) + " values, expected " + std::to_string(dim_));
    table(kind).emplace(std::strtoull(id_s.c_str(), nullptr, 10), std::move(v));
  }
}

bool RepresentationCache::operator==(const RepresentationCache& other) const {
  return dim_ == other.dim_ && users_ == other.users_ && items_ == other.items_;
}

}  // namespace felrec
