#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "felrec/common.hpp"

namespace felrec {

enum class EntityKind : std::uint8_t { user = 0, item = 1 };

// Dynamic storage standing in for the embedding layers: two growable
// id -> vector tables. Misses read as the zero vector; entries are plain
// detached values and never carry gradients. Vectors are held in 32-bit
// precision, matching the snapshot format.
class RepresentationCache {
 public:
  explicit RepresentationCache(std::int64_t dim = 128);

  std::int64_t dim() const { return dim_; }

  // Stored vector if present, else zeros. Never mutates.
  std::vector<real> get(EntityKind kind, std::uint64_t id) const;
  bool contains(EntityKind kind, std::uint64_t id) const;
  void put(EntityKind kind, std::uint64_t id, const std::vector<real>& v);
  // Copies the entry (or zeros on a miss) into dst[0..dim).
  void get_into(EntityKind kind, std::uint64_t id, real* dst) const;

  std::size_t size(EntityKind kind) const { return table(kind).size(); }
  std::size_t total_size() const { return users_.size() + items_.size(); }
  void clear();

  // Ids of stored entries, ascending. Used by exports and nearest-neighbor
  // scans so output never depends on hash-map iteration order.
  std::vector<std::uint64_t> ids(EntityKind kind) const;

  // Little-endian binary snapshot: "FELC", version u32, dim u32, user count
  // u64, item count u64, then (id u64, dim x f32) records per table, ids
  // ascending. Byte-faithful and canonical for a given cache state.
  void snapshot(const std::string& path) const;
  void restore(const std::string& path);
  void snapshot_stream(std::ostream& out) const;
  void restore_stream(std::istream& in);
  std::vector<std::uint8_t> snapshot_bytes() const;

  // TSV export: header, then one row per entry (kind, id, dim floats printed
  // so they re-read bit-exactly).
  void export_tsv(std::ostream& out) const;
  void import_tsv(std::istream& in);

  RepresentationCache clone() const { return *this; }
  bool operator==(const RepresentationCache& other) const;

 private:
  using Table = std::unordered_map<std::uint64_t, std::vector<float>>;
  const Table& table(EntityKind kind) const { return kind == EntityKind::user ? users_ : items_; }
  Table& table(EntityKind kind) { return kind == EntityKind::user ? users_ : items_; }

  std::int64_t dim_;
  Table users_;
  Table items_;
};

}  // namespace felrec
