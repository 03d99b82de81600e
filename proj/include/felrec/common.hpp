#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace felrec {

using real = double;

// Raised for malformed inputs, bad files, unusable configurations.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised for shape mismatches, non-finite values, invalid numeric arguments.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Worker threads used by the heavy kernels. Results are identical for any
// value: every output element is computed with a fixed reduction order.
void set_num_threads(int n);
int num_threads();

using Rng = std::mt19937_64;

// Stable mix for deriving per-(epoch, batch) RNG streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1);
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

}  // namespace felrec
