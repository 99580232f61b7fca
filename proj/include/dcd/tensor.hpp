#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dcd {

// All numerics run in 64-bit floats on dense row-major storage. Tensors are
// rank <= 2; a vector is a 1 x n matrix.
using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

using TokenSequence = std::vector<int>;

std::string shape_str(const Mat& m);

// Throws std::invalid_argument naming `op` and both shapes.
void require_same_shape(const char* op, const Mat& a, const Mat& b);
void require_inner_dims(const char* op, const Mat& a, const Mat& b);

bool all_finite(const Mat& m);

// FNV-1a over raw bytes. Used for parameter checksums and file manifests.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ULL);
uint64_t checksum(const Mat& m, uint64_t h = 1469598103934665603ULL);

// Counter-based splittable RNG. A stream is a pure function of (key, counter),
// so state never leaks between derived streams and replay is exact. Distinct
// domain-separation labels yield independent streams.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  // New stream for a named domain; counter starts at zero.
  Rng derive(std::string_view label) const;
  // New stream for an indexed element (e.g. one per sample).
  Rng derive(uint64_t index) const;

  uint64_t next_u64();
  double uniform();                // [0, 1)
  double gaussian();               // N(0, 1), consumes two counter steps
  int uniform_int(int n);          // [0, n), unbiased
  // Weighted index draw; weights need not be normalized, must be >= 0 with
  // positive sum.
  int weighted_index(const std::vector<Scalar>& weights);

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  Rng(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

Mat gaussian_matrix(Index rows, Index cols, Scalar std_dev, Rng& rng);

}  // namespace dcd
