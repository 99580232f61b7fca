#include "dcd/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dcd {

std::string shape_str(const Mat& m) {
  std::ostringstream os;
  os << "(" << m.rows() << ", " << m.cols() << ")";
  return os.str();
}

void require_same_shape(const char* op, const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
  }
}

void require_inner_dims(const char* op, const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                " x " + shape_str(b));
  }
}

bool all_finite(const Mat& m) { return m.allFinite(); }

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t checksum(const Mat& m, uint64_t h) {
  const int64_t rows = m.rows(), cols = m.cols();
  h = fnv1a64(&rows, sizeof rows, h);
  h = fnv1a64(&cols, sizeof cols, h);
  return fnv1a64(m.data(), sizeof(Scalar) * static_cast<size_t>(m.size()), h);
}

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(uint64_t seed) : key_(mix64(seed + kGolden)), counter_(0) {}

Rng Rng::derive(std::string_view label) const {
  uint64_t h = fnv1a64(label.data(), label.size());
  return Rng(mix64(key_ ^ mix64(h + kGolden)), 0);
}

Rng Rng::derive(uint64_t index) const {
  return Rng(mix64(key_ + mix64((index + 1) * kGolden)), 0);
}

uint64_t Rng::next_u64() { return mix64(key_ + (++counter_) * kGolden); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  // Box-Muller; u1 kept strictly positive so log() stays finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t r = next_u64();
  while (r >= limit) r = next_u64();
  return static_cast<int>(r % un);
}

int Rng::weighted_index(const std::vector<Scalar>& weights) {
  Scalar total = 0;
  for (Scalar w : weights) {
    if (w < 0 || !std::isfinite(w)) {
      throw std::invalid_argument("Rng::weighted_index: weights must be finite and >= 0");
    }
    total += w;
  }
  if (total <= 0) throw std::invalid_argument("Rng::weighted_index: weights sum to zero");
  Scalar r = uniform() * total;
  Scalar acc = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (r < acc) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

Mat gaussian_matrix(Index rows, Index cols, Scalar std_dev, Rng& rng) {
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = std_dev * rng.gaussian();
  }
  return m;
}

}  // namespace dcd
