#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace mixq {

namespace detail {

template <typename T>
struct ElementTraits;

template <>
struct ElementTraits<float> {
  static void check(float v) {
    if (!std::isfinite(v)) throw InvalidArgument("DenseMatrix: non-finite value");
  }
};

template <>
struct ElementTraits<double> {
  static void check(double v) {
    if (!std::isfinite(v)) throw InvalidArgument("matrix: non-finite value");
  }
};

template <>
struct ElementTraits<std::int8_t> {
  static void check(std::int8_t v) {
    if (v < -127) throw InvalidArgument("Int8Matrix: code -128 is outside the symmetric range");
  }
};

template <>
struct ElementTraits<std::int32_t> {
  static void check(std::int32_t) {}
};

}  // namespace detail

// Row-major rank-2 container. Immutable once built; element invariants are
// checked on construction.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{}) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    for (T v : data_) detail::ElementTraits<T>::check(v);
  }

  // Nested-list literal, row by row. Handy in tests.
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      for (T v : r) {
        detail::ElementTraits<T>::check(v);
        data_.push_back(v);
      }
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<const T> data() const noexcept { return data_; }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols_, cols_);
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ &&
           std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(T)) == 0;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using DenseMatrix = Matrix<float>;
using Int8Matrix = Matrix<std::int8_t>;
using Int32Matrix = Matrix<std::int32_t>;
// Accumulator-precision results and oracles.
using WideMatrix = Matrix<double>;

// Layer-indexed list of s x h hidden states.
class HiddenStateStack {
 public:
  HiddenStateStack() = default;
  explicit HiddenStateStack(std::vector<DenseMatrix> layers) : layers_(std::move(layers)) {
    for (const auto& m : layers_)
      if (m.rows() != layers_.front().rows() || m.cols() != layers_.front().cols())
        throw ShapeError("hidden-state stack: layers differ in shape");
  }

  std::size_t layers() const noexcept { return layers_.size(); }
  std::size_t seq() const noexcept { return layers_.empty() ? 0 : layers_.front().rows(); }
  std::size_t hidden() const noexcept { return layers_.empty() ? 0 : layers_.front().cols(); }
  bool empty() const noexcept { return layers_.empty(); }

  const DenseMatrix& operator[](std::size_t l) const noexcept { return layers_[l]; }
  auto begin() const noexcept { return layers_.begin(); }
  auto end() const noexcept { return layers_.end(); }

  friend bool operator==(const HiddenStateStack&, const HiddenStateStack&) = default;

 private:
  std::vector<DenseMatrix> layers_;
};

// Deterministic normal sampler.
//
// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
// standard. Uniforms are formed as (x >> 11) * 2^-53 and turned into normals
// with the Marsaglia polar method, both deviates of a pair used in order.
// std::normal_distribution is avoided because its algorithm is
// implementation-defined.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : engine_(seed) {}

  double uniform() noexcept { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::uint64_t bits() noexcept { return engine_(); }

  double next() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double v1, v2, s;
    do {
      v1 = 2.0 * uniform() - 1.0;
      v2 = 2.0 * uniform() - 1.0;
      s = v1 * v1 + v2 * v2;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v2 * f;
    has_spare_ = true;
    return v1 * f;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline DenseMatrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                        double stddev = 1.0) {
  if (rows == 0 || cols == 0) throw InvalidArgument("seeded_random_matrix: zero dimension");
  if (!(stddev > 0.0) || !std::isfinite(stddev))
    throw InvalidArgument("seeded_random_matrix: stddev must be positive");
  NormalSampler rng(seed);
  std::vector<float> v(rows * cols);
  for (auto& x : v) x = static_cast<float>(stddev * rng.next());
  return DenseMatrix(rows, cols, std::move(v));
}

// Round a float to the nearest binary16 value (ties to even). Magnitudes past
// the largest finite half saturate to +-65504 so matrices stay finite.
inline float round_to_f16(float x) noexcept {
  std::uint32_t u;
  std::memcpy(&u, &x, sizeof u);
  const std::uint32_t sign = u & 0x80000000u;
  std::uint32_t mag = u & 0x7fffffffu;
  const float ax = std::fabs(x);
  if (ax >= 65520.0f) {
    const float r = 65504.0f;
    return sign ? -r : r;
  }
  if (ax < 0x1.0p-14f) {
    // Subnormal half: quantum is 2^-24. nearbyint follows the default
    // round-to-nearest-even mode.
    const float q = std::nearbyint(ax * 0x1.0p24f) * 0x1.0p-24f;
    return sign ? -q : q;
  }
  // Normal half: keep 10 of the 23 mantissa bits.
  const std::uint32_t drop = 13;
  const std::uint32_t half = 1u << (drop - 1);
  const std::uint32_t lsb = (mag >> drop) & 1u;
  mag = (mag + half - 1 + lsb) & ~((1u << drop) - 1);
  u = sign | mag;
  float r;
  std::memcpy(&r, &u, sizeof r);
  return r;
}

inline DenseMatrix simulate_f16(const DenseMatrix& m) {
  std::vector<float> v(m.data().begin(), m.data().end());
  for (auto& x : v) x = round_to_f16(x);
  return DenseMatrix(m.rows(), m.cols(), std::move(v));
}

}  // namespace mixq
