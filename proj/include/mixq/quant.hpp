#pragma once

// Int8 quantizers: tensor-wise absmax, tensor-wise zeropoint (affine),
// per-row absmax for activations and per-column absmax for weights.
//
// Codes always lie in [-127, 127]. Rounding is half away from zero.
// Scaling constants are kept in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace mixq {

inline constexpr int kCodeMax = 127;

// code = round(scale * x), x ~= code / scale.
struct AbsmaxParams {
  double scale = 1.0;
};

// Affine scheme. The true code is t = round(nd * x); int8 storage holds
// t - zp so the tensor minimum lands on -127 and the maximum on +127.
// x ~= (stored + zp) / nd + offset. offset is nonzero only for constant
// tensors, which have no dynamic range to scale.
struct ZeropointParams {
  double nd = 1.0;
  std::int16_t zp = 0;
  double offset = 0.0;
};

// One absmax scale per row (activations).
struct RowWiseParams {
  std::vector<double> scales;
};

// One absmax scale per column (weights).
struct ColumnWiseParams {
  std::vector<double> scales;
};

using QuantParams = std::variant<AbsmaxParams, ZeropointParams, RowWiseParams, ColumnWiseParams>;

inline std::string_view scheme_name(const QuantParams& p) {
  switch (p.index()) {
    case 0: return "absmax";
    case 1: return "zeropoint";
    case 2: return "rowwise";
    default: return "columnwise";
  }
}

struct QuantizedTensor {
  Int8Matrix codes;
  QuantParams params;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }
};

inline double round_half_away(double v) noexcept { return std::round(v); }

namespace detail {

inline std::int8_t to_code(double v) noexcept {
  const double r = std::clamp(round_half_away(v), double(-kCodeMax), double(kCodeMax));
  return static_cast<std::int8_t>(r);
}

inline void require_nonempty(const DenseMatrix& x, const char* who) {
  if (x.empty()) throw InvalidArgument(std::string(who) + ": empty matrix");
}

template <typename Range>
double absmax_of(const Range& r) {
  double m = 0.0;
  for (float v : r) m = std::max(m, std::fabs(double(v)));
  return m;
}

inline double scale_for(double absmax) noexcept { return absmax > 0.0 ? kCodeMax / absmax : 1.0; }

}  // namespace detail

inline QuantizedTensor absmax_quantize(const DenseMatrix& x) {
  detail::require_nonempty(x, "absmax_quantize");
  const double s = detail::scale_for(detail::absmax_of(x.data()));
  std::vector<std::int8_t> codes(x.size());
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = detail::to_code(s * x.data()[i]);
  return {Int8Matrix(x.rows(), x.cols(), std::move(codes)), AbsmaxParams{s}};
}

inline QuantizedTensor zeropoint_quantize(const DenseMatrix& x) {
  detail::require_nonempty(x, "zeropoint_quantize");
  const auto [lo_it, hi_it] = std::minmax_element(x.data().begin(), x.data().end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    return {Int8Matrix(x.rows(), x.cols()), ZeropointParams{1.0, 0, lo}};
  }
  const double nd = 2.0 * kCodeMax / (hi - lo);
  const double zp = round_half_away(nd * lo) + kCodeMax;
  if (zp < std::numeric_limits<std::int16_t>::min() || zp > std::numeric_limits<std::int16_t>::max())
    throw OverflowError("zeropoint_quantize: zeropoint outside the 16-bit range");
  std::vector<std::int8_t> codes(x.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const double t = round_half_away(nd * x.data()[i]);
    codes[i] = detail::to_code(t - zp);
  }
  return {Int8Matrix(x.rows(), x.cols(), std::move(codes)),
          ZeropointParams{nd, static_cast<std::int16_t>(zp), 0.0}};
}

inline QuantizedTensor rowwise_quantize(const DenseMatrix& x) {
  detail::require_nonempty(x, "rowwise_quantize");
  std::vector<double> scales(x.rows());
  std::vector<std::int8_t> codes(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const double s = detail::scale_for(detail::absmax_of(row));
    scales[r] = s;
    for (std::size_t c = 0; c < x.cols(); ++c) codes[r * x.cols() + c] = detail::to_code(s * row[c]);
  }
  return {Int8Matrix(x.rows(), x.cols(), std::move(codes)), RowWiseParams{std::move(scales)}};
}

// Column access is a strided read over the row-major buffer.
inline QuantizedTensor columnwise_quantize(const DenseMatrix& w) {
  detail::require_nonempty(w, "columnwise_quantize");
  const std::size_t rows = w.rows(), cols = w.cols();
  std::vector<double> absmax(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) absmax[c] = std::max(absmax[c], std::fabs(double(w(r, c))));
  std::vector<double> scales(cols);
  for (std::size_t c = 0; c < cols; ++c) scales[c] = detail::scale_for(absmax[c]);
  std::vector<std::int8_t> codes(w.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) codes[r * cols + c] = detail::to_code(scales[c] * w(r, c));
  return {Int8Matrix(rows, cols, std::move(codes)), ColumnWiseParams{std::move(scales)}};
}

// Row constants for X (s x h) and column constants for W (h x o); together
// they give the outer product c_x (x) c_w used to denormalize X W.
inline std::pair<QuantizedTensor, QuantizedTensor> vectorwise_params(const DenseMatrix& x,
                                                                    const DenseMatrix& w) {
  if (x.cols() != w.rows())
    throw ShapeError("vectorwise_params: inner dimensions differ (" + std::to_string(x.cols()) +
                     " vs " + std::to_string(w.rows()) + ")");
  return {rowwise_quantize(x), columnwise_quantize(w)};
}

inline DenseMatrix dequantize(const QuantizedTensor& q) {
  const std::size_t rows = q.rows(), cols = q.cols();
  std::vector<float> out(q.codes.size());
  const auto codes = q.codes.data();
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const double code = codes[r * cols + c];
            double v;
            if constexpr (std::is_same_v<P, AbsmaxParams>) v = code / p.scale;
            else if constexpr (std::is_same_v<P, ZeropointParams>) v = (code + p.zp) / p.nd + p.offset;
            else if constexpr (std::is_same_v<P, RowWiseParams>) v = code / p.scales[r];
            else v = code / p.scales[c];
            out[r * cols + c] = static_cast<float>(v);
          }
      },
      q.params);
  return DenseMatrix(rows, cols, std::move(out));
}

// Half the quantization step: the worst-case round-trip error for element
// (r, c) under params p, ignoring float rounding of the result.
inline double half_step(const QuantParams& p, std::size_t r, std::size_t c) {
  return std::visit(
      [&](const auto& q) -> double {
        using P = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<P, AbsmaxParams>) return 0.5 / q.scale;
        else if constexpr (std::is_same_v<P, ZeropointParams>) return 0.5 / q.nd;
        else if constexpr (std::is_same_v<P, RowWiseParams>) return 0.5 / q.scales[r];
        else return 0.5 / q.scales[c];
      },
      p);
}

}  // namespace mixq
