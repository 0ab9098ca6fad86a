#pragma once

// Integer GEMM with int32 accumulation and the dequantized matmul pipelines:
// tensor-wise absmax, tensor-wise zeropoint (direct and unrolled), row-wise,
// vector-wise, and vector-wise Int8 with a high-precision side path for
// outlier feature columns.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "outlier_set.hpp"
#include "parallel.hpp"
#include "quant.hpp"
#include "tensor.hpp"

namespace mixq {

// 127 * 127 * 2^17 = 2,114,060,288 < 2^31 - 1.
inline constexpr std::size_t kMaxInnerDim = std::size_t{1} << 17;

enum class Scheme { Exact, Absmax, Zeropoint, RowWise, VectorWise, MixedInt8 };

inline std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::Exact: return "exact";
    case Scheme::Absmax: return "absmax";
    case Scheme::Zeropoint: return "zeropoint";
    case Scheme::RowWise: return "rowwise";
    case Scheme::VectorWise: return "vectorwise";
    case Scheme::MixedInt8: return "llmint8";
  }
  return "?";
}

inline Scheme parse_scheme(std::string_view name) {
  for (Scheme s : {Scheme::Exact, Scheme::Absmax, Scheme::Zeropoint, Scheme::RowWise, Scheme::VectorWise,
                   Scheme::MixedInt8})
    if (to_string(s) == name) return s;
  throw InvalidArgument("unknown scheme '" + std::string(name) + "'");
}

// Seconds spent per stage of one matmul call.
struct PhaseTimes {
  double quantize = 0.0;
  double gemm = 0.0;
  double dequantize = 0.0;
  double decompose = 0.0;

  double sum() const noexcept { return quantize + gemm + dequantize + decompose; }
};

struct MatmulResult {
  DenseMatrix output;
  Scheme scheme = Scheme::Exact;
  std::size_t decomposed_cols = 0;
  // Share of the inner dimension multiplied in Int8.
  double int8_fraction = 1.0;
  PhaseTimes phases;
};

struct MatmulOptions {
  unsigned threads = 1;
};

namespace detail {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

template <typename A, typename B>
void require_conformable(const Matrix<A>& a, const Matrix<B>& b, const char* who) {
  if (a.cols() != b.rows())
    throw ShapeError(std::string(who) + ": cannot multiply " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " by " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

}  // namespace detail

inline Int32Matrix int8_gemm_i32(const Int8Matrix& a, const Int8Matrix& b, unsigned threads = 1) {
  detail::require_conformable(a, b, "int8_gemm_i32");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (k > kMaxInnerDim)
    throw OverflowError("int8_gemm_i32: inner dimension " + std::to_string(k) +
                        " exceeds the int32 accumulation guard 2^17");
  std::vector<std::int32_t> c(m * n, 0);
  const auto ad = a.data(), bd = b.data();
  parallel_for_range(m, threads, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      std::int32_t* out = c.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const std::int32_t av = ad[i * k + p];
        if (av == 0) continue;
        const std::int8_t* brow = bd.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
      }
    }
  });
  return Int32Matrix(m, n, std::move(c));
}

// Float inputs, double accumulation. For every output element the inner
// index is summed in ascending order, independent of thread count.
inline WideMatrix matmul_wide(const DenseMatrix& x, const DenseMatrix& w, unsigned threads = 1) {
  detail::require_conformable(x, w, "matmul_wide");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  std::vector<double> c(m * n, 0.0);
  const auto xd = x.data(), wd = w.data();
  parallel_for_range(m, threads, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* out = c.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double xv = xd[i * k + p];
        const float* wrow = wd.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += xv * double(wrow[j]);
      }
    }
  });
  return WideMatrix(m, n, std::move(c));
}

inline DenseMatrix narrow(const WideMatrix& m) {
  std::vector<float> v(m.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
  return DenseMatrix(m.rows(), m.cols(), std::move(v));
}

// Divides C by the product of the constants that produced each operand:
// scalar for tensor-wise schemes, outer product c_x (x) c_w for
// row/column-wise ones. Zeropoint constants pair only with zeropoint.
inline DenseMatrix dequantize_output(const Int32Matrix& c, const QuantParams& px, const QuantParams& pw) {
  const std::size_t m = c.rows(), n = c.cols();
  const bool zx = std::holds_alternative<ZeropointParams>(px);
  const bool zw = std::holds_alternative<ZeropointParams>(pw);
  if (zx != zw) throw InvalidArgument("dequantize_output: zeropoint constants mixed with absmax constants");
  if (std::holds_alternative<ColumnWiseParams>(px))
    throw InvalidArgument("dequantize_output: activation side cannot carry column constants");
  if (std::holds_alternative<RowWiseParams>(pw))
    throw InvalidArgument("dequantize_output: weight side cannot carry row constants");

  std::vector<double> row_c(m), col_c(n);
  if (zx) {
    const auto& a = std::get<ZeropointParams>(px);
    const auto& b = std::get<ZeropointParams>(pw);
    if (a.offset != 0.0 || b.offset != 0.0)
      throw InvalidArgument("dequantize_output: constant-tensor offsets need the zeropoint_matmul path");
    std::fill(row_c.begin(), row_c.end(), a.nd);
    std::fill(col_c.begin(), col_c.end(), b.nd);
  } else {
    if (const auto* a = std::get_if<AbsmaxParams>(&px)) {
      std::fill(row_c.begin(), row_c.end(), a->scale);
    } else {
      const auto& r = std::get<RowWiseParams>(px).scales;
      if (r.size() != m) throw InvalidArgument("dequantize_output: row constant count mismatch");
      row_c = r;
    }
    if (const auto* b = std::get_if<AbsmaxParams>(&pw)) {
      std::fill(col_c.begin(), col_c.end(), b->scale);
    } else {
      const auto& cc = std::get<ColumnWiseParams>(pw).scales;
      if (cc.size() != n) throw InvalidArgument("dequantize_output: column constant count mismatch");
      col_c = cc;
    }
  }
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = static_cast<float>(double(c(i, j)) / (row_c[i] * col_c[j]));
  return DenseMatrix(m, n, std::move(out));
}

inline MatmulResult exact_matmul(const DenseMatrix& x, const DenseMatrix& w, MatmulOptions opt = {}) {
  detail::Stopwatch sw;
  MatmulResult r;
  r.output = narrow(matmul_wide(x, w, opt.threads));
  r.scheme = Scheme::Exact;
  r.int8_fraction = 0.0;
  r.phases.gemm = sw.lap();
  return r;
}

namespace detail {

inline MatmulResult quantized_pipeline(const QuantizedTensor& qx, const QuantizedTensor& qw, Scheme scheme,
                                       double quantize_seconds, MatmulOptions opt) {
  Stopwatch sw;
  MatmulResult r;
  r.scheme = scheme;
  r.phases.quantize = quantize_seconds;
  const Int32Matrix c = int8_gemm_i32(qx.codes, qw.codes, opt.threads);
  r.phases.gemm = sw.lap();
  r.output = dequantize_output(c, qx.params, qw.params);
  r.phases.dequantize = sw.lap();
  return r;
}

}  // namespace detail

inline MatmulResult absmax_matmul(const DenseMatrix& x, const DenseMatrix& w, MatmulOptions opt = {}) {
  detail::require_conformable(x, w, "absmax_matmul");
  detail::Stopwatch sw;
  auto qx = absmax_quantize(x);
  auto qw = absmax_quantize(w);
  return detail::quantized_pipeline(qx, qw, Scheme::Absmax, sw.lap(), opt);
}

// Row-wise constants on X, a single tensor-wise constant on W.
inline MatmulResult rowwise_matmul(const DenseMatrix& x, const DenseMatrix& w, MatmulOptions opt = {}) {
  detail::require_conformable(x, w, "rowwise_matmul");
  detail::Stopwatch sw;
  auto qx = rowwise_quantize(x);
  auto qw = absmax_quantize(w);
  return detail::quantized_pipeline(qx, qw, Scheme::RowWise, sw.lap(), opt);
}

inline MatmulResult vectorwise_matmul(const DenseMatrix& x, const DenseMatrix& w, MatmulOptions opt = {}) {
  detail::Stopwatch sw;
  auto [qx, qw] = vectorwise_params(x, w);
  return detail::quantized_pipeline(qx, qw, Scheme::VectorWise, sw.lap(), opt);
}

// C = (A + zp_a)(B + zp_b) over int8 storage codes with 16-bit zeropoints.
//
// direct:   each factor widened and multiplied, as a multiply_i16-style
//           instruction would.
// unrolled: A B in the int8 kernel plus zp_b * rowsum(A) + zp_a * colsum(B)
//           + h * zp_a * zp_b.
//
// Refused with OverflowError unless h * max|A + zp_a| * max|B + zp_b| fits
// int32, which bounds every partial sum of the direct path. The unrolled
// correction terms are combined modulo 2^32, so the bounded final value is
// exact even when an individual term is not.
inline Int32Matrix zeropoint_accumulate(const Int8Matrix& a, std::int16_t zp_a, const Int8Matrix& b,
                                        std::int16_t zp_b, bool unrolled, unsigned threads = 1) {
  detail::require_conformable(a, b, "zeropoint_accumulate");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto widest = [](const Int8Matrix& q, std::int32_t zp) {
    std::int64_t mx = 0;
    for (std::int8_t v : q.data()) mx = std::max<std::int64_t>(mx, std::abs(std::int64_t(v) + zp));
    return mx;
  };
  const long double bound = static_cast<long double>(k) * widest(a, zp_a) * widest(b, zp_b);
  if (bound > std::numeric_limits<std::int32_t>::max())
    throw OverflowError("zeropoint_accumulate: (A+zp_a)(B+zp_b) may exceed int32 for h = " + std::to_string(k));

  if (!unrolled) {
    std::vector<std::int32_t> c(m * n, 0);
    const auto ad = a.data(), bd = b.data();
    parallel_for_range(m, threads, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t i = r0; i < r1; ++i) {
        std::int32_t* out = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const std::int32_t av = std::int32_t(ad[i * k + p]) + zp_a;
          for (std::size_t j = 0; j < n; ++j) out[j] += av * (std::int32_t(bd[p * n + j]) + zp_b);
        }
      }
    });
    return Int32Matrix(m, n, std::move(c));
  }

  const Int32Matrix ab = int8_gemm_i32(a, b, threads);
  std::vector<std::int32_t> row_sum(m, 0), col_sum(n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) row_sum[i] += a(i, p);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) col_sum[j] += b(p, j);
  const std::uint32_t uza = std::uint32_t(std::int32_t(zp_a)), uzb = std::uint32_t(std::int32_t(zp_b));
  const std::uint32_t zz = std::uint32_t(k) * uza * uzb;
  std::vector<std::int32_t> c(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint32_t v = std::uint32_t(ab(i, j)) + std::uint32_t(row_sum[i]) * uzb +
                              std::uint32_t(col_sum[j]) * uza + zz;
      c[i * n + j] = static_cast<std::int32_t>(v);
    }
  return Int32Matrix(m, n, std::move(c));
}

inline MatmulResult zeropoint_matmul(const DenseMatrix& x, const DenseMatrix& w, bool unrolled,
                                     MatmulOptions opt = {}) {
  detail::require_conformable(x, w, "zeropoint_matmul");
  detail::Stopwatch sw;
  MatmulResult r;
  r.scheme = Scheme::Zeropoint;
  const auto qx = zeropoint_quantize(x);
  const auto qw = zeropoint_quantize(w);
  r.phases.quantize = sw.lap();
  const auto& pa = std::get<ZeropointParams>(qx.params);
  const auto& pb = std::get<ZeropointParams>(qw.params);
  const Int32Matrix c = zeropoint_accumulate(qx.codes, pa.zp, qw.codes, pb.zp, unrolled, opt.threads);
  r.phases.gemm = sw.lap();

  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  std::vector<float> out(m * n);
  if (pa.offset == 0.0 && pb.offset == 0.0) {
    const double s = pa.nd * pb.nd;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(double(c.data()[i]) / s);
  } else {
    // x = T_a / nd_a + off_a with T = stored + zp; expand the product.
    std::vector<double> a_sum(m, 0.0), b_sum(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) a_sum[i] += (double(qx.codes(i, p)) + pa.zp) / pa.nd;
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) b_sum[j] += (double(qw.codes(p, j)) + pb.zp) / pb.nd;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] = static_cast<float>(double(c(i, j)) / (pa.nd * pb.nd) + pb.offset * a_sum[i] +
                                            pa.offset * b_sum[j] + double(k) * pa.offset * pb.offset);
  }
  r.output = DenseMatrix(m, n, std::move(out));
  r.phases.dequantize = sw.lap();
  return r;
}

// Columns of X holding at least one |value| >= alpha. The comparison is
// inclusive.
inline OutlierSet extract_outlier_columns(const DenseMatrix& x, double alpha = kDefaultAlpha) {
  if (!(alpha > 0.0)) throw InvalidArgument("extract_outlier_columns: alpha must be positive");
  std::vector<char> hit(x.cols(), 0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (std::fabs(row[c]) >= alpha) hit[c] = 1;
  }
  std::vector<std::size_t> dims;
  for (std::size_t c = 0; c < hit.size(); ++c)
    if (hit[c]) dims.push_back(c);
  return OutlierSet(std::move(dims), alpha);
}

namespace detail {

inline DenseMatrix gather_cols(const DenseMatrix& x, const std::vector<std::size_t>& cols) {
  std::vector<float> v;
  v.reserve(x.rows() * cols.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c : cols) v.push_back(x(r, c));
  return DenseMatrix(x.rows(), cols.size(), std::move(v));
}

inline DenseMatrix gather_rows(const DenseMatrix& w, const std::vector<std::size_t>& rows) {
  std::vector<float> v;
  v.reserve(rows.size() * w.cols());
  for (std::size_t r : rows) {
    const auto src = w.row(r);
    v.insert(v.end(), src.begin(), src.end());
  }
  return DenseMatrix(rows.size(), w.cols(), std::move(v));
}

}  // namespace detail

// Mixed-precision decomposition. Feature columns of X with any
// |value| >= alpha, and the matching rows of W, are gathered and multiplied
// in high precision; the rest go through vector-wise Int8 with constants
// recomputed on the remaining sub-matrices. With no outlier columns this is
// exactly vectorwise_matmul.
inline MatmulResult mixed_precision_matmul(const DenseMatrix& x, const DenseMatrix& w,
                                           double alpha = kDefaultAlpha, MatmulOptions opt = {}) {
  detail::require_conformable(x, w, "mixed_precision_matmul");
  detail::Stopwatch sw;
  const OutlierSet outliers = extract_outlier_columns(x, alpha);
  const double extract_seconds = sw.lap();
  if (outliers.empty()) {
    MatmulResult r = vectorwise_matmul(x, w, opt);
    r.scheme = Scheme::MixedInt8;
    r.phases.decompose += extract_seconds;
    return r;
  }

  const std::size_t h = x.cols(), m = x.rows(), n = w.cols();
  std::vector<std::size_t> regular;
  regular.reserve(h - outliers.size());
  for (std::size_t c = 0; c < h; ++c)
    if (!outliers.contains(c)) regular.push_back(c);

  MatmulResult r;
  r.scheme = Scheme::MixedInt8;
  r.decomposed_cols = outliers.size();
  r.int8_fraction = 1.0 - double(outliers.size()) / double(h);

  const WideMatrix high = matmul_wide(detail::gather_cols(x, outliers.dims()),
                                      detail::gather_rows(w, outliers.dims()), opt.threads);
  std::vector<double> acc(high.data().begin(), high.data().end());
  const DenseMatrix x_reg = detail::gather_cols(x, regular);
  const DenseMatrix w_reg = detail::gather_rows(w, regular);
  r.phases.decompose = extract_seconds + sw.lap();

  if (!regular.empty()) {
    auto [qx, qw] = vectorwise_params(x_reg, w_reg);
    const auto& cx = std::get<RowWiseParams>(qx.params).scales;
    const auto& cw = std::get<ColumnWiseParams>(qw.params).scales;
    r.phases.quantize = sw.lap();
    const Int32Matrix c = int8_gemm_i32(qx.codes, qw.codes, opt.threads);
    r.phases.gemm = sw.lap();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += double(c(i, j)) / (cx[i] * cw[j]);
    r.phases.dequantize = sw.lap();
  }

  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i]);
  r.output = DenseMatrix(m, n, std::move(out));
  r.phases.decompose += sw.lap();
  return r;
}

struct SchemeOptions {
  double alpha = kDefaultAlpha;
  bool unrolled_zeropoint = false;
  MatmulOptions matmul{};
};

inline MatmulResult run_matmul(Scheme s, const DenseMatrix& x, const DenseMatrix& w, SchemeOptions opt = {}) {
  switch (s) {
    case Scheme::Exact: return exact_matmul(x, w, opt.matmul);
    case Scheme::Absmax: return absmax_matmul(x, w, opt.matmul);
    case Scheme::Zeropoint: return zeropoint_matmul(x, w, opt.unrolled_zeropoint, opt.matmul);
    case Scheme::RowWise: return rowwise_matmul(x, w, opt.matmul);
    case Scheme::VectorWise: return vectorwise_matmul(x, w, opt.matmul);
    case Scheme::MixedInt8: return mixed_precision_matmul(x, w, opt.alpha, opt.matmul);
  }
  throw InvalidArgument("run_matmul: unknown scheme");
}

// ||approx - exact||_F / ||exact||_F. Zero when both are zero.
inline double relative_frobenius_error(const DenseMatrix& approx, const WideMatrix& exact) {
  if (approx.rows() != exact.rows() || approx.cols() != exact.cols())
    throw ShapeError("relative_frobenius_error: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < approx.size(); ++i) {
    const double d = double(approx.data()[i]) - exact.data()[i];
    num += d * d;
    den += exact.data()[i] * exact.data()[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::sqrt(num / den);
}

inline double max_abs_error(const DenseMatrix& approx, const WideMatrix& exact) {
  if (approx.rows() != exact.rows() || approx.cols() != exact.cols())
    throw ShapeError("max_abs_error: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < approx.size(); ++i)
    m = std::max(m, std::fabs(double(approx.data()[i]) - exact.data()[i]));
  return m;
}

}  // namespace mixq
