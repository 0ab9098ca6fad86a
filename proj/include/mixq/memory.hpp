#pragma once

#include <cstdint>
#include <string>

#include "error.hpp"

namespace mixq {

// Storage for linear-layer parameters at 16 bits versus Int8 with a
// fraction f = outlier_dims / hidden_dim of the inner dimension kept in
// 16 bits: bytes_8bit = params * (1 - f) + 2 * params * f = params * (1 + f),
// rounded up to whole bytes.
struct MemoryEstimate {
  std::uint64_t parameter_count = 0;
  std::uint64_t bytes_16bit = 0;
  std::uint64_t bytes_8bit = 0;
  double ratio = 0.0;  // bytes_16bit / bytes_8bit
};

inline MemoryEstimate estimate_memory(std::uint64_t parameter_count, std::uint64_t hidden_dim,
                                      std::uint64_t outlier_dims) {
  if (parameter_count == 0 || hidden_dim == 0) throw InvalidArgument("estimate_memory: counts must be >= 1");
  if (outlier_dims > hidden_dim)
    throw InvalidArgument("estimate_memory: outlier dims (" + std::to_string(outlier_dims) +
                          ") exceed hidden dim (" + std::to_string(hidden_dim) + ")");
  using u128 = unsigned __int128;
  const u128 num = u128(parameter_count) * (hidden_dim + outlier_dims);
  MemoryEstimate m;
  m.parameter_count = parameter_count;
  m.bytes_16bit = 2 * parameter_count;
  m.bytes_8bit = static_cast<std::uint64_t>((num + hidden_dim - 1) / hidden_dim);
  m.ratio = double(m.bytes_16bit) / double(m.bytes_8bit);
  return m;
}

}  // namespace mixq
