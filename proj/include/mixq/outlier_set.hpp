#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "error.hpp"

namespace mixq {

inline constexpr double kDefaultAlpha = 6.0;

// Sorted, duplicate-free feature indices plus the magnitude threshold that
// selected them.
class OutlierSet {
 public:
  OutlierSet() = default;
  OutlierSet(std::vector<std::size_t> dims, double alpha) : dims_(std::move(dims)), alpha_(alpha) {
    std::sort(dims_.begin(), dims_.end());
    dims_.erase(std::unique(dims_.begin(), dims_.end()), dims_.end());
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  double alpha() const noexcept { return alpha_; }
  std::size_t size() const noexcept { return dims_.size(); }
  bool empty() const noexcept { return dims_.empty(); }
  bool contains(std::size_t d) const { return std::binary_search(dims_.begin(), dims_.end(), d); }

  // Throws unless every index is below h.
  void check_bound(std::size_t h) const {
    if (!dims_.empty() && dims_.back() >= h)
      throw InvalidArgument("outlier dimension " + std::to_string(dims_.back()) +
                            " out of range for hidden size " + std::to_string(h));
  }

  friend bool operator==(const OutlierSet& a, const OutlierSet& b) { return a.dims_ == b.dims_; }

 private:
  std::vector<std::size_t> dims_;
  double alpha_ = kDefaultAlpha;
};

}  // namespace mixq
