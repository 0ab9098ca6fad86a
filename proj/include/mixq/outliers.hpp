#pragma once

// Systematic outlier feature dimensions across a stack of hidden states:
// detection by magnitude / layer coverage / sequence coverage, per-dimension
// summary statistics, zero-ablation helpers and random control sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "error.hpp"
#include "outlier_set.hpp"
#include "tensor.hpp"

namespace mixq {

enum class SeqCoverage {
  // A position s counts once if any layer has a qualifying value at (s, d);
  // divided by the sequence length.
  Positions,
  // Every qualifying (layer, s) pair counts; divided by layers * seq.
  LayerPositionPairs,
};

struct DetectionParams {
  double alpha = kDefaultAlpha;
  double layer_frac = 0.25;
  double seq_frac = 0.06;
  SeqCoverage coverage = SeqCoverage::Positions;

  void validate() const {
    if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
    if (!(layer_frac > 0.0 && layer_frac <= 1.0)) throw InvalidArgument("layer fraction must lie in (0, 1]");
    if (!(seq_frac > 0.0 && seq_frac <= 1.0)) throw InvalidArgument("sequence fraction must lie in (0, 1]");
  }
};

struct Coverage {
  double layer_fraction = 0.0;
  double seq_fraction = 0.0;
  std::size_t count = 0;
};

// Layer and sequence coverage of feature d at threshold alpha.
inline Coverage feature_coverage(const HiddenStateStack& stack, std::size_t d, double alpha,
                                 SeqCoverage mode = SeqCoverage::Positions) {
  const std::size_t L = stack.layers(), S = stack.seq();
  std::vector<char> pos_hit(S, 0);
  std::size_t layers_hit = 0, pairs = 0;
  for (std::size_t l = 0; l < L; ++l) {
    bool any = false;
    for (std::size_t s = 0; s < S; ++s)
      if (std::fabs(stack[l](s, d)) >= alpha) {
        any = true;
        pos_hit[s] = 1;
        ++pairs;
      }
    layers_hit += any;
  }
  const auto positions = static_cast<std::size_t>(std::count(pos_hit.begin(), pos_hit.end(), 1));
  Coverage c;
  c.count = pairs;
  c.layer_fraction = double(layers_hit) / double(L);
  c.seq_fraction = mode == SeqCoverage::Positions ? double(positions) / double(S) : double(pairs) / double(L * S);
  return c;
}

inline OutlierSet detect_outlier_dims(const HiddenStateStack& stack, const DetectionParams& p = {}) {
  p.validate();
  if (stack.empty() || stack.seq() == 0 || stack.hidden() == 0)
    throw InvalidArgument("detect_outlier_dims: empty hidden-state stack");
  std::vector<std::size_t> dims;
  for (std::size_t d = 0; d < stack.hidden(); ++d) {
    const Coverage c = feature_coverage(stack, d, p.alpha, p.coverage);
    if (c.count > 0 && c.layer_fraction >= p.layer_frac && c.seq_fraction >= p.seq_frac) dims.push_back(d);
  }
  return OutlierSet(std::move(dims), p.alpha);
}

struct Quartiles {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

// Linear interpolation between order statistics (the "type 7" estimator):
// position (n - 1) p in the sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw InvalidArgument("quantile of empty sample");
  const double h = (sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - double(lo)) * (sorted[hi] - sorted[lo]);
}

struct OutlierStat {
  std::size_t index = 0;
  std::size_t count = 0;
  double layer_fraction = 0.0;
  double seq_fraction = 0.0;
  std::optional<Quartiles> quartiles;  // absent when count == 0
  bool one_sided = false;
};

inline std::vector<OutlierStat> outlier_stats(const HiddenStateStack& stack, const OutlierSet& dims,
                                              SeqCoverage mode = SeqCoverage::Positions) {
  if (stack.empty()) throw InvalidArgument("outlier_stats: empty hidden-state stack");
  dims.check_bound(stack.hidden());
  const double alpha = dims.alpha();
  std::vector<OutlierStat> out;
  out.reserve(dims.size());
  for (std::size_t d : dims.dims()) {
    std::vector<double> values;
    for (const auto& layer : stack)
      for (std::size_t s = 0; s < layer.rows(); ++s)
        if (const double v = layer(s, d); std::fabs(v) >= alpha) values.push_back(v);
    const Coverage c = feature_coverage(stack, d, alpha, mode);
    OutlierStat st;
    st.index = d;
    st.count = values.size();
    st.layer_fraction = c.layer_fraction;
    st.seq_fraction = c.seq_fraction;
    if (!values.empty()) {
      std::sort(values.begin(), values.end());
      st.quartiles = Quartiles{quantile_sorted(values, 0.25), quantile_sorted(values, 0.5),
                               quantile_sorted(values, 0.75)};
      st.one_sided = values.front() > 0.0 || values.back() < 0.0;
    }
    out.push_back(st);
  }
  return out;
}

inline DenseMatrix zero_columns(const DenseMatrix& m, const OutlierSet& dims) {
  dims.check_bound(m.cols());
  std::vector<float> v(m.data().begin(), m.data().end());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t d : dims.dims()) v[r * m.cols() + d] = 0.0f;
  return DenseMatrix(m.rows(), m.cols(), std::move(v));
}

inline HiddenStateStack zero_feature_dims(const HiddenStateStack& stack, const OutlierSet& dims) {
  std::vector<DenseMatrix> layers;
  layers.reserve(stack.layers());
  for (const auto& m : stack) layers.push_back(zero_columns(m, dims));
  return HiddenStateStack(std::move(layers));
}

// Unbiased integer in [0, n) by rejection sampling on raw 64-bit draws.
inline std::uint64_t uniform_below(NormalSampler& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng.bits();
  while (x >= limit);
  return x % n;
}

// k distinct dimensions drawn uniformly from [0, h) \ exclude, by a partial
// Fisher-Yates shuffle of the candidate list.
inline OutlierSet random_control_dims(std::size_t h, std::size_t k, const OutlierSet& exclude,
                                      std::uint64_t seed) {
  std::vector<std::size_t> pool;
  for (std::size_t d = 0; d < h; ++d)
    if (!exclude.contains(d)) pool.push_back(d);
  if (k > pool.size())
    throw InvalidArgument("random_control_dims: requested " + std::to_string(k) + " dims but only " +
                          std::to_string(pool.size()) + " are available");
  NormalSampler rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_below(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return OutlierSet(std::move(pool), exclude.alpha());
}

// Planted feature for synthetic stacks: value magnitude * sign (plus
// optional jitter) at dimension dim for the listed layers and positions.
struct PlantedFeature {
  std::size_t dim = 0;
  double magnitude = 8.0;
  int sign = 1;
  double jitter = 0.0;  // uniform in [0, jitter) added to the magnitude
  std::vector<std::size_t> layers;
  std::vector<std::size_t> positions;
};

struct SyntheticStackSpec {
  std::size_t layers = 4;
  std::size_t seq = 16;
  std::size_t hidden = 32;
  double noise_std = 1.0;
  // Noise draws are resampled until |v| < noise_limit.
  double noise_limit = kDefaultAlpha;
  std::vector<PlantedFeature> plants;
};

inline HiddenStateStack synthetic_stack(const SyntheticStackSpec& spec, std::uint64_t seed) {
  if (spec.layers == 0 || spec.seq == 0 || spec.hidden == 0)
    throw InvalidArgument("synthetic_stack: zero dimension");
  NormalSampler rng(seed);
  std::vector<std::vector<float>> buf(spec.layers, std::vector<float>(spec.seq * spec.hidden));
  for (auto& layer : buf)
    for (auto& v : layer) {
      double z;
      do z = spec.noise_std * rng.next();
      while (std::fabs(z) >= spec.noise_limit);
      v = static_cast<float>(z);
    }
  for (const auto& p : spec.plants) {
    if (p.dim >= spec.hidden) throw InvalidArgument("synthetic_stack: planted dim out of range");
    for (std::size_t l : p.layers)
      for (std::size_t s : p.positions) {
        if (l >= spec.layers || s >= spec.seq) throw InvalidArgument("synthetic_stack: plant out of range");
        const double mag = p.magnitude + p.jitter * rng.uniform();
        buf[l][s * spec.hidden + p.dim] = static_cast<float>(p.sign < 0 ? -mag : mag);
      }
  }
  std::vector<DenseMatrix> layers;
  for (auto& b : buf) layers.emplace_back(spec.seq, spec.hidden, std::move(b));
  return HiddenStateStack(std::move(layers));
}

}  // namespace mixq
