#pragma once

// Scheme comparison sweeps and phase-level micro-benchmarks over synthetic
// matmuls with planted outlier feature columns.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "gemm.hpp"
#include "outliers.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace mixq {

struct MatmulShape {
  std::size_t s = 0, h = 0, o = 0;

  std::string str() const { return std::to_string(s) + "x" + std::to_string(h) + "x" + std::to_string(o); }
  friend bool operator==(const MatmulShape&, const MatmulShape&) = default;
};

inline MatmulShape parse_shape(const std::string& text) {
  MatmulShape sh;
  char x1 = 0, x2 = 0;
  // Unsigned extraction would silently wrap "-4", so only digits and 'x' pass.
  if (text.find_first_not_of("0123456789x") != std::string::npos)
    throw InvalidArgument("bad shape '" + text + "', expected SxHxO");
  std::istringstream is(text);
  if (!(is >> sh.s >> x1 >> sh.h >> x2 >> sh.o) || x1 != 'x' || x2 != 'x' || !is.eof() || !sh.s || !sh.h || !sh.o)
    throw InvalidArgument("bad shape '" + text + "', expected SxHxO");
  return sh;
}

struct Trial {
  DenseMatrix x, w;
  OutlierSet planted;
};

// X ~ N(0, 1) with k columns chosen per seed and multiplied by scale;
// W ~ N(0, 1). Every scheme in a sweep sees the same trial for a given seed.
inline Trial make_trial(const MatmulShape& sh, std::size_t outlier_cols, double outlier_scale, std::uint64_t seed,
                        bool f16 = false) {
  DenseMatrix x = seeded_random_matrix(sh.s, sh.h, 2 * seed + 1);
  DenseMatrix w = seeded_random_matrix(sh.h, sh.o, 2 * seed + 2);
  OutlierSet planted = random_control_dims(sh.h, outlier_cols, OutlierSet{}, seed ^ 0x5eedc015ull);
  if (!planted.empty()) {
    std::vector<float> v(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < sh.s; ++r)
      for (std::size_t c : planted.dims()) v[r * sh.h + c] *= static_cast<float>(outlier_scale);
    x = DenseMatrix(sh.s, sh.h, std::move(v));
  }
  if (f16) {
    x = simulate_f16(x);
    w = simulate_f16(w);
  }
  return {std::move(x), std::move(w), std::move(planted)};
}

struct SweepConfig {
  std::vector<MatmulShape> shapes;
  std::vector<Scheme> schemes;
  std::size_t outlier_cols = 0;
  double outlier_scale = 20.0;
  std::vector<std::uint64_t> seeds;
  double alpha = kDefaultAlpha;
  unsigned workers = 1;
  bool simulate_f16 = false;
};

struct SweepRow {
  Scheme scheme;
  MatmulShape shape;
  std::size_t outlier_cols;
  double outlier_scale;
  std::uint64_t seed;
  double rel_error;
  double max_error;
  double int8_fraction;
  double wall_seconds;
};

inline constexpr const char* kSweepCsvHeader =
    "scheme,shape,outlier_cols,outlier_scale,seed,rel_frobenius_error,max_abs_error,int8_fraction,wall_time_s";

// Rows ordered by (scheme as listed, shape as listed, seed as listed).
inline std::vector<SweepRow> run_sweep(const SweepConfig& cfg) {
  if (cfg.schemes.empty()) throw InvalidArgument("sweep: at least one scheme required");
  if (cfg.seeds.empty()) throw InvalidArgument("sweep: at least one seed required");
  if (cfg.shapes.empty()) throw InvalidArgument("sweep: at least one shape required");
  for (const auto& sh : cfg.shapes)
    if (cfg.outlier_cols > sh.h) throw InvalidArgument("sweep: more outlier columns than features in " + sh.str());

  const std::size_t per_scheme = cfg.shapes.size() * cfg.seeds.size();
  std::vector<SweepRow> rows(cfg.schemes.size() * per_scheme);
  // One task per (shape, seed); each task runs every scheme on its trial.
  parallel_for_range(per_scheme, cfg.workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t t = b; t < e; ++t) {
      const auto& sh = cfg.shapes[t / cfg.seeds.size()];
      const std::uint64_t seed = cfg.seeds[t % cfg.seeds.size()];
      const Trial trial = make_trial(sh, cfg.outlier_cols, cfg.outlier_scale, seed, cfg.simulate_f16);
      // Reference is the double-accumulated product rounded to f32, the same
      // output precision every scheme reports in.
      const DenseMatrix ref32 = narrow(matmul_wide(trial.x, trial.w));
      const WideMatrix exact(ref32.rows(), ref32.cols(),
                             std::vector<double>(ref32.data().begin(), ref32.data().end()));
      for (std::size_t si = 0; si < cfg.schemes.size(); ++si) {
        SchemeOptions opt;
        opt.alpha = cfg.alpha;
        const auto t0 = std::chrono::steady_clock::now();
        MatmulResult r = run_matmul(cfg.schemes[si], trial.x, trial.w, opt);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        DenseMatrix out = cfg.simulate_f16 ? simulate_f16(r.output) : std::move(r.output);
        rows[si * per_scheme + t] = SweepRow{cfg.schemes[si],        sh,
                                             cfg.outlier_cols,       cfg.outlier_scale,
                                             seed,                   relative_frobenius_error(out, exact),
                                             max_abs_error(out, exact), r.int8_fraction,
                                             secs};
      }
    }
  });
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, bool with_timing = true) {
  std::ostringstream os;
  os.precision(9);
  os << "# error metric: relative Frobenius norm ||C_q - C||_F / ||C||_F and max |C_q - C| against a\n"
        "# double-accumulated reference product rounded to f32; stands in for language-model perplexity\n";
  os << kSweepCsvHeader << '\n';
  for (const auto& r : rows)
    os << to_string(r.scheme) << ',' << r.shape.str() << ',' << r.outlier_cols << ',' << r.outlier_scale << ','
       << r.seed << ',' << r.rel_error << ',' << r.max_error << ',' << r.int8_fraction << ','
       << (with_timing ? r.wall_seconds : 0.0) << '\n';
  return os.str();
}

struct SchemeSummary {
  Scheme scheme;
  MatmulShape shape;
  std::size_t trials = 0;
  double mean_rel_error = 0.0;
  double mean_max_error = 0.0;
};

inline std::vector<SchemeSummary> summarize(const std::vector<SweepRow>& rows) {
  std::vector<SchemeSummary> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const SchemeSummary& s) { return s.scheme == r.scheme && s.shape == r.shape; });
    if (it == out.end()) it = out.insert(out.end(), SchemeSummary{r.scheme, r.shape});
    it->trials++;
    it->mean_rel_error += r.rel_error;
    it->mean_max_error += r.max_error;
  }
  for (auto& s : out) {
    s.mean_rel_error /= double(s.trials);
    s.mean_max_error /= double(s.trials);
  }
  return out;
}

// For each shape, whether mean error strictly decreases along
// absmax -> vectorwise -> llmint8 (schemes absent from the sweep are skipped).
inline std::string ordering_report(const std::vector<SchemeSummary>& sums) {
  std::ostringstream os;
  std::vector<MatmulShape> shapes;
  for (const auto& s : sums)
    if (std::find(shapes.begin(), shapes.end(), s.shape) == shapes.end()) shapes.push_back(s.shape);
  for (const auto& sh : shapes) {
    std::vector<std::pair<Scheme, double>> chain;
    for (Scheme sc : {Scheme::Absmax, Scheme::VectorWise, Scheme::MixedInt8})
      for (const auto& s : sums)
        if (s.shape == sh && s.scheme == sc) chain.emplace_back(sc, s.mean_rel_error);
    if (chain.size() < 2) continue;
    bool holds = true;
    os << "ordering " << sh.str() << ": ";
    for (std::size_t i = 0; i < chain.size(); ++i) {
      if (i) os << " > ";
      os << to_string(chain[i].first);
      if (i && !(chain[i - 1].second > chain[i].second)) holds = false;
    }
    os << (holds ? " holds" : " VIOLATED") << '\n';
  }
  return os.str();
}

struct BenchConfig {
  std::vector<MatmulShape> shapes;
  std::vector<Scheme> schemes;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::size_t outlier_cols = 2;
  double outlier_scale = 20.0;
  double alpha = kDefaultAlpha;
  std::uint64_t seed = 1;
};

struct BenchRow {
  Scheme scheme;
  MatmulShape shape;
  std::size_t reps;
  PhaseTimes phases;  // per-phase medians
  double total = 0.0; // median wall time of the whole call
};

inline constexpr const char* kBenchCsvHeader = "scheme,shape,reps,quantize_s,gemm_s,dequantize_s,decompose_s,total_s";

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  if (cfg.reps < 3) throw InvalidArgument("bench: at least 3 repetitions required");
  if (cfg.schemes.empty() || cfg.shapes.empty()) throw InvalidArgument("bench: schemes and shapes required");
  std::vector<BenchRow> rows;
  for (Scheme sc : cfg.schemes)
    for (const auto& sh : cfg.shapes) {
      const Trial trial = make_trial(sh, std::min(cfg.outlier_cols, sh.h), cfg.outlier_scale, cfg.seed);
      SchemeOptions opt;
      opt.alpha = cfg.alpha;
      for (std::size_t i = 0; i < cfg.warmup; ++i) (void)run_matmul(sc, trial.x, trial.w, opt);
      std::vector<double> q, g, d, dc, tot;
      for (std::size_t i = 0; i < cfg.reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const MatmulResult r = run_matmul(sc, trial.x, trial.w, opt);
        tot.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        q.push_back(r.phases.quantize);
        g.push_back(r.phases.gemm);
        d.push_back(r.phases.dequantize);
        dc.push_back(r.phases.decompose);
      }
      rows.push_back(BenchRow{sc, sh, cfg.reps, PhaseTimes{median(q), median(g), median(d), median(dc)}, median(tot)});
    }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << kBenchCsvHeader << '\n';
  for (const auto& r : rows)
    os << to_string(r.scheme) << ',' << r.shape.str() << ',' << r.reps << ',' << r.phases.quantize << ','
       << r.phases.gemm << ',' << r.phases.dequantize << ',' << r.phases.decompose << ',' << r.total << '\n';
  return os.str();
}

}  // namespace mixq
