#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <mixq/outliers.hpp>
#include <mixq/stack_io.hpp>

using namespace mixq;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "mixq_outliers_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Layer count L, sequence 16, hidden 8; dimension `dim` set to `value` at the
// given layers and positions, zero elsewhere.
HiddenStateStack sparse_stack(std::size_t L, std::size_t dim, float value, const std::vector<std::size_t>& layers,
                              const std::vector<std::size_t>& positions) {
  std::vector<DenseMatrix> out;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<float> v(16 * 8, 0.0f);
    if (std::find(layers.begin(), layers.end(), l) != layers.end())
      for (std::size_t s : positions) v[s * 8 + dim] = value;
    out.emplace_back(16, 8, std::move(v));
  }
  return HiddenStateStack(std::move(out));
}

}  // namespace

TEST(Detection, WorkedExample) {
  // 4 layers, dimension 3 at 8.0 on layers {0, 1} and positions {0, 1}:
  // layer coverage 0.5, sequence coverage 2/16 = 0.125.
  const auto stack = sparse_stack(4, 3, 8.0f, {0, 1}, {0, 1});
  const auto c = feature_coverage(stack, 3, 6.0);
  EXPECT_DOUBLE_EQ(c.layer_fraction, 0.5);
  EXPECT_DOUBLE_EQ(c.seq_fraction, 0.125);
  EXPECT_EQ(c.count, 4u);
  EXPECT_EQ(detect_outlier_dims(stack).dims(), (std::vector<std::size_t>{3}));
}

TEST(Detection, ThresholdIsInclusive) {
  const auto at = sparse_stack(4, 2, 6.0f, {0, 1}, {0, 1});
  EXPECT_EQ(detect_outlier_dims(at).dims(), (std::vector<std::size_t>{2}));
  const auto below = sparse_stack(4, 2, 5.999f, {0, 1}, {0, 1});
  EXPECT_TRUE(detect_outlier_dims(below).empty());
  const auto negative = sparse_stack(4, 2, -6.0f, {0, 1}, {0, 1});
  EXPECT_EQ(detect_outlier_dims(negative).dims(), (std::vector<std::size_t>{2}));
}

TEST(Detection, LayerCoverageBoundary) {
  // 1 of 4 layers = 0.25 meets the default; with 5 layers 1/5 falls short.
  EXPECT_FALSE(detect_outlier_dims(sparse_stack(4, 1, 9.0f, {2}, {0, 1})).empty());
  EXPECT_TRUE(detect_outlier_dims(sparse_stack(5, 1, 9.0f, {2}, {0, 1})).empty());
}

TEST(Detection, SequenceCoverageBoundary) {
  // Default 0.06 over 16 positions needs 1 position (0.0625).
  EXPECT_FALSE(detect_outlier_dims(sparse_stack(4, 1, 9.0f, {0, 1}, {5})).empty());
  DetectionParams p;
  p.seq_frac = 0.07;
  EXPECT_TRUE(detect_outlier_dims(sparse_stack(4, 1, 9.0f, {0, 1}, {5}), p).empty());
}

TEST(Detection, CoverageModesDiffer) {
  // Same positions on 2 of 4 layers: positions 2/16 versus pairs 4/64.
  const auto stack = sparse_stack(4, 3, 8.0f, {0, 1}, {0, 1});
  EXPECT_DOUBLE_EQ(feature_coverage(stack, 3, 6.0, SeqCoverage::Positions).seq_fraction, 0.125);
  EXPECT_DOUBLE_EQ(feature_coverage(stack, 3, 6.0, SeqCoverage::LayerPositionPairs).seq_fraction, 0.0625);
  DetectionParams p;
  p.seq_frac = 0.1;
  EXPECT_FALSE(detect_outlier_dims(stack, p).empty());
  p.coverage = SeqCoverage::LayerPositionPairs;
  EXPECT_TRUE(detect_outlier_dims(stack, p).empty());
}

TEST(Detection, RejectsBadParamsAndEmptyStack) {
  DetectionParams p;
  p.alpha = 0.0;
  EXPECT_THROW(detect_outlier_dims(sparse_stack(4, 1, 1.0f, {}, {}), p), InvalidArgument);
  p = {};
  p.layer_frac = 1.5;
  EXPECT_THROW(detect_outlier_dims(sparse_stack(4, 1, 1.0f, {}, {}), p), InvalidArgument);
  EXPECT_THROW(detect_outlier_dims(HiddenStateStack{}), InvalidArgument);
}

TEST(Quartiles, Type7Estimator) {
  EXPECT_DOUBLE_EQ(quantile_sorted({-10, -8, -6}, 0.25), -9.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({-10, -8, -6}, 0.5), -8.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({-10, -8, -6}, 0.75), -7.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({5}, 0.25), 5.0);
  EXPECT_THROW(quantile_sorted({}, 0.5), InvalidArgument);
}

TEST(Stats, OneSidedNegativeFeature) {
  // Four values at each of -10, -8, -6 across layers and positions.
  std::vector<DenseMatrix> layers;
  const float vals[3] = {-10.0f, -8.0f, -6.0f};
  for (int l = 0; l < 4; ++l) {
    std::vector<float> v(3 * 4, 0.0f);
    for (int s = 0; s < 3; ++s) v[s * 4 + 1] = vals[s];
    layers.emplace_back(3, 4, std::move(v));
  }
  const HiddenStateStack stack(std::move(layers));
  const auto stats = outlier_stats(stack, OutlierSet({1}, 6.0));
  ASSERT_EQ(stats.size(), 1u);
  EXPECT_EQ(stats[0].count, 12u);
  EXPECT_TRUE(stats[0].one_sided);
  ASSERT_TRUE(stats[0].quartiles);
  EXPECT_DOUBLE_EQ(stats[0].quartiles->q1, -10.0);
  EXPECT_DOUBLE_EQ(stats[0].quartiles->median, -8.0);
  EXPECT_DOUBLE_EQ(stats[0].quartiles->q3, -6.0);
}

TEST(Stats, TwoSidedAndEmptyFeatures) {
  std::vector<float> v(2 * 3, 0.0f);
  v[0] = 7.0f;
  v[3] = -7.0f;
  const HiddenStateStack stack({DenseMatrix(2, 3, v)});
  const auto stats = outlier_stats(stack, OutlierSet({0, 2}, 6.0));
  EXPECT_FALSE(stats[0].one_sided);
  EXPECT_FALSE(stats[1].quartiles.has_value());
  EXPECT_EQ(stats[1].count, 0u);
  EXPECT_THROW(outlier_stats(stack, OutlierSet({3}, 6.0)), InvalidArgument);
}

TEST(Ablation, ZeroesOnlyListedColumns) {
  const DenseMatrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(zero_columns(m, OutlierSet({0, 2}, 6.0)), (DenseMatrix{{0, 2, 0}, {0, 5, 0}}));
  EXPECT_THROW(zero_columns(m, OutlierSet({3}, 6.0)), InvalidArgument);
}

TEST(Ablation, ZeroedStackHasNoOutliers) {
  const auto stack = sparse_stack(4, 3, 8.0f, {0, 1}, {0, 1});
  const auto d = detect_outlier_dims(stack);
  EXPECT_TRUE(detect_outlier_dims(zero_feature_dims(stack, d)).empty());
}

TEST(Controls, DistinctExcludedAndDeterministic) {
  const OutlierSet exclude({1, 5, 9}, 6.0);
  const auto a = random_control_dims(32, 6, exclude, 42);
  EXPECT_EQ(a.size(), 6u);
  for (auto d : a.dims()) {
    EXPECT_LT(d, 32u);
    EXPECT_FALSE(exclude.contains(d));
  }
  EXPECT_EQ(a, random_control_dims(32, 6, exclude, 42));
  EXPECT_EQ(random_control_dims(4, 1, OutlierSet({0, 1, 2}, 6.0), 3).dims(), (std::vector<std::size_t>{3}));
  EXPECT_THROW(random_control_dims(4, 2, OutlierSet({0, 1, 2}, 6.0), 3), InvalidArgument);
}

TEST(Controls, RoughlyUniform) {
  std::vector<int> hits(10, 0);
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto picked = random_control_dims(10, 1, {}, s);
    ++hits[picked.dims()[0]];
  }
  for (int h : hits) EXPECT_NEAR(h, 200, 60);
}

TEST(Synthetic, NoiseStaysBelowLimit) {
  SyntheticStackSpec spec;
  const auto stack = synthetic_stack(spec, 1);
  for (const auto& l : stack)
    for (float v : l.data()) EXPECT_LT(std::fabs(v), 6.0f);
  EXPECT_TRUE(detect_outlier_dims(stack).empty());
}

// Property: planted features that meet all criteria are recovered exactly,
// and nothing else is reported.
TEST(Property, PlantedFeaturesRecovered) {
  NormalSampler rng(314);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SyntheticStackSpec spec;
    spec.layers = 6;
    spec.seq = 24;
    spec.hidden = 40;
    const auto dims = random_control_dims(spec.hidden, 1 + uniform_below(rng, 4), {}, seed);
    for (auto d : dims.dims()) {
      PlantedFeature p;
      p.dim = d;
      p.magnitude = 6.0 + 4.0 * rng.uniform();
      p.sign = uniform_below(rng, 2) ? 1 : -1;
      p.jitter = 2.0;
      p.layers = {0, 2, 4};
      p.positions = {1, 7};
      spec.plants.push_back(p);
    }
    const auto stack = synthetic_stack(spec, seed);
    EXPECT_EQ(detect_outlier_dims(stack), dims) << "seed " << seed;
  }
}

TEST(StackIo, RoundTrip) {
  const auto dir = fresh_dir("roundtrip");
  const auto stack = sparse_stack(3, 2, 7.0f, {1}, {3});
  write_stack(dir, stack, 6.0);
  const auto b = read_stack(dir);
  EXPECT_EQ(b.stack, stack);
  ASSERT_TRUE(b.alpha_used);
  EXPECT_DOUBLE_EQ(*b.alpha_used, 6.0);
}

TEST(StackIo, RolesFilterAnalyzedInputs) {
  const auto dir = fresh_dir("roles");
  const auto stack = sparse_stack(3, 2, 7.0f, {1}, {3});
  write_stack(dir, stack, std::nullopt, {"attn_in", "attn_out", "ffn_expand_in"});
  const auto b = read_stack(dir);
  EXPECT_EQ(b.stack.layers(), 2u);
  EXPECT_EQ(b.stack[0], stack[0]);
  EXPECT_EQ(b.stack[1], stack[2]);
  EXPECT_FALSE(b.alpha_used);
}

TEST(StackIo, AcceptsHyphenatedAlphaKey) {
  const auto dir = fresh_dir("hyphen");
  write_stack(dir, sparse_stack(1, 0, 1.0f, {}, {}));
  std::ofstream(dir / "manifest.json") << R"({"layers":1,"seq":16,"hidden":8,"alpha-used":5.5})";
  EXPECT_DOUBLE_EQ(*read_stack(dir).alpha_used, 5.5);
}

TEST(StackIo, InconsistentDirectories) {
  const auto dir = fresh_dir("broken");
  write_stack(dir, sparse_stack(2, 0, 1.0f, {}, {}));
  fs::remove(layer_file(dir, 1));
  EXPECT_THROW(read_stack(dir), FormatError);

  write_stack(dir, sparse_stack(2, 0, 1.0f, {}, {}));
  qt8::write_tensor(layer_file(dir, 2), DenseMatrix(16, 8));
  EXPECT_THROW(read_stack(dir), FormatError);

  const auto d2 = fresh_dir("shape");
  write_stack(d2, sparse_stack(2, 0, 1.0f, {}, {}));
  qt8::write_tensor(layer_file(d2, 1), DenseMatrix(15, 8));
  EXPECT_THROW(read_stack(d2), FormatError);

  EXPECT_THROW(read_stack(fresh_dir("empty")), IoError);
  std::ofstream(fresh_dir("badjson") / "manifest.json") << "{not json";
  EXPECT_THROW(read_stack(fs::temp_directory_path() / "mixq_outliers_test" / "badjson"), FormatError);
}

TEST(Reports, CsvAndJson) {
  const auto stack = sparse_stack(4, 3, 8.0f, {0, 1}, {0, 1});
  const auto stats = outlier_stats(stack, detect_outlier_dims(stack));
  const auto csv = report_csv(stats);
  EXPECT_EQ(csv, std::string(kReportCsvHeader) + "\n3,4,1,50,12.5,8,8,8\n");
  const auto j = report_json(stats, {});
  EXPECT_EQ(j["outliers"].size(), 1u);
  EXPECT_EQ(j["outliers"][0]["dim"], 3);
  EXPECT_EQ(j["seq_coverage"], "positions");
}

TEST(Helpers, Iota) { EXPECT_EQ(iota(3), (std::vector<std::size_t>{0, 1, 2})); }
