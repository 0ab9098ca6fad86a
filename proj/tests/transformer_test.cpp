#include <gtest/gtest.h>

#include <filesystem>

#include <mixq/stack_io.hpp>
#include <mixq/transformer.hpp>

using namespace mixq;
namespace fs = std::filesystem;

namespace {

ToyModelConfig injected(std::uint64_t seed, std::vector<std::size_t> dims = {3}, double scale = 20.0) {
  ToyModelConfig c;
  c.seed = seed;
  c.outlier_injection = OutlierInjection{std::move(dims), scale};
  return c;
}

double logits_error(const ForwardTrace& a, const ForwardTrace& exact) {
  WideMatrix ref(exact.logits.rows(), exact.logits.cols(),
                 std::vector<double>(exact.logits.data().begin(), exact.logits.data().end()));
  return relative_frobenius_error(a.logits, ref);
}

}  // namespace

TEST(Config, Validation) {
  ToyModelConfig c;
  c.heads = 5;
  EXPECT_THROW(build_model(c), InvalidArgument);
  c = {};
  c.layers = 0;
  EXPECT_THROW(build_model(c), InvalidArgument);
  EXPECT_THROW(build_model(injected(1, {64})), InvalidArgument);
}

TEST(Config, JsonRoundTrip) {
  const auto c = injected(9, {3, 7}, 12.5);
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(config_from_json(nlohmann::json{{"layers", "four"}}), InvalidArgument);
}

TEST(Model, Deterministic) {
  EXPECT_EQ(build_model(injected(4)), build_model(injected(4)));
  ToyModelConfig a, b;
  b.seed = 2;
  EXPECT_FALSE(build_model(a) == build_model(b));
}

TEST(Forward, PureFunction) {
  const Model m = build_model({});
  const auto toks = seeded_tokens(32, m.config.vocab, 5);
  EXPECT_EQ(forward(m, toks).logits, forward(m, toks).logits);
  const auto be = LinearBackend::mixed_int8();
  EXPECT_EQ(forward(m, toks, be).logits, forward(m, toks, be).logits);
}

TEST(Forward, TraceShapes) {
  const Model m = build_model({});
  const auto tr = forward(m, seeded_tokens(20, m.config.vocab, 1));
  EXPECT_EQ(tr.hidden_stack.layers(), m.config.layers);
  EXPECT_EQ(tr.hidden_stack.seq(), 20u);
  EXPECT_EQ(tr.hidden_stack.hidden(), m.config.hidden);
  EXPECT_EQ(tr.logits.rows(), 20u);
  EXPECT_EQ(tr.logits.cols(), m.config.vocab);
  EXPECT_EQ(tr.attention.size(), m.config.layers * m.config.heads);
  EXPECT_GE(tr.mean_top1_softmax, 0.0);
  EXPECT_LE(tr.mean_top1_softmax, 1.0);
  EXPECT_GE(tr.ppl_proxy, 1.0);
}

TEST(Forward, InputValidation) {
  const Model m = build_model({});
  EXPECT_THROW(forward(m, {1}), InvalidArgument);
  EXPECT_THROW(forward(m, {1, 64}), InvalidArgument);
  Intervention iv;
  iv.dims = OutlierSet({64}, 6.0);
  EXPECT_THROW(forward(m, {1, 2}, LinearBackend::exact(), std::nullopt, iv), InvalidArgument);
  EXPECT_THROW(LinearBackend::mixed_int8(0.0), InvalidArgument);
}

TEST(Forward, AttentionRowsSumToOneAndAreCausal) {
  const Model m = build_model(injected(2));
  const auto tr = forward(m, seeded_tokens(24, m.config.vocab, 2), LinearBackend::mixed_int8());
  for (const auto& p : tr.attention)
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        if (j > i) {
          EXPECT_EQ(p(i, j), 0.0);
        }
        s += p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Forward, NoInjectionStaysBelowThreshold) {
  const Model m = build_model({});
  const auto tr = forward(m, seeded_tokens(64, m.config.vocab, 1));
  double mx = 0.0;
  for (const auto& l : tr.hidden_stack)
    for (float v : l.data()) mx = std::max(mx, double(std::fabs(v)));
  EXPECT_LT(mx, 6.0);
  EXPECT_TRUE(detect_outlier_dims(tr.hidden_stack).empty());
}

TEST(Forward, InjectedDimIsDetected) {
  const Model m = build_model(injected(1));
  const auto det = detect_outlier_dims(forward(m, seeded_tokens(64, m.config.vocab, 1)).hidden_stack);
  EXPECT_TRUE(det.contains(3));
}

TEST(Forward, MixedInt8CloseToExactWithTinyWeights) {
  ToyModelConfig c;
  c.weight_std = 0.01;
  const Model m = build_model(c);
  const auto toks = seeded_tokens(64, c.vocab, 3);
  EXPECT_LT(logits_error(forward(m, toks, LinearBackend::mixed_int8()), forward(m, toks)), 0.01);
}

TEST(Forward, AbsmaxWorseThanMixedOnInjectedModels) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Model m = build_model(injected(seed));
    const auto toks = seeded_tokens(32, m.config.vocab, seed);
    const auto exact = forward(m, toks);
    const double e_abs = logits_error(forward(m, toks, LinearBackend{Scheme::Absmax}), exact);
    const double e_mix = logits_error(forward(m, toks, LinearBackend::mixed_int8()), exact);
    EXPECT_GT(e_abs, e_mix) << "seed " << seed;
  }
}

TEST(Forward, TinyAlphaEqualsExact) {
  const Model m = build_model(injected(6));
  const auto toks = seeded_tokens(16, m.config.vocab, 6);
  EXPECT_LT(logits_error(forward(m, toks, LinearBackend::mixed_int8(1e-30)), forward(m, toks)), 1e-6);
}

TEST(Forward, EveryBackendRuns) {
  const Model m = build_model({});
  const auto toks = seeded_tokens(16, m.config.vocab, 1);
  const auto exact = forward(m, toks);
  for (auto s : {Scheme::Absmax, Scheme::Zeropoint, Scheme::RowWise, Scheme::VectorWise, Scheme::MixedInt8})
    EXPECT_LT(logits_error(forward(m, toks, LinearBackend{s}), exact), 0.2) << to_string(s);
}

TEST(Perplexity, UniformLogits) {
  const DenseMatrix logits(3, 8);
  EXPECT_NEAR(perplexity_proxy(logits, {1, 2}), 8.0, 1e-9);
  EXPECT_THROW(perplexity_proxy(logits, {}), InvalidArgument);
  EXPECT_THROW(perplexity_proxy(logits, {9}), InvalidArgument);
  EXPECT_EQ(next_token_targets({4, 5, 6}), (std::vector<std::size_t>{5, 6}));
}

TEST(Ablation, EmptyDimsChangeNothing) {
  const Model m = build_model(injected(3));
  const auto toks = seeded_tokens(32, m.config.vocab, 3);
  for (bool iso : {true, false}) {
    const auto r = ablate_and_measure(m, toks, OutlierSet{}, iso);
    EXPECT_EQ(r.mean_top1_with, r.mean_top1_without);
    EXPECT_EQ(r.ppl_proxy_with, r.ppl_proxy_without);
  }
}

TEST(Ablation, IsolatedModeLeavesPerplexityUnchanged) {
  const Model m = build_model(injected(3));
  const auto toks = seeded_tokens(32, m.config.vocab, 3);
  const auto r = ablate_and_measure(m, toks, OutlierSet({3}, 6.0), true);
  EXPECT_EQ(r.ppl_proxy_with, r.ppl_proxy_without);
  EXPECT_LT(r.top1_delta(), 0.0);
}

TEST(Ablation, ReferenceIsGreedyExactContinuation) {
  const Model m = build_model(injected(5));
  const auto toks = seeded_tokens(16, m.config.vocab, 5);
  const auto ref = greedy_reference(m, toks);
  ASSERT_EQ(ref.size(), toks.size() - 1);
  const auto tr = forward(m, toks);
  for (std::size_t t = 0; t < ref.size(); ++t) {
    const auto row = tr.logits.row(t);
    EXPECT_EQ(ref[t], std::size_t(std::max_element(row.begin(), row.end()) - row.begin()));
  }
}

// Property: over seeds, zeroing the injected dimension lowers top-1 attention
// and raises the perplexity proxy, while a random control of equal size
// moves both by less.
TEST(Property, AblationDirectionAndControl) {
  int direction = 0, dominance = 0;
  for (std::uint64_t seed = 101; seed <= 110; ++seed) {
    const Model m = build_model(injected(seed));
    const auto toks = seeded_tokens(48, m.config.vocab, seed);
    const auto det = detect_outlier_dims(forward(m, toks).hidden_stack);
    const auto ctrl = random_control_dims(m.config.hidden, det.size(), det, seed);
    const auto a = ablate_and_measure(m, toks, det, false);
    const auto b = ablate_and_measure(m, toks, ctrl, false, true);
    direction += a.top1_delta() < 0 && a.ppl_delta() > 0;
    dominance += std::fabs(b.top1_delta()) < std::fabs(a.top1_delta()) &&
                 std::fabs(b.ppl_delta()) < std::fabs(a.ppl_delta());
  }
  EXPECT_GE(direction, 9);
  EXPECT_GE(dominance, 9);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "mixq_transformer_test" / "model";
  fs::remove_all(dir);
  const Model m = build_model(injected(8, {1, 4}));
  save_model(dir, m);
  EXPECT_EQ(load_model(dir), m);
  EXPECT_EQ(to_json(load_model(dir).config), to_json(m.config));
  fs::remove(dir / "layer0_wq.qt8");
  EXPECT_ANY_THROW(load_model(dir));
}

TEST(Persistence, TraceExportFeedsAnalyzer) {
  const auto dir = fs::temp_directory_path() / "mixq_transformer_test" / "trace";
  fs::remove_all(dir);
  const Model m = build_model(injected(2));
  const auto tr = forward(m, seeded_tokens(40, m.config.vocab, 2));
  export_trace(dir, tr, 6.0);
  const auto b = read_stack(dir);
  EXPECT_EQ(b.stack, tr.hidden_stack);
  EXPECT_TRUE(detect_outlier_dims(b.stack).contains(3));
}
