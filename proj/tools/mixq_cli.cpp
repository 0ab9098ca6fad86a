// Command-line front end: quantize, sweep, analyze, ablate, mem, bench,
// trace and export-model. Exit codes: 0 ok, 1 runtime failure, 2 usage.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <mixq/mixq.hpp>

using namespace mixq;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw UsageError("invalid " + what + ": '" + s + "'");
  }
  if (pos != s.size()) throw UsageError("invalid " + what + ": '" + s + "'");
  return v;
}

std::vector<MatmulShape> parse_shapes(const std::vector<std::string>& items) {
  std::vector<MatmulShape> out;
  for (const auto& it : items) {
    try {
      out.push_back(parse_shape(it));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

std::vector<Scheme> parse_schemes(const std::vector<std::string>& items) {
  std::vector<Scheme> out;
  for (const auto& it : items) {
    try {
      out.push_back(parse_scheme(it));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

// "A..B" (inclusive) or a comma list.
std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const auto a = parse_u64(s.substr(0, dots), "seed range"), b = parse_u64(s.substr(dots + 2), "seed range");
    if (b < a) throw UsageError("seed range end precedes start: " + s);
    for (auto v = a; v <= b; ++v) out.push_back(v);
  } else {
    for (const auto& p : split(s, ',')) out.push_back(parse_u64(p, "seed"));
  }
  return out;
}

json params_json(const QuantParams& p) {
  return std::visit(
      [](const auto& q) -> json {
        using P = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<P, AbsmaxParams>) return {{"scale", q.scale}};
        else if constexpr (std::is_same_v<P, ZeropointParams>)
          return {{"nd", q.nd}, {"zp", q.zp}, {"offset", q.offset}};
        else return {{"scales", q.scales}};
      },
      p);
}

json ablation_json(const AblationResult& r) {
  return {{"mean_top1_with", r.mean_top1_with},         {"mean_top1_without", r.mean_top1_without},
          {"top1_delta", r.top1_delta()},               {"ppl_proxy_with", r.ppl_proxy_with},
          {"ppl_proxy_without", r.ppl_proxy_without},   {"ppl_delta", r.ppl_delta()}};
}

ToyModelConfig read_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("config is not valid JSON: " + std::string(e.what()));
  }
  auto c = config_from_json(j);
  c.validate();
  return c;
}

LinearBackend parse_backend(const std::string& name, double alpha) {
  if (name == "exact") return LinearBackend::exact();
  if (name == "llmint8") return LinearBackend::mixed_int8(alpha);
  throw UsageError("backend must be 'exact' or 'llmint8', got '" + name + "'");
}

// ---- subcommands ----

struct QuantizeArgs {
  std::string scheme, in, out;
};

int cmd_quantize(const QuantizeArgs& a) {
  const DenseMatrix x = qt8::read_as<float>(a.in);
  QuantizedTensor q = [&] {
    if (a.scheme == "absmax") return absmax_quantize(x);
    if (a.scheme == "zeropoint") return zeropoint_quantize(x);
    return rowwise_quantize(x);
  }();
  const DenseMatrix back = dequantize(q);
  double err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    err = std::max(err, std::fabs(double(back.data()[i]) - double(x.data()[i])));
  qt8::write_tensor(a.out, q.codes);
  const json side = {{"scheme", a.scheme},
                     {"rows", x.rows()},
                     {"cols", x.cols()},
                     {"params", params_json(q.params)},
                     {"round_trip_max_error", err}};
  write_text(a.out + ".json", side.dump(2) + "\n");
  std::cout << "round-trip max error: " << err << '\n';
  return 0;
}

struct SweepArgs {
  std::vector<std::string> shapes, schemes{"absmax", "zeropoint", "rowwise", "vectorwise", "llmint8"};
  std::size_t outlier_cols = 0;
  double outlier_scale = 20.0, alpha = kDefaultAlpha;
  std::string seeds = "1..5", out;
  unsigned workers = 1;
  bool f16 = false, no_timing = false;
};

int cmd_sweep(const SweepArgs& a) {
  SweepConfig cfg;
  cfg.shapes = parse_shapes(a.shapes);
  cfg.schemes = parse_schemes(a.schemes);
  cfg.seeds = parse_seeds(a.seeds);
  cfg.outlier_cols = a.outlier_cols;
  cfg.outlier_scale = a.outlier_scale;
  cfg.alpha = a.alpha;
  cfg.workers = a.workers;
  cfg.simulate_f16 = a.f16;
  const auto rows = run_sweep(cfg);
  write_text(a.out, sweep_csv(rows, !a.no_timing));
  std::ostream& os = (a.out.empty() || a.out == "-") ? std::cerr : std::cout;
  const auto sums = summarize(rows);
  os << "scheme,shape,trials,mean_rel_frobenius_error,mean_max_abs_error\n";
  for (const auto& s : sums)
    os << to_string(s.scheme) << ',' << s.shape.str() << ',' << s.trials << ',' << s.mean_rel_error << ','
       << s.mean_max_error << '\n';
  os << ordering_report(sums);
  return 0;
}

struct AnalyzeArgs {
  std::string stack, out, coverage = "positions";
  double alpha = kDefaultAlpha, layer_frac = 0.25, seq_frac = 0.06;
  bool as_json = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
  DetectionParams p;
  p.alpha = a.alpha;
  p.layer_frac = a.layer_frac;
  p.seq_frac = a.seq_frac;
  p.coverage = a.coverage == "pairs" ? SeqCoverage::LayerPositionPairs : SeqCoverage::Positions;
  try {
    p.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const StackBundle b = read_stack(a.stack);
  const auto stats = outlier_stats(b.stack, detect_outlier_dims(b.stack, p), p.coverage);
  write_text(a.out, a.as_json ? report_json(stats, p).dump(2) + "\n" : report_csv(stats));
  return 0;
}

struct AblateArgs {
  std::string config, dims = "detected", out, backend = "exact";
  std::size_t seq = 64;
  std::uint64_t token_seed = 1, seed = 1;
  double alpha = kDefaultAlpha;
  bool control = false;
};

int cmd_ablate(const AblateArgs& a) {
  const Model model = build_model(read_config(a.config));
  const auto tokens = seeded_tokens(a.seq, model.config.vocab, a.token_seed);
  const LinearBackend backend = parse_backend(a.backend, a.alpha);
  const std::size_t h = model.config.hidden;

  DetectionParams dp;
  dp.alpha = a.alpha;
  const OutlierSet detected = detect_outlier_dims(forward(model, tokens).hidden_stack, dp);

  OutlierSet dims;
  bool dims_are_control = false;
  if (a.dims == "detected") {
    dims = detected;
  } else if (a.dims.rfind("random:", 0) == 0) {
    dims = random_control_dims(h, parse_u64(a.dims.substr(7), "random dim count"), detected, a.seed);
    dims_are_control = true;
  } else if (a.dims.empty() || a.dims == "none") {
    dims = OutlierSet({}, a.alpha);
  } else {
    std::vector<std::size_t> v;
    for (const auto& p : split(a.dims, ',')) v.push_back(parse_u64(p, "dimension"));
    dims = OutlierSet(std::move(v), a.alpha);
    dims.check_bound(h);
  }

  auto measure = [&](const OutlierSet& d, bool control) {
    return json{{"dims", d.dims()},
                {"control", control},
                {"isolate", ablation_json(ablate_and_measure(model, tokens, d, true, control, backend))},
                {"cascade", ablation_json(ablate_and_measure(model, tokens, d, false, control, backend))}};
  };
  json out = {{"config", to_json(model.config)},
              {"backend", a.backend},
              {"seq", a.seq},
              {"token_seed", a.token_seed},
              {"detected", detected.dims()},
              {"ablation", measure(dims, dims_are_control)}};
  if (a.control) {
    std::vector<std::size_t> both = detected.dims();
    both.insert(both.end(), dims.dims().begin(), dims.dims().end());
    const auto ctrl = random_control_dims(h, dims.size(), OutlierSet(both, a.alpha), a.seed);
    out["control"] = measure(ctrl, true);
  }
  write_text(a.out, out.dump(2) + "\n");
  return 0;
}

struct MemArgs {
  std::uint64_t params = 0, hidden = 0, outliers = 0;
};

int cmd_mem(const MemArgs& a) {
  MemoryEstimate m;
  try {
    m = estimate_memory(a.params, a.hidden, a.outliers);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const json j = {{"parameter_count", m.parameter_count},
                  {"bytes_16bit", m.bytes_16bit},
                  {"bytes_8bit", m.bytes_8bit},
                  {"ratio", m.ratio}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

struct BenchArgs {
  std::vector<std::string> shapes, schemes{"exact", "absmax", "vectorwise", "llmint8"};
  std::size_t reps = 5, warmup = 1, outlier_cols = 2;
  double outlier_scale = 20.0, alpha = kDefaultAlpha;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  BenchConfig cfg;
  cfg.shapes = parse_shapes(a.shapes);
  cfg.schemes = parse_schemes(a.schemes);
  cfg.reps = a.reps;
  cfg.warmup = a.warmup;
  cfg.outlier_cols = a.outlier_cols;
  cfg.outlier_scale = a.outlier_scale;
  cfg.alpha = a.alpha;
  cfg.seed = a.seed;
  write_text(a.out, bench_csv(run_bench(cfg)));
  return 0;
}

struct TraceArgs {
  std::string config, out, backend = "exact";
  std::size_t seq = 64;
  std::uint64_t token_seed = 1;
  double alpha = kDefaultAlpha;
};

int cmd_trace(const TraceArgs& a) {
  const Model model = build_model(read_config(a.config));
  const auto tokens = seeded_tokens(a.seq, model.config.vocab, a.token_seed);
  const auto tr = forward(model, tokens, parse_backend(a.backend, a.alpha));
  export_trace(a.out, tr, a.alpha);
  std::cout << "mean top-1 attention: " << tr.mean_top1_softmax << "\nppl proxy: " << tr.ppl_proxy << '\n';
  return 0;
}

int cmd_export_model(const std::string& config, const std::string& out) {
  save_model(out, build_model(read_config(config)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Int8 matrix multiplication schemes, outlier analysis and ablation"};
  app.require_subcommand(1);
  std::function<int()> run;

  QuantizeArgs qa;
  auto* q = app.add_subcommand("quantize", "Quantize a QT8 f32 tensor to int8 codes plus a JSON sidecar");
  q->add_option("--scheme", qa.scheme)->required()->check(CLI::IsMember({"absmax", "zeropoint", "rowwise"}));
  q->add_option("--in", qa.in)->required();
  q->add_option("--out", qa.out)->required();
  q->callback([&] { run = [&] { return cmd_quantize(qa); }; });

  SweepArgs sa;
  auto* s = app.add_subcommand("sweep", "Compare schemes against the exact product on seeded trials");
  s->add_option("--shapes", sa.shapes, "SxHxO list")->required()->delimiter(',');
  s->add_option("--schemes", sa.schemes)->delimiter(',');
  s->add_option("--outlier-cols", sa.outlier_cols);
  s->add_option("--outlier-scale", sa.outlier_scale);
  s->add_option("--seeds", sa.seeds, "A..B or a comma list");
  s->add_option("--alpha", sa.alpha)->check(CLI::PositiveNumber);
  s->add_option("--workers", sa.workers)->check(CLI::PositiveNumber);
  s->add_flag("--simulate-f16", sa.f16, "round operands and outputs to binary16");
  s->add_flag("--no-timing", sa.no_timing, "write 0 in the wall time column");
  s->add_option("--out", sa.out, "CSV path, '-' for stdout");
  s->callback([&] { run = [&] { return cmd_sweep(sa); }; });

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Detect outlier feature dimensions in a hidden-state stack");
  an->add_option("--stack", aa.stack)->required();
  an->add_option("--alpha", aa.alpha);
  an->add_option("--layer-frac", aa.layer_frac);
  an->add_option("--seq-frac", aa.seq_frac);
  an->add_option("--seq-coverage", aa.coverage)->check(CLI::IsMember({"positions", "pairs"}));
  an->add_flag("--json", aa.as_json);
  an->add_option("--out", aa.out);
  an->callback([&] { run = [&] { return cmd_analyze(aa); }; });

  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "Zero feature dimensions in a toy transformer and measure the effect");
  abl->add_option("--config", ab.config)->required();
  abl->add_option("--dims", ab.dims, "detected | random:K | comma list | none");
  abl->add_option("--seq", ab.seq)->check(CLI::Range(2, 1 << 16));
  abl->add_option("--token-seed", ab.token_seed);
  abl->add_option("--seed", ab.seed, "seed for random dimension sets");
  abl->add_option("--alpha", ab.alpha)->check(CLI::PositiveNumber);
  abl->add_option("--backend", ab.backend)->check(CLI::IsMember({"exact", "llmint8"}));
  abl->add_flag("--control", ab.control, "also run a random control set of the same size");
  abl->add_option("--out", ab.out);
  abl->callback([&] { run = [&] { return cmd_ablate(ab); }; });

  MemArgs ma;
  auto* m = app.add_subcommand("mem", "Linear-layer memory at 16 bits versus Int8 with outlier dims");
  m->add_option("--params", ma.params)->required();
  m->add_option("--hidden", ma.hidden)->required();
  m->add_option("--outliers", ma.outliers);
  m->callback([&] { run = [&] { return cmd_mem(ma); }; });

  BenchArgs ba;
  auto* b = app.add_subcommand("bench", "Median per-phase timings per scheme and shape");
  b->add_option("--shapes", ba.shapes)->required()->delimiter(',');
  b->add_option("--schemes", ba.schemes)->delimiter(',');
  b->add_option("--reps", ba.reps)->check(CLI::Range(std::size_t{3}, std::size_t{1000000}));
  b->add_option("--warmup", ba.warmup);
  b->add_option("--outlier-cols", ba.outlier_cols);
  b->add_option("--outlier-scale", ba.outlier_scale);
  b->add_option("--alpha", ba.alpha)->check(CLI::PositiveNumber);
  b->add_option("--seed", ba.seed);
  b->add_option("--out", ba.out);
  b->callback([&] { run = [&] { return cmd_bench(ba); }; });

  TraceArgs ta;
  auto* t = app.add_subcommand("trace", "Run a toy model and export its hidden-state stack");
  t->add_option("--config", ta.config)->required();
  t->add_option("--out", ta.out)->required();
  t->add_option("--seq", ta.seq)->check(CLI::Range(2, 1 << 16));
  t->add_option("--token-seed", ta.token_seed);
  t->add_option("--alpha", ta.alpha)->check(CLI::PositiveNumber);
  t->add_option("--backend", ta.backend)->check(CLI::IsMember({"exact", "llmint8"}));
  t->callback([&] { run = [&] { return cmd_trace(ta); }; });

  std::string ex_config, ex_out;
  auto* ex = app.add_subcommand("export-model", "Write a toy model's weights as QT8 tensors");
  ex->add_option("--config", ex_config)->required();
  ex->add_option("--out", ex_out)->required();
  ex->callback([&] { run = [&] { return cmd_export_model(ex_config, ex_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
