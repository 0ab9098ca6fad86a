#pragma once

// Small deterministic decoder-only transformer used as a test bed for the
// Int8 linear backends and for zero-ablation of outlier features.
//
// Architecture (pre-norm, no biases in linear layers, no positional
// embedding, causal attention):
//
//   x = embed[tokens]
//   per layer:  a = LN1(x)                 <- captured in hidden_stack
//               x += attn(a) W_o           (Q, K, V, O via the backend)
//               f = LN2(x)
//               x += GELU(f W_1) W_2       (W_1, W_2 via the backend)
//   logits = LN_f(x) W_out                 (always exact)
//
// Layer norm, softmax and GELU run in double precision for every backend.
//
// Outlier injection sets the layer-norm bias of each injected feature to
// `scale` in LN1 and LN2 of every layer. Normalized features have unit RMS,
// so an injected feature sits near `scale` at every position and layer,
// one-sided with the sign of `scale`, while the other features stay O(1).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "gemm.hpp"
#include "outlier_set.hpp"
#include "outliers.hpp"
#include "qt8.hpp"
#include "stack_io.hpp"
#include "tensor.hpp"

namespace mixq {

struct OutlierInjection {
  std::vector<std::size_t> dims;
  double scale = 20.0;
};

struct ToyModelConfig {
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab = 64;
  std::uint64_t seed = 1;
  double embed_std = 1.0;
  // Linear weight stddev; 0 selects 1/sqrt(fan_in).
  double weight_std = 0.0;
  double logit_gain = 3.0;
  std::optional<OutlierInjection> outlier_injection;

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ffn_mult == 0 || vocab == 0)
      throw InvalidArgument("ToyModelConfig: counts must be >= 1");
    if (hidden % heads != 0) throw InvalidArgument("ToyModelConfig: hidden must be divisible by heads");
    if (!(embed_std > 0.0) || weight_std < 0.0 || !(logit_gain > 0.0))
      throw InvalidArgument("ToyModelConfig: invalid init scales");
    if (outlier_injection)
      for (std::size_t d : outlier_injection->dims)
        if (d >= hidden) throw InvalidArgument("ToyModelConfig: injected dim out of range");
  }
};

inline nlohmann::json to_json(const ToyModelConfig& c) {
  nlohmann::json j = {{"layers", c.layers},       {"hidden", c.hidden},       {"heads", c.heads},
                      {"ffn_mult", c.ffn_mult},   {"vocab", c.vocab},         {"seed", c.seed},
                      {"embed_std", c.embed_std}, {"weight_std", c.weight_std}, {"logit_gain", c.logit_gain}};
  if (c.outlier_injection)
    j["outlier_injection"] = {{"dims", c.outlier_injection->dims}, {"scale", c.outlier_injection->scale}};
  else
    j["outlier_injection"] = nullptr;
  return j;
}

inline ToyModelConfig config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.vocab = j.value("vocab", c.vocab);
    c.seed = j.value("seed", c.seed);
    c.embed_std = j.value("embed_std", c.embed_std);
    c.weight_std = j.value("weight_std", c.weight_std);
    c.logit_gain = j.value("logit_gain", c.logit_gain);
    if (j.contains("outlier_injection") && !j["outlier_injection"].is_null()) {
      const auto& oi = j["outlier_injection"];
      c.outlier_injection = OutlierInjection{oi.at("dims").get<std::vector<std::size_t>>(), oi.value("scale", 20.0)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
};

struct LayerWeights {
  LayerNormParams ln1, ln2;
  DenseMatrix wq, wk, wv, wo;  // h x h
  DenseMatrix w1;              // h x ffn
  DenseMatrix w2;              // ffn x h
};

struct Model {
  ToyModelConfig config;
  DenseMatrix embed;    // vocab x h
  DenseMatrix unembed;  // h x vocab
  std::vector<LayerWeights> layers;
  LayerNormParams ln_final;

  friend bool operator==(const Model& a, const Model& b) {
    if (!(a.embed == b.embed && a.unembed == b.unembed && a.layers.size() == b.layers.size() &&
          a.ln_final.gain == b.ln_final.gain && a.ln_final.bias == b.ln_final.bias))
      return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      const auto &x = a.layers[l], &y = b.layers[l];
      if (!(x.wq == y.wq && x.wk == y.wk && x.wv == y.wv && x.wo == y.wo && x.w1 == y.w1 && x.w2 == y.w2 &&
            x.ln1.gain == y.ln1.gain && x.ln1.bias == y.ln1.bias && x.ln2.gain == y.ln2.gain &&
            x.ln2.bias == y.ln2.bias))
        return false;
    }
    return true;
  }
};

inline Model build_model(const ToyModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden, ffn = config.hidden * config.ffn_mult;
  // Each tensor gets its own stream derived from the model seed so adding a
  // tensor never shifts the others.
  std::uint64_t stream = 0;
  auto draw = [&](std::size_t r, std::size_t c, double std) {
    return seeded_random_matrix(r, c, config.seed * 0x9E3779B97F4A7C15ull + (++stream), std);
  };
  auto wstd = [&](std::size_t fan_in) { return config.weight_std > 0 ? config.weight_std : 1.0 / std::sqrt(double(fan_in)); };
  auto norm = [&] {
    LayerNormParams p{std::vector<double>(h, 1.0), std::vector<double>(h, 0.0)};
    if (config.outlier_injection)
      for (std::size_t d : config.outlier_injection->dims) p.bias[d] = config.outlier_injection->scale;
    return p;
  };

  Model m;
  m.config = config;
  m.embed = draw(config.vocab, h, config.embed_std);
  m.unembed = draw(h, config.vocab, config.logit_gain / std::sqrt(double(h)));
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights w;
    w.ln1 = norm();
    w.ln2 = norm();
    w.wq = draw(h, h, wstd(h));
    w.wk = draw(h, h, wstd(h));
    w.wv = draw(h, h, wstd(h));
    w.wo = draw(h, h, wstd(h));
    w.w1 = draw(h, ffn, wstd(h));
    w.w2 = draw(ffn, h, wstd(ffn));
    m.layers.push_back(std::move(w));
  }
  m.ln_final = LayerNormParams{std::vector<double>(h, 1.0), std::vector<double>(h, 0.0)};
  return m;
}

// Backend used for every attention projection and FFN linear layer.
struct LinearBackend {
  Scheme scheme = Scheme::Exact;
  double alpha = kDefaultAlpha;  // MixedInt8 only

  static LinearBackend exact() { return {Scheme::Exact}; }
  static LinearBackend mixed_int8(double alpha = kDefaultAlpha) {
    if (!(alpha > 0.0)) throw InvalidArgument("LinearBackend: alpha must be positive");
    return {Scheme::MixedInt8, alpha};
  }
};

struct ForwardTrace {
  HiddenStateStack hidden_stack;      // LN1 output of every layer, s x h
  DenseMatrix logits;                 // s x vocab
  std::vector<WideMatrix> attention;  // layer-major, then head; s x s each
  double mean_top1_softmax = 0.0;
  double ppl_proxy = 0.0;
};

// Feature zeroing applied at the projection inputs (LN1 and LN2 outputs).
struct Intervention {
  OutlierSet dims;
  // Zero in every layer and propagate the altered states.
  bool cascade = false;
  // For each layer also recompute attention on a zeroed copy of LN1's output
  // without propagating it; trace reports mean top-1 of those probes.
  bool isolate_probe = false;
};

namespace detail {

inline DenseMatrix layer_norm(const DenseMatrix& x, const LayerNormParams& p) {
  const std::size_t h = x.cols();
  std::vector<float> out(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= double(h);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= double(h);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t c = 0; c < h; ++c)
      out[r * h + c] = static_cast<float>((row[c] - mean) * inv * p.gain[c] + p.bias[c]);
  }
  return DenseMatrix(x.rows(), h, std::move(out));
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  std::vector<float> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return DenseMatrix(a.rows(), a.cols(), std::move(v));
}

inline DenseMatrix gelu(const DenseMatrix& x) {
  std::vector<float> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = x.data()[i];
    v[i] = static_cast<float>(0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))));
  }
  return DenseMatrix(x.rows(), x.cols(), std::move(v));
}

inline DenseMatrix linear(const DenseMatrix& x, const DenseMatrix& w, const LinearBackend& b) {
  SchemeOptions opt;
  opt.alpha = b.alpha;
  return run_matmul(b.scheme, x, w, opt).output;
}

struct AttentionOut {
  DenseMatrix context;             // s x h, before W_o
  std::vector<WideMatrix> probs;   // per head
  double top1_sum = 0.0;           // summed over heads and query rows
};

inline AttentionOut attention(const DenseMatrix& a, const LayerWeights& w, std::size_t heads,
                              const LinearBackend& b) {
  const DenseMatrix q = linear(a, w.wq, b), k = linear(a, w.wk, b), v = linear(a, w.wv, b);
  const std::size_t s = a.rows(), h = a.cols(), dh = h / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  std::vector<float> ctx(s * h, 0.0f);
  AttentionOut out;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    std::vector<double> p(s * s, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      std::vector<double> sc(i + 1);
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += double(q(i, hd * dh + c)) * double(k(j, hd * dh + c));
        sc[j] = dot * inv_sqrt;
        mx = std::max(mx, sc[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) z += (sc[j] = std::exp(sc[j] - mx));
      double top = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[i * s + j] = sc[j] / z;
        top = std::max(top, p[i * s + j]);
      }
      out.top1_sum += top;
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += p[i * s + j] * double(v(j, hd * dh + c));
        ctx[i * h + hd * dh + c] = static_cast<float>(acc);
      }
    }
    out.probs.emplace_back(s, s, std::move(p));
  }
  out.context = DenseMatrix(s, h, std::move(ctx));
  return out;
}

}  // namespace detail

// Targets for the perplexity proxy: position t is scored against targets[t]
// for t = 0 .. s-2.
inline std::vector<std::size_t> next_token_targets(const std::vector<std::size_t>& tokens) {
  return std::vector<std::size_t>(tokens.begin() + 1, tokens.end());
}

inline double perplexity_proxy(const DenseMatrix& logits, const std::vector<std::size_t>& targets) {
  if (targets.empty() || targets.size() > logits.rows())
    throw InvalidArgument("perplexity_proxy: need 1..rows targets");
  double ce = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto row = logits.row(t);
    if (targets[t] >= row.size()) throw InvalidArgument("perplexity_proxy: target outside vocab");
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : row) mx = std::max(mx, double(v));
    double z = 0.0;
    for (float v : row) z += std::exp(double(v) - mx);
    ce += std::log(z) + mx - double(row[targets[t]]);
  }
  return std::exp(ce / double(targets.size()));
}

inline ForwardTrace forward(const Model& model, const std::vector<std::size_t>& tokens,
                            const LinearBackend& backend = LinearBackend::exact(),
                            const std::optional<std::vector<std::size_t>>& targets = std::nullopt,
                            const Intervention& iv = {}) {
  const auto& cfg = model.config;
  if (tokens.size() < 2) throw InvalidArgument("forward: need at least 2 tokens");
  for (std::size_t t : tokens)
    if (t >= cfg.vocab) throw InvalidArgument("forward: token " + std::to_string(t) + " outside vocab");
  iv.dims.check_bound(cfg.hidden);
  const std::size_t s = tokens.size(), h = cfg.hidden;

  std::vector<float> e;
  e.reserve(s * h);
  for (std::size_t t : tokens) {
    const auto row = model.embed.row(t);
    e.insert(e.end(), row.begin(), row.end());
  }
  DenseMatrix x(s, h, std::move(e));

  ForwardTrace tr;
  std::vector<DenseMatrix> captured;
  double top1_sum = 0.0, probe_sum = 0.0;
  for (const auto& w : model.layers) {
    DenseMatrix a = detail::layer_norm(x, w.ln1);
    if (iv.cascade && !iv.dims.empty()) a = zero_columns(a, iv.dims);
    captured.push_back(a);
    auto att = detail::attention(a, w, cfg.heads, backend);
    if (iv.isolate_probe) {
      probe_sum += iv.dims.empty() ? att.top1_sum
                                   : detail::attention(zero_columns(a, iv.dims), w, cfg.heads, backend).top1_sum;
    }
    top1_sum += att.top1_sum;
    for (auto& p : att.probs) tr.attention.push_back(std::move(p));
    x = detail::add(x, detail::linear(att.context, w.wo, backend));

    DenseMatrix f = detail::layer_norm(x, w.ln2);
    if (iv.cascade && !iv.dims.empty()) f = zero_columns(f, iv.dims);
    x = detail::add(x, detail::linear(detail::gelu(detail::linear(f, w.w1, backend)), w.w2, backend));
  }
  tr.hidden_stack = HiddenStateStack(std::move(captured));
  tr.logits = narrow(matmul_wide(detail::layer_norm(x, model.ln_final), model.unembed));
  const double denom = double(cfg.layers * cfg.heads * s);
  tr.mean_top1_softmax = (iv.isolate_probe ? probe_sum : top1_sum) / denom;
  tr.ppl_proxy = perplexity_proxy(tr.logits, targets ? *targets : next_token_targets(tokens));
  return tr;
}

// Greedy continuation of the unmodified exact model: row t's argmax for
// t = 0 .. s-2. Used as the fixed reference sequence for ablations.
inline std::vector<std::size_t> greedy_reference(const Model& model, const std::vector<std::size_t>& tokens) {
  const auto tr = forward(model, tokens);
  std::vector<std::size_t> ref;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = tr.logits.row(t);
    ref.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return ref;
}

struct AblationResult {
  double mean_top1_with = 0.0;
  double mean_top1_without = 0.0;
  double ppl_proxy_with = 0.0;
  double ppl_proxy_without = 0.0;
  OutlierSet dims_zeroed;
  bool control = false;
  bool isolate_layers = false;

  double top1_delta() const noexcept { return mean_top1_without - mean_top1_with; }
  double ppl_delta() const noexcept { return ppl_proxy_without - ppl_proxy_with; }
};

// isolate_layers = true: each layer's attention is re-evaluated on a zeroed
// copy of its input while the unmodified states flow on; perplexity is
// therefore unchanged. isolate_layers = false: dims are zeroed in every
// layer and the altered states propagate.
inline AblationResult ablate_and_measure(const Model& model, const std::vector<std::size_t>& tokens,
                                         const OutlierSet& dims, bool isolate_layers, bool control = false,
                                         const LinearBackend& backend = LinearBackend::exact()) {
  const auto ref = greedy_reference(model, tokens);
  const auto base = forward(model, tokens, backend, ref);
  Intervention iv;
  iv.dims = dims;
  iv.cascade = !isolate_layers;
  iv.isolate_probe = isolate_layers;
  const auto ablated = forward(model, tokens, backend, ref, iv);
  AblationResult r;
  r.mean_top1_with = base.mean_top1_softmax;
  r.mean_top1_without = ablated.mean_top1_softmax;
  r.ppl_proxy_with = base.ppl_proxy;
  r.ppl_proxy_without = ablated.ppl_proxy;
  r.dims_zeroed = dims;
  r.control = control;
  r.isolate_layers = isolate_layers;
  return r;
}

inline std::vector<std::size_t> seeded_tokens(std::size_t length, std::size_t vocab, std::uint64_t seed) {
  NormalSampler rng(seed);
  std::vector<std::size_t> t(length);
  for (auto& v : t) v = uniform_below(rng, vocab);
  return t;
}

// Weights directory: config.json plus one QT8 tensor per parameter.
// Layer-norm vectors are stored as 1 x h f32 tensors.
namespace detail {

inline DenseMatrix as_row(const std::vector<double>& v) {
  const std::size_t n = v.size();
  return DenseMatrix(1, n, std::vector<float>(v.begin(), v.end()));
}

inline std::vector<double> from_row(const DenseMatrix& m, std::size_t h) {
  if (m.rows() != 1 || m.cols() != h) throw FormatError("layer-norm tensor has wrong shape");
  return std::vector<double>(m.data().begin(), m.data().end());
}

inline DenseMatrix read_shaped(const std::filesystem::path& p, std::size_t r, std::size_t c) {
  auto m = qt8::read_as<float>(p);
  if (m.rows() != r || m.cols() != c) throw FormatError(p.string() + ": unexpected shape");
  return m;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& dir, const Model& m) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "config.json");
    if (!f) throw IoError("cannot write " + (dir / "config.json").string());
    f << to_json(m.config).dump(2) << '\n';
  }
  qt8::write_tensor(dir / "embed.qt8", m.embed);
  qt8::write_tensor(dir / "unembed.qt8", m.unembed);
  qt8::write_tensor(dir / "lnf_gain.qt8", detail::as_row(m.ln_final.gain));
  qt8::write_tensor(dir / "lnf_bias.qt8", detail::as_row(m.ln_final.bias));
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& w = m.layers[l];
    const std::string p = "layer" + std::to_string(l) + "_";
    qt8::write_tensor(dir / (p + "ln1_gain.qt8"), detail::as_row(w.ln1.gain));
    qt8::write_tensor(dir / (p + "ln1_bias.qt8"), detail::as_row(w.ln1.bias));
    qt8::write_tensor(dir / (p + "ln2_gain.qt8"), detail::as_row(w.ln2.gain));
    qt8::write_tensor(dir / (p + "ln2_bias.qt8"), detail::as_row(w.ln2.bias));
    qt8::write_tensor(dir / (p + "wq.qt8"), w.wq);
    qt8::write_tensor(dir / (p + "wk.qt8"), w.wk);
    qt8::write_tensor(dir / (p + "wv.qt8"), w.wv);
    qt8::write_tensor(dir / (p + "wo.qt8"), w.wo);
    qt8::write_tensor(dir / (p + "w1.qt8"), w.w1);
    qt8::write_tensor(dir / (p + "w2.qt8"), w.w2);
  }
}

inline Model load_model(const std::filesystem::path& dir) {
  std::ifstream f(dir / "config.json");
  if (!f) throw IoError("missing " + (dir / "config.json").string());
  Model m;
  try {
    m.config = config_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("config.json: ") + e.what());
  }
  const auto& c = m.config;
  const std::size_t h = c.hidden, ffn = c.hidden * c.ffn_mult;
  m.embed = detail::read_shaped(dir / "embed.qt8", c.vocab, h);
  m.unembed = detail::read_shaped(dir / "unembed.qt8", h, c.vocab);
  m.ln_final.gain = detail::from_row(qt8::read_as<float>(dir / "lnf_gain.qt8"), h);
  m.ln_final.bias = detail::from_row(qt8::read_as<float>(dir / "lnf_bias.qt8"), h);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + "_";
    LayerWeights w;
    w.ln1.gain = detail::from_row(qt8::read_as<float>(dir / (p + "ln1_gain.qt8")), h);
    w.ln1.bias = detail::from_row(qt8::read_as<float>(dir / (p + "ln1_bias.qt8")), h);
    w.ln2.gain = detail::from_row(qt8::read_as<float>(dir / (p + "ln2_gain.qt8")), h);
    w.ln2.bias = detail::from_row(qt8::read_as<float>(dir / (p + "ln2_bias.qt8")), h);
    w.wq = detail::read_shaped(dir / (p + "wq.qt8"), h, h);
    w.wk = detail::read_shaped(dir / (p + "wk.qt8"), h, h);
    w.wv = detail::read_shaped(dir / (p + "wv.qt8"), h, h);
    w.wo = detail::read_shaped(dir / (p + "wo.qt8"), h, h);
    w.w1 = detail::read_shaped(dir / (p + "w1.qt8"), h, ffn);
    w.w2 = detail::read_shaped(dir / (p + "w2.qt8"), ffn, h);
    m.layers.push_back(std::move(w));
  }
  return m;
}

// Writes the trace's hidden states in the stack-directory layout; every
// entry is an attention-projection input.
inline void export_trace(const std::filesystem::path& dir, const ForwardTrace& tr,
                         std::optional<double> alpha_used = std::nullopt) {
  write_stack(dir, tr.hidden_stack, alpha_used, std::vector<std::string>(tr.hidden_stack.layers(), "attn_in"));
}

}  // namespace mixq
