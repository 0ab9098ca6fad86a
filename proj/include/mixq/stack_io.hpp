#pragma once

// On-disk hidden-state stacks and outlier reports.
//
// A stack directory holds layer_<l>.qt8 (f32, seq x hidden) for
// l = 0..layers-1 and a manifest.json:
//
//   {"layers": L, "seq": S, "hidden": H, "alpha_used": 6.0,
//    "roles": ["attn_in", ...]}        // roles optional, one per file
//
// When roles are present only "attn_in" and "ffn_expand_in" entries are
// analyzed. Reports are CSV with the fixed header kReportCsvHeader, or JSON.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "outliers.hpp"
#include "qt8.hpp"

namespace mixq {

struct StackBundle {
  HiddenStateStack stack;
  std::optional<double> alpha_used;
  std::vector<std::string> roles;
};

inline bool is_analyzed_role(const std::string& role) { return role == "attn_in" || role == "ffn_expand_in"; }

inline std::filesystem::path layer_file(const std::filesystem::path& dir, std::size_t l) {
  return dir / ("layer_" + std::to_string(l) + ".qt8");
}

inline void write_stack(const std::filesystem::path& dir, const HiddenStateStack& stack,
                        std::optional<double> alpha_used = std::nullopt,
                        const std::vector<std::string>& roles = {}) {
  if (!roles.empty() && roles.size() != stack.layers())
    throw InvalidArgument("write_stack: one role per layer file required");
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < stack.layers(); ++l) qt8::write_tensor(layer_file(dir, l), stack[l]);
  nlohmann::json m = {{"layers", stack.layers()}, {"seq", stack.seq()}, {"hidden", stack.hidden()}};
  m["alpha_used"] = alpha_used ? nlohmann::json(*alpha_used) : nlohmann::json(nullptr);
  if (!roles.empty()) m["roles"] = roles;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << m.dump(2) << '\n';
}

inline StackBundle read_stack(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw IoError("missing manifest: " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  auto field = [&](const char* key) -> std::size_t {
    if (!m.contains(key) || !m[key].is_number_unsigned())
      throw FormatError(std::string("manifest: missing or invalid '") + key + "'");
    return m[key].get<std::size_t>();
  };
  const std::size_t L = field("layers"), S = field("seq"), H = field("hidden");
  StackBundle b;
  for (const char* key : {"alpha_used", "alpha-used"})
    if (m.contains(key) && m[key].is_number()) b.alpha_used = m[key].get<double>();
  if (m.contains("roles")) {
    b.roles = m["roles"].get<std::vector<std::string>>();
    if (b.roles.size() != L) throw FormatError("manifest: roles list length differs from layers");
  }
  std::vector<DenseMatrix> layers;
  for (std::size_t l = 0; l < L; ++l) {
    const auto path = layer_file(dir, l);
    if (!std::filesystem::exists(path)) throw FormatError("manifest lists " + std::to_string(L) +
                                                          " layers but " + path.string() + " is missing");
    auto mat = qt8::read_as<float>(path);
    if (mat.rows() != S || mat.cols() != H)
      throw FormatError(path.string() + " is " + std::to_string(mat.rows()) + "x" + std::to_string(mat.cols()) +
                        ", manifest says " + std::to_string(S) + "x" + std::to_string(H));
    if (b.roles.empty() || is_analyzed_role(b.roles[l])) layers.push_back(std::move(mat));
  }
  if (std::filesystem::exists(layer_file(dir, L)))
    throw FormatError("manifest lists " + std::to_string(L) + " layers but more layer files are present");
  b.stack = HiddenStateStack(std::move(layers));
  return b;
}

inline constexpr const char* kReportCsvHeader = "dim,count,one_sided,layers_pct,sdims_pct,q1,median,q3";

inline std::string report_csv(const std::vector<OutlierStat>& stats) {
  std::ostringstream os;
  os.precision(9);
  os << kReportCsvHeader << '\n';
  for (const auto& s : stats) {
    os << s.index << ',' << s.count << ',' << (s.one_sided ? 1 : 0) << ',' << 100.0 * s.layer_fraction << ','
       << 100.0 * s.seq_fraction << ',';
    if (s.quartiles) os << s.quartiles->q1 << ',' << s.quartiles->median << ',' << s.quartiles->q3;
    else os << ",,";
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json report_json(const std::vector<OutlierStat>& stats, const DetectionParams& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : stats) {
    nlohmann::json r = {{"dim", s.index},
                        {"count", s.count},
                        {"one_sided", s.one_sided},
                        {"layers_pct", 100.0 * s.layer_fraction},
                        {"sdims_pct", 100.0 * s.seq_fraction}};
    if (s.quartiles) r["quartiles"] = {s.quartiles->q1, s.quartiles->median, s.quartiles->q3};
    else r["quartiles"] = nullptr;
    rows.push_back(std::move(r));
  }
  return {{"alpha", p.alpha},
          {"layer_frac", p.layer_frac},
          {"seq_frac", p.seq_frac},
          {"seq_coverage", p.coverage == SeqCoverage::Positions ? "positions" : "layer_position_pairs"},
          {"outliers", std::move(rows)}};
}

}  // namespace mixq
