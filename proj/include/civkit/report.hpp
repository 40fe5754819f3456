#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "civkit/f_test.hpp"
#include "civkit/gmm.hpp"
#include "civkit/me_variance.hpp"
#include "civkit/mediation.hpp"
#include "civkit/outcome.hpp"
#include "civkit/simulation.hpp"
#include "civkit/version.hpp"

namespace civkit {

// Ordered JSON keeps key order stable so identical runs serialize to
// identical bytes.
using json = nlohmann::ordered_json;

inline json tool_block() {
  return json{{"name", kToolName}, {"version", kToolVersion}};
}

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline json to_json(const GmmFit& fit) {
  json se = json::array();
  for (Eigen::Index j = 0; j < fit.theta.size(); ++j) se.push_back(fit.se(j));
  return json{{"labels", fit.labels},
              {"theta", to_json(fit.theta)},
              {"se", se},
              {"cov", to_json(fit.cov)},
              {"n", fit.n},
              {"max_abs_moment", fit.max_abs_moment}};
}

inline json to_json(const FTestResult& r) {
  return json{{"f_statistic", r.f_statistic}, {"df_num", r.df_num},
              {"df_den", r.df_den},           {"p_value", r.p_value},
              {"threshold", r.threshold},     {"is_weak", r.is_weak}};
}

inline json to_json(const MeVarianceEstimate& m) {
  return json{{"sigma2", m.sigma2},
              {"se", m.se},
              {"reliability", m.reliability},
              {"reliability_valid", m.reliability_valid},
              {"t_choice", m.t_choice},
              {"source_model", m.source_model},
              {"warnings", m.warnings}};
}

inline json to_json(const OutcomeFit& fit) {
  json j{{"model", fit.kind == OutcomeModelKind::linear ? "linear" : "partially_linear"},
         {"builder", to_string(fit.builder)},
         {"gmm", to_json(fit.gmm)}};
  if (fit.mu) {
    j["mu"] = *fit.mu;
    j["mu_se"] = *fit.mu_se;
  }
  if (!fit.z_grid.empty()) {
    json grid = json::array();
    for (std::size_t k = 0; k < fit.z_grid.size(); ++k)
      grid.push_back(json{{"z", fit.z_grid[k]},
                          {"mu", fit.mu_grid[static_cast<Eigen::Index>(k)]},
                          {"se", fit.mu_grid_se[static_cast<Eigen::Index>(k)]}});
    j["dose_response"] = grid;
  }
  if (!fit.trust_notes.empty()) j["notes"] = fit.trust_notes;
  return j;
}

inline json to_json(const EffectReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json jr;
    jr["moderator_level"] =
        row.moderator_level ? json(*row.moderator_level) : json(nullptr);
    jr["NDE"] = row.nde;
    jr["NIE"] = row.nie;
    jr["TE"] = row.te;
    auto put_ci = [&jr](const char* key,
                        const std::optional<std::pair<double, double>>& ci) {
      if (ci) jr[key] = json::array({ci->first, ci->second});
    };
    put_ci("NDE_ci", row.nde_ci);
    put_ci("NIE_ci", row.nie_ci);
    put_ci("TE_ci", row.te_ci);
    rows.push_back(jr);
  }
  json j{{"method", r.method},
         {"contrast", json{{"a_prime", r.a_prime}, {"a_dprime", r.a_dprime}}},
         {"level", r.level},
         {"effects", rows}};
  if (r.bootstrap_B > 0) {
    j["bootstrap"] =
        json{{"B", r.bootstrap_B}, {"dropped", r.bootstrap_dropped}};
  }
  if (r.sigma2_used) j["sigma2_used"] = *r.sigma2_used;
  j["warnings"] = r.warnings;
  return j;
}

inline json to_json(const MonteCarloReport& r) {
  json pipelines = json::array();
  for (const auto& p : r.grid.pipelines) pipelines.push_back(p.label());
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back(json{{"pipeline", c.pipeline},
                         {"reliability", c.reliability},
                         {"estimand", c.estimand},
                         {"truth", c.truth},
                         {"bias", c.bias},
                         {"variance", c.variance},
                         {"coverage", c.coverage},
                         {"replications_used", c.replications_used},
                         {"failed", c.failed},
                         {"flagged", c.flagged}});
  return json{{"grid",
               json{{"reliabilities", r.grid.reliabilities},
                    {"scenario", to_string(r.grid.scenario)},
                    {"n", r.grid.n},
                    {"pipelines", pipelines}}},
              {"R", r.R},
              {"seed", r.seed},
              {"bootstrap_B", r.bootstrap_B},
              {"cells", cells}};
}

inline std::string render_markdown(const GmmFit& fit) {
  std::ostringstream os;
  os << "| coefficient | estimate | se |\n|---|---|---|\n";
  char buf[80];
  for (Eigen::Index j = 0; j < fit.theta.size(); ++j) {
    std::snprintf(buf, sizeof(buf), "%.3f | %.3f", fit.theta[j], fit.se(j));
    os << "| " << (j < static_cast<Eigen::Index>(fit.labels.size())
                       ? fit.labels[static_cast<std::size_t>(j)]
                       : std::to_string(j))
       << " | " << buf << " |\n";
  }
  return os.str();
}

inline std::string render_markdown(const EffectReport& r) {
  std::ostringstream os;
  os << "# " << r.method << "\n\n";
  os << "| moderator | NDE | NIE | TE |\n|---|---|---|---|\n";
  char buf[160];
  auto cell = [&](double v, const std::optional<std::pair<double, double>>& ci) {
    if (ci)
      std::snprintf(buf, sizeof(buf), "%.3f (%.3f, %.3f)", v, ci->first, ci->second);
    else
      std::snprintf(buf, sizeof(buf), "%.3f", v);
    return std::string(buf);
  };
  for (const auto& row : r.rows) {
    os << "| "
       << (row.moderator_level ? std::to_string(*row.moderator_level) : ".")
       << " | " << cell(row.nde, row.nde_ci) << " | " << cell(row.nie, row.nie_ci)
       << " | " << cell(row.te, row.te_ci) << " |\n";
  }
  return os.str();
}

inline std::string render_report(const MonteCarloReport& report,
                                 const std::string& format) {
  if (format == "markdown" || format == "markdown_table")
    return render_markdown(report);
  if (format == "csv") return render_csv(report);
  if (format == "json") return to_json(report).dump(2) + "\n";
  throw parse_error("unknown report format: " + format);
}

// Minimal JSON-schema checker covering the subset our shipped schemas use:
// type, properties, required, items, enum, additionalProperties (boolean),
// and local "$ref": "#/definitions/<name>" references. Throws schema_error
// with a JSON-pointer-ish path on the first violation.
inline void validate_schema_at(const json& doc, const json& schema,
                               const json& root, const std::string& path);

inline void validate_schema(const json& doc, const json& schema,
                            const std::string& path = "$") {
  validate_schema_at(doc, schema, schema, path);
}

inline void validate_schema_at(const json& doc, const json& schema_in,
                               const json& root, const std::string& path) {
  json schema = schema_in;
  if (schema.contains("$ref")) {
    const std::string ref = schema["$ref"];
    const std::string prefix = "#/definitions/";
    if (ref.rfind(prefix, 0) != 0 || !root.contains("definitions"))
      throw schema_error("unsupported $ref: " + ref);
    schema = root["definitions"][ref.substr(prefix.size())];
  }
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    const bool ok = (t == "object" && doc.is_object()) ||
                    (t == "array" && doc.is_array()) ||
                    (t == "string" && doc.is_string()) ||
                    (t == "number" && doc.is_number()) ||
                    (t == "integer" && doc.is_number_integer()) ||
                    (t == "boolean" && doc.is_boolean()) ||
                    (t == "null" && doc.is_null());
    if (!ok)
      throw schema_error("schema violation at " + path + ": expected type " + t);
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& v : schema["enum"])
      if (v == doc) found = true;
    if (!found)
      throw schema_error("schema violation at " + path + ": value not in enum");
  }
  if (doc.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema["required"])
        if (!doc.contains(key.get<std::string>()))
          throw schema_error("schema violation at " + path + ": missing required key '" +
                             key.get<std::string>() + "'");
    if (schema.contains("properties")) {
      for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (schema["properties"].contains(it.key())) {
          validate_schema_at(it.value(), schema["properties"][it.key()], root,
                             path + "." + it.key());
        } else if (schema.contains("additionalProperties") &&
                   schema["additionalProperties"].is_boolean() &&
                   !schema["additionalProperties"].get<bool>()) {
          throw schema_error("schema violation at " + path + ": unexpected key '" +
                             it.key() + "'");
        }
      }
    }
  }
  if (doc.is_array() && schema.contains("items")) {
    for (std::size_t i = 0; i < doc.size(); ++i)
      validate_schema_at(doc[i], schema["items"], root,
                         path + "[" + std::to_string(i) + "]");
  }
}

}  // namespace civkit
