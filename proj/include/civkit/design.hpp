#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/errors.hpp"

namespace civkit {

// One multiplicative design term: a product of column powers. An empty
// factor list is the intercept. Text form: "1", "Z", "Z^2", "A*site".
struct Term {
  struct Factor {
    std::string name;
    int power = 1;
  };
  std::vector<Factor> factors;

  bool is_intercept() const { return factors.empty(); }

  std::string label() const {
    if (factors.empty()) return "1";
    std::string s;
    for (std::size_t k = 0; k < factors.size(); ++k) {
      if (k) s += '*';
      s += factors[k].name;
      if (factors[k].power != 1) s += '^' + std::to_string(factors[k].power);
    }
    return s;
  }

  static Term parse(const std::string& text) {
    std::string t;
    for (char c : text)
      if (c != ' ' && c != '\t') t += c;
    if (t.empty()) throw parse_error("empty model term");
    if (t == "1") return Term{};
    Term term;
    std::size_t start = 0;
    while (start <= t.size()) {
      const std::size_t star = t.find('*', start);
      const std::string piece =
          t.substr(start, star == std::string::npos ? std::string::npos : star - start);
      if (piece.empty()) throw parse_error("malformed model term: '" + text + "'");
      const std::size_t caret = piece.find('^');
      Factor f;
      if (caret == std::string::npos) {
        f.name = piece;
      } else {
        f.name = piece.substr(0, caret);
        try {
          f.power = std::stoi(piece.substr(caret + 1));
        } catch (const std::exception&) {
          throw parse_error("bad power in model term: '" + text + "'");
        }
        if (f.power < 1) throw parse_error("power must be >= 1 in term: '" + text + "'");
      }
      if (f.name.empty()) throw parse_error("malformed model term: '" + text + "'");
      term.factors.push_back(std::move(f));
      if (star == std::string::npos) break;
      start = star + 1;
    }
    return term;
  }

  Eigen::VectorXd evaluate(const Dataset& ds) const {
    Eigen::VectorXd col = Eigen::VectorXd::Ones(ds.n_rows());
    for (const auto& f : factors) {
      const Eigen::VectorXd& v = ds.column(f.name);  // throws schema_error if absent
      for (int p = 0; p < f.power; ++p) col.array() *= v.array();
    }
    return col;
  }
};

// Ordered list of terms defining design-matrix columns. The declaration
// order is the column order; the intercept, when present, must come first
// so the theta_0 index is fixed for all downstream algebra.
struct ModelLayout {
  std::vector<Term> terms;

  static ModelLayout parse(const std::string& comma_separated) {
    ModelLayout layout;
    std::size_t start = 0;
    while (start <= comma_separated.size()) {
      const std::size_t comma = comma_separated.find(',', start);
      const std::string piece = comma_separated.substr(
          start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!piece.empty() &&
          piece.find_first_not_of(" \t") != std::string::npos)
        layout.terms.push_back(Term::parse(piece));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (layout.terms.empty()) throw parse_error("empty model layout");
    return layout;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    out.reserve(terms.size());
    for (const auto& t : terms) out.push_back(t.label());
    return out;
  }

  bool contains(const Term& t) const {
    const std::string l = t.label();
    for (const auto& mine : terms)
      if (mine.label() == l) return true;
    return false;
  }

  ModelLayout& add(Term t) {
    terms.push_back(std::move(t));
    return *this;
  }
};

struct DesignMatrices {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::vector<std::string> column_labels;
};

// Evaluates a layout into a matrix (no response). Non-intercept constant
// columns are rejected; a misplaced intercept is a composition error.
inline Eigen::MatrixXd evaluate_layout(const Dataset& ds, const ModelLayout& layout,
                                       bool check_degenerate = true) {
  if (layout.terms.empty()) throw composition_error("model layout has no terms");
  for (std::size_t j = 1; j < layout.terms.size(); ++j)
    if (layout.terms[j].is_intercept())
      throw composition_error("intercept must be the first design column");
  Eigen::MatrixXd X(ds.n_rows(), static_cast<Eigen::Index>(layout.terms.size()));
  for (std::size_t j = 0; j < layout.terms.size(); ++j) {
    X.col(static_cast<Eigen::Index>(j)) = layout.terms[j].evaluate(ds);
    if (check_degenerate && !layout.terms[j].is_intercept()) {
      const auto& c = X.col(static_cast<Eigen::Index>(j));
      if ((c.array() == c[0]).all())
        throw degenerate_column_error("design column '" + layout.terms[j].label() +
                                      "' is constant");
    }
  }
  return X;
}

inline DesignMatrices build_design(const Dataset& ds, const RoleMap& roles,
                                   const ModelLayout& layout) {
  roles.validate(ds);
  DesignMatrices d;
  d.X = evaluate_layout(ds, layout);
  d.y = ds.column(roles.outcome);
  d.column_labels = layout.labels();
  return d;
}

// The documented default regressor order for the linear outcome model:
// [1, error_prone..., clean_covariates..., Z].
inline ModelLayout linear_outcome_layout(const RoleMap& roles) {
  ModelLayout layout;
  layout.terms.push_back(Term{});
  for (const auto& c : roles.error_prone)
    layout.terms.push_back(Term{{{c, 1}}});
  for (const auto& c : roles.clean_covariates)
    layout.terms.push_back(Term{{{c, 1}}});
  layout.terms.push_back(Term{{{roles.exposure_or_mediator, 1}}});
  return layout;
}

}  // namespace civkit
