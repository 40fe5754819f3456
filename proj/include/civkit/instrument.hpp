#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/design.hpp"
#include "civkit/errors.hpp"
#include "civkit/nuisance.hpp"

namespace civkit {

enum class InstrumentBuilder { simple, efficient_star, c1_dependent, raw_design };

inline const char* to_string(InstrumentBuilder b) {
  switch (b) {
    case InstrumentBuilder::simple: return "simple";
    case InstrumentBuilder::efficient_star: return "efficient_star";
    case InstrumentBuilder::c1_dependent: return "c1_dependent";
    case InstrumentBuilder::raw_design: return "raw_design";
  }
  return "?";
}

struct InstrumentOptions {
  // s-functions for the simple builder, as term expressions over Z and the
  // clean covariates (e.g. "Z^2", "Z^3", "Z*C"). Default: Z^{j+1} for the
  // j-th error-prone column.
  std::vector<std::string> simple_terms;
  // efficient_star: scale rows by 1 / sigma_hat^2(Z,C2) when the nuisance
  // fit carries outcome variance predictions. Off by default; the unweighted
  // vector is the homoscedastic simplification.
  bool use_outcome_variance_weights = false;
};

// Constructed-instrument evaluations, row-aligned with the outcome design.
// For the c1_dependent builder the instrument is S1 * C1* + S2 and the
// mean-zero requirement applies to the flagged columns of S1.
struct InstrumentMatrix {
  Eigen::MatrixXd S;
  InstrumentBuilder builder = InstrumentBuilder::raw_design;
  Eigen::MatrixXd S1;                  // c1_dependent only
  std::vector<int> mean_zero_columns;  // indices into S1
  std::vector<std::string> column_labels;

  void validate() const {
    for (int j : mean_zero_columns) {
      const double m = S1.col(j).mean();
      if (std::abs(m) > 1e-10)
        throw composition_error("instrument column " + std::to_string(j) +
                                " violates the mean-zero requirement (mean " +
                                std::to_string(m) + ")");
    }
  }
};

namespace detail {

inline void check_instrument_term_vars(const Term& term, const RoleMap& roles) {
  for (const auto& f : term.factors) {
    const bool ok = f.name == roles.exposure_or_mediator ||
                    std::find(roles.clean_covariates.begin(),
                              roles.clean_covariates.end(),
                              f.name) != roles.clean_covariates.end();
    if (!ok)
      throw composition_error(
          "instrument term '" + term.label() +
          "' references '" + f.name +
          "', but constructed instruments may depend only on the exposure and "
          "clean covariates (exclusion restriction by construction)");
  }
}

}  // namespace detail

// Builds the instrument vector matching the default linear design
// [1, C1*..., C2..., Z]: the error-prone slots are filled per builder, the
// remaining slots carry their own columns.
inline InstrumentMatrix build_instrument(const Dataset& ds, const RoleMap& roles,
                                         const NuisanceFit* nuisance,
                                         InstrumentBuilder builder,
                                         const InstrumentOptions& options = {}) {
  roles.validate(ds);
  const Eigen::Index n = ds.n_rows();
  const auto m = static_cast<Eigen::Index>(roles.error_prone.size());
  const auto p2 = static_cast<Eigen::Index>(roles.clean_covariates.size());
  const Eigen::Index d = 1 + m + p2 + 1;

  InstrumentMatrix out;
  out.builder = builder;
  out.S.resize(n, d);
  out.S.col(0).setOnes();
  out.column_labels.assign(static_cast<std::size_t>(d), "");
  out.column_labels[0] = "1";
  for (Eigen::Index j = 0; j < p2; ++j) {
    out.S.col(1 + m + j) = ds.column(roles.clean_covariates[static_cast<std::size_t>(j)]);
    out.column_labels[static_cast<std::size_t>(1 + m + j)] =
        roles.clean_covariates[static_cast<std::size_t>(j)];
  }
  out.S.col(d - 1) = ds.column(roles.exposure_or_mediator);
  out.column_labels[static_cast<std::size_t>(d - 1)] = roles.exposure_or_mediator;

  switch (builder) {
    case InstrumentBuilder::raw_design: {
      for (Eigen::Index j = 0; j < m; ++j) {
        out.S.col(1 + j) = ds.column(roles.error_prone[static_cast<std::size_t>(j)]);
        out.column_labels[static_cast<std::size_t>(1 + j)] =
            roles.error_prone[static_cast<std::size_t>(j)];
      }
      break;
    }
    case InstrumentBuilder::simple: {
      std::vector<Term> terms;
      if (!options.simple_terms.empty()) {
        if (static_cast<Eigen::Index>(options.simple_terms.size()) != m)
          throw composition_error(
              "simple builder: need one s-term per error-prone column");
        for (const auto& t : options.simple_terms) terms.push_back(Term::parse(t));
      } else {
        for (Eigen::Index j = 0; j < m; ++j)
          terms.push_back(Term{{{roles.exposure_or_mediator, static_cast<int>(j) + 2}}});
      }
      for (Eigen::Index j = 0; j < m; ++j) {
        detail::check_instrument_term_vars(terms[static_cast<std::size_t>(j)], roles);
        out.S.col(1 + j) = terms[static_cast<std::size_t>(j)].evaluate(ds);
        out.column_labels[static_cast<std::size_t>(1 + j)] =
            "s:" + terms[static_cast<std::size_t>(j)].label();
      }
      break;
    }
    case InstrumentBuilder::efficient_star: {
      if (!nuisance || nuisance->predictions.cols() != m)
        throw precondition_error(
            "efficient_star builder requires nuisance conditional-mean predictions");
      for (Eigen::Index j = 0; j < m; ++j) {
        out.S.col(1 + j) = nuisance->predictions.col(j);
        out.column_labels[static_cast<std::size_t>(1 + j)] =
            "E[" + roles.error_prone[static_cast<std::size_t>(j)] + "|Z,C2]";
      }
      if (options.use_outcome_variance_weights) {
        if (!nuisance->outcome_variance_predictions)
          throw precondition_error(
              "variance weighting requested but sigma^2(Z,C2) predictions absent");
        out.S.array().colwise() /= nuisance->outcome_variance_predictions->array();
      }
      break;
    }
    case InstrumentBuilder::c1_dependent: {
      // Homoscedastic-in-Y optimal form only. The general form under
      // heteroscedastic outcomes additionally weights by sigma^-2(Z,C2) and
      // reshapes the mean-zero constraint; extending this builder with
      // outcome-variance predictions is the natural hook for it.
      if (m != 1)
        throw precondition_error(
            "c1_dependent builder supports a scalar error-prone column only");
      if (!nuisance || !nuisance->variance_predictions)
        throw precondition_error(
            "c1_dependent builder requires Var(C1*|Z,C2) predictions");
      const Eigen::VectorXd inv_var = nuisance->variance_predictions->cwiseInverse();
      // w = 1 - Var^-1 / mean(Var^-1); the plug-in mean makes mean(w) = 0.
      Eigen::VectorXd w =
          Eigen::VectorXd::Ones(n) - inv_var / inv_var.mean();
      w.array() -= w.mean();  // exact mean-zero against rounding
      const double scale = w.cwiseAbs().maxCoeff();
      if (!(scale > 1e-10))
        throw rank_error(
            "c1_dependent builder: Var(C1*|Z,C2) is (numerically) constant, so the "
            "instrument weight vanishes; this builder requires C1* heteroscedastic "
            "in (Z,C2)");
      out.S1 = Eigen::MatrixXd::Zero(n, d);
      out.S1.col(1) = w;
      out.mean_zero_columns = {1};
      out.S.col(1) =
          w.cwiseProduct(ds.column(roles.error_prone[0]));
      out.column_labels[1] = "w*" + roles.error_prone[0];
      out.validate();
      break;
    }
  }
  return out;
}

// Instrument for an arbitrary linear-in-theta layout: every design term that
// carries an error-prone factor gets that factor replaced by its fitted
// conditional mean; all other terms pass through. This is the homoscedastic
// efficient direction [grad g1, E(C1*|Z,C2) grad g2] for models linear in
// the error-prone columns.
inline InstrumentMatrix build_layout_instrument(const Dataset& ds,
                                                const RoleMap& roles,
                                                const ModelLayout& layout,
                                                const NuisanceFit& nuisance,
                                                const Eigen::VectorXd* row_weights = nullptr) {
  roles.validate(ds);
  const Eigen::Index n = ds.n_rows();
  InstrumentMatrix out;
  out.builder = InstrumentBuilder::efficient_star;
  out.S.resize(n, static_cast<Eigen::Index>(layout.terms.size()));
  for (std::size_t t = 0; t < layout.terms.size(); ++t) {
    const Term& term = layout.terms[t];
    int ep_index = -1;
    Term rest;
    for (const auto& f : term.factors) {
      const auto it =
          std::find(roles.error_prone.begin(), roles.error_prone.end(), f.name);
      if (it != roles.error_prone.end()) {
        if (ep_index >= 0 || f.power != 1)
          throw composition_error(
              "term '" + term.label() +
              "' is not linear in the error-prone columns; the outcome model must "
              "be linear in each of them");
        ep_index = static_cast<int>(it - roles.error_prone.begin());
      } else {
        rest.factors.push_back(f);
      }
    }
    Eigen::VectorXd col = rest.evaluate(ds);
    std::string label = rest.label();
    if (ep_index >= 0) {
      col = col.cwiseProduct(nuisance.predictions.col(ep_index));
      label = "E[" + roles.error_prone[static_cast<std::size_t>(ep_index)] +
              "|.]*" + label;
    }
    out.S.col(static_cast<Eigen::Index>(t)) = col;
    out.column_labels.push_back(label);
  }
  if (row_weights) {
    if (row_weights->size() != n)
      throw composition_error("row weight length mismatch");
    out.S.array().colwise() *= row_weights->array();
  }
  return out;
}

}  // namespace civkit
