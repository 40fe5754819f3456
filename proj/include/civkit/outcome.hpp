#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/design.hpp"
#include "civkit/errors.hpp"
#include "civkit/gmm.hpp"
#include "civkit/instrument.hpp"

namespace civkit {

enum class OutcomeModelKind { linear, partially_linear };

// Fitted outcome model. W1/W2 hold the evaluated g1/g2 term columns so that
// g1_i = W1.row(i) * theta1 and g2_i = W2.row(i) * theta2 can be recomputed
// downstream (measurement-error variance estimation needs them).
struct OutcomeFit {
  GmmFit gmm;
  OutcomeModelKind kind = OutcomeModelKind::linear;
  InstrumentBuilder builder = InstrumentBuilder::raw_design;

  Eigen::MatrixXd W1;  // n x d1, terms not multiplying the error-prone column
  Eigen::MatrixXd W2;  // n x d2, multipliers of the (scalar) error-prone column
  std::vector<int> theta1_idx;
  std::vector<int> theta2_idx;

  std::optional<double> mu;     // dose-response intercept E{E(Y|Z=0,C)}
  std::optional<double> mu_se;
  std::vector<double> z_grid;
  Eigen::VectorXd mu_grid;
  Eigen::VectorXd mu_grid_se;

  std::vector<std::string> trust_notes;

  Eigen::VectorXd theta1() const { return pick(theta1_idx); }
  Eigen::VectorXd theta2() const { return pick(theta2_idx); }
  Eigen::VectorXd g1_values() const { return W1 * theta1(); }
  Eigen::VectorXd g2_values() const { return W2 * theta2(); }

 private:
  Eigen::VectorXd pick(const std::vector<int>& idx) const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) v[static_cast<Eigen::Index>(j)] = gmm.theta[idx[j]];
    return v;
  }
};

namespace detail {

inline MomentSystem linear_iv_system(Eigen::MatrixXd S, Eigen::MatrixXd X,
                                     Eigen::VectorXd y) {
  auto s_ptr = std::make_shared<Eigen::MatrixXd>(std::move(S));
  auto x_ptr = std::make_shared<Eigen::MatrixXd>(std::move(X));
  auto y_ptr = std::make_shared<Eigen::VectorXd>(std::move(y));
  MomentSystem sys;
  sys.n_rows = x_ptr->rows();
  sys.dim_params = static_cast<int>(x_ptr->cols());
  sys.dim_moments = static_cast<int>(s_ptr->cols());
  sys.evaluator = [s_ptr, x_ptr, y_ptr](Eigen::Index i, const Eigen::VectorXd& theta) {
    return Eigen::VectorXd(s_ptr->row(i).transpose() *
                           ((*y_ptr)[i] - x_ptr->row(i).dot(theta)));
  };
  sys.jacobian = [s_ptr, x_ptr](Eigen::Index i, const Eigen::VectorXd&) {
    return Eigen::MatrixXd(-s_ptr->row(i).transpose() * x_ptr->row(i));
  };
  return sys;
}

inline void attach_trust_notes(OutcomeFit& fit, const RoleMap& roles) {
  if (fit.builder == InstrumentBuilder::raw_design) return;
  fit.trust_notes.push_back(
      "coefficient on " + roles.exposure_or_mediator +
      " is consistent under both the unbiased-additive and the relaxed linear "
      "measurement-error model; the remaining coefficients and mu are "
      "identified only under the unbiased-additive model");
}

}  // namespace detail

// Linear outcome model fit with a constructed (or raw) instrument vector:
// solves (1/n) sum_i S_i (Y_i - [1, C1*, C2, Z]_i' theta) = 0. When
// estimate_mu is set, the dose-response intercept moment is stacked on and
// the joint sandwich covariance covers its dependence on theta.
inline OutcomeFit fit_outcome_linear_iv(const Dataset& ds, const RoleMap& roles,
                                        const InstrumentMatrix& instrument,
                                        bool estimate_mu = false) {
  roles.validate(ds);
  const ModelLayout layout = linear_outcome_layout(roles);
  const DesignMatrices design = build_design(ds, roles, layout);
  if (instrument.S.rows() != design.X.rows() ||
      instrument.S.cols() != design.X.cols())
    throw composition_error("fit_outcome_linear_iv: instrument/design shape mismatch");

  OutcomeFit fit;
  fit.kind = OutcomeModelKind::linear;
  fit.builder = instrument.builder;
  try {
    fit.gmm = solve_linear_moments(instrument.S, design.X, design.y,
                                   design.column_labels);
  } catch (const rank_error& e) {
    throw rank_error(std::string(e.what()) +
                         "; for constructed instruments this usually means "
                         "E(C1*|Z,C2) is close to linear in (Z,C2) -- run "
                         "first_stage_f_test to check instrument strength",
                     e.condition_number());
  }

  const Eigen::Index n = ds.n_rows();
  const auto m = static_cast<Eigen::Index>(roles.error_prone.size());
  const auto p2 = static_cast<Eigen::Index>(roles.clean_covariates.size());
  const Eigen::Index d = design.X.cols();

  // g1 terms: everything except the error-prone columns. For scalar C1* the
  // g2 block is the constant coefficient theta_C1.
  fit.W1.resize(n, 1 + p2 + 1);
  fit.W1.col(0).setOnes();
  for (Eigen::Index j = 0; j < p2; ++j) fit.W1.col(1 + j) = design.X.col(1 + m + j);
  fit.W1.col(1 + p2) = design.X.col(d - 1);
  fit.theta1_idx.push_back(0);
  for (Eigen::Index j = 0; j < p2; ++j) fit.theta1_idx.push_back(static_cast<int>(1 + m + j));
  fit.theta1_idx.push_back(static_cast<int>(d - 1));
  fit.W2 = Eigen::MatrixXd::Ones(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    fit.W2.col(j).setOnes();
    fit.theta2_idx.push_back(static_cast<int>(1 + j));
  }

  detail::attach_trust_notes(fit, roles);

  if (estimate_mu) {
    // a_i = design row with the exposure column zeroed.
    Eigen::MatrixXd A = design.X;
    A.col(d - 1).setZero();
    MomentSystem mu_row;
    mu_row.n_rows = n;
    mu_row.dim_params = static_cast<int>(d) + 1;
    mu_row.dim_moments = 1;
    mu_row.evaluator = [A](Eigen::Index i, const Eigen::VectorXd& local) {
      Eigen::VectorXd u(1);
      u[0] = A.row(i).dot(local.head(A.cols())) - local[A.cols()];
      return u;
    };
    mu_row.jacobian = [A](Eigen::Index i, const Eigen::VectorXd&) {
      Eigen::MatrixXd J(1, A.cols() + 1);
      J.leftCols(A.cols()) = A.row(i);
      J(0, A.cols()) = -1.0;
      return J;
    };
    std::vector<MomentBlock> blocks(2);
    blocks[0].system = detail::linear_iv_system(instrument.S, design.X, design.y);
    blocks[0].param_map.resize(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) blocks[0].param_map[static_cast<std::size_t>(j)] = j;
    blocks[1].system = mu_row;
    blocks[1].param_map = blocks[0].param_map;
    blocks[1].param_map.push_back(static_cast<int>(d));
    std::set<int> shared;
    for (int j = 0; j < d; ++j) shared.insert(j);
    const MomentSystem stacked = stack_moments(std::move(blocks), static_cast<int>(d) + 1, shared);

    Eigen::VectorXd init(d + 1);
    init.head(d) = fit.gmm.theta;
    init[d] = (A * fit.gmm.theta).mean();
    auto labels = design.column_labels;
    labels.push_back("mu");
    const GmmFit joint = solve_newton_moments(stacked, init, kNewtonTol, kNewtonMaxIter, labels);
    fit.gmm = joint;
    fit.mu = joint.theta[d];
    fit.mu_se = joint.se(d);
  }
  return fit;
}

// Partially linear parametric model with term layouts linear in theta:
// E(Y|C,Z) = g1(Z,C2; theta1) + g2(Z,C2; theta2) * C1* (scalar C1* when a
// z_grid is requested). Design columns are [g1 terms, g2 terms * C1*_m].
struct PartiallyLinearModel {
  ModelLayout g1_terms;                // functions of Z and C2
  std::vector<ModelLayout> g2_terms;   // one layout per error-prone column
};

inline OutcomeFit fit_outcome_partially_linear(
    const Dataset& ds, const RoleMap& roles, const PartiallyLinearModel& model,
    const InstrumentMatrix& instrument, const std::vector<double>& z_grid = {}) {
  roles.validate(ds);
  if (model.g2_terms.size() != roles.error_prone.size())
    throw composition_error("need one g2 layout per error-prone column");
  const Eigen::Index n = ds.n_rows();

  // Validate the g layouts only reference (Z, C2).
  for (const auto& t : model.g1_terms.terms)
    detail::check_instrument_term_vars(t, roles);
  for (const auto& l : model.g2_terms)
    for (const auto& t : l.terms) detail::check_instrument_term_vars(t, roles);

  const Eigen::MatrixXd W1 = evaluate_layout(ds, model.g1_terms, false);
  std::vector<Eigen::MatrixXd> W2s;
  Eigen::Index d2_total = 0;
  for (const auto& l : model.g2_terms) {
    W2s.push_back(evaluate_layout(ds, l, false));
    d2_total += W2s.back().cols();
  }
  const Eigen::Index d = W1.cols() + d2_total;
  if (instrument.S.cols() != d || instrument.S.rows() != n)
    throw composition_error("fit_outcome_partially_linear: dim(S) must equal dim(theta)");

  Eigen::MatrixXd X(n, d);
  X.leftCols(W1.cols()) = W1;
  std::vector<std::string> labels = model.g1_terms.labels();
  Eigen::Index at = W1.cols();
  for (std::size_t mcol = 0; mcol < W2s.size(); ++mcol) {
    const Eigen::VectorXd& c1 = ds.column(roles.error_prone[mcol]);
    for (Eigen::Index j = 0; j < W2s[mcol].cols(); ++j) {
      X.col(at) = W2s[mcol].col(j).cwiseProduct(c1);
      const std::string tl = model.g2_terms[mcol].terms[static_cast<std::size_t>(j)].label();
      labels.push_back(tl == "1" ? roles.error_prone[mcol]
                                 : roles.error_prone[mcol] + "*" + tl);
      ++at;
    }
  }

  OutcomeFit fit;
  fit.kind = OutcomeModelKind::partially_linear;
  fit.builder = instrument.builder;
  try {
    fit.gmm = solve_linear_moments(instrument.S, X, ds.column(roles.outcome), labels);
  } catch (const rank_error& e) {
    throw rank_error(std::string(e.what()) +
                         "; run first_stage_f_test to check instrument strength",
                     e.condition_number());
  }
  fit.W1 = W1;
  for (int j = 0; j < W1.cols(); ++j) fit.theta1_idx.push_back(j);
  if (W2s.size() == 1) {
    fit.W2 = W2s[0];
    for (Eigen::Index j = 0; j < d2_total; ++j)
      fit.theta2_idx.push_back(static_cast<int>(W1.cols() + j));
  }
  detail::attach_trust_notes(fit, roles);

  if (!z_grid.empty()) {
    if (roles.error_prone.size() != 1)
      throw unsupported_error("dose-response grid requires a scalar error-prone column");
    const auto J = static_cast<Eigen::Index>(z_grid.size());
    // Evaluate the g terms at each grid point z_j (Z overridden, C2 kept).
    std::vector<Eigen::MatrixXd> W1g(static_cast<std::size_t>(J)), W2g(static_cast<std::size_t>(J));
    for (Eigen::Index j = 0; j < J; ++j) {
      const Dataset dz = ds.with_column(
          roles.exposure_or_mediator,
          Eigen::VectorXd::Constant(n, z_grid[static_cast<std::size_t>(j)]));
      W1g[static_cast<std::size_t>(j)] = evaluate_layout(dz, model.g1_terms, false);
      W2g[static_cast<std::size_t>(j)] = evaluate_layout(dz, model.g2_terms[0], false);
    }
    const Eigen::VectorXd c1 = ds.column(roles.error_prone[0]);
    const Eigen::Index d1 = W1.cols();

    MomentSystem grid_rows;
    grid_rows.n_rows = n;
    grid_rows.dim_params = static_cast<int>(d + J);
    grid_rows.dim_moments = static_cast<int>(J);
    grid_rows.evaluator = [W1g, W2g, c1, d, d1, J](Eigen::Index i, const Eigen::VectorXd& local) {
      Eigen::VectorXd u(J);
      for (Eigen::Index j = 0; j < J; ++j) {
        const double m = W1g[static_cast<std::size_t>(j)].row(i).dot(local.head(d1)) +
                         W2g[static_cast<std::size_t>(j)].row(i).dot(local.segment(d1, d - d1)) * c1[i];
        u[j] = m - local[d + j];
      }
      return u;
    };
    grid_rows.jacobian = [W1g, W2g, c1, d, d1, J](Eigen::Index i, const Eigen::VectorXd&) {
      Eigen::MatrixXd Jm = Eigen::MatrixXd::Zero(J, d + J);
      for (Eigen::Index j = 0; j < J; ++j) {
        Jm.row(j).head(d1) = W1g[static_cast<std::size_t>(j)].row(i);
        Jm.row(j).segment(d1, d - d1) = W2g[static_cast<std::size_t>(j)].row(i) * c1[i];
        Jm(j, d + j) = -1.0;
      }
      return Jm;
    };

    std::vector<MomentBlock> blocks(2);
    blocks[0].system = detail::linear_iv_system(instrument.S, X, ds.column(roles.outcome));
    blocks[0].param_map.resize(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) blocks[0].param_map[static_cast<std::size_t>(j)] = j;
    blocks[1].system = grid_rows;
    blocks[1].param_map = blocks[0].param_map;
    for (Eigen::Index j = 0; j < J; ++j)
      blocks[1].param_map.push_back(static_cast<int>(d + j));
    std::set<int> shared;
    for (int j = 0; j < d; ++j) shared.insert(j);
    const MomentSystem stacked =
        stack_moments(std::move(blocks), static_cast<int>(d + J), shared);

    Eigen::VectorXd init(d + J);
    init.head(d) = fit.gmm.theta;
    for (Eigen::Index j = 0; j < J; ++j) {
      init[d + j] = (W1g[static_cast<std::size_t>(j)] * fit.gmm.theta.head(d1) +
                     (W2g[static_cast<std::size_t>(j)] * fit.gmm.theta.segment(d1, d - d1))
                         .cwiseProduct(c1))
                        .mean();
    }
    auto jlabels = labels;
    for (Eigen::Index j = 0; j < J; ++j)
      jlabels.push_back("mu[z=" + std::to_string(z_grid[static_cast<std::size_t>(j)]) + "]");
    const GmmFit joint =
        solve_newton_moments(stacked, init, kNewtonTol, kNewtonMaxIter, jlabels);
    fit.gmm = joint;
    fit.z_grid = z_grid;
    fit.mu_grid = joint.theta.tail(J);
    fit.mu_grid_se.resize(J);
    for (Eigen::Index j = 0; j < J; ++j) fit.mu_grid_se[j] = joint.se(d + j);
  }
  return fit;
}

// Fully nonlinear-in-theta variant (scalar C1*), solved by Newton iteration.
struct NonlinearPartiallyLinear {
  int dim_theta1 = 0;
  int dim_theta2 = 0;
  // g1(z, c2, theta1) and g2(z, c2, theta2); gradients optional (finite
  // differences otherwise).
  std::function<double(double, const Eigen::RowVectorXd&, const Eigen::VectorXd&)> g1;
  std::function<double(double, const Eigen::RowVectorXd&, const Eigen::VectorXd&)> g2;
};

inline OutcomeFit fit_outcome_nonlinear(const Dataset& ds, const RoleMap& roles,
                                        const NonlinearPartiallyLinear& model,
                                        const Eigen::MatrixXd& S,
                                        const Eigen::VectorXd& theta0,
                                        double tol = kNewtonTol,
                                        int max_iter = kNewtonMaxIter) {
  roles.validate(ds);
  if (roles.error_prone.size() != 1)
    throw unsupported_error("nonlinear path supports a scalar error-prone column");
  const Eigen::Index n = ds.n_rows();
  const int d = model.dim_theta1 + model.dim_theta2;
  if (S.rows() != n || S.cols() != d)
    throw composition_error("fit_outcome_nonlinear: dim(S) must equal dim(theta)");

  Eigen::MatrixXd C2(n, static_cast<Eigen::Index>(roles.clean_covariates.size()));
  for (std::size_t j = 0; j < roles.clean_covariates.size(); ++j)
    C2.col(static_cast<Eigen::Index>(j)) = ds.column(roles.clean_covariates[j]);
  const Eigen::VectorXd z = ds.column(roles.exposure_or_mediator);
  const Eigen::VectorXd c1 = ds.column(roles.error_prone[0]);
  const Eigen::VectorXd y = ds.column(roles.outcome);

  MomentSystem sys;
  sys.n_rows = n;
  sys.dim_params = d;
  sys.dim_moments = d;
  const int d1 = model.dim_theta1;
  sys.evaluator = [&, d1](Eigen::Index i, const Eigen::VectorXd& theta) {
    const Eigen::RowVectorXd c2row = C2.row(i);
    const double r = y[i] - model.g1(z[i], c2row, theta.head(d1)) -
                     model.g2(z[i], c2row, theta.tail(theta.size() - d1)) * c1[i];
    return Eigen::VectorXd(S.row(i).transpose() * r);
  };

  OutcomeFit fit;
  fit.kind = OutcomeModelKind::partially_linear;
  fit.builder = InstrumentBuilder::efficient_star;
  fit.gmm = solve_newton_moments(sys, theta0, tol, max_iter);
  detail::attach_trust_notes(fit, roles);
  return fit;
}

// ATE(z', z'') = theta_Z * (z' - z'') for linear fits.
struct AteContrast {
  double estimate = 0.0;
  double se = 0.0;
};

inline AteContrast ate_contrast(const OutcomeFit& fit, const RoleMap& roles,
                                double z_prime, double z_dprime) {
  if (fit.kind != OutcomeModelKind::linear)
    throw unsupported_error(
        "ate_contrast requires a linear-model fit; use the dose-response grid "
        "for partially linear models");
  const Eigen::Index j = fit.gmm.index_of(roles.exposure_or_mediator);
  AteContrast out;
  out.estimate = fit.gmm.theta[j] * (z_prime - z_dprime);
  out.se = std::abs(z_prime - z_dprime) * fit.gmm.se(j);
  return out;
}

}  // namespace civkit
