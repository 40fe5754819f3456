#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/errors.hpp"
#include "civkit/gmm.hpp"
#include "civkit/outcome.hpp"
#include "civkit/util.hpp"

namespace civkit {

enum class TChoice { g2_default, constant_one };

struct MeVarianceEstimate {
  double sigma2 = 0.0;
  double se = 0.0;
  double reliability = 1.0;     // clamped to [0,1]
  bool reliability_valid = true;
  std::string t_choice;
  std::string source_model;  // "outcome" or "mediator"
  std::vector<std::string> warnings;
  std::optional<double> lower_bound;  // optional sanity-check bounds
  std::optional<double> upper_bound;
};

// Core arithmetic of the residual-moment estimator
//   sigma2_hat = -[mean(T_i g2_i)]^-1 * mean(T_i C1*_i r_i),
//   r_i = Y_i - g1_i - g2_i C1*_i,
// with the one-equation sandwich SE Omega/(G^2 n). sigma2 is reported raw
// even when <= 0, with a boundary warning (the limit theory degrades near 0).
inline MeVarianceEstimate me_variance_from_parts(
    const Eigen::VectorXd& T, const Eigen::VectorXd& c1star,
    const Eigen::VectorXd& y, const Eigen::VectorXd& g1,
    const Eigen::VectorXd& g2, const std::string& t_choice,
    const std::string& source_model,
    std::optional<double> lower_bound = std::nullopt,
    std::optional<double> upper_bound = std::nullopt) {
  const Eigen::Index n = y.size();
  if (T.size() != n || c1star.size() != n || g1.size() != n || g2.size() != n)
    throw composition_error("me_variance: length mismatch");

  const Eigen::VectorXd r = y - g1 - g2.cwiseProduct(c1star);
  const double g_dot = T.cwiseProduct(g2).mean();
  if (std::abs(g_dot) < 1e-10)
    throw identification_error(
        "me_variance: E{T g2} is numerically zero; sigma2 is not identified with "
        "this T choice");
  const double num = T.cwiseProduct(c1star).cwiseProduct(r).mean();

  MeVarianceEstimate out;
  out.sigma2 = -num / g_dot;
  out.t_choice = t_choice;
  out.source_model = source_model;
  out.lower_bound = lower_bound;
  out.upper_bound = upper_bound;

  const Eigen::VectorXd u =
      T.array() * (c1star.array() * r.array() + g2.array() * out.sigma2);
  const double omega = u.array().square().mean();
  out.se = std::sqrt(omega / (g_dot * g_dot) / static_cast<double>(n));

  const double var_obs = var_mom(c1star);
  if (out.sigma2 >= 0.0 && out.sigma2 < var_obs) {
    out.reliability = (var_obs - out.sigma2) / var_obs;
    out.reliability_valid = true;
  } else {
    out.reliability = out.sigma2 < 0.0 ? 1.0 : 0.0;
    out.reliability_valid = false;
    out.warnings.push_back(
        "implied reliability outside (0,1]; sigma2 inconsistent with the observed "
        "variance");
  }
  // The limit theory fails in a neighborhood of zero; flag estimates that are
  // statistically or practically indistinguishable from no measurement error
  // (under 5% of the observed variance, i.e. implied reliability above 95%).
  if (out.sigma2 <= 0.0 || out.sigma2 <= 2.0 * out.se ||
      out.sigma2 < 0.05 * var_obs)
    out.warnings.push_back(
        "boundary: sigma2 is indistinguishable from zero at this sample size; "
        "the asymptotic approximation is unreliable near the boundary");
  if (lower_bound && out.sigma2 < *lower_bound)
    out.warnings.push_back("sigma2 below the declared lower sanity bound");
  if (upper_bound && out.sigma2 > *upper_bound)
    out.warnings.push_back("sigma2 above the declared upper sanity bound");
  return out;
}

// Estimates the measurement-error variance of the scalar error-prone column
// from a consistently fitted outcome model. Default T = g2(Z,C2; theta2_hat).
inline MeVarianceEstimate estimate_me_variance(
    const Dataset& ds, const RoleMap& roles, const OutcomeFit& fit,
    TChoice t_choice = TChoice::g2_default,
    std::optional<double> lower_bound = std::nullopt,
    std::optional<double> upper_bound = std::nullopt) {
  roles.validate(ds);
  if (roles.error_prone.size() != 1)
    throw precondition_error("estimate_me_variance: scalar error-prone column required");
  const Eigen::VectorXd g1 = fit.g1_values();
  const Eigen::VectorXd g2 = fit.g2_values();
  const Eigen::VectorXd T =
      t_choice == TChoice::g2_default ? g2 : Eigen::VectorXd::Ones(ds.n_rows()).eval();
  return me_variance_from_parts(T, ds.column(roles.error_prone[0]),
                                ds.column(roles.outcome), g1, g2,
                                t_choice == TChoice::g2_default ? "g2" : "1",
                                "outcome", lower_bound, upper_bound);
}

// Joint (theta, sigma2) fit: stacks the outcome instrument moments with the
// sigma2 moment so the sandwich covariance reflects theta-estimation noise.
struct JointMeVarianceFit {
  GmmFit joint;
  MeVarianceEstimate me;
};

inline JointMeVarianceFit estimate_me_variance_joint(
    const Dataset& ds, const RoleMap& roles, const InstrumentMatrix& instrument,
    TChoice t_choice = TChoice::g2_default) {
  roles.validate(ds);
  if (roles.error_prone.size() != 1)
    throw precondition_error("estimate_me_variance_joint: scalar error-prone column");
  const OutcomeFit fit = fit_outcome_linear_iv(ds, roles, instrument, false);
  MeVarianceEstimate plug = estimate_me_variance(ds, roles, fit, t_choice);

  const ModelLayout layout = linear_outcome_layout(roles);
  const DesignMatrices design = build_design(ds, roles, layout);
  const Eigen::Index d = design.X.cols();
  const Eigen::Index n = ds.n_rows();

  // sigma2 moment: T [C1* (Y - g1 - g2 C1*) + g2 sigma2], where for the
  // linear model g2 = theta_C1 and g1 = theta' x with the C1* column zeroed.
  auto x_ptr = std::make_shared<Eigen::MatrixXd>(design.X);
  auto y_ptr = std::make_shared<Eigen::VectorXd>(design.y);
  auto c1_ptr = std::make_shared<Eigen::VectorXd>(ds.column(roles.error_prone[0]));
  const bool t_is_g2 = t_choice == TChoice::g2_default;

  MomentSystem sigma_row;
  sigma_row.n_rows = n;
  sigma_row.dim_params = static_cast<int>(d) + 1;
  sigma_row.dim_moments = 1;
  sigma_row.evaluator = [x_ptr, y_ptr, c1_ptr, t_is_g2, d](Eigen::Index i,
                                                           const Eigen::VectorXd& local) {
    const double g2 = local[1];  // theta_C1 in the documented column order
    const double r = (*y_ptr)[i] - x_ptr->row(i).dot(local.head(d));
    const double T = t_is_g2 ? g2 : 1.0;
    Eigen::VectorXd u(1);
    u[0] = T * ((*c1_ptr)[i] * r + g2 * local[d]);
    return u;
  };

  std::vector<MomentBlock> blocks(2);
  blocks[0].system = detail::linear_iv_system(instrument.S, design.X, design.y);
  blocks[0].param_map.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) blocks[0].param_map[static_cast<std::size_t>(j)] = j;
  blocks[1].system = sigma_row;
  blocks[1].param_map = blocks[0].param_map;
  blocks[1].param_map.push_back(static_cast<int>(d));
  std::set<int> shared;
  for (int j = 0; j < d; ++j) shared.insert(j);
  const MomentSystem stacked =
      stack_moments(std::move(blocks), static_cast<int>(d) + 1, shared);

  Eigen::VectorXd init(d + 1);
  init.head(d) = fit.gmm.theta;
  init[d] = plug.sigma2;
  auto labels = design.column_labels;
  labels.push_back("sigma2_eps");

  JointMeVarianceFit out;
  out.joint = solve_newton_moments(stacked, init, kNewtonTol, kNewtonMaxIter, labels);
  out.me = plug;
  out.me.sigma2 = out.joint.theta[d];
  out.me.se = out.joint.se(d);
  return out;
}

// (var_observed - sigma2) / var_observed, clamped to [0,1].
struct ReliabilityResult {
  double value = 1.0;
  bool clamped = false;
};

inline ReliabilityResult reliability_ratio(double sigma2, double var_observed) {
  if (!(var_observed > 0.0))
    throw domain_error("reliability_ratio: var_observed must be positive");
  ReliabilityResult r;
  r.value = (var_observed - sigma2) / var_observed;
  if (r.value < 0.0) {
    r.value = 0.0;
    r.clamped = true;
  } else if (r.value > 1.0) {
    r.value = 1.0;
    r.clamped = true;
  }
  return r;
}

}  // namespace civkit
