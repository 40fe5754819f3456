#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "civkit/errors.hpp"

namespace civkit {

inline constexpr double kConditionThreshold = 1e10;
inline constexpr double kNewtonTol = 1e-10;
inline constexpr int kNewtonMaxIter = 100;

inline double condition_number(const Eigen::MatrixXd& a) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  const double smin = s[s.size() - 1];
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return s[0] / smin;
}

// Result of solving a just-identified moment system. cov is the sandwich
// covariance of sqrt(n)(theta_hat - theta); per-coefficient standard errors
// are sqrt(cov_jj / n).
struct GmmFit {
  Eigen::VectorXd theta;
  Eigen::MatrixXd bread_G;     // d x d moment Jacobian estimate
  Eigen::MatrixXd meat_Omega;  // d x d mean outer product of moments
  Eigen::MatrixXd cov;         // G^-1 Omega G^-T, symmetrized
  Eigen::Index n = 0;
  std::vector<std::string> labels;
  double max_abs_moment = 0.0;  // sup-norm of the mean moment at theta

  double se(Eigen::Index j) const { return std::sqrt(cov(j, j) / static_cast<double>(n)); }

  Eigen::Index index_of(const std::string& label) const {
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j] == label) return static_cast<Eigen::Index>(j);
    throw schema_error("GmmFit: no coefficient labeled '" + label + "'");
  }
};

// G^-1 Omega (G^-1)^T, explicitly symmetrized. G must be well conditioned.
inline Eigen::MatrixXd sandwich_covariance(const Eigen::MatrixXd& G,
                                           const Eigen::MatrixXd& Omega) {
  const double cond = condition_number(G);
  if (!(cond < kConditionThreshold))
    throw rank_error("sandwich_covariance: singular bread matrix (condition number " +
                         std::to_string(cond) + ")",
                     cond);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd tmp = qr.solve(Omega);              // G^-1 Omega
  Eigen::MatrixXd cov = qr.solve(tmp.transpose()).transpose();  // G^-1 Omega G^-T
  return 0.5 * (cov + cov.transpose());
}

// Solves the linear instrument moments (1/n) sum_i S_i (y_i - x_i' theta) = 0,
// i.e. (S'X) theta = S'y, and assembles the sandwich pieces
//   G = (1/n) S'X,   Omega = (1/n) sum_i r_i^2 S_i S_i'.
inline GmmFit solve_linear_moments(const Eigen::MatrixXd& S,
                                   const Eigen::MatrixXd& X,
                                   const Eigen::VectorXd& y,
                                   std::vector<std::string> labels = {},
                                   double cond_threshold = kConditionThreshold) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (S.rows() != n || y.size() != n)
    throw composition_error("solve_linear_moments: row count mismatch");
  if (S.cols() != d)
    throw composition_error(
        "solve_linear_moments: instrument/regressor dimension mismatch (just-identified "
        "system requires dim(S) == dim(theta))");

  GmmFit fit;
  fit.n = n;
  fit.labels = std::move(labels);
  fit.bread_G = (S.transpose() * X) / static_cast<double>(n);
  const double cond = condition_number(fit.bread_G);
  if (!(cond < cond_threshold))
    throw rank_error(
        "solve_linear_moments: S'X is numerically singular (condition number " +
            std::to_string(cond) +
            "); the instrument relevance (rank) condition appears to fail",
        cond);
  const Eigen::VectorXd sy = S.transpose() * y / static_cast<double>(n);
  fit.theta = fit.bread_G.colPivHouseholderQr().solve(sy);
  const Eigen::VectorXd r = y - X * fit.theta;
  fit.meat_Omega = S.transpose() *
                   (S.array().colwise() * r.array().square()).matrix() /
                   static_cast<double>(n);
  fit.cov = sandwich_covariance(fit.bread_G, fit.meat_Omega);
  fit.max_abs_moment = (S.transpose() * r / static_cast<double>(n))
                           .cwiseAbs()
                           .maxCoeff();
  return fit;
}

// A per-observation moment system. Blocks used in stacking may reference
// more parameters than they contribute moments; the just-identified
// requirement (dim_moments == dim_params) is enforced where a system is
// actually solved.
struct MomentSystem {
  Eigen::Index n_rows = 0;
  int dim_params = 0;
  int dim_moments = 0;
  std::function<Eigen::VectorXd(Eigen::Index, const Eigen::VectorXd&)> evaluator;
  // Optional analytic per-observation Jacobian (dim_moments x dim_params).
  std::function<Eigen::MatrixXd(Eigen::Index, const Eigen::VectorXd&)> jacobian;
};

struct MomentBlock {
  MomentSystem system;
  // param_map[j] = index of the block's j-th local parameter in the stacked
  // parameter vector. Indices claimed by more than one block must be listed
  // in the shared set passed to stack_moments.
  std::vector<int> param_map;
};

// Concatenates moment blocks into one system over a common parameter vector.
// The joint sandwich then covers all cross-block terms.
inline MomentSystem stack_moments(std::vector<MomentBlock> blocks, int total_params,
                                  const std::set<int>& shared = {}) {
  if (blocks.empty()) throw composition_error("stack_moments: no blocks");
  const Eigen::Index n = blocks.front().system.n_rows;
  int total_moments = 0;
  std::vector<int> claims(static_cast<std::size_t>(total_params), 0);
  for (const auto& b : blocks) {
    if (b.system.n_rows != n)
      throw composition_error("stack_moments: blocks disagree on row count");
    if (static_cast<int>(b.param_map.size()) != b.system.dim_params)
      throw composition_error("stack_moments: param_map size != block dim_params");
    for (int g : b.param_map) {
      if (g < 0 || g >= total_params)
        throw composition_error("stack_moments: parameter index out of range");
      ++claims[static_cast<std::size_t>(g)];
    }
    total_moments += b.system.dim_moments;
  }
  for (int g = 0; g < total_params; ++g) {
    if (claims[static_cast<std::size_t>(g)] == 0)
      throw composition_error("stack_moments: stacked parameter " + std::to_string(g) +
                              " is referenced by no block");
    if (claims[static_cast<std::size_t>(g)] > 1 && shared.count(g) == 0)
      throw composition_error(
          "stack_moments: parameter " + std::to_string(g) +
          " is claimed by multiple blocks but not declared shared");
  }

  bool all_jacobians = true;
  for (const auto& b : blocks)
    if (!b.system.jacobian) all_jacobians = false;

  auto blocks_ptr = std::make_shared<std::vector<MomentBlock>>(std::move(blocks));
  MomentSystem out;
  out.n_rows = n;
  out.dim_params = total_params;
  out.dim_moments = total_moments;
  out.evaluator = [blocks_ptr, total_moments](Eigen::Index i,
                                              const Eigen::VectorXd& theta) {
    Eigen::VectorXd m(total_moments);
    Eigen::Index at = 0;
    for (const auto& b : *blocks_ptr) {
      Eigen::VectorXd local(b.system.dim_params);
      for (int j = 0; j < b.system.dim_params; ++j)
        local[j] = theta[b.param_map[static_cast<std::size_t>(j)]];
      m.segment(at, b.system.dim_moments) = b.system.evaluator(i, local);
      at += b.system.dim_moments;
    }
    return m;
  };
  if (all_jacobians) {
    const int tp = total_params;
    out.jacobian = [blocks_ptr, total_moments, tp](Eigen::Index i,
                                                   const Eigen::VectorXd& theta) {
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(total_moments, tp);
      Eigen::Index at = 0;
      for (const auto& b : *blocks_ptr) {
        Eigen::VectorXd local(b.system.dim_params);
        for (int j = 0; j < b.system.dim_params; ++j)
          local[j] = theta[b.param_map[static_cast<std::size_t>(j)]];
        const Eigen::MatrixXd Jb = b.system.jacobian(i, local);
        for (int j = 0; j < b.system.dim_params; ++j)
          J.col(b.param_map[static_cast<std::size_t>(j)])
              .segment(at, b.system.dim_moments) += Jb.col(j);
        at += b.system.dim_moments;
      }
      return J;
    };
  }
  return out;
}

namespace detail {

inline Eigen::VectorXd mean_moment(const MomentSystem& sys,
                                   const Eigen::VectorXd& theta) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(sys.dim_moments);
  for (Eigen::Index i = 0; i < sys.n_rows; ++i) m += sys.evaluator(i, theta);
  return m / static_cast<double>(sys.n_rows);
}

inline Eigen::MatrixXd mean_jacobian(const MomentSystem& sys,
                                     const Eigen::VectorXd& theta) {
  if (sys.jacobian) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(sys.dim_moments, sys.dim_params);
    for (Eigen::Index i = 0; i < sys.n_rows; ++i) J += sys.jacobian(i, theta);
    return J / static_cast<double>(sys.n_rows);
  }
  // Central finite differences, step 1e-6 * max(1, |theta_j|).
  Eigen::MatrixXd J(sys.dim_moments, sys.dim_params);
  for (int j = 0; j < sys.dim_params; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(theta[j]));
    Eigen::VectorXd tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    J.col(j) = (mean_moment(sys, tp) - mean_moment(sys, tm)) / (2.0 * h);
  }
  return J;
}

}  // namespace detail

// Newton solver for just-identified nonlinear moment systems, with step
// halving when a full step does not reduce the mean-moment norm.
inline GmmFit solve_newton_moments(const MomentSystem& system,
                                   const Eigen::VectorXd& theta0,
                                   double tol = kNewtonTol,
                                   int max_iter = kNewtonMaxIter,
                                   std::vector<std::string> labels = {}) {
  if (system.dim_moments != system.dim_params)
    throw composition_error(
        "solve_newton_moments: system is not just-identified (dim_moments != dim_params)");
  if (!theta0.allFinite() || theta0.size() != system.dim_params)
    throw precondition_error("solve_newton_moments: bad initial value");
  if (system.n_rows < 1) throw precondition_error("solve_newton_moments: empty system");

  Eigen::VectorXd theta = theta0;
  Eigen::VectorXd m = detail::mean_moment(system, theta);
  double norm = m.cwiseAbs().maxCoeff();
  for (int iter = 0; iter < max_iter && !(norm <= tol); ++iter) {
    const Eigen::MatrixXd J = detail::mean_jacobian(system, theta);
    const double cond = condition_number(J);
    if (!(cond < kConditionThreshold))
      throw rank_error("solve_newton_moments: singular moment Jacobian (condition number " +
                           std::to_string(cond) + ")",
                       cond);
    const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-m);
    double scale = 1.0;
    Eigen::VectorXd theta_new;
    Eigen::VectorXd m_new;
    double norm_new = norm;
    for (int half = 0; half < 12; ++half) {
      theta_new = theta + scale * step;
      m_new = detail::mean_moment(system, theta_new);
      norm_new = m_new.cwiseAbs().maxCoeff();
      if (norm_new < norm || norm_new <= tol) break;
      scale *= 0.5;
    }
    theta = theta_new;
    m = m_new;
    norm = norm_new;
  }
  if (!(norm <= tol)) {
    std::vector<double> last(theta.data(), theta.data() + theta.size());
    throw convergence_error(
        "solve_newton_moments: no convergence after " + std::to_string(max_iter) +
            " iterations (mean-moment sup-norm " + std::to_string(norm) +
            "); try different initial values to check for distinct solutions",
        std::move(last));
  }

  GmmFit fit;
  fit.n = system.n_rows;
  fit.theta = theta;
  fit.labels = std::move(labels);
  fit.max_abs_moment = norm;
  fit.bread_G = detail::mean_jacobian(system, theta);
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(system.dim_moments, system.dim_moments);
  for (Eigen::Index i = 0; i < system.n_rows; ++i) {
    const Eigen::VectorXd u = system.evaluator(i, theta);
    omega.noalias() += u * u.transpose();
  }
  fit.meat_Omega = omega / static_cast<double>(system.n_rows);
  fit.cov = sandwich_covariance(fit.bread_G, fit.meat_Omega);
  return fit;
}

}  // namespace civkit
