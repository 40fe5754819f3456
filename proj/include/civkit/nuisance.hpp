#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "civkit/basis.hpp"
#include "civkit/dataset.hpp"
#include "civkit/errors.hpp"
#include "civkit/rng.hpp"

namespace civkit {

enum class NuisanceKind { parametric_basis, crossfit_nonparametric };

inline constexpr double kVarianceFloor = 1e-8;

struct NuisanceConfig {
  NuisanceKind kind = NuisanceKind::parametric_basis;
  int basis_degree = 3;
  BasisCross cross = BasisCross::leading_var;
  int folds = 5;            // K, crossfit only
  std::uint64_t seed = 0;   // fold shuffle seed
  bool fit_variance = false;          // Var(C1*|Z,C2), scalar C1* only
  bool fit_outcome_variance = false;  // sigma^2(Z,C2) from outcome residuals
  bool include_exposure = true;       // false: condition on covariates only
};

// Fitted conditional-mean (and optional conditional-variance) predictions
// for the error-prone columns given the instrument-eligible variables.
struct NuisanceFit {
  NuisanceKind kind = NuisanceKind::parametric_basis;
  Eigen::MatrixXd predictions;  // n x m, one column per error-prone column
  std::optional<Eigen::VectorXd> variance_predictions;
  std::optional<Eigen::VectorXd> outcome_variance_predictions;
  std::vector<int> fold_assignment;  // empty for parametric fits
  int folds = 0;
  std::string basis_description;
};

namespace detail {

// Fits targets on the basis design, either on the full sample or per fold on
// the fold's complement, returning out-of-fold predictions in the latter case.
inline Eigen::MatrixXd basis_predict(const Eigen::MatrixXd& B,
                                     const Eigen::MatrixXd& targets,
                                     const std::vector<int>& fold_of, int folds) {
  if (fold_of.empty()) return least_squares(B, targets).fitted;
  const Eigen::Index n = B.rows();
  Eigen::MatrixXd pred(n, targets.cols());
  for (int k = 0; k < folds; ++k) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < n; ++i)
      (fold_of[static_cast<std::size_t>(i)] == k ? test : train).push_back(i);
    if (static_cast<Eigen::Index>(train.size()) < B.cols())
      throw underdetermined_error("crossfit: training fold smaller than basis dimension");
    Eigen::MatrixXd Bt(train.size(), B.cols());
    Eigen::MatrixXd Yt(train.size(), targets.cols());
    for (std::size_t r = 0; r < train.size(); ++r) {
      Bt.row(static_cast<Eigen::Index>(r)) = B.row(train[r]);
      Yt.row(static_cast<Eigen::Index>(r)) = targets.row(train[r]);
    }
    const Eigen::MatrixXd coef = least_squares(Bt, Yt).coef;
    for (Eigen::Index i : test) pred.row(i) = B.row(i) * coef;
  }
  return pred;
}

inline std::vector<int> seeded_folds(Eigen::Index n, int K, std::uint64_t seed) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto rng = make_rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  // Round-robin over the shuffled order gives roughly evenly-sized sets.
  for (std::size_t r = 0; r < order.size(); ++r)
    fold_of[static_cast<std::size_t>(order[r])] = static_cast<int>(r % static_cast<std::size_t>(K));
  return fold_of;
}

}  // namespace detail

// Fits E(C1*|Z,C2) for each error-prone column with a nonlinear polynomial
// basis, parametrically or with K-fold cross-fitting where prediction i never
// uses row i's own fold. Optionally also fits Var(C1*|Z,C2) and sigma^2(Z,C2)
// by regressing squared residuals on the same basis (floored at 1e-8).
inline NuisanceFit fit_nuisance_conditional_mean(const Dataset& ds,
                                                 const RoleMap& roles,
                                                 const NuisanceConfig& config) {
  roles.validate(ds);
  const Eigen::Index n = ds.n_rows();

  std::vector<std::string> vars;
  if (config.include_exposure) vars.push_back(roles.exposure_or_mediator);
  for (const auto& c : roles.clean_covariates) vars.push_back(c);
  if (vars.empty())
    throw precondition_error("fit_nuisance_conditional_mean: no conditioning variables");

  PolyBasis basis(vars, config.basis_degree, config.cross);
  if (n < 10 * basis.dim())
    throw underdetermined_error(
        "fit_nuisance_conditional_mean: need n >= 10 * basis dimension (n=" +
        std::to_string(n) + ", dim=" + std::to_string(basis.dim()) + ")");

  Eigen::MatrixXd inputs(n, static_cast<Eigen::Index>(vars.size()));
  for (std::size_t j = 0; j < vars.size(); ++j)
    inputs.col(static_cast<Eigen::Index>(j)) = ds.column(vars[j]);
  const Eigen::MatrixXd B = basis.evaluate(inputs);

  const auto m = static_cast<Eigen::Index>(roles.error_prone.size());
  Eigen::MatrixXd targets(n, m);
  for (Eigen::Index j = 0; j < m; ++j)
    targets.col(j) = ds.column(roles.error_prone[static_cast<std::size_t>(j)]);

  NuisanceFit fit;
  fit.kind = config.kind;
  fit.basis_description = basis.describe();
  std::vector<int> fold_of;
  if (config.kind == NuisanceKind::crossfit_nonparametric) {
    if (config.folds < 2) throw precondition_error("crossfit requires K >= 2 folds");
    fold_of = detail::seeded_folds(n, config.folds, config.seed);
    fit.fold_assignment = fold_of;
    fit.folds = config.folds;
  }
  fit.predictions = detail::basis_predict(B, targets, fold_of, fit.folds);

  if (config.fit_variance) {
    if (m != 1)
      throw precondition_error("variance predictions require a scalar error-prone column");
    const Eigen::MatrixXd e2 =
        (targets - fit.predictions).array().square().matrix();
    fit.variance_predictions =
        detail::basis_predict(B, e2, fold_of, fit.folds).col(0).cwiseMax(kVarianceFloor);
  }

  if (config.fit_outcome_variance) {
    const Eigen::MatrixXd y = ds.column(roles.outcome);
    const Eigen::MatrixXd yhat = detail::basis_predict(B, y, fold_of, fit.folds);
    const Eigen::MatrixXd r2 = (y - yhat).array().square().matrix();
    fit.outcome_variance_predictions =
        detail::basis_predict(B, r2, fold_of, fit.folds).col(0).cwiseMax(kVarianceFloor);
  }

  return fit;
}

}  // namespace civkit
