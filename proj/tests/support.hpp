#pragma once

// Shared data generators for the test suite.

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "civkit/dataset.hpp"
#include "civkit/rng.hpp"

namespace testsupport {

// The documented outcome-model DGP:
//   C1 = sqrt(3) * U(-1, 1)                   (unit variance, bounded)
//   Z  = 0.5 C1^3 + C1^2 + 0.8 C1 + N(0,1)
//   Y  = 1 + 2 C1 + 1.5 Z + N(0,1)
//   C1* = C1 + N(0, sigma2_eps), sigma2_eps = (1-rel)/rel (0.7 -> 3/7).
// The odd+even first stage keeps Cov(C1, Z) nonzero (naive fit confounded,
// plim theta_Z ~ 1.86) while E(C1|Z) stays strongly nonlinear, and the
// bounded covariate keeps polynomial-instrument tails finite.
struct OutcomeDgp {
  civkit::Dataset data;
  Eigen::VectorXd latent_c1;
  double sigma2_eps = 0.0;
  static constexpr double theta0 = 1.0;
  static constexpr double theta_c1 = 2.0;
  static constexpr double theta_z = 1.5;
};

inline OutcomeDgp make_outcome_dgp(int n, std::uint64_t seed,
                                   double reliability = 0.7,
                                   bool interaction = false,
                                   double theta_c1z = 0.5) {
  auto rng = civkit::make_rng(seed);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double sigma2 = (1.0 - reliability) / reliability;
  const double sd = std::sqrt(sigma2);
  const double s3 = std::sqrt(3.0);
  Eigen::VectorXd y(n), z(n), c1(n), c1star(n);
  for (int i = 0; i < n; ++i) {
    c1[i] = s3 * unif(rng);
    z[i] = 0.5 * c1[i] * c1[i] * c1[i] + c1[i] * c1[i] + 0.8 * c1[i] + gauss(rng);
    y[i] = 1.0 + 2.0 * c1[i] + 1.5 * z[i] +
           (interaction ? theta_c1z * c1[i] * z[i] : 0.0) + gauss(rng);
    c1star[i] = c1[i] + sd * gauss(rng);
  }
  return OutcomeDgp{civkit::Dataset({"Y", "Z", "C1"}, {y, z, c1star}), c1, sigma2};
}

inline civkit::RoleMap outcome_roles() {
  civkit::RoleMap roles;
  roles.outcome = "Y";
  roles.error_prone = {"C1"};
  roles.clean_covariates = {};
  roles.exposure_or_mediator = "Z";
  return roles;
}

}  // namespace testsupport
