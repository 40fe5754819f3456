#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "civkit/gmm.hpp"
#include "civkit/rng.hpp"
#include "civkit/util.hpp"

using namespace civkit;

TEST_CASE("identity system returns the response") {
  Eigen::MatrixXd X = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd y(2);
  y << 3, 5;
  const auto fit = solve_linear_moments(X, X, y);
  REQUIRE(fit.theta[0] == Catch::Approx(3.0));
  REQUIRE(fit.theta[1] == Catch::Approx(5.0));
}

TEST_CASE("exact line reduces to OLS") {
  Eigen::MatrixXd X(3, 2);
  X << 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd y(3);
  y << 1, 2, 3;
  const auto fit = solve_linear_moments(X, X, y);
  REQUIRE(fit.theta[0] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(fit.theta[1] == Catch::Approx(1.0));
}

TEST_CASE("two-by-two IV instance matches the hand inverse") {
  // S'X = [[2,3],[3,4]], S'y = (4,7); inverse is [[-4,3],[3,-2]] (det -1),
  // so theta = (5, -2).
  Eigen::MatrixXd S(2, 2), X(2, 2);
  S << 1, 1, 1, 2;
  X << 1, 2, 1, 1;
  Eigen::VectorXd y(2);
  y << 1, 3;
  const auto fit = solve_linear_moments(S, X, y);
  REQUIRE(fit.theta[0] == Catch::Approx(5.0).epsilon(1e-12));
  REQUIRE(fit.theta[1] == Catch::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("near-singular S'X raises rank error with the condition number") {
  Eigen::MatrixXd X(3, 2);
  X << 1, 1, 1, 1 + 1e-14, 1, 1 - 1e-14;
  Eigen::VectorXd y(3);
  y << 1, 2, 3;
  try {
    solve_linear_moments(X, X, y);
    FAIL("expected rank_error");
  } catch (const rank_error& e) {
    REQUIRE(e.condition_number() > 1e10);
  }
}

TEST_CASE("moment mean at the solution is numerically zero") {
  auto rng = make_rng(3);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd X(200, 3), S(200, 3);
  Eigen::VectorXd y(200);
  for (int i = 0; i < 200; ++i) {
    X(i, 0) = 1;
    X(i, 1) = gauss(rng);
    X(i, 2) = gauss(rng);
    S(i, 0) = 1;
    S(i, 1) = X(i, 1) + 0.3 * gauss(rng);
    S(i, 2) = X(i, 2);
    y[i] = 1 + 2 * X(i, 1) - X(i, 2) + gauss(rng);
  }
  const auto fit = solve_linear_moments(S, X, y);
  REQUIRE(fit.max_abs_moment <= 1e-10);
}

TEST_CASE("instrument scale invariance") {
  auto rng = make_rng(4);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd X(100, 2), S(100, 2);
  Eigen::VectorXd y(100);
  for (int i = 0; i < 100; ++i) {
    X(i, 0) = 1;
    X(i, 1) = gauss(rng);
    S(i, 0) = 1;
    S(i, 1) = X(i, 1) + 0.5 * gauss(rng);
    y[i] = 0.5 + X(i, 1) + gauss(rng);
  }
  const auto base = solve_linear_moments(S, X, y);
  const double c = -3.7;
  const auto scaled = solve_linear_moments(c * S, X, y);
  REQUIRE((scaled.theta - base.theta).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((scaled.cov - base.cov).cwiseAbs().maxCoeff() <
          1e-10 * base.cov.cwiseAbs().maxCoeff());
  REQUIRE((scaled.bread_G - c * base.bread_G).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((scaled.meat_Omega - c * c * base.meat_Omega).cwiseAbs().maxCoeff() <
          1e-8 * base.meat_Omega.cwiseAbs().maxCoeff());
}

TEST_CASE("sandwich identity and scaling examples") {
  const Eigen::MatrixXd I3 = Eigen::MatrixXd::Identity(3, 3);
  REQUIRE((sandwich_covariance(I3, I3) - I3).cwiseAbs().maxCoeff() < 1e-14);
  // c-scaling of the moments cancels: G -> cG, Omega -> c^2 Omega.
  REQUIRE((sandwich_covariance(2 * I3, 4 * I3) - I3).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("sandwich matches the dense-inverse oracle on random SPD pairs") {
  auto rng = make_rng(11);
  std::normal_distribution<double> gauss;
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::MatrixXd A(3, 3), B(3, 3);
    for (int i = 0; i < 9; ++i) {
      A(i / 3, i % 3) = gauss(rng);
      B(i / 3, i % 3) = gauss(rng);
    }
    const Eigen::MatrixXd G = A * A.transpose() + Eigen::MatrixXd::Identity(3, 3);
    const Eigen::MatrixXd Om = B * B.transpose() + Eigen::MatrixXd::Identity(3, 3);
    const Eigen::MatrixXd Ginv = G.inverse();  // oracle: explicit inverse-multiply
    const Eigen::MatrixXd oracle = Ginv * Om * Ginv.transpose();
    REQUIRE((sandwich_covariance(G, Om) - oracle).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("sandwich output is symmetric PSD") {
  auto rng = make_rng(12);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd A(4, 4), B(4, 4);
  for (int i = 0; i < 16; ++i) {
    A(i / 4, i % 4) = gauss(rng);
    B(i / 4, i % 4) = gauss(rng);
  }
  const Eigen::MatrixXd G = A + 5 * Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd Om = B * B.transpose();
  const Eigen::MatrixXd C = sandwich_covariance(G, Om);
  REQUIRE((C - C.transpose()).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  REQUIRE(es.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("newton reproduces the linear solution") {
  auto rng = make_rng(5);
  std::normal_distribution<double> gauss;
  const int n = 150;
  auto S = std::make_shared<Eigen::MatrixXd>(n, 2);
  auto X = std::make_shared<Eigen::MatrixXd>(n, 2);
  auto y = std::make_shared<Eigen::VectorXd>(n);
  for (int i = 0; i < n; ++i) {
    (*X)(i, 0) = 1;
    (*X)(i, 1) = gauss(rng);
    (*S)(i, 0) = 1;
    (*S)(i, 1) = (*X)(i, 1) + 0.2 * gauss(rng);
    (*y)[i] = 2 - (*X)(i, 1) + 0.5 * gauss(rng);
  }
  const auto direct = solve_linear_moments(*S, *X, *y);

  MomentSystem sys;
  sys.n_rows = n;
  sys.dim_params = 2;
  sys.dim_moments = 2;
  sys.evaluator = [S, X, y](Eigen::Index i, const Eigen::VectorXd& th) {
    return Eigen::VectorXd(S->row(i).transpose() * ((*y)[i] - X->row(i).dot(th)));
  };
  const auto newton = solve_newton_moments(sys, Eigen::VectorXd::Zero(2));
  REQUIRE((newton.theta - direct.theta).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("newton solves the scalar square-root moment") {
  MomentSystem sys;
  sys.n_rows = 20;
  sys.dim_params = 1;
  sys.dim_moments = 1;
  sys.evaluator = [](Eigen::Index, const Eigen::VectorXd& th) {
    Eigen::VectorXd u(1);
    u[0] = th[0] * th[0] - 4.0;
    return u;
  };
  Eigen::VectorXd th0(1);
  th0 << 1.0;
  const auto fit = solve_newton_moments(sys, th0);
  REQUIRE(fit.theta[0] == Catch::Approx(2.0).epsilon(1e-10));
}

TEST_CASE("newton non-convergence carries the last iterate and advice") {
  MomentSystem sys;
  sys.n_rows = 5;
  sys.dim_params = 1;
  sys.dim_moments = 1;
  sys.evaluator = [](Eigen::Index, const Eigen::VectorXd& th) {
    Eigen::VectorXd u(1);
    u[0] = th[0] * th[0] + 1.0;  // no real root
    return u;
  };
  Eigen::VectorXd th0(1);
  th0 << 0.7;
  try {
    solve_newton_moments(sys, th0, 1e-10, 8);
    FAIL("expected convergence_error");
  } catch (const convergence_error& e) {
    REQUIRE(e.last_iterate().size() == 1);
    REQUIRE(std::string(e.what()).find("initial values") != std::string::npos);
  }
}

TEST_CASE("stacking two independent one-parameter systems is block diagonal") {
  auto mean_sys = [](std::vector<double> data) {
    auto d = std::make_shared<std::vector<double>>(std::move(data));
    MomentSystem sys;
    sys.n_rows = static_cast<Eigen::Index>(d->size());
    sys.dim_params = 1;
    sys.dim_moments = 1;
    sys.evaluator = [d](Eigen::Index i, const Eigen::VectorXd& th) {
      Eigen::VectorXd u(1);
      u[0] = (*d)[static_cast<std::size_t>(i)] - th[0];
      return u;
    };
    return sys;
  };
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> b{10, 20, 30, 40};
  const auto fa = solve_newton_moments(mean_sys(a), Eigen::VectorXd::Zero(1));
  const auto fb = solve_newton_moments(mean_sys(b), Eigen::VectorXd::Zero(1));

  std::vector<MomentBlock> blocks(2);
  blocks[0].system = mean_sys(a);
  blocks[0].param_map = {0};
  blocks[1].system = mean_sys(b);
  blocks[1].param_map = {1};
  const auto joint =
      solve_newton_moments(stack_moments(std::move(blocks), 2), Eigen::VectorXd::Zero(2));
  REQUIRE(joint.theta[0] == Catch::Approx(fa.theta[0]));
  REQUIRE(joint.theta[1] == Catch::Approx(fb.theta[0]));
  REQUIRE(joint.cov(0, 0) == Catch::Approx(fa.cov(0, 0)));
  REQUIRE(joint.cov(1, 1) == Catch::Approx(fb.cov(0, 0)));
}

TEST_CASE("stacking rejects undeclared shared parameters") {
  MomentSystem sys;
  sys.n_rows = 3;
  sys.dim_params = 1;
  sys.dim_moments = 1;
  sys.evaluator = [](Eigen::Index, const Eigen::VectorXd& th) {
    Eigen::VectorXd u(1);
    u[0] = th[0];
    return u;
  };
  std::vector<MomentBlock> blocks(2);
  blocks[0].system = sys;
  blocks[0].param_map = {0};
  blocks[1].system = sys;
  blocks[1].param_map = {0};
  REQUIRE_THROWS_AS(stack_moments(std::move(blocks), 1), composition_error);
}

TEST_CASE("sandwich SEs agree with the bootstrap on a fixed linear dataset") {
  const int n = 500;
  auto rng = make_rng(99);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1;
    X(i, 1) = gauss(rng);
    X(i, 2) = gauss(rng);
    y[i] = 1 + 0.5 * X(i, 1) - 0.25 * X(i, 2) +
           (1.0 + 0.4 * std::abs(X(i, 1))) * gauss(rng);
  }
  const auto fit = solve_linear_moments(X, X, y);

  const int B = 1000;
  Eigen::MatrixXd draws(B, 3);
  for (int b = 0; b < B; ++b) {
    auto brng = make_rng(1234, static_cast<std::uint64_t>(b));
    std::uniform_int_distribution<int> pick(0, n - 1);
    Eigen::MatrixXd Xb(n, 3);
    Eigen::VectorXd yb(n);
    for (int i = 0; i < n; ++i) {
      const int k = pick(brng);
      Xb.row(i) = X.row(k);
      yb[i] = y[k];
    }
    draws.row(b) = solve_linear_moments(Xb, Xb, yb).theta.transpose();
  }
  for (int j = 0; j < 3; ++j) {
    std::vector<double> col(draws.col(j).data(), draws.col(j).data() + B);
    const double boot_se = std::sqrt(var_sample(col));
    const double sand_se = fit.se(j);
    REQUIRE(std::abs(sand_se - boot_se) / boot_se < 0.15);
  }
}
