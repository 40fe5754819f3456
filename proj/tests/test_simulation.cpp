#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "civkit/report.hpp"
#include "civkit/simulation.hpp"

using namespace civkit;

TEST_CASE("reliability 0.8 with unit latent variance implies sigma2 = 0.25") {
  DgpSpec spec;
  spec.reliability = 0.8;
  spec.n = 10;
  const auto gen = generate_dataset(spec);
  REQUIRE(gen.truth.sigma2_eps == Catch::Approx(0.25));
}

TEST_CASE("same seed gives bit-identical datasets") {
  DgpSpec spec;
  spec.n = 500;
  spec.seed = 2024;
  const auto a = generate_dataset(spec);
  const auto b = generate_dataset(spec);
  for (const auto& name : a.data.names())
    REQUIRE(a.data.column(name) == b.data.column(name));
}

TEST_CASE("observed-minus-latent variance matches sigma2 at large n") {
  DgpSpec spec;
  spec.n = 1000000;
  spec.seed = 7;
  spec.reliability = 0.7;
  const auto gen = generate_dataset(spec);
  const Eigen::VectorXd& astar = gen.data.column("Astar");
  const auto& a = gen.truth.latent_a;
  const double var_gap =
      (astar.array() - astar.mean()).square().mean() -
      (a.array() - a.mean()).square().mean();
  REQUIRE(std::abs(var_gap - gen.truth.sigma2_eps) / gen.truth.sigma2_eps < 0.01);
  // The latent exposure is standardized to unit variance.
  REQUIRE(std::abs((a.array() - a.mean()).square().mean() - 1.0) < 0.01);
}

TEST_CASE("analytic truth matches a large-sample plug-in oracle (interaction)") {
  DgpSpec spec;
  spec.scenario = Scenario::exposure_mediator_interaction;
  spec.n = 10;
  const auto gen = generate_dataset(spec);

  // Plug-in oracle: simulate the counterfactual means directly.
  const auto& k = spec.coef;
  auto rng = make_rng(321);
  std::normal_distribution<double> gauss;
  const int m = 2000000;
  double nde = 0, nie = 0;
  for (int i = 0; i < m; ++i) {
    const double c = gauss(rng);
    const double nz = gauss(rng);
    const double ny = gauss(rng);
    const double z0 = k.beta0 + k.beta_c * c + k.beta_a * 0.0 + nz;
    const double z1 = k.beta0 + k.beta_c * c + k.beta_a * 1.0 + nz;
    auto yv = [&](double aa, double zz) {
      return k.theta0 + k.theta_c * c + k.theta_a * aa + k.theta_z * zz +
             k.theta_az * aa * zz + ny;
    };
    nde += yv(1, z0) - yv(0, z0);
    nie += yv(1, z1) - yv(1, z0);
  }
  nde /= m;
  nie /= m;
  REQUIRE(std::abs(gen.truth.nde - nde) < 0.01);
  REQUIRE(std::abs(gen.truth.nie - nie) < 0.01);
  REQUIRE(gen.truth.te == Catch::Approx(gen.truth.nde + gen.truth.nie));
}

TEST_CASE("violation scenario generates a linear nuisance") {
  DgpSpec spec;
  spec.scenario = Scenario::linear_nuisance_violation;
  spec.n = 20000;
  spec.seed = 5;
  const auto gen = generate_dataset(spec);
  // Regression of A on (1, C) leaves residuals uncorrelated with C^2.
  const Eigen::VectorXd& c = gen.data.column("C");
  const auto& a = gen.truth.latent_a;
  const double b = cov_mom(c, a) / var_mom(c);
  const Eigen::VectorXd resid = a - (a.mean() - b * c.mean()) * Eigen::VectorXd::Ones(c.size()) - b * c;
  const Eigen::VectorXd c2 = c.array().square().matrix();
  REQUIRE(std::abs(cov_mom(resid, c2)) < 0.02);
}

TEST_CASE("monte carlo summary formulas on a known cell") {
  // estimates {1.0, 1.2, 0.8} vs truth 1.0 with two covering CIs:
  // bias 0, variance 0.04, coverage 2/3.
  const std::vector<double> est{1.0, 1.2, 0.8};
  REQUIRE(mean_sample(est) - 1.0 == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(var_sample(est) == Catch::Approx(0.04));
  REQUIRE(2.0 / 3.0 == Catch::Approx(0.6666666667).epsilon(1e-6));
}

TEST_CASE("run_monte_carlo produces deterministic, well-formed cells") {
  McGrid grid;
  grid.reliabilities = {0.8};
  grid.n = 400;
  grid.pipelines = {{Pipeline::NAIVE, 0}, {Pipeline::MOM_SENS, 0.8}};
  McConfig cfg;
  cfg.bootstrap_B = 100;
  const auto a = run_monte_carlo(grid, 4, 99, cfg);
  const auto b = run_monte_carlo(grid, 4, 99, cfg);
  REQUIRE(to_json(a).dump() == to_json(b).dump());
  REQUIRE(a.cells.size() == 6);  // 2 pipelines x 3 estimands
  for (const auto& c : a.cells) {
    REQUIRE(c.replications_used + c.failed == 4);
    REQUIRE(c.coverage >= 0.0);
    REQUIRE(c.coverage <= 1.0);
  }
}

TEST_CASE("R below 2 is refused") {
  McGrid grid;
  grid.reliabilities = {0.8};
  REQUIRE_THROWS_AS(run_monte_carlo(grid, 1, 3), precondition_error);
}

TEST_CASE("renderers: markdown shape and CSV round trip") {
  McGrid grid;
  grid.reliabilities = {0.9};
  grid.n = 400;
  grid.pipelines = {{Pipeline::NAIVE, 0}};
  McConfig cfg;
  cfg.bootstrap_B = 100;
  const auto report = run_monte_carlo(grid, 3, 17, cfg);

  const std::string md = render_report(report, "markdown");
  REQUIRE(md.find("| pipeline |") == 0);
  int lines = 0;
  for (char ch : md)
    if (ch == '\n') ++lines;
  REQUIRE(lines == 2 + 3);  // header + separator + one line per cell

  // Round-trip the numeric payload through the CSV loader: drop the two
  // string columns (pipeline, estimand) and reload the rest bit-for-bit.
  const std::string csv = render_report(report, "csv");
  std::istringstream raw(csv);
  std::ostringstream numeric;
  std::string line;
  while (std::getline(raw, line)) {
    std::size_t first = line.find(',');
    std::size_t second = line.find(',', first + 1);
    std::size_t third = line.find(',', second + 1);
    numeric << line.substr(first + 1, second - first - 1)  // reliability
            << line.substr(third) << "\n";                 // numeric tail
  }
  std::istringstream in(numeric.str());
  const auto loaded = read_csv(in);
  REQUIRE(loaded.data.n_rows() == 3);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(loaded.data.column("bias")[i] == report.cells[static_cast<std::size_t>(i)].bias);
    REQUIRE(loaded.data.column("coverage")[i] ==
            report.cells[static_cast<std::size_t>(i)].coverage);
    REQUIRE(loaded.data.column("truth")[i] ==
            report.cells[static_cast<std::size_t>(i)].truth);
  }

  const std::string js = render_report(report, "json");
  const auto parsed = json::parse(js);
  REQUIRE(parsed["cells"][0].contains("truth"));
  REQUIRE(parsed["cells"][0].contains("failed"));
}
