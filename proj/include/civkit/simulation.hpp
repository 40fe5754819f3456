#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/errors.hpp"
#include "civkit/mediation.hpp"
#include "civkit/rng.hpp"
#include "civkit/util.hpp"

namespace civkit {

enum class Scenario {
  no_interaction,
  exposure_mediator_interaction,
  linear_nuisance_violation
};

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::no_interaction: return "no_interaction";
    case Scenario::exposure_mediator_interaction: return "exposure_mediator_interaction";
    case Scenario::linear_nuisance_violation: return "linear_nuisance_violation";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "no_interaction") return Scenario::no_interaction;
  if (s == "exposure_mediator_interaction")
    return Scenario::exposure_mediator_interaction;
  if (s == "linear_nuisance_violation") return Scenario::linear_nuisance_violation;
  throw parse_error("unknown scenario: " + s);
}

struct DgpCoefficients {
  double beta0 = 1.0, beta_c = 0.5, beta_a = 0.8;          // mediator model
  double theta0 = 1.0, theta_c = 0.5, theta_a = 1.0;       // outcome model
  double theta_z = 1.0, theta_az = 0.3;                    // theta_az: interaction only
};

// Synthetic mediation data generator. The latent exposure is standardized to
// unit variance so sigma2_eps = (1 - reliability) / reliability exactly:
//   C ~ N(0,1)
//   A = (0.5 C^2 + C + N(0,1)) / sqrt(2.5)          (valid scenarios)
//   A = (C + N(0,1)) / sqrt(2)                      (linear violation)
//   Z = beta0 + beta_c C + beta_a A + N(0,1)
//   Y = theta0 + theta_c C + theta_a A + theta_z Z [+ theta_az A Z] + N(0,1)
//   A* = A + N(0, sigma2_eps)
struct DgpSpec {
  Scenario scenario = Scenario::no_interaction;
  double reliability = 0.8;
  int n = 1000;
  std::uint64_t seed = 0;
  DgpCoefficients coef;
};

struct DgpTruth {
  double sigma2_eps = 0.0;
  double nde = 0.0, nie = 0.0, te = 0.0;  // contrast (a', a'') = (1, 0)
  Eigen::VectorXd latent_a;
};

struct GeneratedData {
  Dataset data;
  DgpTruth truth;
};

inline GeneratedData generate_dataset(const DgpSpec& spec) {
  if (!(spec.reliability > 0.0 && spec.reliability <= 1.0))
    throw precondition_error("generate_dataset: reliability must be in (0,1]");
  if (spec.n < 1) throw precondition_error("generate_dataset: n >= 1 required");

  const auto& k = spec.coef;
  const double sigma2_eps = (1.0 - spec.reliability) / spec.reliability;
  const double sd_eps = std::sqrt(sigma2_eps);
  auto rng = make_rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Eigen::Index n = spec.n;
  Eigen::VectorXd c(n), a(n), z(n), y(n), astar(n);
  const bool interaction = spec.scenario == Scenario::exposure_mediator_interaction;
  const bool linear_a = spec.scenario == Scenario::linear_nuisance_violation;
  for (Eigen::Index i = 0; i < n; ++i) {
    c[i] = gauss(rng);
    const double eta = gauss(rng);
    a[i] = linear_a ? (c[i] + eta) / std::sqrt(2.0)
                    : (0.5 * c[i] * c[i] + c[i] + eta) / std::sqrt(2.5);
    z[i] = k.beta0 + k.beta_c * c[i] + k.beta_a * a[i] + gauss(rng);
    y[i] = k.theta0 + k.theta_c * c[i] + k.theta_a * a[i] + k.theta_z * z[i] +
           (interaction ? k.theta_az * a[i] * z[i] : 0.0) + gauss(rng);
    astar[i] = a[i] + sd_eps * gauss(rng);
  }

  GeneratedData out{Dataset({"Y", "Z", "Astar", "C"}, {y, z, astar, c}), {}};
  out.truth.sigma2_eps = sigma2_eps;
  out.truth.latent_a = a;
  if (interaction) {
    // NDE(1,0) = theta_a + theta_az * E[Z(0)] with E[C] = 0;
    // NIE(1,0) = beta_a * (theta_z + theta_az * a') at a' = 1.
    out.truth.nde = k.theta_a + k.theta_az * k.beta0;
    out.truth.nie = k.beta_a * (k.theta_z + k.theta_az);
  } else {
    out.truth.nde = k.theta_a;
    out.truth.nie = k.beta_a * k.theta_z;
  }
  out.truth.te = out.truth.nde + out.truth.nie;
  return out;
}

inline RoleMap simulation_roles() {
  RoleMap roles;
  roles.outcome = "Y";
  roles.error_prone = {"Astar"};
  roles.clean_covariates = {"C"};
  roles.exposure_or_mediator = "Z";
  return roles;
}

// -- Monte Carlo harness -----------------------------------------------------

struct McPipelineSpec {
  Pipeline pipeline = Pipeline::NAIVE;
  double rr = 0.8;  // MOM_SENS assumed reliability

  std::string label() const {
    if (pipeline != Pipeline::MOM_SENS) return to_string(pipeline);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "MOM-SENS(%.2f)", rr);
    return buf;
  }
};

struct McGrid {
  std::vector<double> reliabilities = {0.7, 0.8, 0.9};
  Scenario scenario = Scenario::no_interaction;
  int n = 1000;
  std::vector<McPipelineSpec> pipelines = {
      {Pipeline::NAIVE, 0},     {Pipeline::IVZ_IVY, 0},
      {Pipeline::GMMZ_IVY, 0},  {Pipeline::IVZ_GMMY, 0},
      {Pipeline::MOM_SENS, 0.7}, {Pipeline::MOM_SENS, 0.8},
      {Pipeline::MOM_SENS, 0.9}};
  DgpCoefficients coef;
};

struct McConfig {
  int bootstrap_B = 500;
  double level = 0.95;
  int threads = 1;
  NuisanceConfig nuisance;
  bool clamp_negative_sigma2 = true;  // weak replicates otherwise abort cells
};

struct McCell {
  std::string pipeline;
  double reliability = 0.0;
  std::string estimand;  // NDE / NIE / TE
  double truth = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double coverage = 0.0;
  int replications_used = 0;
  int failed = 0;
  bool flagged = false;  // >10% failures
};

struct MonteCarloReport {
  McGrid grid;
  int R = 0;
  std::uint64_t seed = 0;
  int bootstrap_B = 0;
  std::vector<McCell> cells;
};

// Bias / variance / coverage over R replications for every (pipeline,
// reliability, estimand) cell. Datasets are shared across pipelines within a
// replicate (paired comparisons); failed replicates are excluded from the
// summaries and reported.
inline MonteCarloReport run_monte_carlo(const McGrid& grid, int R,
                                        std::uint64_t seed,
                                        const McConfig& config = {}) {
  if (R < 2) throw precondition_error("run_monte_carlo: R >= 2 required");
  if (grid.reliabilities.empty() || grid.pipelines.empty())
    throw precondition_error("run_monte_carlo: empty grid");

  MonteCarloReport report;
  report.grid = grid;
  report.R = R;
  report.seed = seed;
  report.bootstrap_B = config.bootstrap_B;

  const RoleMap roles = simulation_roles();
  const MediationModelSpec spec = MediationModelSpec::standard(
      roles, grid.scenario == Scenario::exposure_mediator_interaction);
  const std::size_t np = grid.pipelines.size();

  for (std::size_t ri = 0; ri < grid.reliabilities.size(); ++ri) {
    const double rel = grid.reliabilities[ri];

    struct RepResult {
      bool ok = false;
      std::array<double, 3> est{};
      std::array<bool, 3> covered{};
    };
    // results[pipeline][replicate]
    std::vector<std::vector<RepResult>> results(
        np, std::vector<RepResult>(static_cast<std::size_t>(R)));
    DgpTruth truth;

    std::vector<DgpTruth> truths(static_cast<std::size_t>(R));
    parallel_for(R, config.threads, [&](std::int64_t r) {
      DgpSpec dgp;
      dgp.scenario = grid.scenario;
      dgp.reliability = rel;
      dgp.n = grid.n;
      dgp.coef = grid.coef;
      dgp.seed = derive_seed(derive_seed(seed, ri), static_cast<std::uint64_t>(r));
      const GeneratedData gen = generate_dataset(dgp);
      truths[static_cast<std::size_t>(r)] = gen.truth;

      for (std::size_t pi = 0; pi < np; ++pi) {
        PipelineConfig pc;
        pc.nuisance = config.nuisance;
        pc.bootstrap_B = config.bootstrap_B;
        pc.level = config.level;
        pc.clamp_negative_sigma2 = config.clamp_negative_sigma2;
        pc.mom_sens_rr = grid.pipelines[pi].rr;
        pc.seed = derive_seed(dgp.seed, 1000 + pi);
        pc.threads = 1;
        try {
          const EffectReport rep = run_pipeline(gen.data, roles, spec,
                                                grid.pipelines[pi].pipeline, pc);
          const EffectRow& row = rep.rows.front();
          RepResult rr;
          rr.ok = true;
          rr.est = {row.nde, row.nie, row.te};
          const std::array<std::optional<std::pair<double, double>>, 3> cis = {
              row.nde_ci, row.nie_ci, row.te_ci};
          const std::array<double, 3> tr = {gen.truth.nde, gen.truth.nie,
                                            gen.truth.te};
          for (int e = 0; e < 3; ++e)
            rr.covered[static_cast<std::size_t>(e)] =
                cis[static_cast<std::size_t>(e)] &&
                cis[static_cast<std::size_t>(e)]->first <= tr[static_cast<std::size_t>(e)] &&
                tr[static_cast<std::size_t>(e)] <= cis[static_cast<std::size_t>(e)]->second;
          results[pi][static_cast<std::size_t>(r)] = rr;
        } catch (const numeric_error&) {
          // failed replicate for this pipeline; recorded below
        }
      }
    });
    truth = truths[0];

    static const char* kEstimands[3] = {"NDE", "NIE", "TE"};
    for (std::size_t pi = 0; pi < np; ++pi) {
      for (int e = 0; e < 3; ++e) {
        McCell cell;
        cell.pipeline = grid.pipelines[pi].label();
        cell.reliability = rel;
        cell.estimand = kEstimands[e];
        cell.truth = e == 0 ? truth.nde : (e == 1 ? truth.nie : truth.te);
        std::vector<double> est;
        int covered = 0;
        for (int r = 0; r < R; ++r) {
          const RepResult& rr = results[pi][static_cast<std::size_t>(r)];
          if (!rr.ok) continue;
          est.push_back(rr.est[static_cast<std::size_t>(e)]);
          if (rr.covered[static_cast<std::size_t>(e)]) ++covered;
        }
        cell.replications_used = static_cast<int>(est.size());
        cell.failed = R - cell.replications_used;
        cell.flagged = cell.failed * 10 > R;
        if (!est.empty()) {
          cell.bias = mean_sample(est) - cell.truth;
          cell.variance = var_sample(est);
          cell.coverage = static_cast<double>(covered) / static_cast<double>(est.size());
        }
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

// -- plain-text renderers (JSON rendering lives in report.hpp) --------------

inline std::string render_markdown(const MonteCarloReport& report) {
  std::ostringstream os;
  os << "| pipeline | reliability | estimand | truth | bias | var | cov | used | failed |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  char buf[64];
  for (const auto& c : report.cells) {
    os << "| " << c.pipeline << " | ";
    std::snprintf(buf, sizeof(buf), "%.2f", c.reliability);
    os << buf << " | " << c.estimand << " | ";
    std::snprintf(buf, sizeof(buf), "%.3f | %.3f | %.3f | %.3f", c.truth, c.bias,
                  c.variance, c.coverage);
    os << buf << " | " << c.replications_used << " | " << c.failed
       << (c.flagged ? " (unreliable)" : "") << " |\n";
  }
  return os.str();
}

inline std::string render_csv(const MonteCarloReport& report) {
  std::ostringstream os;
  os << "pipeline,reliability,estimand,truth,bias,variance,coverage,"
        "replications_used,failed,flagged\n";
  char buf[160];
  for (const auto& c : report.cells) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g", c.reliability,
                  c.truth, c.bias, c.variance, c.coverage);
    const std::string nums(buf);
    const auto first_comma = nums.find(',');
    os << c.pipeline << ',' << nums.substr(0, first_comma) << ',' << c.estimand
       << ',' << nums.substr(first_comma + 1) << ',' << c.replications_used << ','
       << c.failed << ',' << (c.flagged ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace civkit
