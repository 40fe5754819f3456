#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "civkit/dataset.hpp"
#include "civkit/design.hpp"
#include "civkit/errors.hpp"
#include "civkit/f_test.hpp"
#include "civkit/gmm.hpp"
#include "civkit/instrument.hpp"
#include "civkit/me_variance.hpp"
#include "civkit/nuisance.hpp"
#include "civkit/rng.hpp"
#include "civkit/util.hpp"

namespace civkit {

enum class MediatorMethod { naive_ols, constructed_iv, gmm_sigma_corrected };
enum class MediatorInstrumentMode { simplified, plugin_optimal };
enum class Pipeline { NAIVE, IVZ_IVY, GMMZ_IVY, IVZ_GMMY, MOM_SENS };

inline const char* to_string(Pipeline p) {
  switch (p) {
    case Pipeline::NAIVE: return "NAIVE";
    case Pipeline::IVZ_IVY: return "IVZ-IVY";
    case Pipeline::GMMZ_IVY: return "GMMZ-IVY";
    case Pipeline::IVZ_GMMY: return "IVZ-GMMY";
    case Pipeline::MOM_SENS: return "MOM-SENS";
  }
  return "?";
}

// One additive piece of the outcome model: g(C; theta) * Z^z_power, times
// the exposure when times_exposure is set. The full model is the sum over
// groups; it is linear in theta and (at most) linear in the exposure.
struct OutcomeTermGroup {
  ModelLayout g_terms;
  int z_power = 0;
  bool times_exposure = false;
};

// Mediator model for b(Z) = Z^p: E{Z^p | A, C} = h1(C)'beta1 + h2(C)'beta2 A.
// One such model is fit per distinct p >= 1 appearing in the outcome groups.
struct MediationModelSpec {
  std::vector<OutcomeTermGroup> outcome_groups;
  ModelLayout h1_terms;
  ModelLayout h2_terms;

  // The standard product-method shape: main effects of C (and moderator),
  // Z, A (interacted with the moderator when present), and optionally A*Z.
  static MediationModelSpec standard(const RoleMap& roles,
                                     bool exposure_mediator_interaction = false) {
    MediationModelSpec spec;
    ModelLayout main_c;
    main_c.terms.push_back(Term{});
    for (const auto& c : roles.clean_covariates) main_c.terms.push_back(Term{{{c, 1}}});
    if (roles.moderator &&
        std::find(roles.clean_covariates.begin(), roles.clean_covariates.end(),
                  *roles.moderator) == roles.clean_covariates.end())
      main_c.terms.push_back(Term{{{*roles.moderator, 1}}});

    ModelLayout a_basis;
    a_basis.terms.push_back(Term{});
    if (roles.moderator) a_basis.terms.push_back(Term{{{*roles.moderator, 1}}});

    ModelLayout unit;
    unit.terms.push_back(Term{});

    spec.outcome_groups.push_back({main_c, 0, false});
    spec.outcome_groups.push_back({unit, 1, false});   // theta_Z * Z
    spec.outcome_groups.push_back({a_basis, 0, true}); // theta_A * A (+ moderator)
    if (exposure_mediator_interaction)
      spec.outcome_groups.push_back({unit, 1, true});  // theta_AZ * A * Z

    spec.h1_terms = main_c;
    spec.h2_terms = a_basis;
    return spec;
  }

  std::vector<int> z_powers_needed() const {
    std::vector<int> out;
    for (const auto& g : outcome_groups)
      if (g.z_power >= 1 &&
          std::find(out.begin(), out.end(), g.z_power) == out.end())
        out.push_back(g.z_power);
    std::sort(out.begin(), out.end());
    return out;
  }
};

namespace detail {

inline void check_c_only(const ModelLayout& layout, const RoleMap& roles,
                         const char* what) {
  for (const auto& t : layout.terms)
    for (const auto& f : t.factors) {
      const bool ok =
          std::find(roles.clean_covariates.begin(), roles.clean_covariates.end(),
                    f.name) != roles.clean_covariates.end() ||
          (roles.moderator && f.name == *roles.moderator);
      if (!ok)
        throw composition_error(std::string(what) + " term '" + t.label() +
                                "' must be a function of the covariates only");
    }
}

}  // namespace detail

// Precomputed matrices for one dataset + mediation model.
struct MediationContext {
  const Dataset* ds = nullptr;
  RoleMap roles;
  MediationModelSpec spec;

  ModelLayout outcome_layout;                 // materialized terms
  std::vector<std::pair<int, int>> group_spans;  // (first column, count) per group
  std::vector<int> exposure_columns;          // outcome design columns carrying A*
  Eigen::MatrixXd exposure_multipliers;       // n x |exposure_columns|: g(C)*Z^p

  Eigen::MatrixXd w1, w2;  // mediator bases h1/h2 evaluated on ds
  std::vector<int> z_powers;

  // RoleMap with the moderator folded into the covariates, used for
  // nuisance fits so E(A*|.) conditions on it as well.
  RoleMap nuisance_roles;
};

inline MediationContext make_mediation_context(const Dataset& ds, const RoleMap& roles,
                                               const MediationModelSpec& spec) {
  roles.validate(ds);
  if (roles.error_prone.size() != 1)
    throw precondition_error("mediation requires a scalar error-prone exposure");
  MediationContext ctx;
  ctx.ds = &ds;
  ctx.roles = roles;
  ctx.spec = spec;

  for (const auto& g : spec.outcome_groups)
    detail::check_c_only(g.g_terms, roles, "outcome g");
  detail::check_c_only(spec.h1_terms, roles, "h1");
  detail::check_c_only(spec.h2_terms, roles, "h2");

  const std::string& a = roles.error_prone[0];
  const std::string& z = roles.exposure_or_mediator;
  int col = 0;
  for (const auto& g : spec.outcome_groups) {
    ctx.group_spans.emplace_back(col, static_cast<int>(g.g_terms.terms.size()));
    for (const auto& t : g.g_terms.terms) {
      Term full = t;
      if (g.z_power >= 1) full.factors.push_back({z, g.z_power});
      if (g.times_exposure) full.factors.push_back({a, 1});
      ctx.outcome_layout.terms.push_back(full);
      if (g.times_exposure) ctx.exposure_columns.push_back(col);
      ++col;
    }
  }
  // Multipliers of A* per exposure-carrying column (g(C)*Z^p), used by the
  // known-sigma2 moment adjustment.
  ctx.exposure_multipliers.resize(ds.n_rows(),
                                  static_cast<Eigen::Index>(ctx.exposure_columns.size()));
  Eigen::Index k = 0;
  for (const auto& g : spec.outcome_groups) {
    if (!g.times_exposure) continue;
    for (const auto& t : g.g_terms.terms) {
      Term mult = t;
      if (g.z_power >= 1) mult.factors.push_back({z, g.z_power});
      ctx.exposure_multipliers.col(k++) = mult.evaluate(ds);
    }
  }

  ctx.w1 = evaluate_layout(ds, spec.h1_terms, false);
  ctx.w2 = evaluate_layout(ds, spec.h2_terms, false);
  ctx.z_powers = spec.z_powers_needed();
  ctx.nuisance_roles = roles;
  if (roles.moderator &&
      std::find(roles.clean_covariates.begin(), roles.clean_covariates.end(),
                *roles.moderator) == roles.clean_covariates.end())
    ctx.nuisance_roles.clean_covariates.push_back(*roles.moderator);
  ctx.nuisance_roles.moderator.reset();
  return ctx;
}

// -- mediator fitting ------------------------------------------------------

struct MediatorInstrument {
  Eigen::MatrixXd S1bar;  // n x (d1+d2)
  Eigen::MatrixXd S2bar;  // n x (d1+d2)
  int floored_rows = 0;
};

struct MediatorInstrumentOptions {
  // simplified mode: model for Var(A*|C). Constant drops out of the solve by
  // scale invariance and is the default.
  bool variance_from_basis = false;
  int basis_degree = 3;
  int plugin_max_iter = 25;
  double plugin_tol = 1e-8;
};

struct MediatorFitOne {
  GmmFit gmm;
  int z_power = 1;
  double last_step_change = 0.0;  // plugin_optimal iteration diagnostics
  int iterations = 0;
};

struct MediatorFit {
  std::vector<MediatorFitOne> per_b;
  MediatorMethod method = MediatorMethod::naive_ols;
  std::optional<double> sigma2_used;
  int d1 = 0, d2 = 0;

  const MediatorFitOne& for_power(int p) const {
    for (const auto& f : per_b)
      if (f.z_power == p) return f;
    throw composition_error("no mediator model fitted for b(Z)=Z^" + std::to_string(p));
  }
};

namespace detail {

// Solves sum_i Sbar_i (b_i - xbar_i' beta) + sigma2 * S2bar_i h2_i(beta2) = 0
// for mediator designs xbar_i = [w1_i; A*_i w2_i], with Sbar = S1bar + A* S2bar.
// Linear in beta; returns the fit with the Ubar-based sandwich.
inline GmmFit corrected_linear_mediator(const Eigen::MatrixXd& S1bar,
                                        const Eigen::MatrixXd& S2bar,
                                        const Eigen::MatrixXd& w1,
                                        const Eigen::MatrixXd& w2,
                                        const Eigen::VectorXd& astar,
                                        const Eigen::VectorXd& b, double sigma2,
                                        std::vector<std::string> labels) {
  const Eigen::Index n = astar.size();
  const Eigen::Index d1 = w1.cols(), d2 = w2.cols(), d = d1 + d2;
  Eigen::MatrixXd xbar(n, d);
  xbar.leftCols(d1) = w1;
  xbar.rightCols(d2) = w2.array().colwise() * astar.array();
  const Eigen::MatrixXd sbar = S1bar + (S2bar.array().colwise() * astar.array()).matrix();

  Eigen::MatrixXd M = sbar.transpose() * xbar / static_cast<double>(n);
  // sigma2 correction enters only against the beta2 block.
  M.rightCols(d2).noalias() -= sigma2 * (S2bar.transpose() * w2) / static_cast<double>(n);
  const double cond = condition_number(M);
  if (!(cond < kConditionThreshold))
    throw rank_error("mediator moment system is numerically singular (condition number " +
                         std::to_string(cond) + ")",
                     cond);
  const Eigen::VectorXd rhs = sbar.transpose() * b / static_cast<double>(n);
  GmmFit fit;
  fit.n = n;
  fit.labels = std::move(labels);
  fit.theta = M.colPivHouseholderQr().solve(rhs);
  fit.bread_G = M;

  const Eigen::VectorXd delta = b - xbar * fit.theta;
  const Eigen::VectorXd h2 = w2 * fit.theta.tail(d2);
  Eigen::MatrixXd U = (sbar.array().colwise() * delta.array()).matrix();
  U.noalias() += sigma2 * (S2bar.array().colwise() * h2.array()).matrix();
  fit.meat_Omega = U.transpose() * U / static_cast<double>(n);
  fit.cov = sandwich_covariance(fit.bread_G, fit.meat_Omega);
  fit.max_abs_moment = (U.colwise().mean()).cwiseAbs().maxCoeff();
  return fit;
}

inline PolyBasis covariate_basis(const MediationContext& ctx, int degree) {
  return PolyBasis(ctx.nuisance_roles.clean_covariates, degree,
                   BasisCross::all_pairs);
}

inline Eigen::MatrixXd covariate_inputs(const MediationContext& ctx) {
  const auto& vars = ctx.nuisance_roles.clean_covariates;
  Eigen::MatrixXd inputs(ctx.ds->n_rows(), static_cast<Eigen::Index>(vars.size()));
  for (std::size_t j = 0; j < vars.size(); ++j)
    inputs.col(static_cast<Eigen::Index>(j)) = ctx.ds->column(vars[j]);
  return inputs;
}

}  // namespace detail

// Instrument pair (S1bar, S2bar) for the sigma2-corrected mediator moments.
// simplified: the no-measurement-error reduction, block diagonal
// [Var(A*|C) grad h1; 0] and [0; grad h2]. plugin_optimal: the efficient pair
// with conditional moments of Delta*(beta) modeled by basis regression;
// beta_current supplies the expansion point.
inline MediatorInstrument build_mediator_instrument(
    const MediationContext& ctx, MediatorInstrumentMode mode, double sigma2,
    int z_power, const Eigen::VectorXd* beta_current = nullptr,
    const MediatorInstrumentOptions& options = {}) {
  const Eigen::Index n = ctx.ds->n_rows();
  const Eigen::Index d1 = ctx.w1.cols(), d2 = ctx.w2.cols(), d = d1 + d2;
  MediatorInstrument out;
  out.S1bar = Eigen::MatrixXd::Zero(n, d);
  out.S2bar = Eigen::MatrixXd::Zero(n, d);

  if (mode == MediatorInstrumentMode::simplified) {
    Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
    if (options.variance_from_basis) {
      const Eigen::VectorXd a = ctx.ds->column(ctx.roles.error_prone[0]);
      const PolyBasis basis = detail::covariate_basis(ctx, options.basis_degree);
      const Eigen::MatrixXd B = basis.evaluate(detail::covariate_inputs(ctx));
      const Eigen::MatrixXd ahat = least_squares(B, a).fitted;
      const Eigen::MatrixXd e2 = (a - ahat).array().square().matrix();
      v = least_squares(B, e2).fitted.col(0).cwiseMax(kVarianceFloor);
    }
    out.S1bar.leftCols(d1) = ctx.w1.array().colwise() * v.array();
    out.S2bar.rightCols(d2) = ctx.w2;
    return out;
  }

  if (!beta_current || beta_current->size() != d)
    throw precondition_error("plugin_optimal instrument requires a current beta");
  const Eigen::VectorXd a = ctx.ds->column(ctx.roles.error_prone[0]);
  Eigen::VectorXd b = ctx.ds->column(ctx.roles.exposure_or_mediator);
  for (int p = 1; p < z_power; ++p)
    b = b.cwiseProduct(ctx.ds->column(ctx.roles.exposure_or_mediator));
  const Eigen::VectorXd h2 = ctx.w2 * beta_current->tail(d2);
  const Eigen::VectorXd delta =
      b - ctx.w1 * beta_current->head(d1) - h2.cwiseProduct(a);

  const PolyBasis basis = detail::covariate_basis(ctx, options.basis_degree);
  const Eigen::MatrixXd B = basis.evaluate(detail::covariate_inputs(ctx));
  Eigen::MatrixXd targets(n, 5);
  targets.col(0) = a;
  targets.col(1) = a.array().square();
  targets.col(2) = delta.array().square();
  targets.col(3) = delta.array().square() * a.array();
  targets.col(4) = delta.array().square() * a.array().square();
  const Eigen::MatrixXd fitted = least_squares(B, targets).fitted;
  const Eigen::VectorXd ea = fitted.col(0);
  const Eigen::VectorXd ea2 = fitted.col(1).cwiseMax(kVarianceFloor);
  const Eigen::VectorXd ed2 = fitted.col(2).cwiseMax(kVarianceFloor);
  const Eigen::VectorXd ed2a = fitted.col(3);
  const Eigen::VectorXd ed2a2 = fitted.col(4).cwiseMax(kVarianceFloor);

  const double s4 = sigma2 * sigma2;
  int floored = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h2i = h2[i];
    double di = ed2[i] * (ed2a2[i] - s4 * h2i * h2i) - ed2a[i] * ed2a[i];
    if (std::abs(di) < 1e-8) {
      di = di < 0 ? -1e-8 : 1e-8;
      ++floored;
    }
    const double cov_d2a_a = ed2a2[i] - ed2a[i] * ea[i];
    const double cov_d2_a = ed2a[i] - ed2[i] * ea[i];
    const double l1 = (s4 * h2i * h2i - cov_d2a_a) / di;
    const double m1 = cov_d2_a / di;
    const double l2 =
        (ed2a[i] * (ea2[i] + sigma2) - (ed2a2[i] - s4 * h2i * h2i) * ea[i]) / di;
    const double m2 = (ed2a[i] * ea[i] - ed2[i] * (ea2[i] + sigma2)) / di;
    out.S1bar.row(i).head(d1) = l1 * ctx.w1.row(i);
    out.S1bar.row(i).tail(d2) = l2 * ctx.w2.row(i);
    out.S2bar.row(i).head(d1) = m1 * ctx.w1.row(i);
    out.S2bar.row(i).tail(d2) = m2 * ctx.w2.row(i);
  }
  out.floored_rows = floored;
  if (floored > n / 100)
    throw conditioning_error(
        "plugin_optimal instrument: d(C) hit the conditioning floor on " +
        std::to_string(floored) + " of " + std::to_string(n) + " rows");
  return out;
}

// Fits the mediator models, one per required b(Z) = Z^p. The corrected GMM
// moments are Ubar = {S1+S2 A*}{b(Z) - h1 - h2 A*} + S2 h2 sigma2, linear in
// beta for linear h bases.
inline MediatorFit fit_mediator(const MediationContext& ctx, MediatorMethod method,
                                std::optional<double> sigma2 = std::nullopt,
                                const NuisanceFit* nuisance = nullptr,
                                MediatorInstrumentMode mode = MediatorInstrumentMode::simplified,
                                const MediatorInstrumentOptions& options = {}) {
  const Eigen::Index n = ctx.ds->n_rows();
  const Eigen::Index d1 = ctx.w1.cols(), d2 = ctx.w2.cols();
  const Eigen::VectorXd a = ctx.ds->column(ctx.roles.error_prone[0]);
  const std::string& aname = ctx.roles.error_prone[0];

  MediatorFit fit;
  fit.method = method;
  fit.d1 = static_cast<int>(d1);
  fit.d2 = static_cast<int>(d2);

  double s2 = 0.0;
  if (method == MediatorMethod::gmm_sigma_corrected) {
    if (!sigma2)
      throw precondition_error("gmm_sigma_corrected requires a sigma2 value");
    if (*sigma2 < 0.0)
      throw precondition_error(
          "gmm_sigma_corrected: negative sigma2 refused; clamp to max(sigma2, 0) "
          "explicitly if you want to proceed");
    s2 = *sigma2;
    fit.sigma2_used = s2;
  }
  if (method == MediatorMethod::constructed_iv &&
      (!nuisance || nuisance->predictions.cols() != 1))
    throw precondition_error(
        "constructed_iv mediator fit requires E(A*|C) nuisance predictions");

  std::vector<std::string> labels;
  for (const auto& l : ctx.spec.h1_terms.labels()) labels.push_back("h1:" + l);
  for (const auto& l : ctx.spec.h2_terms.labels())
    labels.push_back(l == "1" ? aname : aname + "*" + l);

  for (int p : ctx.z_powers) {
    Eigen::VectorXd b = ctx.ds->column(ctx.roles.exposure_or_mediator);
    for (int q = 1; q < p; ++q)
      b = b.cwiseProduct(ctx.ds->column(ctx.roles.exposure_or_mediator));

    MediatorFitOne one;
    one.z_power = p;
    switch (method) {
      case MediatorMethod::naive_ols: {
        Eigen::MatrixXd S1 = Eigen::MatrixXd::Zero(n, d1 + d2);
        Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(n, d1 + d2);
        S1.leftCols(d1) = ctx.w1;
        S2.rightCols(d2) = ctx.w2;
        one.gmm = detail::corrected_linear_mediator(S1, S2, ctx.w1, ctx.w2, a, b,
                                                    0.0, labels);
        break;
      }
      case MediatorMethod::constructed_iv: {
        Eigen::MatrixXd S1 = Eigen::MatrixXd::Zero(n, d1 + d2);
        const Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(n, d1 + d2);
        S1.leftCols(d1) = ctx.w1;
        S1.rightCols(d2) =
            ctx.w2.array().colwise() * nuisance->predictions.col(0).array();
        try {
          one.gmm = detail::corrected_linear_mediator(S1, S2, ctx.w1, ctx.w2, a, b,
                                                      0.0, labels);
        } catch (const rank_error& e) {
          throw rank_error(std::string(e.what()) +
                               "; E(A*|C) may be (numerically) linear in the "
                               "covariate basis -- run first_stage_f_test",
                           e.condition_number());
        }
        break;
      }
      case MediatorMethod::gmm_sigma_corrected: {
        if (mode == MediatorInstrumentMode::simplified) {
          const MediatorInstrument ins =
              build_mediator_instrument(ctx, mode, s2, p, nullptr, options);
          one.gmm = detail::corrected_linear_mediator(ins.S1bar, ins.S2bar, ctx.w1,
                                                      ctx.w2, a, b, s2, labels);
        } else {
          // The efficient instrument depends on beta; solve the fixed point
          // beta = solve(Sbar(beta)). Plain iteration from the naive fit
          // usually converges in a handful of steps; when the map is not
          // contractive, fall back to damped Newton on the fixed-point
          // residual.
          Eigen::MatrixXd S1 = Eigen::MatrixXd::Zero(n, d1 + d2);
          Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(n, d1 + d2);
          S1.leftCols(d1) = ctx.w1;
          S2.rightCols(d2) = ctx.w2;
          Eigen::VectorXd beta =
              detail::corrected_linear_mediator(S1, S2, ctx.w1, ctx.w2, a, b, 0.0,
                                                labels)
                  .theta;
          auto solve_given = [&](const Eigen::VectorXd& at) {
            const MediatorInstrument ins =
                build_mediator_instrument(ctx, mode, s2, p, &at, options);
            return detail::corrected_linear_mediator(ins.S1bar, ins.S2bar, ctx.w1,
                                                     ctx.w2, a, b, s2, labels);
          };
          double change = std::numeric_limits<double>::infinity();
          int it = 0;
          GmmFit current;
          for (; it < options.plugin_max_iter; ++it) {
            current = solve_given(beta);
            change = (current.theta - beta).cwiseAbs().maxCoeff();
            beta = current.theta;
            if (change < options.plugin_tol) break;
          }
          if (!(change < options.plugin_tol)) {
            // Damped Newton on Phi(beta) = solve(Sbar(beta)) - beta.
            const Eigen::Index dd = d1 + d2;
            auto phi = [&](const Eigen::VectorXd& at) {
              return Eigen::VectorXd(solve_given(at).theta - at);
            };
            Eigen::VectorXd f = phi(beta);
            double norm = f.cwiseAbs().maxCoeff();
            for (int nit = 0; nit < options.plugin_max_iter && norm > options.plugin_tol;
                 ++nit, ++it) {
              Eigen::MatrixXd J(dd, dd);
              for (Eigen::Index j = 0; j < dd; ++j) {
                const double h = 1e-6 * std::max(1.0, std::abs(beta[j]));
                Eigen::VectorXd bp = beta, bm = beta;
                bp[j] += h;
                bm[j] -= h;
                J.col(j) = (phi(bp) - phi(bm)) / (2.0 * h);
              }
              const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-f);
              double scale = 1.0;
              bool improved = false;
              for (int half = 0; half < 12; ++half) {
                const Eigen::VectorXd cand = beta + scale * step;
                const Eigen::VectorXd fc = phi(cand);
                if (fc.cwiseAbs().maxCoeff() < norm) {
                  beta = cand;
                  f = fc;
                  norm = f.cwiseAbs().maxCoeff();
                  improved = true;
                  break;
                }
                scale *= 0.5;
              }
              if (!improved) break;
            }
            change = norm;
            if (!(change < options.plugin_tol)) {
              std::vector<double> last(beta.data(), beta.data() + beta.size());
              throw convergence_error(
                  "plugin_optimal mediator instrument: no fixed point found "
                  "(residual " +
                      std::to_string(change) +
                      "); the conditional-moment regressions are unstable on "
                      "this sample -- the simplified instrument mode is the "
                      "robust alternative",
                  std::move(last));
            }
            current = solve_given(beta);
          }
          one.gmm = current;
          one.last_step_change = change;
          one.iterations = it + 1;
        }
        break;
      }
    }
    fit.per_b.push_back(std::move(one));
  }
  return fit;
}

// sigma2 from the mediator residual identity, using the z_power=1 model:
// T = h2, sigma2_hat = -mean(T A* Delta*) / mean(T h2).
inline MeVarianceEstimate me_variance_from_mediator(const MediationContext& ctx,
                                                    const MediatorFit& fit) {
  const auto& one = fit.for_power(1);
  const Eigen::VectorXd h1 = ctx.w1 * one.gmm.theta.head(ctx.w1.cols());
  const Eigen::VectorXd h2 = ctx.w2 * one.gmm.theta.tail(ctx.w2.cols());
  return me_variance_from_parts(h2, ctx.ds->column(ctx.roles.error_prone[0]),
                                ctx.ds->column(ctx.roles.exposure_or_mediator), h1,
                                h2, "h2", "mediator");
}

// -- outcome fitting within the mediation model ----------------------------

struct MediationOutcomeFit {
  GmmFit gmm;
  std::string method;
};

inline MediationOutcomeFit fit_mediation_outcome_iv(const MediationContext& ctx,
                                                    const NuisanceFit& nuisance) {
  const InstrumentMatrix S = build_layout_instrument(
      *ctx.ds, ctx.roles, ctx.outcome_layout, nuisance);
  const Eigen::MatrixXd X = evaluate_layout(*ctx.ds, ctx.outcome_layout, false);
  MediationOutcomeFit out;
  try {
    out.gmm = solve_linear_moments(S.S, X, ctx.ds->column(ctx.roles.outcome),
                                   ctx.outcome_layout.labels());
  } catch (const rank_error& e) {
    throw rank_error(std::string(e.what()) +
                         "; run first_stage_f_test to check instrument strength",
                     e.condition_number());
  }
  out.method = "constructed_iv";
  return out;
}

inline MediationOutcomeFit fit_mediation_outcome_naive(const MediationContext& ctx) {
  const Eigen::MatrixXd X = evaluate_layout(*ctx.ds, ctx.outcome_layout, false);
  MediationOutcomeFit out;
  out.gmm = solve_linear_moments(X, X, ctx.ds->column(ctx.roles.outcome),
                                 ctx.outcome_layout.labels());
  out.method = "naive_ols";
  return out;
}

// Known-sigma2 method-of-moments correction of the outcome normal equations:
// ((1/n) sum x_i x_i' - sigma2 P) theta = (1/n) sum x_i y_i, where P carries
// mean(w_j w_k) at every pair of exposure-carrying columns (w = the column's
// multiplier of A*). The classical EIV correction is the special case of one
// plain A* column.
inline MediationOutcomeFit fit_mediation_outcome_known_sigma2(
    const MediationContext& ctx, double sigma2) {
  if (sigma2 < 0.0)
    throw precondition_error(
        "known-sigma2 outcome correction: negative sigma2 refused; clamp "
        "explicitly if you want to proceed");
  const Eigen::MatrixXd X = evaluate_layout(*ctx.ds, ctx.outcome_layout, false);
  const Eigen::VectorXd y = ctx.ds->column(ctx.roles.outcome);
  const Eigen::Index n = X.rows(), d = X.cols();
  const auto& acols = ctx.exposure_columns;
  const Eigen::MatrixXd& W = ctx.exposure_multipliers;

  Eigen::MatrixXd H = X.transpose() * X / static_cast<double>(n);
  const Eigen::MatrixXd WtW = W.transpose() * W / static_cast<double>(n);
  for (std::size_t j = 0; j < acols.size(); ++j)
    for (std::size_t k = 0; k < acols.size(); ++k)
      H(acols[j], acols[k]) -= sigma2 * WtW(static_cast<Eigen::Index>(j),
                                            static_cast<Eigen::Index>(k));
  const double cond = condition_number(H);
  if (!(cond < kConditionThreshold))
    throw rank_error(
        "known-sigma2 outcome correction left a singular moment matrix "
        "(condition number " +
            std::to_string(cond) + "); sigma2 may be too large",
        cond);

  MediationOutcomeFit out;
  out.method = "gmm_known_sigma2";
  out.gmm.n = n;
  out.gmm.labels = ctx.outcome_layout.labels();
  out.gmm.theta = H.colPivHouseholderQr().solve(X.transpose() * y / static_cast<double>(n));
  out.gmm.bread_G = H;

  // U_i = x_i (y_i - x_i' theta) + sigma2 * W_i theta restricted to A-columns.
  const Eigen::VectorXd r = y - X * out.gmm.theta;
  Eigen::VectorXd acoef(static_cast<Eigen::Index>(acols.size()));
  for (std::size_t j = 0; j < acols.size(); ++j)
    acoef[static_cast<Eigen::Index>(j)] = out.gmm.theta[acols[j]];
  const Eigen::VectorXd wtheta = W * acoef;
  Eigen::MatrixXd U = (X.array().colwise() * r.array()).matrix();
  for (std::size_t j = 0; j < acols.size(); ++j)
    U.col(acols[j]).noalias() += sigma2 * W.col(static_cast<Eigen::Index>(j)).cwiseProduct(wtheta);
  out.gmm.meat_Omega = U.transpose() * U / static_cast<double>(n);
  out.gmm.cov = sandwich_covariance(out.gmm.bread_G, out.gmm.meat_Omega);
  out.gmm.max_abs_moment = U.colwise().mean().cwiseAbs().maxCoeff();
  (void)d;
  return out;
}

// sigma2 from a fitted mediation outcome model: g2(Z,C) is the total
// multiplier of A*, g1 the rest.
inline MeVarianceEstimate me_variance_from_mediation_outcome(
    const MediationContext& ctx, const MediationOutcomeFit& fit) {
  const Eigen::MatrixXd X = evaluate_layout(*ctx.ds, ctx.outcome_layout, false);
  const Eigen::VectorXd a = ctx.ds->column(ctx.roles.error_prone[0]);
  Eigen::VectorXd acoef(static_cast<Eigen::Index>(ctx.exposure_columns.size()));
  for (std::size_t j = 0; j < ctx.exposure_columns.size(); ++j)
    acoef[static_cast<Eigen::Index>(j)] = fit.gmm.theta[ctx.exposure_columns[j]];
  const Eigen::VectorXd g2 = ctx.exposure_multipliers * acoef;
  Eigen::VectorXd g1 = Eigen::VectorXd::Zero(ctx.ds->n_rows());
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    if (std::find(ctx.exposure_columns.begin(), ctx.exposure_columns.end(),
                  static_cast<int>(c)) != ctx.exposure_columns.end())
      continue;
    g1 += X.col(c) * fit.gmm.theta[c];
  }
  return me_variance_from_parts(g2, a, ctx.ds->column(ctx.roles.outcome), g1, g2,
                                "g2", "outcome");
}

// -- effect composition -----------------------------------------------------

struct EffectRow {
  std::optional<double> moderator_level;
  double nde = 0.0, nie = 0.0, te = 0.0;
  std::optional<std::pair<double, double>> nde_ci, nie_ci, te_ci;
};

struct EffectReport {
  std::vector<EffectRow> rows;
  std::string method;
  double a_prime = 1.0, a_dprime = 0.0;
  int bootstrap_B = 0;
  int bootstrap_dropped = 0;
  double level = 0.95;
  std::optional<double> sigma2_used;
  std::vector<std::string> warnings;
};

inline std::vector<std::optional<double>> moderator_levels(const Dataset& ds,
                                                           const RoleMap& roles) {
  if (!roles.moderator) return {std::nullopt};
  const Eigen::VectorXd& m = ds.column(*roles.moderator);
  std::vector<double> levels(m.data(), m.data() + m.size());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  if (levels.size() > 10)
    throw composition_error("moderator has more than 10 distinct levels; expected a "
                            "binary/categorical coding");
  std::vector<std::optional<double>> out;
  for (double l : levels) out.emplace_back(l);
  return out;
}

// Plug-in NDE/NIE/TE per moderator level, averaging the covariate functions
// over the empirical distribution (with the moderator column pinned to the
// level). For product-form linear models this reduces to the familiar
// coefficient formulas, and TE = NDE + NIE holds exactly by construction.
inline EffectReport estimate_effects(
    const MediationContext& ctx, const GmmFit& outcome,
    const MediatorFit& mediator, double a_prime, double a_dprime,
    const std::vector<std::optional<double>>& levels) {
  if (outcome.theta.size() < static_cast<Eigen::Index>(ctx.outcome_layout.terms.size()))
    throw composition_error("outcome fit does not match the mediation model layout");
  for (int p : ctx.z_powers) mediator.for_power(p);  // composition check
  for (const auto& l : levels)
    if (l && !ctx.roles.moderator)
      throw composition_error("moderator level requested but no moderator role set");

  EffectReport report;
  report.a_prime = a_prime;
  report.a_dprime = a_dprime;
  const double da = a_prime - a_dprime;

  for (const auto& level : levels) {
    Dataset pinned = level ? ctx.ds->with_column(*ctx.roles.moderator,
                                                 Eigen::VectorXd::Constant(
                                                     ctx.ds->n_rows(), *level))
                           : *ctx.ds;
    EffectRow row;
    row.moderator_level = level;

    double nde_sum = 0.0, nie_sum = 0.0;
    for (std::size_t g = 0; g < ctx.spec.outcome_groups.size(); ++g) {
      const auto& group = ctx.spec.outcome_groups[g];
      const auto [first, count] = ctx.group_spans[g];
      const Eigen::MatrixXd Gmat = evaluate_layout(pinned, group.g_terms, false);
      const Eigen::VectorXd gvals =
          Gmat * outcome.theta.segment(first, count);

      if (group.times_exposure) {
        // NDE: (a'-a'') * mean[ g(C) * E{b(Z) | a'', C} ].
        Eigen::VectorXd eb = Eigen::VectorXd::Ones(ctx.ds->n_rows());
        if (group.z_power >= 1) {
          const auto& mfit = mediator.for_power(group.z_power);
          const Eigen::MatrixXd w1p = evaluate_layout(pinned, ctx.spec.h1_terms, false);
          const Eigen::MatrixXd w2p = evaluate_layout(pinned, ctx.spec.h2_terms, false);
          eb = w1p * mfit.gmm.theta.head(ctx.w1.cols()) +
               a_dprime * (w2p * mfit.gmm.theta.tail(ctx.w2.cols()));
        }
        nde_sum += gvals.cwiseProduct(eb).mean();
      }
      if (group.z_power >= 1) {
        // NIE: (a'-a'') * mean[ a'^{I(times_A)} g(C) h2(C) ].
        const auto& mfit = mediator.for_power(group.z_power);
        const Eigen::MatrixXd w2p = evaluate_layout(pinned, ctx.spec.h2_terms, false);
        const Eigen::VectorXd h2 = w2p * mfit.gmm.theta.tail(ctx.w2.cols());
        const double afac = group.times_exposure ? a_prime : 1.0;
        nie_sum += afac * gvals.cwiseProduct(h2).mean();
      }
    }
    row.nde = da * nde_sum;
    row.nie = da * nie_sum;
    row.te = row.nde + row.nie;
    report.rows.push_back(row);
  }
  return report;
}

// Joint (theta, beta, psi_NIE) inference: stacks the outcome and mediator
// instrument moments with one extra row per the NIE identification formula,
//   sum_i sum_k a'^{I(k>k*)} g_k(C_i; theta) h_{k,2}(C_i; beta) (a'-a'') - n psi = 0,
// so the sandwich covariance of psi_NIE covers both model fits.
struct StackedNieFit {
  GmmFit joint;
  double psi_nie = 0.0;
  double psi_se = 0.0;
};

inline StackedNieFit stacked_nie_inference(const MediationContext& ctx,
                                           const Eigen::MatrixXd& outcome_S,
                                           const Eigen::MatrixXd& mediator_S,
                                           double a_prime, double a_dprime) {
  if (ctx.z_powers != std::vector<int>{1})
    throw composition_error(
        "stacked NIE row currently supports the single b(Z) = Z mediator model");
  const Eigen::Index n = ctx.ds->n_rows();
  const Eigen::MatrixXd X = evaluate_layout(*ctx.ds, ctx.outcome_layout, false);
  const Eigen::Index d_out = X.cols();
  const Eigen::Index d1 = ctx.w1.cols(), d2 = ctx.w2.cols();
  const Eigen::Index d_med = d1 + d2;
  if (outcome_S.cols() != d_out || mediator_S.cols() != d_med)
    throw composition_error("stacked_nie_inference: instrument shape mismatch");

  const Eigen::VectorXd y = ctx.ds->column(ctx.roles.outcome);
  const Eigen::VectorXd a = ctx.ds->column(ctx.roles.error_prone[0]);
  const Eigen::VectorXd b = ctx.ds->column(ctx.roles.exposure_or_mediator);
  Eigen::MatrixXd xbar(n, d_med);
  xbar.leftCols(d1) = ctx.w1;
  xbar.rightCols(d2) = ctx.w2.array().colwise() * a.array();

  // Per-group helpers for the NIE row: a'^{I(times_A)} * g_k(C)' theta_k * h2.
  struct NieGroup {
    Eigen::MatrixXd g;  // n x count
    int first = 0;
    double afac = 1.0;
  };
  std::vector<NieGroup> nie_groups;
  for (std::size_t gi = 0; gi < ctx.spec.outcome_groups.size(); ++gi) {
    const auto& group = ctx.spec.outcome_groups[gi];
    if (group.z_power != 1) continue;
    NieGroup ng;
    ng.g = evaluate_layout(*ctx.ds, group.g_terms, false);
    ng.first = ctx.group_spans[gi].first;
    ng.afac = group.times_exposure ? a_prime : 1.0;
    nie_groups.push_back(std::move(ng));
  }
  if (nie_groups.empty())
    throw composition_error("outcome model has no mediator term; NIE is zero");
  const double da = a_prime - a_dprime;

  const int total = static_cast<int>(d_out + d_med) + 1;
  std::vector<MomentBlock> blocks(3);
  blocks[0].system = detail::linear_iv_system(outcome_S, X, y);
  for (int j = 0; j < d_out; ++j) blocks[0].param_map.push_back(j);
  blocks[1].system = detail::linear_iv_system(
      mediator_S, xbar, b);
  for (int j = 0; j < d_med; ++j)
    blocks[1].param_map.push_back(static_cast<int>(d_out) + j);

  auto w2_ptr = std::make_shared<Eigen::MatrixXd>(ctx.w2);
  auto groups_ptr = std::make_shared<std::vector<NieGroup>>(std::move(nie_groups));
  MomentSystem nie_row;
  nie_row.n_rows = n;
  nie_row.dim_params = total;
  nie_row.dim_moments = 1;
  nie_row.evaluator = [w2_ptr, groups_ptr, d_out, d1, d2, d_med, da,
                       total](Eigen::Index i, const Eigen::VectorXd& local) {
    const double h2 =
        w2_ptr->row(i).dot(local.segment(d_out + d1, d2));
    double acc = 0.0;
    for (const auto& ng : *groups_ptr)
      acc += ng.afac * ng.g.row(i).dot(local.segment(ng.first, ng.g.cols()));
    Eigen::VectorXd u(1);
    u[0] = acc * h2 * da - local[total - 1];
    (void)d_med;
    return u;
  };
  blocks[2].system = nie_row;
  for (int j = 0; j < total; ++j) blocks[2].param_map.push_back(j);

  std::set<int> shared;
  for (int j = 0; j < total - 1; ++j) shared.insert(j);
  const MomentSystem stacked = stack_moments(std::move(blocks), total, shared);

  // Initialize from the separate fits; the system is triangular in
  // (theta, beta) -> psi so Newton lands immediately.
  const GmmFit fit_out = solve_linear_moments(outcome_S, X, y);
  const GmmFit fit_med = solve_linear_moments(mediator_S, xbar, b);
  Eigen::VectorXd init(total);
  init.head(d_out) = fit_out.theta;
  init.segment(d_out, d_med) = fit_med.theta;
  init[total - 1] = 0.0;
  {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
    const Eigen::VectorXd h2 = ctx.w2 * fit_med.theta.tail(d2);
    for (const auto& ng : *groups_ptr)
      acc += ng.afac * (ng.g * fit_out.theta.segment(ng.first, ng.g.cols()));
    init[total - 1] = da * acc.cwiseProduct(h2).mean();
  }
  std::vector<std::string> labels = ctx.outcome_layout.labels();
  for (const auto& l : ctx.spec.h1_terms.labels()) labels.push_back("h1:" + l);
  for (const auto& l : ctx.spec.h2_terms.labels()) labels.push_back("h2:" + l);
  labels.push_back("psi_NIE");

  StackedNieFit out;
  out.joint = solve_newton_moments(stacked, init, kNewtonTol, kNewtonMaxIter, labels);
  out.psi_nie = out.joint.theta[total - 1];
  out.psi_se = out.joint.se(total - 1);
  return out;
}

// -- pipelines and the bootstrap --------------------------------------------

struct PipelineConfig {
  double a_prime = 1.0;
  double a_dprime = 0.0;
  NuisanceConfig nuisance;  // shared settings for the E(A*|.) fits
  double mom_sens_rr = 0.8;
  int bootstrap_B = 500;
  std::uint64_t seed = 0;
  double level = 0.95;
  bool with_ci = true;
  bool clamp_negative_sigma2 = false;
  int threads = 1;
};

namespace detail {

inline NuisanceFit outcome_nuisance(const Dataset& ds, const MediationContext& ctx,
                                    const NuisanceConfig& base) {
  NuisanceConfig cfg = base;
  cfg.include_exposure = true;
  return fit_nuisance_conditional_mean(ds, ctx.nuisance_roles, cfg);
}

inline NuisanceFit mediator_nuisance(const Dataset& ds, const MediationContext& ctx,
                                     const NuisanceConfig& base) {
  NuisanceConfig cfg = base;
  cfg.include_exposure = false;
  return fit_nuisance_conditional_mean(ds, ctx.nuisance_roles, cfg);
}

inline double clamp_sigma2(const MeVarianceEstimate& me, bool clamp,
                           std::vector<std::string>* warnings) {
  if (me.sigma2 >= 0.0) return me.sigma2;
  if (!clamp)
    throw precondition_error(
        "estimated sigma2 is negative (" + std::to_string(me.sigma2) +
        "); refusing the GMM correction without an explicit clamp override");
  if (warnings)
    warnings->push_back("negative sigma2 estimate clamped to 0 for the correction");
  return 0.0;
}

}  // namespace detail

// Point estimates for one pipeline on one dataset.
inline EffectReport run_pipeline_point(const Dataset& ds, const RoleMap& roles,
                                       const MediationModelSpec& spec,
                                       Pipeline pipeline,
                                       const PipelineConfig& config) {
  const MediationContext ctx = make_mediation_context(ds, roles, spec);
  const auto levels = moderator_levels(ds, roles);
  EffectReport report;

  switch (pipeline) {
    case Pipeline::NAIVE: {
      const auto outcome = fit_mediation_outcome_naive(ctx);
      const auto mediator = fit_mediator(ctx, MediatorMethod::naive_ols);
      report = estimate_effects(ctx, outcome.gmm, mediator, config.a_prime,
                                config.a_dprime, levels);
      break;
    }
    case Pipeline::IVZ_IVY: {
      const auto nu_y = detail::outcome_nuisance(ds, ctx, config.nuisance);
      const auto nu_z = detail::mediator_nuisance(ds, ctx, config.nuisance);
      const auto outcome = fit_mediation_outcome_iv(ctx, nu_y);
      const auto mediator =
          fit_mediator(ctx, MediatorMethod::constructed_iv, std::nullopt, &nu_z);
      report = estimate_effects(ctx, outcome.gmm, mediator, config.a_prime,
                                config.a_dprime, levels);
      break;
    }
    case Pipeline::GMMZ_IVY: {
      const auto nu_y = detail::outcome_nuisance(ds, ctx, config.nuisance);
      const auto outcome = fit_mediation_outcome_iv(ctx, nu_y);
      const auto me = me_variance_from_mediation_outcome(ctx, outcome);
      const double s2 =
          detail::clamp_sigma2(me, config.clamp_negative_sigma2, &report.warnings);
      const auto mediator =
          fit_mediator(ctx, MediatorMethod::gmm_sigma_corrected, s2);
      auto rep = estimate_effects(ctx, outcome.gmm, mediator, config.a_prime,
                                  config.a_dprime, levels);
      rep.warnings = report.warnings;
      report = rep;
      report.sigma2_used = s2;
      break;
    }
    case Pipeline::IVZ_GMMY: {
      const auto nu_z = detail::mediator_nuisance(ds, ctx, config.nuisance);
      const auto mediator =
          fit_mediator(ctx, MediatorMethod::constructed_iv, std::nullopt, &nu_z);
      const auto me = me_variance_from_mediator(ctx, mediator);
      const double s2 =
          detail::clamp_sigma2(me, config.clamp_negative_sigma2, &report.warnings);
      const auto outcome = fit_mediation_outcome_known_sigma2(ctx, s2);
      auto rep = estimate_effects(ctx, outcome.gmm, mediator, config.a_prime,
                                  config.a_dprime, levels);
      rep.warnings = report.warnings;
      report = rep;
      report.sigma2_used = s2;
      break;
    }
    case Pipeline::MOM_SENS: {
      const double var_a = var_mom(ds.column(roles.error_prone[0]));
      const double s2 = (1.0 - config.mom_sens_rr) * var_a;
      const auto outcome = fit_mediation_outcome_known_sigma2(ctx, s2);
      const auto mediator =
          fit_mediator(ctx, MediatorMethod::gmm_sigma_corrected, s2);
      report = estimate_effects(ctx, outcome.gmm, mediator, config.a_prime,
                                config.a_dprime, levels);
      report.sigma2_used = s2;
      break;
    }
  }
  report.method = to_string(pipeline);
  if (pipeline == Pipeline::MOM_SENS)
    report.method += "(rr=" + std::to_string(config.mom_sens_rr) + ")";
  report.level = config.level;
  return report;
}

using PipelineFn = std::function<EffectReport(const Dataset&)>;

// One successful bootstrap draw: (NDE, NIE, TE) per moderator row.
struct BootstrapDraw {
  int replicate = 0;
  std::vector<std::array<double, 3>> values;
};

// Nonparametric row-resampling bootstrap with percentile intervals. Failed
// resamples (numeric errors in any stage) are dropped and counted; more than
// 5% dropped aborts with an instability error. When draws_out is given, the
// successful draws are exported in replicate order.
inline EffectReport bootstrap_ci(const PipelineFn& pipeline, const Dataset& ds,
                                 int B, std::uint64_t seed, double level = 0.95,
                                 int threads = 1,
                                 std::vector<BootstrapDraw>* draws_out = nullptr) {
  if (B < 100) throw precondition_error("bootstrap_ci: B >= 100 required");
  if (!(level > 0.0 && level < 1.0))
    throw precondition_error("bootstrap_ci: level must be in (0,1)");
  EffectReport point = pipeline(ds);
  const std::size_t nrows = point.rows.size();
  const Eigen::Index n = ds.n_rows();

  struct Draw {
    bool ok = false;
    std::vector<std::array<double, 3>> values;  // nde, nie, te per row
  };
  std::vector<Draw> draws(static_cast<std::size_t>(B));

  parallel_for(B, threads, [&](std::int64_t r) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(r));
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (auto& v : idx) v = pick(rng);
    try {
      const EffectReport rep = pipeline(ds.select_rows(idx));
      if (rep.rows.size() != nrows) return;  // treated as a failed draw
      Draw d;
      d.ok = true;
      for (const auto& row : rep.rows)
        d.values.push_back({row.nde, row.nie, row.te});
      draws[static_cast<std::size_t>(r)] = std::move(d);
    } catch (const numeric_error&) {
      // dropped and counted below
    }
  });

  int dropped = 0;
  for (const auto& d : draws)
    if (!d.ok) ++dropped;
  if (dropped > B / 20)
    throw instability_error(
        "bootstrap_ci: " + std::to_string(dropped) + " of " + std::to_string(B) +
        " resamples failed (rank/convergence); the constructed instrument is "
        "likely weak -- run first_stage_f_test");

  const double alpha = 1.0 - level;
  for (std::size_t rowi = 0; rowi < nrows; ++rowi) {
    std::array<std::vector<double>, 3> comp;
    for (const auto& d : draws) {
      if (!d.ok) continue;
      for (int c = 0; c < 3; ++c) comp[static_cast<std::size_t>(c)].push_back(d.values[rowi][static_cast<std::size_t>(c)]);
    }
    // Percentile interval, widened (rarely) so the point estimate is never
    // outside its own interval.
    auto ci = [&](std::vector<double>& v, double at) {
      return std::make_pair(std::min(quantile_type7(v, alpha / 2.0), at),
                            std::max(quantile_type7(v, 1.0 - alpha / 2.0), at));
    };
    point.rows[rowi].nde_ci = ci(comp[0], point.rows[rowi].nde);
    point.rows[rowi].nie_ci = ci(comp[1], point.rows[rowi].nie);
    point.rows[rowi].te_ci = ci(comp[2], point.rows[rowi].te);
  }
  point.bootstrap_B = B;
  point.bootstrap_dropped = dropped;
  point.level = level;
  if (draws_out) {
    draws_out->clear();
    for (int r = 0; r < B; ++r) {
      const auto& d = draws[static_cast<std::size_t>(r)];
      if (d.ok) draws_out->push_back({r, d.values});
    }
  }
  return point;
}

// Full pipeline: point estimates plus bootstrap percentile CIs over the
// entire pipeline (nuisance refit inside every resample).
inline EffectReport run_pipeline(const Dataset& ds, const RoleMap& roles,
                                 const MediationModelSpec& spec, Pipeline pipeline,
                                 const PipelineConfig& config,
                                 std::vector<BootstrapDraw>* draws_out = nullptr) {
  auto fn = [&roles, &spec, pipeline, &config](const Dataset& d) {
    return run_pipeline_point(d, roles, spec, pipeline, config);
  };
  const std::string stage = std::string("pipeline ") + to_string(pipeline) + ": ";
  try {
    if (!config.with_ci) return fn(ds);
    return bootstrap_ci(fn, ds, config.bootstrap_B, config.seed, config.level,
                        config.threads, draws_out);
  } catch (const rank_error& e) {
    throw rank_error(stage + e.what(), e.condition_number());
  } catch (const convergence_error& e) {
    throw convergence_error(stage + e.what(), e.last_iterate());
  } catch (const instability_error& e) {
    throw instability_error(stage + e.what());
  } catch (const identification_error& e) {
    throw identification_error(stage + e.what());
  }
}

}  // namespace civkit
