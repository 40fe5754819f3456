// civkit command-line front end: outcome/mediation fitting, measurement-error
// variance estimation, the first-stage F-test, and the Monte Carlo harness.
// Exit codes: 0 success, 1 user/data error, 2 numerical failure.

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "civkit/civkit.hpp"

namespace {

using civkit::json;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece =
        s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CommonArgs {
  std::string data_path;
  std::string outcome;
  std::string error_prone;
  std::string covariates;
  std::string exposure;
  std::string moderator;
  std::string delimiter = ",";
  std::string na_policy = "strict";
  std::string out_path;
  std::string config_path;
  std::string format = "json";
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool needs_data = true) {
  auto* data = cmd->add_option("--data", a.data_path, "input CSV file (header row required)");
  if (needs_data) data->required();
  cmd->add_option("--config", a.config_path,
                  "JSON config file; explicit flags override its values");
  cmd->add_option("--outcome", a.outcome, "outcome column (Y)");
  cmd->add_option("--error-prone", a.error_prone,
                  "comma-separated error-prone column(s) (C1* / A*)");
  cmd->add_option("--covariates", a.covariates,
                  "comma-separated clean covariate columns (C2 / C)");
  cmd->add_option("--exposure", a.exposure,
                  "exposure column for outcome models; the mediator for "
                  "fit-mediation (Z)");
  cmd->add_option("--moderator", a.moderator, "optional moderator column (e.g. site)");
  cmd->add_option("--delimiter", a.delimiter, "CSV delimiter (default ',')");
  cmd->add_option("--na-policy", a.na_policy, "strict | drop (default strict)");
  cmd->add_option("--out", a.out_path, "write the JSON report here (default stdout)");
  cmd->add_option("--format", a.format, "json | markdown (default json)");
  cmd->add_option("--threads", a.threads, "worker cap for parallel stages");
}

civkit::RoleMap roles_from(const CommonArgs& a) {
  civkit::RoleMap roles;
  roles.outcome = a.outcome;
  roles.error_prone = split_list(a.error_prone);
  roles.clean_covariates = split_list(a.covariates);
  roles.exposure_or_mediator = a.exposure;
  if (!a.moderator.empty()) roles.moderator = a.moderator;
  return roles;
}

civkit::CsvOptions csv_options(const CommonArgs& a) {
  civkit::CsvOptions opt;
  if (a.delimiter.size() != 1) throw civkit::parse_error("--delimiter must be one character");
  opt.delimiter = a.delimiter[0];
  if (a.na_policy == "strict") opt.na_policy = civkit::NaPolicy::strict;
  else if (a.na_policy == "drop") opt.na_policy = civkit::NaPolicy::drop;
  else throw civkit::parse_error("--na-policy must be strict or drop");
  return opt;
}

json config_block(const CommonArgs& a, json extra) {
  json cfg{{"data", a.data_path},       {"outcome", a.outcome},
           {"error_prone", a.error_prone}, {"covariates", a.covariates},
           {"exposure", a.exposure},    {"moderator", a.moderator},
           {"delimiter", a.delimiter},  {"na_policy", a.na_policy},
           {"threads", a.threads}};
  for (auto it = extra.begin(); it != extra.end(); ++it) cfg[it.key()] = it.value();
  return cfg;
}

void emit(const json& report, const std::string& out_path) {
  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw civkit::parse_error("cannot open output file: " + out_path);
    out << text;
  }
}

void emit_text(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw civkit::parse_error("cannot open output file: " + out_path);
    out << text;
  }
}

civkit::InstrumentBuilder builder_from(const std::string& s) {
  if (s == "simple") return civkit::InstrumentBuilder::simple;
  if (s == "efficient_star") return civkit::InstrumentBuilder::efficient_star;
  if (s == "c1_dependent") return civkit::InstrumentBuilder::c1_dependent;
  if (s == "raw_design") return civkit::InstrumentBuilder::raw_design;
  throw civkit::parse_error("unknown builder: " + s);
}

civkit::Pipeline pipeline_from(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (auto& c : s)
    if (c == '-') c = '_';
  if (s == "NAIVE") return civkit::Pipeline::NAIVE;
  if (s == "IVZ_IVY") return civkit::Pipeline::IVZ_IVY;
  if (s == "GMMZ_IVY") return civkit::Pipeline::GMMZ_IVY;
  if (s == "IVZ_GMMY") return civkit::Pipeline::IVZ_GMMY;
  if (s.rfind("MOM_SENS", 0) == 0) return civkit::Pipeline::MOM_SENS;
  throw civkit::parse_error("unknown pipeline: " + s);
}

// Applies --config file values as defaults for any flag not given on the
// command line (checked against argv, since this runs before parsing).
// Explicit flags always win.
void apply_config_defaults(CLI::App& app, const std::string& path, int argc,
                           char** argv) {
  std::ifstream in(path);
  if (!in) throw civkit::parse_error("cannot open config file: " + path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const std::exception& e) {
    throw civkit::parse_error(std::string("bad config JSON: ") + e.what());
  }
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    const std::string flag = "--" + it.key();
    bool on_command_line = false;
    for (int i = 1; i < argc; ++i)
      if (flag == argv[i]) on_command_line = true;
    if (on_command_line) continue;
    auto* opt = app.get_option_no_throw(flag);
    if (!opt) continue;
    const std::string value =
        it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
    opt->add_result(value);
    opt->run_callback();
  }
}

struct NuisanceArgs {
  std::string kind = "parametric";
  int basis_degree = 3;
  int folds = 5;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_nuisance(CLI::App* cmd, NuisanceArgs& n) {
  cmd->add_option("--nuisance", n.kind, "parametric | crossfit (default parametric)");
  cmd->add_option("--basis-degree", n.basis_degree, "polynomial basis degree (default 3)");
  cmd->add_option("--folds", n.folds, "crossfit folds K (default 5)");
  cmd->add_option("--seed", n.seed, "RNG seed (required for stochastic stages)")
      ->each([&n](const std::string&) { n.seed_given = true; });
}

civkit::NuisanceConfig nuisance_config(const NuisanceArgs& n) {
  civkit::NuisanceConfig cfg;
  if (n.kind == "parametric") cfg.kind = civkit::NuisanceKind::parametric_basis;
  else if (n.kind == "crossfit") cfg.kind = civkit::NuisanceKind::crossfit_nonparametric;
  else throw civkit::parse_error("--nuisance must be parametric or crossfit");
  if (cfg.kind == civkit::NuisanceKind::crossfit_nonparametric && !n.seed_given)
    throw civkit::parse_error("--seed is required with --nuisance crossfit");
  cfg.basis_degree = n.basis_degree;
  cfg.folds = n.folds;
  cfg.seed = n.seed;
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"constructed-instrumental-variable estimation under measurement error"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path,
                 "JSON config file; command-line flags override its values");

  // ---- fit-outcome ----
  auto* fo = app.add_subcommand("fit-outcome",
                                "fit the outcome model with a constructed instrument");
  CommonArgs fo_args;
  NuisanceArgs fo_nu;
  std::string fo_builder = "efficient_star";
  std::string fo_simple_terms;
  std::string fo_zgrid;
  bool fo_mu = false, fo_weights = false, fo_ftest = false, fo_mevar = false;
  add_common(fo, fo_args);
  add_nuisance(fo, fo_nu);
  std::string fo_g1, fo_g2;
  fo->add_option("--builder", fo_builder,
                 "simple | efficient_star | c1_dependent | raw_design");
  fo->add_option("--simple-terms", fo_simple_terms,
                 "comma-separated s-terms for the simple builder, e.g. Z^2");
  fo->add_option("--g1-terms", fo_g1,
                 "partially linear model: g1 terms over (Z, C2), e.g. \"1,Z,Z^2\"");
  fo->add_option("--g2-terms", fo_g2,
                 "partially linear model: g2 terms multiplying C1*, e.g. \"1,Z\"");
  fo->add_option("--z-grid", fo_zgrid,
                 "dose-response grid points for the partially linear model, "
                 "e.g. \"0,0.5,1\"");
  fo->add_flag("--estimate-mu", fo_mu, "stack the dose-response intercept moment");
  fo->add_flag("--variance-weights", fo_weights,
               "weight efficient_star rows by 1/sigma2_hat(Z,C2)");
  fo->add_flag("--f-test", fo_ftest, "include the modified first-stage F-test");
  fo->add_flag("--me-variance", fo_mevar,
               "include the measurement-error variance block (scalar C1*)");

  // ---- fit-mediation ----
  auto* fm = app.add_subcommand("fit-mediation", "run a mediation pipeline");
  CommonArgs fm_args;
  NuisanceArgs fm_nu;
  std::string fm_pipeline = "IVZ_IVY";
  std::string fm_contrast = "1,0";
  double fm_rr = 0.8;
  int fm_B = 500;
  double fm_level = 0.95;
  bool fm_interaction = false, fm_noci = false, fm_clamp = false;
  std::string fm_draws_csv;
  add_common(fm, fm_args);
  add_nuisance(fm, fm_nu);
  fm->add_option("--pipeline", fm_pipeline,
                 "NAIVE | IVZ-IVY | GMMZ-IVY | IVZ-GMMY | MOM-SENS");
  fm->add_option("--rr", fm_rr, "assumed reliability for MOM-SENS (default 0.8)");
  fm->add_option("--B", fm_B, "bootstrap replicates (default 500)");
  fm->add_option("--level", fm_level, "confidence level (default 0.95)");
  fm->add_option("--contrast", fm_contrast, "a',a'' exposure contrast (default 1,0)");
  fm->add_flag("--interaction", fm_interaction, "include the exposure-mediator interaction");
  fm->add_flag("--no-ci", fm_noci, "point estimates only (skip the bootstrap)");
  fm->add_flag("--clamp-sigma2", fm_clamp,
               "clamp a negative estimated sigma2 to 0 instead of refusing");
  fm->add_option("--draws-csv", fm_draws_csv, "also write bootstrap draws as CSV");

  // ---- me-variance ----
  auto* mv = app.add_subcommand("me-variance",
                                "estimate the measurement-error variance");
  CommonArgs mv_args;
  NuisanceArgs mv_nu;
  std::string mv_builder = "efficient_star";
  std::string mv_t = "g2";
  std::string mv_source = "outcome";
  bool mv_joint = false;
  double mv_lower = std::numeric_limits<double>::quiet_NaN();
  double mv_upper = std::numeric_limits<double>::quiet_NaN();
  add_common(mv, mv_args);
  add_nuisance(mv, mv_nu);
  mv->add_option("--builder", mv_builder, "instrument builder for the outcome fit");
  mv->add_option("--t-choice", mv_t, "g2 | one (default g2)");
  mv->add_option("--source", mv_source,
                 "outcome | mediator (mediator: sigma2 from the constructed-IV "
                 "mediator residual identity)");
  mv->add_flag("--joint", mv_joint, "stack the sigma2 moment with theta for joint SEs");
  mv->add_option("--sigma2-lower", mv_lower, "optional sanity-check lower bound");
  mv->add_option("--sigma2-upper", mv_upper, "optional sanity-check upper bound");

  // ---- f-test ----
  auto* ft = app.add_subcommand("f-test", "modified first-stage F-test");
  CommonArgs ft_args;
  std::string ft_small, ft_large, ft_endog;
  double ft_threshold = civkit::kWeakInstrumentThreshold;
  add_common(ft, ft_args);
  ft->add_option("--small", ft_small, "small-model terms, e.g. \"1,Z,C\"");
  ft->add_option("--large", ft_large, "large-model terms, e.g. \"1,Z,C,Z^2,Z*C\"");
  ft->add_option("--endogenous", ft_endog, "endogenous column (default first error-prone)");
  ft->add_option("--threshold", ft_threshold, "weak-instrument threshold (default 10)");

  // ---- simulate ----
  auto* sim = app.add_subcommand("simulate", "Monte Carlo bias/variance/coverage grid");
  std::string sim_grid = "default", sim_format = "json", sim_out;
  std::string sim_scenario = "no_interaction", sim_pipelines, sim_reliabilities;
  int sim_R = 500, sim_n = 1000, sim_B = 500, sim_threads = 1;
  std::uint64_t sim_seed = 0;
  bool sim_seed_given = false;
  std::string sim_config;
  sim->add_option("--config", sim_config,
                  "JSON config file; explicit flags override its values");
  sim->add_option("--grid", sim_grid, "default | path to a JSON grid spec");
  sim->add_option("--R", sim_R, "replications (default 500)");
  sim->add_option("--seed", sim_seed, "RNG seed (required)")
      ->each([&sim_seed_given](const std::string&) { sim_seed_given = true; });
  auto* sim_n_opt =
      sim->add_option("--n", sim_n, "sample size per replicate (default 1000)");
  sim->add_option("--B", sim_B, "bootstrap replicates per fit (default 500)");
  auto* sim_scenario_opt = sim->add_option(
      "--scenario", sim_scenario,
      "no_interaction | exposure_mediator_interaction | linear_nuisance_violation");
  sim->add_option("--pipelines", sim_pipelines,
                  "comma list, e.g. NAIVE,IVZ-IVY,MOM-SENS:0.7");
  sim->add_option("--reliabilities", sim_reliabilities, "comma list, e.g. 0.7,0.8,0.9");
  sim->add_option("--format", sim_format, "json | markdown | csv (default json)");
  sim->add_option("--out", sim_out, "output path (default stdout)");
  sim->add_option("--threads", sim_threads, "worker cap for replicates");

  try {
    // First pass only to discover --config; then re-parse with defaults set.
    for (int i = 1; i + 1 < argc; ++i)
      if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
    if (!config_path.empty()) {
      // Apply config values to every subcommand; unknown keys are ignored by
      // subcommands that lack the option.
      for (auto* cmd : {fo, fm, mv, ft, sim})
        apply_config_defaults(*cmd, config_path, argc, argv);
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // usage text; --help exits 0, every parse failure is a user error (1).
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (fo->parsed()) {
    const auto roles = roles_from(fo_args);
    const auto load = civkit::load_dataset(fo_args.data_path, roles, csv_options(fo_args));
    civkit::NuisanceConfig nu = nuisance_config(fo_nu);
    const auto builder = builder_from(fo_builder);
    nu.fit_variance = builder == civkit::InstrumentBuilder::c1_dependent;
    nu.fit_outcome_variance = fo_weights;
    const bool partially_linear = !fo_g1.empty() || !fo_g2.empty();
    std::optional<civkit::NuisanceFit> nuisance;
    if (partially_linear || builder == civkit::InstrumentBuilder::efficient_star ||
        builder == civkit::InstrumentBuilder::c1_dependent)
      nuisance = civkit::fit_nuisance_conditional_mean(load.data, roles, nu);

    civkit::OutcomeFit fit;
    if (partially_linear) {
      if (fo_g1.empty() || fo_g2.empty())
        throw civkit::parse_error("--g1-terms and --g2-terms must be given together");
      civkit::PartiallyLinearModel model;
      model.g1_terms = civkit::ModelLayout::parse(fo_g1);
      for (std::size_t j = 0; j < roles.error_prone.size(); ++j)
        model.g2_terms.push_back(civkit::ModelLayout::parse(fo_g2));
      // Materialize the design layout and its efficient instrument.
      civkit::ModelLayout full = model.g1_terms;
      for (std::size_t m = 0; m < roles.error_prone.size(); ++m)
        for (const auto& t : model.g2_terms[m].terms) {
          civkit::Term with_c1 = t;
          with_c1.factors.push_back({roles.error_prone[m], 1});
          full.terms.push_back(with_c1);
        }
      const auto S =
          civkit::build_layout_instrument(load.data, roles, full, *nuisance);
      std::vector<double> zgrid;
      for (const auto& v : split_list(fo_zgrid)) zgrid.push_back(std::stod(v));
      fit = civkit::fit_outcome_partially_linear(load.data, roles, model, S, zgrid);
    } else {
      civkit::InstrumentOptions opts;
      opts.simple_terms = split_list(fo_simple_terms);
      opts.use_outcome_variance_weights = fo_weights;
      const auto S = civkit::build_instrument(
          load.data, roles, nuisance ? &*nuisance : nullptr, builder, opts);
      fit = civkit::fit_outcome_linear_iv(load.data, roles, S, fo_mu);
    }

    json report{{"tool", civkit::tool_block()},
                {"config", config_block(fo_args,
                                        json{{"builder", fo_builder},
                                             {"nuisance", fo_nu.kind},
                                             {"basis_degree", fo_nu.basis_degree},
                                             {"estimate_mu", fo_mu},
                                             {"g1_terms", fo_g1},
                                             {"g2_terms", fo_g2},
                                             {"z_grid", fo_zgrid},
                                             {"seed", fo_nu.seed}})},
                {"fit", civkit::to_json(fit)}};
    if (fo_ftest) {
      const auto layouts = civkit::default_f_test_layouts(roles, fo_nu.basis_degree);
      report["f_test"] = civkit::to_json(civkit::first_stage_f_test(
          load.data, roles, layouts.small_terms, layouts.large_terms));
    }
    if (fo_mevar)
      report["me_variance"] =
          civkit::to_json(civkit::estimate_me_variance(load.data, roles, fit));
    report["warnings"] = load.warnings;
    if (fo_args.format == "markdown")
      emit_text(civkit::render_markdown(fit.gmm), fo_args.out_path);
    else
      emit(report, fo_args.out_path);
    return 0;
  }

  if (fm->parsed()) {
    const auto roles = roles_from(fm_args);
    const auto load = civkit::load_dataset(fm_args.data_path, roles, csv_options(fm_args));
    if (!fm_noci && !fm_nu.seed_given)
      throw civkit::parse_error("--seed is required for the bootstrap (or pass --no-ci)");
    const auto contrast = split_list(fm_contrast);
    if (contrast.size() != 2) throw civkit::parse_error("--contrast needs two values");

    civkit::PipelineConfig pc;
    pc.a_prime = std::stod(contrast[0]);
    pc.a_dprime = std::stod(contrast[1]);
    pc.nuisance = nuisance_config(fm_nu);
    pc.mom_sens_rr = fm_rr;
    pc.bootstrap_B = fm_B;
    pc.seed = fm_nu.seed;
    pc.level = fm_level;
    pc.with_ci = !fm_noci;
    pc.clamp_negative_sigma2 = fm_clamp;
    pc.threads = fm_args.threads;

    const auto spec = civkit::MediationModelSpec::standard(roles, fm_interaction);
    const auto pipeline = pipeline_from(fm_pipeline);
    std::vector<civkit::BootstrapDraw> draws;
    const auto report = civkit::run_pipeline(load.data, roles, spec, pipeline, pc,
                                             fm_draws_csv.empty() ? nullptr : &draws);
    if (!fm_draws_csv.empty()) {
      std::ofstream out(fm_draws_csv, std::ios::binary);
      if (!out) throw civkit::parse_error("cannot open " + fm_draws_csv);
      out << "replicate,row,NDE,NIE,TE\n";
      char buf[128];
      for (const auto& d : draws)
        for (std::size_t row = 0; row < d.values.size(); ++row) {
          std::snprintf(buf, sizeof(buf), "%d,%zu,%.17g,%.17g,%.17g\n",
                        d.replicate, row, d.values[row][0], d.values[row][1],
                        d.values[row][2]);
          out << buf;
        }
    }

    json out{{"tool", civkit::tool_block()},
             {"config", config_block(fm_args,
                                     json{{"pipeline", fm_pipeline},
                                          {"rr", fm_rr},
                                          {"B", fm_B},
                                          {"level", fm_level},
                                          {"seed", fm_nu.seed},
                                          {"interaction", fm_interaction},
                                          {"nuisance", fm_nu.kind},
                                          {"basis_degree", fm_nu.basis_degree}})},
             {"report", civkit::to_json(report)}};
    out["warnings"] = load.warnings;
    if (fm_args.format == "markdown")
      emit_text(civkit::render_markdown(report), fm_args.out_path);
    else
      emit(out, fm_args.out_path);
    return 0;
  }

  if (mv->parsed()) {
    const auto roles = roles_from(mv_args);
    const auto load = civkit::load_dataset(mv_args.data_path, roles, csv_options(mv_args));
    const civkit::TChoice t =
        mv_t == "g2" ? civkit::TChoice::g2_default : civkit::TChoice::constant_one;
    const std::optional<double> lower =
        std::isnan(mv_lower) ? std::nullopt : std::optional<double>(mv_lower);
    const std::optional<double> upper =
        std::isnan(mv_upper) ? std::nullopt : std::optional<double>(mv_upper);

    json report{{"tool", civkit::tool_block()},
                {"config", config_block(mv_args,
                                        json{{"builder", mv_builder},
                                             {"t_choice", mv_t},
                                             {"source", mv_source},
                                             {"joint", mv_joint},
                                             {"seed", mv_nu.seed}})}};
    if (mv_source == "mediator") {
      // sigma2 from the constructed-IV mediator fit (Z regressed on A*, C).
      const auto spec = civkit::MediationModelSpec::standard(roles);
      const auto ctx = civkit::make_mediation_context(load.data, roles, spec);
      civkit::NuisanceConfig nu = nuisance_config(mv_nu);
      nu.include_exposure = false;
      const auto nuis =
          civkit::fit_nuisance_conditional_mean(load.data, ctx.nuisance_roles, nu);
      const auto med_fit = civkit::fit_mediator(
          ctx, civkit::MediatorMethod::constructed_iv, std::nullopt, &nuis);
      auto me = civkit::me_variance_from_mediator(ctx, med_fit);
      me.lower_bound = lower;
      me.upper_bound = upper;
      report["me_variance"] = civkit::to_json(me);
      report["fit"] = civkit::to_json(med_fit.per_b[0].gmm);
    } else {
      civkit::NuisanceConfig nu = nuisance_config(mv_nu);
      const auto builder = builder_from(mv_builder);
      nu.fit_variance = builder == civkit::InstrumentBuilder::c1_dependent;
      std::optional<civkit::NuisanceFit> nuisance;
      if (builder == civkit::InstrumentBuilder::efficient_star ||
          builder == civkit::InstrumentBuilder::c1_dependent)
        nuisance = civkit::fit_nuisance_conditional_mean(load.data, roles, nu);
      const auto S = civkit::build_instrument(
          load.data, roles, nuisance ? &*nuisance : nullptr, builder, {});
      if (mv_joint) {
        const auto joint = civkit::estimate_me_variance_joint(load.data, roles, S, t);
        report["me_variance"] = civkit::to_json(joint.me);
        report["joint_fit"] = civkit::to_json(joint.joint);
      } else {
        const auto fit = civkit::fit_outcome_linear_iv(load.data, roles, S, false);
        report["me_variance"] = civkit::to_json(
            civkit::estimate_me_variance(load.data, roles, fit, t, lower, upper));
        report["fit"] = civkit::to_json(fit);
      }
    }
    report["warnings"] = load.warnings;
    emit(report, mv_args.out_path);
    return 0;
  }

  if (ft->parsed()) {
    const auto roles = roles_from(ft_args);
    const auto load = civkit::load_dataset(ft_args.data_path, roles, csv_options(ft_args));
    civkit::FTestLayouts layouts;
    if (ft_small.empty() || ft_large.empty())
      layouts = civkit::default_f_test_layouts(roles);
    else
      layouts = {civkit::ModelLayout::parse(ft_small), civkit::ModelLayout::parse(ft_large)};
    const auto result = civkit::first_stage_f_test(
        load.data, roles, layouts.small_terms, layouts.large_terms, ft_endog, ft_threshold);
    json report{{"tool", civkit::tool_block()},
                {"config", config_block(ft_args,
                                        json{{"small", ft_small},
                                             {"large", ft_large},
                                             {"threshold", ft_threshold}})},
                {"f_test", civkit::to_json(result)}};
    report["warnings"] = load.warnings;
    emit(report, ft_args.out_path);
    std::cerr << "F=" << result.f_statistic << " df=(" << result.df_num << ","
              << result.df_den << ") p=" << result.p_value
              << (result.is_weak ? " [weak]" : " [ok]") << "\n";
    return 0;
  }

  if (sim->parsed()) {
    if (!sim_seed_given) throw civkit::parse_error("simulate: --seed is required");
    civkit::McGrid grid;
    if (sim_grid != "default") {
      std::ifstream in(sim_grid);
      if (!in) throw civkit::parse_error("cannot open grid file: " + sim_grid);
      json g;
      try {
        g = json::parse(in);
      } catch (const std::exception& e) {
        throw civkit::parse_error(std::string("bad grid JSON: ") + e.what());
      }
      if (g.contains("reliabilities"))
        grid.reliabilities = g["reliabilities"].get<std::vector<double>>();
      if (g.contains("scenario"))
        grid.scenario = civkit::scenario_from_string(g["scenario"]);
      if (g.contains("n")) grid.n = g["n"];
      if (g.contains("pipelines")) {
        grid.pipelines.clear();
        for (const auto& p : g["pipelines"]) {
          civkit::McPipelineSpec ps;
          ps.pipeline = pipeline_from(p.contains("pipeline")
                                          ? p["pipeline"].get<std::string>()
                                          : p.get<std::string>());
          if (p.is_object() && p.contains("rr")) ps.rr = p["rr"];
          grid.pipelines.push_back(ps);
        }
      }
    }
    if (!sim_reliabilities.empty()) {
      grid.reliabilities.clear();
      for (const auto& r : split_list(sim_reliabilities))
        grid.reliabilities.push_back(std::stod(r));
    }
    if (!sim_pipelines.empty()) {
      grid.pipelines.clear();
      for (const auto& p : split_list(sim_pipelines)) {
        civkit::McPipelineSpec ps;
        const auto colon = p.find(':');
        ps.pipeline = pipeline_from(p.substr(0, colon));
        if (colon != std::string::npos) ps.rr = std::stod(p.substr(colon + 1));
        grid.pipelines.push_back(ps);
      }
    }
    if (sim_grid == "default" || sim_scenario_opt->count() > 0)
      grid.scenario = civkit::scenario_from_string(sim_scenario);
    if (sim_grid == "default" || sim_n_opt->count() > 0) grid.n = sim_n;

    civkit::McConfig mc;
    mc.bootstrap_B = sim_B;
    mc.threads = sim_threads;
    const auto mc_report = civkit::run_monte_carlo(grid, sim_R, sim_seed, mc);

    if (sim_format == "json") {
      json out{{"tool", civkit::tool_block()},
               {"config", json{{"grid", sim_grid},
                               {"R", sim_R},
                               {"seed", sim_seed},
                               {"n", sim_n},
                               {"B", sim_B},
                               {"scenario", sim_scenario},
                               {"format", sim_format}}},
               {"report", civkit::to_json(mc_report)}};
      emit(out, sim_out);
    } else {
      emit_text(civkit::render_report(mc_report, sim_format), sim_out);
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const civkit::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const civkit::user_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
