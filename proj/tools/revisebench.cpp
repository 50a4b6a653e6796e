// revisebench: command-line front end for the forecast-revision pipeline.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "revisebench/revisebench.hpp"

namespace rb = revisebench;

namespace {

int report_failure(const rb::Logger& log, std::string_view kind, const std::string& message, int code) {
  log.event("error", "failed", {{"kind", kind}, {"message", message}, {"exit_code", code}});
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forecast revision benchmark: windows, priors, traces, SFT corpora, rewards and evaluation"};
  app.set_version_flag("--version", std::string(REVISEBENCH_VERSION));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::string> backend;
  bool quiet = false;
  app.add_option("--config", config_path, "Pipeline configuration (JSON)");
  app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("--seed", seed, "Run seed (overrides seed)");
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--backend", backend, "Force every endpoint onto one backend")->check(CLI::IsMember({"http", "mock"}));
  app.add_flag("--quiet", quiet, "Suppress structured log lines");

  auto* windows = app.add_subcommand("windows", "Cut rolling windows and assign splits");
  auto* priors = app.add_subcommand("priors", "Attach prior forecasts to every split");
  auto* traces = app.add_subcommand("traces", "Sample and verify candidate revision traces");
  auto* sft = app.add_subcommand("sft", "Select traces into a supervised corpus");
  std::optional<std::string> recipe;
  sft->add_option("--recipe", recipe, "Selection recipe")
      ->check(CLI::IsMember({"top3_fallback", "top1", "random3", "all_effective", "high_validity", "all_revisable"}));
  auto* audit = app.add_subcommand("reward-audit", "Score completion groups and report reward collapse");
  std::string completions;
  audit->add_option("--completions", completions, "JSONL of {prompt_id, instance_id, completions}")->required();
  auto* eval = app.add_subcommand("eval", "Run configured methods and write leaderboards");
  std::vector<std::string> methods;
  eval->add_option("--methods", methods, "Subset of method ids")->delimiter(',');
  auto* fallback = app.add_subcommand("fallback", "Profile fallback vs revision decisions");
  std::string method;
  fallback->add_option("--method", method, "Revise method id (default: first revise method)");
  auto* simulate = app.add_subcommand("simulate", "Reward-collapse contrast on synthetic groups");
  std::optional<std::size_t> n_groups, group_size;
  std::optional<double> mae_lo, mae_hi, perturbation;
  simulate->add_option("--groups", n_groups, "Number of groups");
  simulate->add_option("--group-size", group_size, "Completions per group");
  simulate->add_option("--mae-lo", mae_lo, "Lower bound of prior MAE");
  simulate->add_option("--mae-hi", mae_hi, "Upper bound of prior MAE");
  simulate->add_option("--perturbation", perturbation, "Relative perturbation of candidate MAE");

  rb::Logger log(&std::cerr);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  rb::Logger quiet_log(nullptr);
  const rb::Logger& active_log = quiet ? quiet_log : log;

  try {
    rb::Overrides ov;
    ov.output_dir = out_dir;
    ov.seed = seed;
    ov.jobs = jobs;
    if (backend) ov.backend = rb::parse_backend(*backend);

    const bool is_simulate = simulate->parsed();
    if (config_path.empty() && !is_simulate) throw rb::ConfigError("--config is required for this command");
    auto config = config_path.empty() ? rb::config_from_json(rb::json::object(), std::filesystem::current_path(), ov)
                                      : rb::load_config(config_path, ov);
    if (is_simulate) {
      if (n_groups) config.simulate.n_groups = *n_groups;
      if (group_size) config.simulate.group_size = *group_size;
      if (mae_lo) config.simulate.mae_lo = *mae_lo;
      if (mae_hi) config.simulate.mae_hi = *mae_hi;
      if (perturbation) config.simulate.perturbation = *perturbation;
    }

    const auto* sub = app.get_subcommands().front();
    rb::StageContext ctx{config, {sub->get_name(), std::vector<std::string>(argv + 1, argv + argc)}, active_log};
    active_log.info("start", {{"command", sub->get_name()}, {"config_hash", rb::config_hash(config)}});

    if (windows->parsed()) {
      rb::cmd_windows(ctx);
    } else if (priors->parsed()) {
      rb::cmd_priors(ctx);
    } else if (traces->parsed()) {
      rb::cmd_traces(ctx);
    } else if (sft->parsed()) {
      const auto res = rb::cmd_sft(ctx, recipe ? std::optional(rb::parse_recipe(*recipe)) : std::nullopt);
      std::cout << "rows " << res.corpus.stats.rows << " (fallback " << res.corpus.stats.fallback_rows << ")\n";
    } else if (audit->parsed()) {
      const auto res = rb::cmd_reward_audit(ctx, completions);
      std::cout << rb::collapse_to_json(res.collapse).dump(2) << '\n';
    } else if (eval->parsed()) {
      const auto res = rb::cmd_eval(ctx, methods);
      std::cout << rb::emit_report(res.report, rb::ReportFormat::markdown, res.notes);
    } else if (fallback->parsed()) {
      std::cout << rb::profile_table(rb::cmd_fallback(ctx, method));
    } else if (is_simulate) {
      const auto res = rb::cmd_simulate(ctx);
      std::cout << rb::json{{"exp_mae", rb::collapse_to_json(res.exp_mae)},
                            {"imp_ratio", rb::collapse_to_json(res.imp_ratio)}}
                       .dump(2)
                << '\n';
    }
    active_log.info("finished", {{"command", sub->get_name()}});
    return 0;
  } catch (const rb::TransportError& e) {
    return report_failure(log, "transport", e.what(), 3);
  } catch (const rb::ParseError& e) {
    return report_failure(log, "parse", e.what(), 2);
  } catch (const rb::ValidationError& e) {
    return report_failure(log, "validation", e.what(), 2);
  } catch (const rb::ConfigError& e) {
    return report_failure(log, "config", e.what(), 2);
  } catch (const std::exception& e) {
    return report_failure(log, "internal", e.what(), 1);
  }
}
