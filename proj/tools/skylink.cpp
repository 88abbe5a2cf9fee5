#include "skylink/harness.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <map>
#include <optional>

using namespace skylink;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "Experiment config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "Single seed; overrides the config and SKYLINK_SEED");
  cmd->add_option("--out", c.out, "Output directory; overrides the config and SKYLINK_OUT");
}

harness::ExperimentConfig resolve(const Common& c) {
  harness::ExperimentConfig cfg;
  if (c.config.empty()) {
    harness::apply_environment_overrides(cfg);
  } else {
    cfg = harness::load_config(c.config);
  }
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void print_summary(const harness::EvalSummary& s) {
  std::cout << "episodes " << s.episodes << "\n"
            << "travel_time_mean " << s.travel_time_mean << " s\n"
            << "travel_time_max " << s.travel_time_max << " s\n"
            << "collision_rate " << s.collision_rate << "\n"
            << "system_reward " << s.system_reward << "\n"
            << "energy " << s.energy << " J\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-UAV path planning with helper-mediated attention messages"};
  app.require_subcommand(1);

  Common train_opts;
  auto* train = app.add_subcommand("train", "Train every seed of a config");
  add_common(train, train_opts, true);
  bool verbose = false;
  train->add_flag("--verbose", verbose, "Print one line per episode");

  Common eval_opts;
  std::string eval_ckpt;
  int eval_episodes = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with the deterministic policy");
  add_common(eval, eval_opts, true);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--episodes", eval_episodes, "Episodes (default: config eval_episodes)");

  Common sweep_opts;
  std::string powers = "15:40:1";
  std::vector<std::string> sweep_ckpts;
  auto* sweep = app.add_subcommand("sweep", "Evaluate checkpoints over helper transmit powers");
  add_common(sweep, sweep_opts, true);
  sweep->add_option("--powers", powers, "Helper powers in dBm: start:stop:step or a,b,c");
  sweep->add_option("--checkpoint", sweep_ckpts, "LABEL=PATH, e.g. ISHA1=runs/isha1/seed_0/final.ckpt")
      ->required();

  Common dump_opts;
  std::string dump_ckpt;
  std::uint64_t scenario = 0;
  auto* dump = app.add_subcommand("dump-attention", "Write helper attention score matrices");
  add_common(dump, dump_opts, true);
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint file")->required();
  dump->add_option("--scenario", scenario, "Seed of the world layout to score");

  Common cost_opts;
  auto* costs = app.add_subcommand("costs", "Print model sizes and bits per round");
  add_common(costs, cost_opts, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = resolve(train_opts);
      harness::TrainOptions opts;
      if (verbose) opts.log = &std::cout;
      for (const auto& r : harness::cli_train(cfg, opts)) {
        std::cout << "seed " << r.seed << ": " << r.episodes_done << " episodes in " << r.run_dir;
        if (r.resumed_from > 0) std::cout << " (resumed at episode " << r.resumed_from << ")";
        std::cout << "\n";
      }
    } else if (*eval) {
      const auto cfg = resolve(eval_opts);
      const int k = eval_episodes > 0 ? eval_episodes : cfg.eval_episodes;
      const std::string out = eval_opts.out.empty() ? cfg.output_dir + "/eval" : eval_opts.out;
      print_summary(harness::cli_eval(eval_ckpt, cfg, k, out));
      std::cout << "wrote " << out << "/trajectory.csv and " << out << "/summary.json\n";
    } else if (*sweep) {
      const auto cfg = resolve(sweep_opts);
      std::map<std::string, std::string> ckpts;
      for (const auto& item : sweep_ckpts) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--checkpoint expects LABEL=PATH, got " + item);
        const auto label = parse_mechanism_label(item.substr(0, eq)).label();
        ckpts[label] = item.substr(eq + 1);
      }
      const auto rows = harness::cli_sweep(cfg, harness::parse_power_list(powers), ckpts, cfg.output_dir, &std::cerr);
      std::cout << harness::sweep_header() << "\n";
      for (const auto& r : rows) std::cout << harness::sweep_line(r) << "\n";
    } else if (*dump) {
      const auto cfg = resolve(dump_opts);
      const auto heat = harness::cli_dump_attention(dump_ckpt, cfg, scenario, cfg.output_dir);
      for (std::size_t n = 0; n < heat.size(); ++n) {
        std::cout << "agent " << n << "\n" << heat[n] << "\n";
      }
    } else if (*costs) {
      harness::print_costs(harness::cli_costs(resolve(cost_opts)), std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
