// Command-line front end: simulate, select, diagnose, sweep.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "trapo/io.hpp"

namespace fs = std::filesystem;
using namespace trapo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitParse = 3;
constexpr int kExitCheck = 4;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("out", "cannot write '" + path.string() + "'");
  return out;
}

void write_run(const fs::path& dir, const RunResult& r) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir / "passrates.jsonl");
    write_jsonl(out, r.passrates);
  }
  {
    auto out = open_out(dir / "metrics.jsonl");
    write_jsonl(out, r.metrics);
  }
  {
    auto out = open_out(dir / "trajectories.csv");
    write_trajectory_csv(out, r.passrates);
  }
  {
    auto out = open_out(dir / "selections.jsonl");
    write_jsonl(out, r.selections);
  }
}

/// Post-run self-checks. Returns the failures, empty when all hold.
std::vector<std::string> check_run(const RunResult& r) {
  std::vector<std::string> failures;
  for (const auto& [id, tr] : r.trajectories) {
    if (tr.length() != static_cast<std::size_t>(r.config.epochs))
      failures.push_back("trajectory " + std::to_string(id) + " has wrong length");
    for (double p : tr.pass_rates)
      if (!(p >= 0.0 && p <= 1.0)) failures.push_back("pass rate outside [0, 1] for " + std::to_string(id));
  }
  for (const auto& m : r.metrics)
    if (!std::isfinite(m.loss)) failures.push_back("non-finite loss at epoch " + std::to_string(m.epoch));
  if (!r.final_params.finite()) failures.push_back("non-finite policy weights");

  if (r.config.paradigm == Paradigm::trapo) {
    // Round-trip the log through its text form, then replay selection.
    std::stringstream buf;
    write_jsonl(buf, r.passrates);
    OfflineOptions opt;
    opt.top_p = r.config.top_p;
    opt.gamma = r.config.gamma;
    opt.matching = r.config.matching_mode;
    opt.warmup_epochs = r.config.warmup_epochs;
    opt.db_policy = r.config.db_policy;
    const auto replay = offline_select(read_passrates(buf), opt);
    if (replay.size() != r.selections.size()) {
      failures.push_back("offline replay produced " + std::to_string(replay.size()) + " masks, run recorded " +
                         std::to_string(r.selections.size()));
    } else {
      for (std::size_t i = 0; i < replay.size(); ++i)
        if (replay[i].selected != r.selections[i].selected)
          failures.push_back("offline replay disagrees at epoch " + std::to_string(r.selections[i].epoch));
    }
  }
  return failures;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      throw ConfigError("values", "not a number: '" + item + "'");
    }
    if (pos != item.size()) throw ConfigError("values", "not a number: '" + item + "'");
    values.push_back(v);
  }
  if (values.empty()) throw ConfigError("values", "no values given");
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-guided semi-supervised policy optimization on a synthetic world"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run one training job and write its logs");
  std::string sim_config;
  std::optional<std::size_t> sim_seed;
  std::string sim_out = "out";
  bool sim_check = false;
  sim->add_option("--config", sim_config, "Config file")->required();
  sim->add_option("--seed", sim_seed, "Override the seed (trainer and world)");
  sim->add_option("--out", sim_out, "Output directory");
  sim->add_flag("--check", sim_check, "Verify run invariants and offline replay; exit 4 on failure");

  // select
  auto* sel = app.add_subcommand("select", "Replay trajectory selection over a pass-rate log");
  std::string sel_log, sel_out, sel_matching = "mean", sel_db = "additive";
  double sel_top_p = 0.1, sel_gamma = 0.4;
  int sel_warmup = -1;
  sel->add_option("--log", sel_log, "passrates.jsonl")->required();
  sel->add_option("--top-p", sel_top_p, "Top fraction by score")->required();
  sel->add_option("--gamma", sel_gamma, "Score threshold")->required();
  sel->add_option("--matching", sel_matching, "mean or max");
  sel->add_option("--warmup", sel_warmup, "Warmup epochs (default: inferred from the log)");
  sel->add_option("--db-policy", sel_db, "additive or recompute");
  sel->add_option("--out", sel_out, "Output JSONL of masks")->required();

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Bound terms per epoch from a pass-rate log");
  std::string diag_log, diag_out, diag_db = "additive";
  BoundConfig bound;
  std::size_t diag_g = 8;
  diag->add_option("--log", diag_log, "passrates.jsonl")->required();
  diag->add_option("--alpha", bound.alpha, "Divergence weight")->required();
  diag->add_option("--ly", bound.label_diameter, "Label-space diameter")->required();
  diag->add_option("--delta", bound.delta, "Failure probability")->required();
  diag->add_option("--group-size", diag_g, "Rollouts per question used in the run");
  diag->add_option("--db-policy", diag_db, "additive or recompute");
  diag->add_option("--out", diag_out, "Output JSONL")->required();

  // sweep
  auto* sw = app.add_subcommand("sweep", "One run per value of a numeric config field");
  std::string sw_config, sw_axis, sw_values, sw_out;
  sw->add_option("--config", sw_config, "Base config file")->required();
  sw->add_option("--axis", sw_axis, "Config key to vary")->required();
  sw->add_option("--values", sw_values, "Comma-separated values")->required();
  sw->add_option("--out", sw_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*sim) {
      RunConfig cfg = load_config(sim_config);
      if (sim_seed) apply_setting(cfg.trainer, cfg.world, "seed", std::to_string(*sim_seed));
      const RunResult r = run(cfg.trainer, cfg.world);
      write_run(sim_out, r);
      if (sim_check) {
        const auto failures = check_run(r);
        for (const auto& f : failures) std::cerr << "check failed: " << f << '\n';
        if (!failures.empty()) return kExitCheck;
        std::cout << "check passed\n";
      }
      return kExitOk;
    }
    if (*sel) {
      OfflineOptions opt;
      opt.top_p = sel_top_p;
      opt.gamma = sel_gamma;
      opt.matching = parse_enum<MatchingMode>("matching", sel_matching);
      opt.warmup_epochs = sel_warmup;
      opt.db_policy = parse_enum<DbPolicy>("db_policy", sel_db);
      if (!(opt.top_p >= 0.0 && opt.top_p <= 1.0)) throw ConfigError("top_p", "must lie in [0, 1]");
      if (!(opt.gamma >= -1.0 && opt.gamma <= 1.0)) throw ConfigError("gamma", "must lie in [-1, 1]");
      const auto records = read_passrates(sel_log);
      std::vector<SelectionMask> masks;
      try {
        masks = offline_select(records, opt);
      } catch (const std::invalid_argument& e) {
        throw ParseError(e.what(), 0);
      }
      auto out = open_out(sel_out);
      write_jsonl(out, masks);
      return kExitOk;
    }
    if (*diag) {
      validate_bound(bound);
      if (diag_g < 1) throw ConfigError("group_size", "must be >= 1");
      const DbPolicy policy = parse_enum<DbPolicy>("db_policy", diag_db);
      const auto records = read_passrates(diag_log);
      std::vector<BoundReport> reports;
      try {
        reports = diagnose_log(records, bound, diag_g, policy);
      } catch (const std::invalid_argument& e) {
        throw ParseError(e.what(), 0);
      }
      auto out = open_out(diag_out);
      write_jsonl(out, reports);
      return kExitOk;
    }
    if (*sw) {
      const RunConfig cfg = load_config(sw_config);
      const auto values = parse_values(sw_values);
      const auto entries = sweep(cfg.trainer, cfg.world, sw_axis, values);
      fs::create_directories(sw_out);
      auto summary = open_out(fs::path(sw_out) / "summary.jsonl");
      for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const fs::path dir = fs::path(sw_out) / (sw_axis + "=" + format_number(e.value));
        write_run(dir, e.result);
        summary << "{\"axis\":\"" << sw_axis << "\",\"value\":" << detail::json_number(e.value)
                << ",\"dir\":\"" << dir.filename().string() << "\",\"final\":"
                << (e.result.metrics.empty() ? std::string("null") : to_json(e.result.metrics.back())) << "}\n";
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitParse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
