#include "dmar/config.hpp"
#include "dmar/engine.hpp"
#include "dmar/panel.hpp"
#include "dmar/sim.hpp"
#include "dmar/study.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace {

using namespace dmar;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  return out;
}

// Bias/SD table with aligned columns for the terminal.
void print_table(const std::string& csv, std::ostream& out) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c)
      out << (c ? "  " : "") << (c < 2 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << r[c];
    out << '\n';
  }
}

void print_contingency(const StageDecisions& d, std::ostream& out) {
  static const char* labels[3] = {"(0,0)", "(1,0)", "(1,1)"};
  out << "stage " << d.t << "  received \\ optimal  (n = " << d.total() << ")\n";
  out << std::setw(10) << "";
  for (const auto* l : labels) out << std::setw(9) << l;
  out << '\n';
  for (int r = 0; r < 3; ++r) {
    out << std::setw(10) << labels[r];
    for (int o = 0; o < 3; ++o) out << std::setw(9) << d.table[static_cast<std::size_t>(r)][static_cast<std::size_t>(o)];
    out << '\n';
  }
}

int cmd_simulate(const std::string& scenario, int n, std::uint64_t seed, const std::string& missingness,
                 const std::string& censoring, int workers, const fs::path& out) {
  auto sc = sim::scenario_preset(scenario);
  sc.n = n;
  sc.seed = seed;
  sc.workers = workers;
  if (!missingness.empty()) sc.missingness = sim::missingness_from_string(missingness);
  if (!censoring.empty()) sc.censoring = sim::censoring_from_string(censoring);
  const Cohort c = sim::generate_cohort(sc);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_cohort(c, out);
  std::cout << "wrote " << c.n() << " subjects (" << c.completers() << " completers) to " << out.string() << '\n';
  return 0;
}

int cmd_estimate(const fs::path& data, const fs::path& config, const std::string& method, const std::string& weights,
                 bool override_positivity, const fs::path& out, const fs::path& balance_out) {
  auto mc = load_model_config(config);
  if (override_positivity) mc.override_positivity = true;
  const Cohort c = load_cohort(data, mc.roles);
  const auto ipcw = mc.censoring_weights(c);
  if (ipcw && !ipcw->notice.empty()) std::cerr << ipcw->notice << '\n';
  auto opt = mc.options(method_from_string(method), weight_kind_from_string(weights));
  opt.ipcw = ipcw ? &*ipcw : nullptr;
  const auto regime = fit_regime(c, mc.spec, opt);
  write_regime(regime, out);

  for (const auto& s : regime.stages) {
    std::cout << "stage " << s.t << ": rows " << s.rows << ", clipped propensities " << s.clipped << '\n';
    for (std::size_t k = 0; k < s.gamma_names.size(); ++k)
      std::cout << "  " << std::left << std::setw(24) << s.gamma_names[k] << std::right << std::setw(14)
                << s.gamma(static_cast<Eigen::Index>(k)) << '\n';
    for (std::size_t k = 0; k < s.gamma_star_names.size(); ++k)
      std::cout << "  " << std::left << std::setw(24) << s.gamma_star_names[k] << std::right << std::setw(14)
                << s.gamma_star(static_cast<Eigen::Index>(k)) << '\n';
  }

  if (!balance_out.empty()) {
    auto f = open_out(balance_out);
    const auto resolved = mc.spec.resolved(c.columns(), c.tau());
    for (int t : resolved.stages) {
      const auto pe = stage_propensities(c, t, opt);
      const auto w = treatment_weights(c, pe, opt);
      const auto covs = resolve_all(mc.propensity, c.columns());
      std::ostringstream table;
      write_balance_csv(balance_diagnostics(c, t, w, covs), table);
      std::string body = table.str();
      if (t != resolved.stages.front()) body = body.substr(body.find('\n') + 1);
      // Stage column prepended to every line.
      std::istringstream lines(body);
      std::string line;
      bool header = t == resolved.stages.front();
      while (std::getline(lines, line)) {
        f << (header ? std::string("stage") : std::to_string(t)) << ',' << line << '\n';
        header = false;
      }
    }
  }
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_study(const fs::path& config, int workers, int replications, int n, const fs::path& out_dir) {
  auto cfg = study::StudyConfig::load(config);
  if (workers >= 0) cfg.workers = workers;
  if (replications > 0) cfg.replications = replications;
  if (n > 0) cfg.scenario.n = n;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  const auto bundle = study::run_study(cfg);
  fs::create_directories(cfg.output_dir);
  {
    auto f = open_out(cfg.output_dir / "bias.csv");
    study::emit_bias_table(bundle, f);
  }
  {
    auto f = open_out(cfg.output_dir / "estimates.csv");
    study::emit_estimates(bundle, f);
  }
  study::write_bundle(bundle, cfg.output_dir / "bundle.json");
  std::ostringstream table;
  study::emit_bias_table(bundle, table);
  print_table(table.str(), std::cout);
  std::cout << "replications " << bundle.replications.size() << ", aborted " << bundle.aborted()
            << ", mean censored fraction " << bundle.mean_censored_fraction() << '\n';
  for (const auto& r : bundle.replications)
    if (!r.ok) std::cerr << nlohmann::json{{"replication", r.index}, {"error", r.error}}.dump() << '\n';
  if (bundle.failed()) throw DataError("study failed: more than 1% of replications aborted");
  return 0;
}

int cmd_value(const fs::path& config, int workers, int fit_n, int eval_n, const fs::path& out) {
  auto cfg = study::StudyConfig::load(config);
  if (workers >= 0) cfg.workers = workers;
  if (fit_n > 0) cfg.value_fit_n = fit_n;
  if (eval_n > 0) cfg.value_eval_n = eval_n;
  const auto rep = study::run_value_study(cfg);
  std::ostringstream csv;
  study::emit_value_report(rep, csv);
  if (!out.empty()) {
    auto f = open_out(out);
    f << csv.str();
  }
  print_table(csv.str(), std::cout);
  return 0;
}

int cmd_apply(const fs::path& regime_path, const fs::path& data, const fs::path& out) {
  const auto regime = read_regime(regime_path);
  const Cohort c = load_cohort(data);
  const auto decisions = apply_regime(regime, c);
  if (!out.empty()) {
    auto f = open_out(out);
    f << "id,time,received,optimal\n";
    for (const auto& d : decisions)
      for (int i = 0; i < c.n(); ++i) {
        const auto& o = d.optimal[static_cast<std::size_t>(i)];
        if (!o) continue;
        f << c.ids()[static_cast<std::size_t>(i)] << ',' << d.t << ",\"" << to_string(c.strategy(i, d.t)) << "\",\""
          << to_string(*o) << "\"\n";
      }
  }
  for (const auto& d : decisions) print_contingency(d, std::cout);
  return 0;
}

int cmd_report(const fs::path& bundle_path, const std::string& format, const fs::path& out) {
  const auto bundle = study::read_bundle(bundle_path);
  std::ostringstream csv;
  study::emit_bias_table(bundle, csv);
  std::string text = csv.str();
  if (format == "text") {
    std::ostringstream t;
    print_table(text, t);
    t << "replications " << bundle.replications.size() << ", aborted " << bundle.aborted() << '\n';
    text = t.str();
  } else if (format != "csv") {
    throw UsageError("--format must be csv or text");
  }
  if (out.empty()) {
    std::cout << text;
  } else {
    auto f = open_out(out);
    f << text;
  }
  return 0;
}

void error_line(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", message}, {"kind", kind}, {"command", command}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic monitoring and add-on regime estimation"};
  app.require_subcommand(1);
  app.fallthrough();  // --workers is accepted after the subcommand too
  int workers = -1;
  app.add_option("--workers", workers, "worker threads (default: DMAR_WORKERS or hardware concurrency)");

  auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic cohort CSV");
  std::string scenario = "A", missingness, censoring;
  int n = 1000;
  std::uint64_t seed = 1;
  fs::path out;
  sim_cmd->add_option("--scenario", scenario, "preset A, B, C or D")->capture_default_str();
  sim_cmd->add_option("--n", n, "cohort size")->capture_default_str()->check(CLI::PositiveNumber);
  sim_cmd->add_option("--seed", seed)->capture_default_str();
  sim_cmd->add_option("--missingness", missingness, "override: none | mar");
  sim_cmd->add_option("--censoring", censoring, "override: none | time_fixed | time_dependent");
  sim_cmd->add_option("--out", out, "cohort CSV")->required();

  auto* est_cmd = app.add_subcommand("estimate", "fit a regime from a cohort CSV");
  fs::path data, config, balance_out;
  std::string method = "woma", weights = "overlap";
  bool override_positivity = false;
  est_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
  est_cmd->add_option("--config", config, "model configuration (INI)")->required()->check(CLI::ExistingFile);
  est_cmd->add_option("--method", method)->capture_default_str()->check(CLI::IsMember({"woma", "qloma"}));
  est_cmd->add_option("--weights", weights)->capture_default_str()->check(CLI::IsMember({"overlap", "ipt"}));
  est_cmd->add_flag("--override-positivity", override_positivity, "fit despite positivity warnings");
  est_cmd->add_option("--balance", balance_out, "write weighted balance diagnostics CSV");
  est_cmd->add_option("--out", out, "regime JSON")->required();

  auto* study_cmd = app.add_subcommand("study", "run a Monte Carlo replication study");
  int replications = 0, study_n = 0;
  fs::path out_dir;
  study_cmd->add_option("--config", config, "study configuration (INI)")->required()->check(CLI::ExistingFile);
  study_cmd->add_option("--replications", replications, "override replication count");
  study_cmd->add_option("--n", study_n, "override cohort size");
  study_cmd->add_option("--out", out_dir, "override output directory");

  auto* value_cmd = app.add_subcommand("value", "evaluate observational, fitted and true policies");
  int fit_n = 0, eval_n = 0;
  value_cmd->add_option("--config", config, "study configuration (INI)")->required()->check(CLI::ExistingFile);
  value_cmd->add_option("--fit-n", fit_n, "override fitting cohort size");
  value_cmd->add_option("--eval-n", eval_n, "override evaluation cohort size");
  value_cmd->add_option("--out", out, "value report CSV");

  auto* apply_cmd = app.add_subcommand("apply", "optimal decisions and contingency tables for a cohort");
  fs::path regime_path;
  apply_cmd->add_option("--regime", regime_path)->required()->check(CLI::ExistingFile);
  apply_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
  apply_cmd->add_option("--out", out, "per-subject decisions CSV");

  auto* report_cmd = app.add_subcommand("report", "render a saved study bundle");
  fs::path bundle_path;
  std::string format = "text";
  report_cmd->add_option("--bundle", bundle_path)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--format", format, "csv | text")->capture_default_str();
  report_cmd->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
    return 1;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (sub == sim_cmd) return cmd_simulate(scenario, n, seed, missingness, censoring, std::max(workers, 0), out);
    if (sub == est_cmd) return cmd_estimate(data, config, method, weights, override_positivity, out, balance_out);
    if (sub == study_cmd) return cmd_study(config, workers, replications, study_n, out_dir);
    if (sub == value_cmd) return cmd_value(config, workers, fit_n, eval_n, out);
    if (sub == apply_cmd) return cmd_apply(regime_path, data, out);
    if (sub == report_cmd) return cmd_report(bundle_path, format, out);
  } catch (const UsageError& e) {
    error_line(name, "usage", e.what());
    return 1;
  } catch (const StageFailure& e) {
    error_line(name, "stage_failure", std::string(e.what()) + " (stage " + std::to_string(e.stage) + ")");
    return 2;
  } catch (const std::exception& e) {
    error_line(name, "runtime", e.what());
    return 2;
  }
  return 1;
}
