// qrbench: runs experiments on an in-process QR-Store cluster.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "qrstore/bench.hpp"

namespace fs = std::filesystem;
using namespace qrstore;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "results";
  std::optional<std::uint64_t> seed;
  std::string transport;
  bool check_invariants = false;
  bool print_config = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "override, key=value (repeatable)");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "workload seed");
  app->add_option("--transport", c.transport, "loopback or tcp")->check(CLI::IsMember({"loopback", "tcp"}));
  app->add_flag("--check-invariants", c.check_invariants, "also run the property suites on small instances");
  app->add_flag("--print-config", c.print_config, "print the resolved config and exit");
}

BenchConfig resolve(const Common& c) {
  BenchConfig cfg;
  if (!c.config.empty()) cfg = load_config(c.config, cfg);
  for (const std::string& s : c.sets) apply_override(cfg, s);
  if (c.seed) cfg.workload.seed = *c.seed;
  if (!c.transport.empty()) set_value(cfg, "transport", c.transport);
  cfg.validate();
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

int finish(const Common& c, CsvTable& table) {
  fill_overhead(table);
  fs::create_directories(c.out);
  const fs::path csv = fs::path(c.out) / "results.csv";
  {
    std::ofstream f(csv);
    write_csv(f, table);
  }
  const Report rep = build_report(table);
  write_report(rep, c.out);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << rep.markdown;
  std::cout << "wrote " << csv.string() << "\n";
  int rc = 0;
  if (c.check_invariants) {
    const std::uint64_t seed = c.seed.value_or(1);
    rc = run_property_suites(seed, 20, std::cout) ? 0 : 1;
  }
  return rc;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QR-Store benchmark harness"};
  app.require_subcommand(1);

  Common run_opts;
  auto* run = app.add_subcommand("run", "run one configuration for its trials");
  add_common(run, run_opts);

  Common sweep_opts;
  std::string param;
  std::string values;
  auto* sweep = app.add_subcommand("sweep", "run one configuration per value of a key");
  add_common(sweep, sweep_opts);
  sweep->add_option("--param", param, "config key to sweep")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();

  std::uint64_t check_seed = 1;
  std::uint32_t check_runs = 50;
  auto* check = app.add_subcommand("check", "run the property suites on small randomized instances");
  check->add_option("--seed", check_seed, "RNG seed")->capture_default_str();
  check->add_option("--runs", check_runs, "randomized runs per suite")->capture_default_str();

  std::string report_csv;
  std::string report_out;
  auto* report = app.add_subcommand("report", "markdown table and SVG charts from a results CSV");
  report->add_option("csv", report_csv, "results CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "output directory (default: next to the CSV)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      BenchConfig cfg = resolve(run_opts);
      if (run_opts.print_config) {
        write_config(std::cout, cfg);
        return 0;
      }
      CsvTable table;
      run_experiment(cfg, table, log_line);
      return finish(run_opts, table);
    }
    if (*sweep) {
      BenchConfig base = resolve(sweep_opts);
      const auto list = split_list(values);
      if (list.empty()) throw ConfigError(param, "no sweep values");
      std::vector<BenchConfig> configs;
      for (const std::string& v : list) {
        BenchConfig cfg = base;
        set_value(cfg, param, v);
        cfg.validate();
        configs.push_back(cfg);
      }
      if (sweep_opts.print_config) {
        for (const auto& cfg : configs) write_config(std::cout, cfg), std::cout << "\n";
        return 0;
      }
      CsvTable table;
      for (const auto& cfg : configs) {
        log_line(param + " = " + get_value(cfg, param));
        run_experiment(cfg, table, log_line);
      }
      return finish(sweep_opts, table);
    }
    if (*check) {
      return run_property_suites(check_seed, check_runs, std::cout) ? 0 : 1;
    }
    if (*report) {
      std::ifstream in(report_csv);
      const CsvTable table = read_csv(in);
      const Report rep = build_report(table);
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
      if (rep.markdown.empty()) return 0;
      const fs::path dir = report_out.empty() ? fs::path(report_csv).parent_path() : fs::path(report_out);
      write_report(rep, dir.empty() ? fs::path(".") : dir);
      std::cout << rep.markdown;
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
