#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qrstore/cluster.hpp"
#include "qrstore/workload.hpp"

namespace qrstore {

/// Bad config key or value. `key()` names the offender.
class ConfigError : public ValidationError {
 public:
  ConfigError(std::string key, const std::string& what) : ValidationError(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Missing or malformed CSV column.
class SchemaError : public Error {
 public:
  using Error::Error;
};

struct BenchConfig {
  ClusterConfig cluster;
  WorkloadConfig workload;
  // Warm-up and measurement are counted in batches, not seconds.
  std::uint64_t warmup_batches = 2;
  std::uint64_t measure_batches = 10;
  std::uint32_t trials = 3;
  bool prefill = false;

  BenchConfig();
  /// Cluster/workload consistency plus both validate() calls.
  void validate() const;
};

struct ConfigKey {
  const char* section;
  const char* name;
};

/// Every settable key in file order.
const std::vector<ConfigKey>& config_keys();
std::string get_value(const BenchConfig& c, const std::string& key);
/// Throws ConfigError on an unknown key or unparsable value.
void set_value(BenchConfig& c, const std::string& key, const std::string& value);
/// "key=value" form used by --set.
void apply_override(BenchConfig& c, const std::string& assignment);

/// Flat `key = value` lines under `[cluster]`, `[workload]`, `[bench]`
/// headers; `#` starts a comment. A key under the wrong header is an error.
BenchConfig parse_config(std::istream& in, BenchConfig base = {});
BenchConfig load_config(const std::filesystem::path& file, BenchConfig base = {});
void write_config(std::ostream& out, const BenchConfig& c);

/// Stable 16-hex-digit hash over every key's value.
std::string config_hash(const BenchConfig& c);

struct TrialResult {
  std::uint32_t trial = 0;
  RunMetrics metrics;
  double tput_tps = 0;
  double p50_ms = 0;
  double p99_ms = 0;
  double t_pl_ms = 0;
  double t_deliv_ms = 0;
  double t_ex_ms = 0;
  double t_repl_ms = 0;
  double t_c_ms = 0;
  double batch_latency_ms = 0;  // mean measured batch latency
  double model_fit = 0;         // share of batches within 20% of the model
};

/// Nearest-rank percentile, q in [0, 1]. 0 for an empty sample.
double percentile(std::vector<double> v, double q);

TrialResult summarize(std::uint32_t trial, RunMetrics m);
TrialResult run_trial(const BenchConfig& c, std::uint32_t trial);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Throws SchemaError when absent.
  std::size_t column(const std::string& name) const;
};

/// Metric columns after the config columns, in order.
const std::vector<std::string>& metric_columns();
std::vector<std::string> csv_header();
std::vector<std::string> csv_row(const BenchConfig& c, const TrialResult& r);
/// Fills the overhead column of each row from the mean throughput of rows
/// whose config differs only by rf = 0. Rows without such a baseline stay
/// empty.
void fill_overhead(CsvTable& t);

void write_csv(std::ostream& out, const CsvTable& t);
CsvTable read_csv(std::istream& in);

struct Report {
  std::string markdown;
  std::vector<std::pair<std::string, std::string>> charts;  // file name, SVG
  std::vector<std::string> warnings;
};

/// Groups rows by config hash, averages the trials, and charts throughput
/// and p99 against whichever config key varies between groups.
Report build_report(const CsvTable& t);
/// Writes report.md plus the charts into `dir`.
void write_report(const Report& r, const std::filesystem::path& dir);

using Progress = std::function<void(const std::string&)>;

/// Runs every trial of `c`, appending one row per trial to `table`.
void run_experiment(const BenchConfig& c, CsvTable& table, const Progress& progress = {});

/// Small-instance property suites: serial oracle, execution and commit
/// order, convergence, recovery. Returns true when all pass.
bool run_property_suites(std::uint64_t seed, std::uint32_t runs, std::ostream& out);

}  // namespace qrstore
