#include "qrstore/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "qrstore/verify.hpp"

namespace qrstore {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  std::string s;
  for (char ch : v) {
    if (ch != '_' && ch != '\'') s.push_back(ch);
  }
  double mult = 1;
  if (!s.empty() && (s.back() == 'K' || s.back() == 'k')) {
    mult = 1000;
    s.pop_back();
  }
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw ConfigError(key, "expected an unsigned integer, got '" + v + "'");
  return static_cast<std::uint64_t>(out * mult);
}

std::uint32_t parse_u32(const std::string& key, const std::string& v) {
  const std::uint64_t x = parse_u64(key, v);
  if (x > UINT32_MAX) throw ConfigError(key, "out of range");
  return static_cast<std::uint32_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<E> options) {
  for (E e : options) {
    if (v == to_string(e)) return e;
  }
  std::string names;
  for (E e : options) names += std::string(names.empty() ? "" : ", ") + to_string(e);
  throw ConfigError(key, "expected one of {" + names + "}, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

std::string fmt_fixed(double v, int digits) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

struct KeyDef {
  ConfigKey key;
  std::function<std::string(const BenchConfig&)> get;
  std::function<void(BenchConfig&, const std::string&)> set;
};

#define QR_U64(sec, field, expr)                                                     \
  KeyDef {                                                                           \
    {sec, #field}, [](const BenchConfig& c) { return std::to_string(c.expr); },      \
        [](BenchConfig& c, const std::string& v) { c.expr = parse_u64(#field, v); } \
  }
#define QR_U32(sec, field, expr)                                                     \
  KeyDef {                                                                           \
    {sec, #field}, [](const BenchConfig& c) { return std::to_string(c.expr); },      \
        [](BenchConfig& c, const std::string& v) { c.expr = parse_u32(#field, v); } \
  }
#define QR_DBL(sec, field, expr)                                                        \
  KeyDef {                                                                              \
    {sec, #field}, [](const BenchConfig& c) { return fmt(c.expr); },                    \
        [](BenchConfig& c, const std::string& v) { c.expr = parse_double(#field, v); } \
  }
#define QR_BOOL(sec, field, expr)                                                               \
  KeyDef {                                                                                      \
    {sec, #field}, [](const BenchConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
        [](BenchConfig& c, const std::string& v) { c.expr = parse_bool(#field, v); }           \
  }
#define QR_DUR(sec, field, expr, unit)                                                                   \
  KeyDef {                                                                                               \
    {sec, #field}, [](const BenchConfig& c) { return std::to_string(c.expr.count()); },                  \
        [](BenchConfig& c, const std::string& v) { c.expr = std::chrono::unit(parse_u64(#field, v)); } \
  }
#define QR_ENUM(sec, field, expr, ...)                                                                  \
  KeyDef {                                                                                              \
    {sec, #field}, [](const BenchConfig& c) { return std::string(to_string(c.expr)); },                 \
        [](BenchConfig& c, const std::string& v) { c.expr = parse_enum(#field, v, {__VA_ARGS__}); } \
  }

const std::vector<KeyDef>& defs() {
  static const std::vector<KeyDef> d = {
      QR_U32("workload", partitions, workload.partitions),
      QR_U64("workload", records_per_partition, workload.records_per_partition),
      QR_U32("workload", record_size, workload.record_size),
      QR_DBL("workload", mpt_fraction, workload.mpt_fraction),
      QR_DBL("workload", zipf_theta, workload.zipf_theta),
      QR_U32("workload", ops_per_txn, workload.ops_per_txn),
      QR_DBL("workload", write_fraction, workload.write_fraction),
      QR_U32("workload", partitions_per_mpt, workload.partitions_per_mpt),
      QR_DBL("workload", rmw_fraction, workload.rmw_fraction),
      QR_DBL("workload", abort_fraction, workload.abort_fraction),
      KeyDef{{"workload", "abort_threshold"},
             [](const BenchConfig& c) { return std::to_string(c.workload.abort_threshold); },
             [](BenchConfig& c, const std::string& v) {
               const auto x = parse_u64("abort_threshold", v);
               if (x > 255) throw ConfigError("abort_threshold", "must be at most 255");
               c.workload.abort_threshold = static_cast<std::uint8_t>(x);
             }},
      QR_U64("workload", seed, workload.seed),

      QR_U32("cluster", rf, cluster.rf),
      QR_U32("cluster", planners, cluster.planners),
      QR_U32("cluster", executors, cluster.executors),
      QR_U32("cluster", subranges, cluster.subranges),
      KeyDef{{"cluster", "batch_size"}, [](const BenchConfig& c) { return std::to_string(c.cluster.batch_size); },
             [](BenchConfig& c, const std::string& v) { c.cluster.batch_size = parse_u64("batch_size", v); }},
      QR_DUR("cluster", batch_timeout_ms, cluster.batch_timeout, milliseconds),
      QR_ENUM("cluster", sync, cluster.sync, SyncGranularity::Node, SyncGranularity::Thread),
      QR_ENUM("cluster", repl_mode, cluster.repl_mode, ReplicationMode::Speculative, ReplicationMode::Synchronous),
      QR_ENUM("cluster", backend, cluster.backend, ReplicationBackend::Quorum, ReplicationBackend::Middleware),
      QR_BOOL("cluster", compression, cluster.compression),
      QR_ENUM("cluster", transport, cluster.transport, TransportKind::Loopback, TransportKind::Tcp),
      QR_DUR("cluster", intra_latency_us, cluster.intra_latency, microseconds),
      QR_DUR("cluster", repl_latency_us, cluster.repl_latency, microseconds),
      QR_DUR("cluster", broker_latency_us, cluster.broker_latency, microseconds),
      QR_DUR("cluster", op_cost_ns, cluster.op_cost, nanoseconds),
      QR_DUR("cluster", watchdog_ms, cluster.watchdog, milliseconds),
      QR_DUR("cluster", repl_timeout_ms, cluster.repl_timeout, milliseconds),
      QR_U64("cluster", checkpoint_interval, cluster.checkpoint_interval),
      KeyDef{{"cluster", "durability_dir"},
             [](const BenchConfig& c) { return c.cluster.durability_dir ? c.cluster.durability_dir->string() : ""; },
             [](BenchConfig& c, const std::string& v) {
               if (v.empty()) {
                 c.cluster.durability_dir.reset();
               } else {
                 c.cluster.durability_dir = v;
               }
             }},
      QR_BOOL("cluster", heartbeats, cluster.heartbeats),
      QR_DUR("cluster", heartbeat_period_ms, cluster.heartbeat_period, milliseconds),
      QR_U32("cluster", heartbeat_misses, cluster.heartbeat_misses),

      QR_U64("bench", warmup_batches, warmup_batches),
      QR_U64("bench", measure_batches, measure_batches),
      QR_U32("bench", trials, trials),
      QR_BOOL("bench", prefill, prefill),
  };
  return d;
}

#undef QR_U64
#undef QR_U32
#undef QR_DBL
#undef QR_BOOL
#undef QR_DUR
#undef QR_ENUM

const KeyDef& def(const std::string& key) {
  for (const KeyDef& d : defs()) {
    if (key == d.key.name) return d;
  }
  throw ConfigError(key, "unknown config key");
}

ClusterConfig cluster_config(const BenchConfig& c) {
  ClusterConfig cc = c.cluster;
  cc.partitions = c.workload.partitions;
  cc.records_per_partition = c.workload.records_per_partition;
  cc.record_size = c.workload.record_size;
  return cc;
}

}  // namespace

BenchConfig::BenchConfig() {
  workload.partitions = 4;
  workload.mpt_fraction = 0.5;
  cluster.batch_size = 2'000;
}

void BenchConfig::validate() const {
  try {
    workload.validate();
    cluster_config(*this).validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ConfigError("config", e.what());
  }
  if (measure_batches == 0) throw ConfigError("measure_batches", "must be at least 1");
  if (trials == 0) throw ConfigError("trials", "must be at least 1");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const KeyDef& d : defs()) k.push_back(d.key);
    return k;
  }();
  return keys;
}

std::string get_value(const BenchConfig& c, const std::string& key) { return def(key).get(c); }

void set_value(BenchConfig& c, const std::string& key, const std::string& value) { def(key).set(c, trim(value)); }

void apply_override(BenchConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
  std::string key = trim(std::string_view(assignment).substr(0, eq));
  // "cluster.rf" and "rf" are both accepted.
  if (auto dot = key.find('.'); dot != std::string::npos) {
    const std::string section = key.substr(0, dot);
    key = key.substr(dot + 1);
    if (section != def(key).key.section) throw ConfigError(key, "belongs in [" + std::string(def(key).key.section) + "]");
  }
  set_value(c, key, assignment.substr(eq + 1));
}

BenchConfig parse_config(std::istream& in, BenchConfig base) {
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno), "unterminated section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      if (section != "cluster" && section != "workload" && section != "bench") {
        throw ConfigError(section, "unknown section");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    const KeyDef& d = def(key);
    if (!section.empty() && section != d.key.section) {
      throw ConfigError(key, "belongs in [" + std::string(d.key.section) + "], found under [" + section + "]");
    }
    d.set(base, value);
  }
  return base;
}

BenchConfig load_config(const std::filesystem::path& file, BenchConfig base) {
  std::ifstream in(file);
  if (!in) throw ConfigError(file.string(), "cannot open config file");
  return parse_config(in, std::move(base));
}

void write_config(std::ostream& out, const BenchConfig& c) {
  std::string section;
  for (const KeyDef& d : defs()) {
    if (section != d.key.section) {
      if (!section.empty()) out << "\n";
      section = d.key.section;
      out << "[" << section << "]\n";
    }
    out << d.key.name << " = " << d.get(c) << "\n";
  }
}

std::string config_hash(const BenchConfig& c) {
  // FNV-1a 64
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::string_view s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  };
  for (const KeyDef& d : defs()) {
    if (std::string_view(d.key.name) == "seed" || std::string_view(d.key.name) == "trials") continue;
    mix(d.key.name);
    mix("=");
    mix(d.get(c));
    mix("\n");
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(q * static_cast<double>(v.size()));
  const std::size_t idx = rank < 1 ? 0 : static_cast<std::size_t>(rank) - 1;
  return v[std::min(idx, v.size() - 1)];
}

TrialResult summarize(std::uint32_t trial, RunMetrics m) {
  TrialResult r;
  r.trial = trial;
  r.tput_tps = m.throughput_tps();
  r.p50_ms = percentile(m.client_latency_ms, 0.50);
  r.p99_ms = percentile(m.client_latency_ms, 0.99);
  if (!m.timings.empty()) {
    std::size_t fit = 0;
    for (const BatchTimings& t : m.timings) {
      r.t_pl_ms += t.t_pl_ms;
      r.t_deliv_ms += t.t_deliv_ms;
      r.t_ex_ms += t.t_ex_ms;
      r.t_repl_ms += t.t_repl_ms;
      r.t_c_ms += t.t_c_ms;
      r.batch_latency_ms += t.measured_ms;
      const LatencyReport lr = latency_decompose(t);
      if (lr.predicted_ms > 0 && std::abs(lr.ratio - 1.0) <= 0.2) ++fit;
    }
    const double n = static_cast<double>(m.timings.size());
    r.t_pl_ms /= n;
    r.t_deliv_ms /= n;
    r.t_ex_ms /= n;
    r.t_repl_ms /= n;
    r.t_c_ms /= n;
    r.batch_latency_ms /= n;
    r.model_fit = static_cast<double>(fit) / n;
  }
  r.metrics = std::move(m);
  return r;
}

TrialResult run_trial(const BenchConfig& c, std::uint32_t trial) {
  c.validate();
  WorkloadConfig wc = c.workload;
  wc.seed = c.workload.seed + trial;
  Cluster cluster(cluster_config(c));
  std::vector<WorkloadGenerator> gens;
  const std::uint32_t planners = c.cluster.planners;
  for (std::uint32_t i = 0; i < c.workload.partitions * planners; ++i) gens.emplace_back(wc, i);
  // Each planner's client stream is only touched by that planner's feeder.
  TxnSource source = [&](std::uint32_t col, std::uint32_t t) { return gens[col * planners + t].next(); };
  if (c.warmup_batches > 0) cluster.run(source, SegmentOptions{c.warmup_batches, c.prefill});
  return summarize(trial, cluster.run(source, SegmentOptions{c.measure_batches, c.prefill}));
}

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw SchemaError("CSV is missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c = {"tput_tps",     "p50_ms",           "p99_ms",          "t_pl_ms",    "t_deliv_ms",
                                  "t_ex_ms",      "t_repl_ms",        "t_c_ms",          "batch_latency_ms",
                                  "model_fit",    "payload_raw_bytes", "payload_comp_bytes", "payloads",
                                  "committed",    "aborted",          "planned",         "rejected",   "wall_s"};
    for (std::size_t k = 0; k < kMessageKinds; ++k) {
      std::string name = to_string(static_cast<MessageKind>(k));
      std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
      c.push_back("msgs_" + name);
    }
    c.push_back("overhead");
    return c;
  }();
  return cols;
}

std::vector<std::string> csv_header() {
  std::vector<std::string> h = {"config_hash", "trial"};
  for (const KeyDef& d : defs()) h.push_back(d.key.name);
  for (const std::string& m : metric_columns()) h.push_back(m);
  return h;
}

std::vector<std::string> csv_row(const BenchConfig& c, const TrialResult& r) {
  std::vector<std::string> row = {config_hash(c), std::to_string(r.trial)};
  for (const KeyDef& d : defs()) row.push_back(d.get(c));
  const RunMetrics& m = r.metrics;
  for (double v : {r.tput_tps, r.p50_ms, r.p99_ms, r.t_pl_ms, r.t_deliv_ms, r.t_ex_ms, r.t_repl_ms, r.t_c_ms,
                   r.batch_latency_ms}) {
    row.push_back(fmt_fixed(v, 3));
  }
  row.push_back(fmt_fixed(r.model_fit, 4));
  for (std::uint64_t v : {m.payload_raw_bytes, m.payload_wire_bytes, m.payloads, m.committed, m.aborted, m.planned,
                          m.rejected}) {
    row.push_back(std::to_string(v));
  }
  row.push_back(fmt_fixed(m.wall_seconds, 4));
  for (std::uint64_t v : m.messages) row.push_back(std::to_string(v));
  row.push_back("");  // overhead
  return row;
}

void fill_overhead(CsvTable& t) {
  if (t.rows.empty()) return;
  const std::size_t rf_col = t.column("rf");
  const std::size_t tput_col = t.column("tput_tps");
  const std::size_t oh_col = t.column("overhead");
  const std::size_t first_key = t.column("trial") + 1;
  const std::size_t last_key = t.column(metric_columns().front());
  // Identity of a row's config apart from rf and seed.
  auto identity = [&](const std::vector<std::string>& row) {
    std::string id;
    for (std::size_t i = first_key; i < last_key; ++i) {
      if (i == rf_col || t.header[i] == "seed") continue;
      id += row[i] + '\x1f';
    }
    return id;
  };
  std::map<std::string, std::pair<double, int>> base;
  for (const auto& row : t.rows) {
    if (row[rf_col] != "0") continue;
    auto& [sum, n] = base[identity(row)];
    sum += std::stod(row[tput_col]);
    ++n;
  }
  for (auto& row : t.rows) {
    auto it = base.find(identity(row));
    if (it == base.end() || it->second.first <= 0) continue;
    const double b = it->second.first / it->second.second;
    row[oh_col] = fmt_fixed(1.0 - std::stod(row[tput_col]) / b, 4);
  }
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

void write_csv(std::ostream& out, const CsvTable& t) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
    out << "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) return t;
  t.header = csv_split(line);
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = csv_split(line);
    if (cells.size() != t.header.size()) {
      throw SchemaError("CSV row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

namespace {

struct Group {
  std::string hash;
  std::vector<std::string> config;  // one value per config column
  std::map<std::string, double> mean;
  int trials = 0;
};

bool numeric(const std::string& s) {
  if (s.empty()) return false;
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                           const std::vector<std::string>& xs, const std::vector<double>& ys) {
  const double W = 640, H = 400, L = 80, R = 20, T = 40, B = 60;
  bool xnum = std::all_of(xs.begin(), xs.end(), numeric);
  std::vector<double> xv;
  for (std::size_t i = 0; i < xs.size(); ++i) xv.push_back(xnum ? std::stod(xs[i]) : static_cast<double>(i));
  const double xmin = *std::min_element(xv.begin(), xv.end());
  double xmax = *std::max_element(xv.begin(), xv.end());
  if (xmax == xmin) xmax = xmin + 1;
  double ymax = *std::max_element(ys.begin(), ys.end());
  if (ymax <= 0) ymax = 1;
  ymax *= 1.1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - y / ymax * (H - T - B); };

  std::ostringstream o;
  o << std::fixed << std::setprecision(1);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = ymax * i / 4;
    o << "<line x1=\"" << L - 4 << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << L - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(std::round(y * 100) / 100)
      << "</text>\n";
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    o << "<text x=\"" << px(xv[i]) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << xs[i] << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  o << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xv[a] < xv[b]; });
  o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (std::size_t i : order) o << px(xv[i]) << "," << py(ys[i]) << " ";
  o << "\"/>\n";
  for (std::size_t i : order) o << "<circle cx=\"" << px(xv[i]) << "\" cy=\"" << py(ys[i]) << "\" r=\"4\" fill=\"#1f77b4\"/>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace

Report build_report(const CsvTable& t) {
  Report rep;
  if (t.rows.empty()) {
    rep.warnings.push_back("CSV has no rows; nothing to report");
    return rep;
  }
  const std::size_t hash_col = t.column("config_hash");
  std::vector<std::size_t> cfg_cols;
  for (const ConfigKey& k : config_keys()) cfg_cols.push_back(t.column(k.name));
  const std::vector<std::string> shown = {"tput_tps", "p50_ms", "p99_ms", "t_pl_ms", "t_deliv_ms", "t_ex_ms",
                                          "t_repl_ms", "t_c_ms", "payload_raw_bytes", "payload_comp_bytes",
                                          "committed", "aborted"};
  std::map<std::string, std::size_t> metric_idx;
  for (const std::string& m : shown) metric_idx[m] = t.column(m);
  const std::size_t oh_col = t.column("overhead");

  std::vector<Group> groups;
  std::map<std::string, double> oh_sum;
  std::map<std::string, int> oh_n;
  for (const auto& row : t.rows) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.hash == row[hash_col]; });
    if (it == groups.end()) {
      Group g;
      g.hash = row[hash_col];
      for (std::size_t c : cfg_cols) g.config.push_back(row[c]);
      groups.push_back(std::move(g));
      it = std::prev(groups.end());
    }
    for (const auto& [name, idx] : metric_idx) {
      if (!numeric(row[idx])) throw SchemaError("column '" + name + "' holds a non-numeric value '" + row[idx] + "'");
      it->mean[name] += std::stod(row[idx]);
    }
    if (numeric(row[oh_col])) {
      oh_sum[it->hash] += std::stod(row[oh_col]);
      ++oh_n[it->hash];
    }
    ++it->trials;
  }
  for (Group& g : groups) {
    for (auto& [name, v] : g.mean) v /= g.trials;
  }

  // Config keys that differ between groups form the sweep axis.
  std::vector<std::size_t> varying;
  for (std::size_t i = 0; i < cfg_cols.size(); ++i) {
    if (std::string_view(config_keys()[i].name) == "seed") continue;
    for (const Group& g : groups) {
      if (g.config[i] != groups.front().config[i]) {
        varying.push_back(i);
        break;
      }
    }
  }
  std::string axis = "config";
  if (!varying.empty()) {
    axis.clear();
    for (std::size_t i : varying) axis += (axis.empty() ? "" : "/") + std::string(config_keys()[i].name);
  }
  auto label = [&](const Group& g) {
    if (varying.empty()) return g.hash;
    std::string s;
    for (std::size_t i : varying) s += (s.empty() ? "" : "/") + g.config[i];
    return s;
  };

  std::ostringstream md;
  md << "| " << axis << " | trials";
  for (const std::string& m : shown) md << " | " << m;
  md << " | overhead |\n|---|---";
  for (std::size_t i = 0; i <= shown.size(); ++i) md << "|---";
  md << "|\n";
  for (const Group& g : groups) {
    md << "| " << label(g) << " | " << g.trials;
    for (const std::string& m : shown) {
      const bool counter = m.find("bytes") != std::string::npos || m == "committed" || m == "aborted";
      md << " | " << fmt_fixed(g.mean.at(m), counter ? 0 : 2);
    }
    md << " | " << (oh_n[g.hash] ? fmt_fixed(oh_sum[g.hash] / oh_n[g.hash], 3) : "") << " |\n";
  }
  rep.markdown = md.str();

  if (groups.size() >= 2) {
    std::vector<std::string> xs;
    std::vector<double> tput, p99;
    for (const Group& g : groups) {
      xs.push_back(label(g));
      tput.push_back(g.mean.at("tput_tps"));
      p99.push_back(g.mean.at("p99_ms"));
    }
    std::string stem = axis;
    std::replace(stem.begin(), stem.end(), '/', '_');
    rep.charts.emplace_back("tput_vs_" + stem + ".svg",
                            svg_line_chart("Throughput vs " + axis, axis, "committed txn/s", xs, tput));
    rep.charts.emplace_back("p99_vs_" + stem + ".svg", svg_line_chart("p99 latency vs " + axis, axis, "ms", xs, p99));
    for (const auto& c : rep.charts) rep.markdown += "\n![" + c.first + "](" + c.first + ")\n";
  }
  return rep;
}

void write_report(const Report& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.md") << r.markdown;
  for (const auto& [name, svg] : r.charts) std::ofstream(dir / name) << svg;
}

void run_experiment(const BenchConfig& c, CsvTable& table, const Progress& progress) {
  c.validate();
  if (table.header.empty()) table.header = csv_header();
  for (std::uint32_t trial = 0; trial < c.trials; ++trial) {
    TrialResult r = run_trial(c, trial);
    if (progress) {
      std::ostringstream o;
      o << config_hash(c) << " trial " << trial << ": " << fmt_fixed(r.tput_tps, 0) << " txn/s, p50 "
        << fmt_fixed(r.p50_ms, 2) << " ms, p99 " << fmt_fixed(r.p99_ms, 2) << " ms, committed "
        << r.metrics.committed << ", aborted " << r.metrics.aborted;
      progress(o.str());
    }
    table.rows.push_back(csv_row(c, r));
  }
}

bool run_property_suites(std::uint64_t seed, std::uint32_t runs, std::ostream& out) {
  std::mt19937_64 rng(seed);
  bool all = true;
  auto report = [&](const char* name, std::uint32_t passed, std::uint32_t total, const std::string& detail) {
    out << (passed == total ? "PASS " : "FAIL ") << name << " " << passed << "/" << total;
    if (!detail.empty()) out << " (" << detail << ")";
    out << "\n";
    all = all && passed == total;
  };

  auto small_config = [&](std::uint32_t rf) {
    std::uniform_int_distribution<int> pick(0, 2);
    ClusterConfig cc;
    cc.partitions = std::array{1u, 2u, 4u}[pick(rng)];
    cc.planners = 1 + pick(rng) % 2;
    cc.executors = std::array{1u, 2u, 4u}[pick(rng)];
    cc.rf = rf;
    cc.records_per_partition = std::max<std::uint64_t>(1, 64 / cc.partitions);
    cc.record_size = 16;
    cc.batch_size = 10 + rng() % 60;
    cc.record_outcomes = true;
    cc.trace = true;
    cc.watchdog = std::chrono::milliseconds(10'000);
    return cc;
  };
  auto workload_for = [&](const ClusterConfig& cc) {
    WorkloadConfig wc;
    wc.partitions = cc.partitions;
    wc.records_per_partition = cc.records_per_partition;
    wc.record_size = cc.record_size;
    wc.ops_per_txn = 1 + static_cast<std::uint32_t>(rng() % 6);
    wc.mpt_fraction = cc.partitions > 1 ? 0.5 : 0.0;
    wc.partitions_per_mpt = std::min<std::uint32_t>(2, std::min(cc.partitions, wc.ops_per_txn));
    if (wc.partitions_per_mpt < 2) wc.mpt_fraction = 0;
    wc.write_fraction = 0.4;
    wc.rmw_fraction = 0.3 * static_cast<double>(rng() % 101) / 100;
    wc.abort_fraction = 0.2 * static_cast<double>(rng() % 101) / 100;
    wc.zipf_theta = 0.5;
    wc.seed = rng();
    return wc;
  };
  struct Feed {
    std::vector<WorkloadGenerator> gens;
    std::uint32_t planners;
    Feed(const WorkloadConfig& wc, std::uint32_t pl) : planners(pl) {
      for (std::uint32_t i = 0; i < wc.partitions * pl; ++i) gens.emplace_back(wc, i);
    }
    RunMetrics run(Cluster& cluster, std::uint64_t batches) {
      return cluster.run([&](std::uint32_t col, std::uint32_t t) { return gens[col * planners + t].next(); },
                         SegmentOptions{batches, true});
    }
  };

  {
    std::uint32_t ok_oracle = 0, ok_order = 0, ok_commit = 0;
    std::string d1, d2, d3;
    for (std::uint32_t i = 0; i < runs; ++i) {
      ClusterConfig cc = small_config(static_cast<std::uint32_t>(rng() % 2));
      WorkloadConfig wc = workload_for(cc);
      try {
        Cluster cluster(cc);
        Feed(wc, cc.planners).run(cluster, 3);
        const auto planned = cluster.planned_transactions();
        const SerialOutcome ser = serial_execute(planned, cc.partitions, cc.records_per_partition, cc.record_size);
        auto tally = [](const CheckResult& r, std::uint32_t& ok, std::string& detail) {
          if (r.ok) {
            ++ok;
          } else if (detail.empty()) {
            detail = r.detail;
          }
        };
        tally(check_against_serial(cluster, 0, ser), ok_oracle, d1);
        const auto tr = cluster.trace();
        tally(check_execution_order(tr, planned, cc.rows()), ok_order, d2);
        tally(check_commit_order(tr, planned, cluster.decisions(0), 0), ok_commit, d3);
      } catch (const std::exception& e) {
        if (d1.empty()) d1 = e.what();
      }
    }
    report("serial-oracle", ok_oracle, runs, d1);
    report("execution-order", ok_order, runs, d2);
    report("commit-order", ok_commit, runs, d3);
  }

  {
    std::uint32_t ok = 0;
    std::string detail;
    const std::uint32_t n = std::max<std::uint32_t>(1, runs / 5);
    for (std::uint32_t i = 0; i < n; ++i) {
      ClusterConfig cc = small_config(2);
      WorkloadConfig wc = workload_for(cc);
      try {
        Cluster cluster(cc);
        Feed(wc, cc.planners).run(cluster, 5);
        if (cluster.replicas_converged()) {
          ++ok;
        } else if (detail.empty()) {
          detail = "replica stores differ";
        }
      } catch (const std::exception& e) {
        if (detail.empty()) detail = e.what();
      }
    }
    report("convergence", ok, n, detail);
  }

  {
    std::uint32_t ok = 0;
    std::string detail;
    const std::uint32_t n = std::max<std::uint32_t>(1, runs / 5);
    for (std::uint32_t i = 0; i < n; ++i) {
      ClusterConfig cc = small_config(2);
      cc.checkpoint_interval = 2;
      WorkloadConfig wc = workload_for(cc);
      try {
        Cluster ref(cc);
        Feed(wc, cc.planners).run(ref, 6);
        Cluster crashed(cc);
        crashed.script_crash(CrashScript{NodeId{1, 0}, 3});
        Feed feed(wc, cc.planners);
        feed.run(crashed, 4);
        crashed.fail_over(0);
        feed.run(crashed, 2);
        bool same = crashed.replicas_converged();
        for (std::uint32_t c = 0; c < cc.partitions; ++c) {
          same = same && crashed.node(NodeId{0, c}).store() == ref.node(NodeId{0, c}).store();
        }
        if (same) {
          ++ok;
        } else if (detail.empty()) {
          detail = "recovered state differs from the uninterrupted run";
        }
      } catch (const std::exception& e) {
        if (detail.empty()) detail = e.what();
      }
    }
    report("recovery", ok, n, detail);
  }
  return all;
}

}  // namespace qrstore
