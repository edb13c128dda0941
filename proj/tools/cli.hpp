#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "torusim/bench.hpp"
#include "torusim/dnp.hpp"
#include "torusim/lofamo.hpp"
#include "torusim/trace.hpp"

namespace torusim::cli {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitAppFailed = 3, kExitIntegrity = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run needs, from an INI file:
///
///   [topology]  dims=2x2x2
///   [link]      mtu, header_bytes, crc_bytes, bandwidth_bits_per_cycle, hop_latency,
///               ring_capacity, service_net=shared|dedicated, retransmit, max_attempts, ttl
///   [lofamo]    enabled, heartbeat_period, t_wd, t_check, keepalive_period, keepalive_grace,
///               threshold, degrade_ratio, controller_period, mgmt_latency
///   [dal]       tile_capacity, spares, ack_timeout, watchdog_period, drain_timeout
///   [dpsnn]     excitatory_fraction, max_delay, w_exc, w_inh, thalamic_current, plastic,
///               a_plus, a_minus, tau_plus, tau_minus, w_max
///   [stencil]   constant
///   [run]       app, fault, seed, shuffle, until, trace, out
///
/// Paths are relative to the config file. `trace` lists categories
/// (comma separated) or says `all` / `none`.
struct RunConfig {
  TorusGeometry geometry{2, 2, 2};
  DnpConfig dnp;
  bool lofamo = true;
  LofamoConfig lofamo_cfg;
  RuntimeConfig runtime;
  DpsnnConfig dpsnn;
  StencilConfig stencil;
  std::string app_path;
  std::string fault_path;
  std::uint64_t seed = 1;
  std::uint64_t shuffle = 0;
  SimTime until = 10'000'000;
  std::set<TraceCategory> trace;
  std::string out_dir;
};

/// Reads and checks a config. Throws ConfigError.
RunConfig load_run_config(const std::string& path);

/// Registry with the benchmark behaviors configured from `cfg`.
BehaviorRegistry registry_for(const RunConfig& cfg);

struct RunOptions {
  std::string config;
  std::optional<std::string> fault;
  std::optional<std::uint64_t> seed;
  std::optional<SimTime> until;
  std::optional<std::string> out;
};

/// Output directory used when neither --out nor the config names one.
inline constexpr const char* kOutEnv = "TORUSIM_OUT";

/// Writes trace.log, metrics.csv, faults.txt, hash.txt and one output file
/// per application into the output directory. Config problems are reported
/// before anything is simulated or written.
int cmd_run(const RunOptions& opt, std::ostream& out, std::ostream& err);

/// Parses run configs, app specs and fault specs, printing canonical forms.
/// Fault specs are checked against `geometry` unless a config given earlier
/// in the list names its own.
int cmd_validate(const std::vector<std::string>& paths, const TorusGeometry& geometry, std::ostream& out,
                 std::ostream& err);

// ---------------------------------------------------------------------------
// Trace analysis

struct TraceRecord {
  SimTime t = 0;
  std::uint64_t seq = 0;
  TraceCategory cat = TraceCategory::Packet;
  std::string kind;
  std::vector<std::pair<std::string, std::string>> fields;

  const std::string* get(const std::string& key) const;
};

class TraceError : public std::runtime_error {
 public:
  TraceError(std::size_t line, const std::string& msg)
      : std::runtime_error("trace line " + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

TraceRecord parse_trace_line(const std::string& line, std::size_t lineno);

struct LinkUse {
  std::uint64_t packets = 0;
  std::uint64_t payload_bytes = 0;
  SimTime busy = 0;
  std::uint64_t overlaps = 0;  // packets that started while the link was busy
  SimTime free_at = 0;
};

struct Detection {
  SimTime injected_at = 0;
  std::string fault;
  std::string target;
  std::string entity;  // what the master table should flag
  std::optional<SimTime> flagged_at;
};

struct TraceReport {
  std::size_t records = 0;
  SimTime first = 0, last = 0;
  std::map<std::string, std::string> header;  // from the leading comment line
  std::map<std::string, LinkUse> links;
  std::map<unsigned, std::uint64_t> latency_log2;  // bucket k holds [2^k, 2^(k+1)) cycles
  std::uint64_t delivered = 0;
  std::vector<std::string> timeline;  // injections and master flags in order
  std::vector<Detection> detections;
  std::vector<std::string> completions;
  std::uint64_t alarms = 0;

  SimTime span() const { return last > first ? last - first : 1; }
};

/// Throws TraceError naming the first bad line.
TraceReport analyze_trace(std::istream& in);
void write_report(const TraceReport& r, std::ostream& out);
void write_report_csv(const TraceReport& r, std::ostream& out);

int cmd_report(const std::string& trace_path, const std::optional<std::string>& csv_path, std::ostream& out,
               std::ostream& err);

}  // namespace torusim::cli
