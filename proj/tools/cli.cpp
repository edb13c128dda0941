#include "cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "torusim/faultinject.hpp"

namespace torusim::cli {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"topology", {"dims"}},
    {"link",
     {"mtu", "header_bytes", "crc_bytes", "bandwidth_bits_per_cycle", "hop_latency", "ring_capacity", "service_net",
      "retransmit", "max_attempts", "ttl"}},
    {"lofamo",
     {"enabled", "heartbeat_period", "t_wd", "t_check", "keepalive_period", "keepalive_grace", "threshold",
      "degrade_ratio", "controller_period", "mgmt_latency"}},
    {"dal", {"tile_capacity", "spares", "ack_timeout", "watchdog_period", "drain_timeout"}},
    {"dpsnn",
     {"excitatory_fraction", "max_delay", "w_exc", "w_inh", "thalamic_current", "plastic", "a_plus", "a_minus",
      "tau_plus", "tau_minus", "w_max"}},
    {"stencil", {"constant"}},
    {"run", {"app", "fault", "seed", "shuffle", "until", "trace", "out"}},
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Section {
 public:
  Section(const pt::ptree* t, std::string name) : t_(t), name_(std::move(name)) {}

  std::optional<std::string> raw(const std::string& key) const {
    if (!t_) return std::nullopt;
    auto v = t_->get_optional<std::string>(key);
    return v ? std::optional<std::string>(*v) : std::nullopt;
  }

  template <typename T>
  void get(const std::string& key, T& into) const {
    auto v = raw(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (*v == "true" || *v == "1" || *v == "yes") into = true;
      else if (*v == "false" || *v == "0" || *v == "no") into = false;
      else fail(key, *v, "a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      char* end = nullptr;
      const double d = std::strtod(v->c_str(), &end);
      if (v->empty() || *end != '\0') fail(key, *v, "a number");
      into = static_cast<T>(d);
    } else {
      T x{};
      auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
      if (ec != std::errc() || p != v->data() + v->size()) fail(key, *v, "a non-negative integer");
      into = x;
    }
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& v, const char* want) const {
    throw ConfigError("[" + name_ + "] " + key + " = '" + v + "' is not " + want);
  }
  const pt::ptree* t_;
  std::string name_;
};

std::set<TraceCategory> parse_categories(const std::string& s) {
  std::set<TraceCategory> out;
  if (s == "none") return out;
  if (s == "all") {
    for (std::size_t i = 0; i < kTraceCategories; ++i) out.insert(static_cast<TraceCategory>(i));
    return out;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    TraceCategory c;
    if (!parse_trace_category(tok, c)) throw ConfigError("unknown trace category '" + tok + "'");
    out.insert(c);
  }
  return out;
}

std::string resolve(const std::string& base_file, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base_file).parent_path() / p).lexically_normal().string();
}

std::string item_text(const Item& it) {
  if (it.size() == 8) return std::to_string(u64_item(it));
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (auto b : it) os << std::setw(2) << static_cast<unsigned>(b);
  return os.str();
}

bool all_behaviors(const ProcessNetwork& net, const std::string& name) {
  if (net.processes.empty()) return false;
  for (const auto& p : net.processes)
    if (p.behavior.name != name) return false;
  return true;
}

std::optional<StencilConfig> stencil_of(const ProcessNetwork& net, const StencilConfig& base) {
  if (!all_behaviors(net, "stencil") || net.processes[0].behavior.args.size() != 11) return std::nullopt;
  StencilConfig cfg = base;
  const auto& a = net.processes[0].behavior.args;
  for (int i = 0; i < 4; ++i) {
    cfg.dims[i] = static_cast<std::uint32_t>(std::stoul(a[i]));
    cfg.split[i] = static_cast<std::uint32_t>(std::stoul(a[4 + i]));
  }
  cfg.iterations = static_cast<std::uint32_t>(std::stoul(a[8]));
  cfg.seed = std::stoull(a[9]);
  return cfg;
}

FaultSpec load_faults(const std::string& path, const TorusGeometry& g) {
  FaultSpec spec;
  try {
    spec = parse_fault_spec(read_file(path));
    validate_fault_spec(spec, g);
  } catch (const SpecError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec;
}

AppSpec load_app(const std::string& path, const BehaviorRegistry& reg) {
  try {
    return parse_app_spec(read_file(path), reg);
  } catch (const SpecError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig load_run_config(const std::string& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [sec, sub] : tree) {
    auto known = kKnownKeys.find(sec);
    if (known == kKnownKeys.end() || sub.empty())
      throw ConfigError(path + ": unknown section or stray key '" + sec + "'");
    for (const auto& [key, v] : sub)
      if (!known->second.count(key)) throw ConfigError(path + ": unknown key [" + sec + "] " + key);
  }
  auto section = [&](const std::string& name) {
    auto child = tree.get_child_optional(name);
    return Section(child ? &*child : nullptr, name);
  };

  RunConfig cfg;
  cfg.trace = parse_categories("all");
  try {
    if (auto dims = section("topology").raw("dims")) cfg.geometry = TorusGeometry::parse(*dims);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": [topology] dims: " + e.what());
  }

  const Section link = section("link");
  link.get("mtu", cfg.dnp.mtu);
  link.get("header_bytes", cfg.dnp.header_bytes);
  link.get("crc_bytes", cfg.dnp.crc_bytes);
  link.get("bandwidth_bits_per_cycle", cfg.dnp.bandwidth_bits_per_cycle);
  link.get("hop_latency", cfg.dnp.hop_latency);
  link.get("ring_capacity", cfg.dnp.ring_capacity);
  link.get("retransmit", cfg.dnp.retransmit);
  link.get("max_attempts", cfg.dnp.max_attempts);
  link.get("ttl", cfg.dnp.ttl);
  if (auto sn = link.raw("service_net")) {
    if (*sn == "shared") cfg.dnp.service_net = ServiceNet::Shared;
    else if (*sn == "dedicated") cfg.dnp.service_net = ServiceNet::Dedicated;
    else throw ConfigError("[link] service_net must be shared or dedicated");
  }
  if (cfg.dnp.mtu == 0) throw ConfigError("[link] mtu must be positive");
  if (cfg.dnp.bandwidth_bits_per_cycle == 0) throw ConfigError("[link] bandwidth_bits_per_cycle must be positive");
  if (cfg.dnp.ring_capacity == 0) throw ConfigError("[link] ring_capacity must be positive");

  const Section lf = section("lofamo");
  auto& L = cfg.lofamo_cfg;
  lf.get("enabled", cfg.lofamo);
  lf.get("heartbeat_period", L.heartbeat_period);
  lf.get("t_wd", L.t_wd);
  lf.get("t_check", L.t_check);
  lf.get("keepalive_period", L.keepalive_period);
  lf.get("keepalive_grace", L.keepalive_grace);
  lf.get("threshold", L.threshold);
  lf.get("degrade_ratio", L.degrade_ratio);
  lf.get("controller_period", L.controller_period);
  lf.get("mgmt_latency", L.mgmt_latency);
  if (auto e = L.validate(); !e.empty()) throw ConfigError("[lofamo] " + e);
  if (L.heartbeat_period >= L.t_wd) throw ConfigError("[lofamo] heartbeat_period must be below t_wd");

  const Section dal = section("dal");
  dal.get("tile_capacity", cfg.runtime.map.tile_capacity);
  dal.get("spares", cfg.runtime.map.spares);
  dal.get("ack_timeout", cfg.runtime.ack_timeout);
  dal.get("watchdog_period", cfg.runtime.watchdog_period);
  dal.get("drain_timeout", cfg.runtime.drain_timeout);

  const Section dp = section("dpsnn");
  dp.get("excitatory_fraction", cfg.dpsnn.excitatory_fraction);
  dp.get("max_delay", cfg.dpsnn.max_delay);
  dp.get("w_exc", cfg.dpsnn.w_exc);
  dp.get("w_inh", cfg.dpsnn.w_inh);
  dp.get("thalamic_current", cfg.dpsnn.thalamic_current);
  dp.get("plastic", cfg.dpsnn.plastic);
  dp.get("a_plus", cfg.dpsnn.stdp.a_plus);
  dp.get("a_minus", cfg.dpsnn.stdp.a_minus);
  dp.get("tau_plus", cfg.dpsnn.stdp.tau_plus);
  dp.get("tau_minus", cfg.dpsnn.stdp.tau_minus);
  dp.get("w_max", cfg.dpsnn.stdp.w_max);

  double constant = 0;
  const Section st = section("stencil");
  if (st.raw("constant")) {
    st.get("constant", constant);
    cfg.stencil.constant = constant;
  }

  const Section run = section("run");
  if (auto p = run.raw("app")) cfg.app_path = resolve(path, *p);
  if (auto p = run.raw("fault")) cfg.fault_path = resolve(path, *p);
  if (auto p = run.raw("out")) cfg.out_dir = resolve(path, *p);
  run.get("seed", cfg.seed);
  run.get("shuffle", cfg.shuffle);
  run.get("until", cfg.until);
  if (auto t = run.raw("trace")) cfg.trace = parse_categories(*t);

  // The referenced files must parse before anything runs.
  if (!cfg.app_path.empty()) load_app(cfg.app_path, registry_for(cfg));
  if (!cfg.fault_path.empty()) load_faults(cfg.fault_path, cfg.geometry);
  return cfg;
}

BehaviorRegistry registry_for(const RunConfig& cfg) {
  BehaviorRegistry reg = default_registry();
  register_bench_behaviors(reg, cfg.dpsnn, cfg.stencil);
  return reg;
}

// ---------------------------------------------------------------------------

int cmd_run(const RunOptions& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  AppSpec app;
  FaultSpec faults;
  BehaviorRegistry reg;
  fs::path dir;
  try {
    cfg = load_run_config(opt.config);
    if (opt.fault) cfg.fault_path = *opt.fault;
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.until) cfg.until = *opt.until;
    reg = registry_for(cfg);
    if (!cfg.app_path.empty()) app = load_app(cfg.app_path, reg);
    if (!cfg.fault_path.empty()) faults = load_faults(cfg.fault_path, cfg.geometry);
    if (opt.out) dir = *opt.out;
    else if (!cfg.out_dir.empty()) dir = cfg.out_dir;
    else if (const char* env = std::getenv(kOutEnv)) dir = env;
    else dir = "torusim-out";
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  // An explicit --seed beats the fault spec's own seed line.
  const std::uint64_t seed = opt.seed ? *opt.seed : faults.seed.value_or(cfg.seed);

  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream trace_file(dir / "trace.log", std::ios::binary);
  if (ec || !trace_file) {
    err << "config error: cannot write to '" << dir.string() << "'\n";
    return kExitConfig;
  }

  Kernel k(cfg.shuffle);
  Scheduler s(k);
  Trace tr;
  for (std::size_t i = 0; i < kTraceCategories; ++i)
    tr.enable(static_cast<TraceCategory>(i), cfg.trace.count(static_cast<TraceCategory>(i)) != 0);
  tr.set_stream(&trace_file);
  Fabric f(s, cfg.geometry, cfg.dnp, tr);
  std::uint64_t escapes = 0;
  f.on_integrity_alarm = [&](const Packet&) { ++escapes; };

  std::unique_ptr<Lofamo> lf;
  if (cfg.lofamo) lf = std::make_unique<Lofamo>(k, f, tr, cfg.lofamo_cfg);

  // Leading comment: what a later report needs to interpret the records.
  trace_file << "# torusim dims=" << cfg.geometry.to_string() << " bandwidth_bits_per_cycle="
             << cfg.dnp.bandwidth_bits_per_cycle << " seed=" << seed << " until=" << cfg.until;
  if (lf) trace_file << " detection_bound=" << lf->detection_bound();
  trace_file << "\n";

  if (lf) lf->start();
  std::unique_ptr<DalRuntime> rt;
  if (!app.apps.empty()) {
    rt = std::make_unique<DalRuntime>(s, f, tr, app, cfg.runtime, reg);
    if (lf) rt->attach(*lf);
    rt->start();
  }
  FaultInjector inj(k, f, tr,
                    FaultTargets{[&](Rank r) {
                                   if (lf) lf->kill_host(r);
                                   if (rt) rt->kill_host(r);
                                 },
                                 [&](Rank r) {
                                   if (lf) lf->kill_dnp(r);
                                   else f.set_dnp_alive(r, false);
                                 },
                                 [&](Rank r, std::uint32_t code) {
                                   if (lf) lf->critical(r, code);
                                 }},
                    seed);
  inj.arm(faults);

  // Events strictly before the bound run.
  if (cfg.until > 0) k.run_until(cfg.until - 1);
  trace_file.flush();

  const auto& g = cfg.geometry;
  {
    std::ofstream m(dir / "metrics.csv");
    m << "link,packets,wire_bytes,payload_bytes,busy_cycles,utilization\n";
    const double span = static_cast<double>(std::max<SimTime>(cfg.until, 1));
    for (std::size_t i = 0; i < g.link_count(); ++i) {
      const auto& c = f.link_counters(g.link_at(i));
      m << to_string(g.link_at(i)) << ',' << c.packets << ',' << c.wire_bytes << ',' << c.payload_bytes << ','
        << c.busy_cycles << ',' << fmt(static_cast<double>(c.busy_cycles) / span) << '\n';
    }
  }

  std::ostringstream summary;
  const auto& nc = f.counters();
  summary << "simulated " << cfg.until << " cycles on " << g.to_string() << ", seed " << seed << "\n"
          << "packets injected " << nc.injected << " delivered " << nc.delivered << " crc_discarded "
          << nc.crc_discarded << " dropped " << (nc.dropped_probe + nc.dropped_link + nc.dropped_dnp)
          << " undeliverable " << nc.undeliverable << "\n";

  {
    std::ofstream fr(dir / "faults.txt");
    if (lf) {
      fr << "master fault table\n" << lf->master_table().report(g);
      fr << "root causes\n";
      for (const auto& c : lf->root_causes()) fr << "  " << c << "\n";
    } else {
      fr << "fault monitoring disabled\n";
    }
    fr << "injected\n";
    for (const auto& a : inj.log()) fr << "  t=" << a.at << " " << to_string(a.kind) << " " << a.target << " " << a.action << "\n";
  }
  if (lf) {
    const auto flagged = lf->master_table().flagged(g);
    summary << "master table flags " << flagged.size() << " entit" << (flagged.size() == 1 ? "y" : "ies") << "\n";
    for (const auto& s2 : flagged) summary << "  " << s2 << "\n";
  }

  bool failed = false;
  std::vector<std::string> alarms;
  if (rt) {
    alarms = rt->alarms();
    for (const auto& net : app.apps) {
      const auto st = rt->state(net.name);
      failed = failed || st == AppState::Failed;
      const auto items = rt->output(net.name);
      summary << "app " << net.name << " " << to_string(st) << " epoch " << rt->epoch(net.name) << " outputs "
              << items.size() << "\n";
      std::ofstream o(dir / ("output_" + net.name + ".txt"));
      if (all_behaviors(net, "dpsnn")) {
        std::uint64_t reported = 0;
        const auto raster = collect_raster(items, &reported);
        std::ofstream(dir / ("raster_" + net.name + ".txt")) << raster_text(raster);
        o << "spikes " << raster.size() << "\n";
        summary << "  raster " << raster.size() << " spikes\n";
      } else if (auto sc = stencil_of(net, cfg.stencil); sc && st == AppState::Completed) {
        const auto sum = field_checksum(collect_field(*sc, items));
        o << "checksum " << hex64(sum) << "\n";
        summary << "  stencil checksum " << hex64(sum) << "\n";
      } else {
        for (const auto& it : items) o << item_text(it) << "\n";
      }
    }
    for (const auto& r : rt->recoveries())
      summary << "recovery t=" << r.at << " app " << r.app << " epoch " << r.epoch << "\n";
  }
  if (escapes) alarms.push_back(std::to_string(escapes) + " corrupted packet(s) passed CRC");
  for (const auto& a : alarms) summary << "integrity alarm: " << a << "\n";

  summary << "trace " << tr.count() << " records, hash " << hex64(tr.hash()) << "\n";
  std::ofstream(dir / "hash.txt") << "trace " << hex64(tr.hash()) << "\ninjector " << hex64(inj.action_hash()) << "\n";
  std::ofstream(dir / "summary.txt") << summary.str();
  out << summary.str();

  if (!alarms.empty()) return kExitIntegrity;
  if (failed) return kExitAppFailed;
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_validate(const std::vector<std::string>& paths, const TorusGeometry& geometry, std::ostream& out,
                 std::ostream& err) {
  TorusGeometry g = geometry;
  RunConfig defaults;
  BehaviorRegistry reg = registry_for(defaults);
  int rc = kExitOk;
  for (const auto& path : paths) {
    try {
      const std::string ext = fs::path(path).extension().string();
      std::string kind;
      if (ext == ".ini" || ext == ".cfg" || ext == ".conf") kind = "config";
      else if (ext == ".fault") kind = "fault";
      else if (ext == ".app") kind = "app";
      else {
        std::istringstream in(read_file(path));
        std::string line;
        while (std::getline(in, line)) {
          const auto b = line.find_first_not_of(" \t\r");
          if (b == std::string::npos || line[b] == '#' || line[b] == ';') continue;
          if (line[b] == '[') kind = "config";
          else if (line.compare(b, 5, "kind=") == 0 || line.compare(b, 5, "seed=") == 0) kind = "fault";
          else kind = "app";
          break;
        }
        if (kind.empty()) kind = "app";
      }
      if (kind == "config") {
        const RunConfig cfg = load_run_config(path);
        g = cfg.geometry;
        reg = registry_for(cfg);
        out << "# " << path << ": run config, dims=" << g.to_string() << " app=" << cfg.app_path
            << " fault=" << cfg.fault_path << " until=" << cfg.until << "\n";
      } else if (kind == "fault") {
        out << "# " << path << ": fault spec\n" << print_fault_spec(load_faults(path, g));
      } else {
        out << "# " << path << ": app spec\n" << print_app_spec(load_app(path, reg));
      }
    } catch (const ConfigError& e) {
      err << e.what() << "\n";
      rc = kExitConfig;
    }
  }
  return rc;
}

// ---------------------------------------------------------------------------

const std::string* TraceRecord::get(const std::string& key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return &v;
  return nullptr;
}

TraceRecord parse_trace_line(const std::string& line, std::size_t lineno) {
  TraceRecord r;
  std::istringstream in(line);
  std::string tok;
  int n = 0;
  auto number = [&](const std::string& v) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) throw TraceError(lineno, "bad number '" + v + "'");
    return x;
  };
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) {
      // a value with spaces in it
      if (r.fields.empty()) throw TraceError(lineno, "stray token '" + tok + "'");
      r.fields.back().second += " " + tok;
      continue;
    }
    std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    switch (n++) {
      case 0:
        if (key != "t") throw TraceError(lineno, "record must start with t=");
        r.t = number(val);
        break;
      case 1:
        if (key != "seq") throw TraceError(lineno, "missing seq=");
        r.seq = number(val);
        break;
      case 2:
        if (key != "cat" || !parse_trace_category(val, r.cat)) throw TraceError(lineno, "bad category '" + val + "'");
        break;
      case 3:
        if (key != "kind" || val.empty()) throw TraceError(lineno, "missing kind=");
        r.kind = val;
        break;
      default:
        r.fields.emplace_back(std::move(key), std::move(val));
    }
  }
  if (n < 4) throw TraceError(lineno, "truncated record");
  return r;
}

namespace {

std::string expected_entity(const std::string& fault, const std::string& target, const std::string& action,
                            const std::optional<TorusGeometry>& g) {
  unsigned a = 0;
  char dir[3] = {};
  if (target.rfind("tile(", 0) == 0 && std::sscanf(target.c_str(), "tile(%u)", &a) == 1) {
    if (fault == "tile_kill_host") return "tile " + std::to_string(a) + " HOST_DOWN";
    if (fault == "tile_kill_dnp") return "tile " + std::to_string(a) + " DNP_DOWN";
    return "";
  }
  if (std::sscanf(target.c_str(), "link(%u,%2[+-xyz])", &a, dir) != 2) return "";
  const auto d = parse_direction(dir);
  if (!d) return "";
  LinkId l{a, *d};
  if (g && g->valid(a)) l = g->link_at(g->physical_index(l));
  if (fault == "link_kill") return "link " + to_string(l) + " DOWN";
  if (fault == "link_degrade" && action.rfind("degrade x", 0) == 0) return "link " + to_string(l) + " DEGRADED";
  return "";
}

}  // namespace

TraceReport analyze_trace(std::istream& in) {
  TraceReport rep;
  std::optional<TorusGeometry> geom;
  std::map<std::string, std::deque<SimTime>> injected;
  std::string line;
  std::size_t lineno = 0;
  bool have = false;
  SimTime prev_t = 0;
  std::uint64_t prev_seq = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok)
        if (auto eq = tok.find('='); eq != std::string::npos) rep.header[tok.substr(0, eq)] = tok.substr(eq + 1);
      if (auto it = rep.header.find("dims"); it != rep.header.end()) {
        try {
          geom = TorusGeometry::parse(it->second);
        } catch (const std::invalid_argument&) {
          throw TraceError(lineno, "bad dims in header");
        }
      }
      continue;
    }
    const TraceRecord r = parse_trace_line(line, lineno);
    if (have && (r.t < prev_t || r.seq <= prev_seq)) throw TraceError(lineno, "record out of order");
    if (!have) rep.first = r.t;
    have = true;
    prev_t = r.t;
    prev_seq = r.seq;
    rep.last = r.t;
    ++rep.records;

    auto field = [&](const char* k) -> std::string {
      const std::string* v = r.get(k);
      return v ? *v : std::string();
    };
    if (r.kind == "integrity_alarm") ++rep.alarms;
    if (r.cat == TraceCategory::Packet) {
      if (r.kind == "hop") {
        auto& u = rep.links[field("link")];
        const std::uint64_t bytes = std::strtoull(field("bytes").c_str(), nullptr, 10);
        const SimTime ser = std::strtoull(field("ser").c_str(), nullptr, 10);
        if (r.t < u.free_at) ++u.overlaps;
        u.free_at = std::max(u.free_at, r.t + ser);
        ++u.packets;
        u.payload_bytes += bytes;
        u.busy += ser;
      } else if (r.kind == "inject" || r.kind == "deliver") {
        const std::string key =
            field("pkt") + "|" + field("src") + "|" + field("dst") + "|" + field("transfer_id") + "|" + field("seq");
        if (r.kind == "inject") {
          injected[key].push_back(r.t);
        } else if (auto it = injected.find(key); it != injected.end() && !it->second.empty()) {
          const SimTime lat = r.t - it->second.front();
          it->second.pop_front();
          unsigned b = 0;
          while ((SimTime{2} << b) <= lat) ++b;
          ++rep.latency_log2[lat == 0 ? 0 : b];
          ++rep.delivered;
        }
      }
    } else if (r.cat == TraceCategory::Injector && r.kind == "inject") {
      rep.timeline.push_back("t=" + std::to_string(r.t) + " inject " + field("fault") + " " + field("target") + " " +
                             field("action"));
      const std::string entity = expected_entity(field("fault"), field("target"), field("action"), geom);
      if (!entity.empty()) rep.detections.push_back({r.t, field("fault"), field("target"), entity, std::nullopt});
    } else if (r.cat == TraceCategory::Lofamo && r.kind == "flag") {
      const std::string entity = field("entity");
      rep.timeline.push_back("t=" + std::to_string(r.t) + " flag " + entity);
      for (auto& d : rep.detections)
        if (!d.flagged_at && d.entity == entity && d.injected_at <= r.t) d.flagged_at = r.t;
    } else if (r.cat == TraceCategory::App && r.kind == "state") {
      const std::string st = field("state");
      if (st == "COMPLETED" || st == "FAILED")
        rep.completions.push_back("t=" + std::to_string(r.t) + " " + field("app") + " " + st + " epoch " +
                                  field("epoch"));
    }
  }
  return rep;
}

void write_report(const TraceReport& r, std::ostream& out) {
  out << "records " << r.records;
  if (r.records) out << ", t=" << r.first << ".." << r.last;
  out << "\n";
  double bw = 0;
  if (auto it = r.header.find("bandwidth_bits_per_cycle"); it != r.header.end()) bw = std::stod(it->second);

  out << "\nlink utilization (busy cycles / span)\n";
  if (r.links.empty()) out << "  (no traffic)\n";
  for (const auto& [name, u] : r.links) {
    const double goodput = static_cast<double>(u.payload_bytes) * 8.0 / static_cast<double>(r.span());
    out << "  " << std::left << std::setw(8) << name << std::right << " packets " << std::setw(8) << u.packets
        << " bytes " << std::setw(10) << u.payload_bytes << " util " << fmt(static_cast<double>(u.busy) / r.span())
        << " goodput " << fmt(goodput) << " bit/cycle";
    if (bw > 0 && goodput > bw) out << "  ABOVE BANDWIDTH";
    if (u.overlaps) out << "  " << u.overlaps << " overlapping";
    out << "\n";
  }

  out << "\npacket latency (inject to deliver, " << r.delivered << " packets)\n";
  if (r.latency_log2.empty()) out << "  (none)\n";
  for (const auto& [b, n] : r.latency_log2) {
    const SimTime lo = b == 0 ? 0 : SimTime{1} << b;
    out << "  [" << lo << ", " << (SimTime{2} << b) << ") " << n << "\n";
  }

  out << "\nfault timeline\n";
  if (r.timeline.empty()) out << "  (none)\n";
  for (const auto& s : r.timeline) out << "  " << s << "\n";

  if (!r.detections.empty()) {
    std::optional<SimTime> bound;
    if (auto it = r.header.find("detection_bound"); it != r.header.end()) bound = std::stoull(it->second);
    out << "\ndetection latency";
    if (bound) out << " (bound " << *bound << ")";
    out << "\n";
    for (const auto& d : r.detections) {
      out << "  " << d.entity << ": injected t=" << d.injected_at;
      if (d.flagged_at) {
        const SimTime lat = *d.flagged_at - d.injected_at;
        out << " flagged t=" << *d.flagged_at << " latency " << lat;
        if (bound && lat > *bound) out << "  OVER BOUND";
      } else {
        out << " never flagged";
      }
      out << "\n";
    }
  }

  out << "\napplications\n";
  if (r.completions.empty()) out << "  (none finished)\n";
  for (const auto& s : r.completions) out << "  " << s << "\n";
  if (r.alarms) out << "\nintegrity alarms " << r.alarms << "\n";
}

void write_report_csv(const TraceReport& r, std::ostream& out) {
  out << "link,packets,payload_bytes,busy_cycles,utilization,goodput_bits_per_cycle,overlaps\n";
  for (const auto& [name, u] : r.links)
    out << name << ',' << u.packets << ',' << u.payload_bytes << ',' << u.busy << ','
        << fmt(static_cast<double>(u.busy) / r.span()) << ','
        << fmt(static_cast<double>(u.payload_bytes) * 8.0 / static_cast<double>(r.span())) << ',' << u.overlaps << '\n';
}

int cmd_report(const std::string& trace_path, const std::optional<std::string>& csv_path, std::ostream& out,
               std::ostream& err) {
  std::ifstream in(trace_path);
  if (!in) {
    err << "cannot read '" << trace_path << "'\n";
    return kExitConfig;
  }
  TraceReport rep;
  try {
    rep = analyze_trace(in);
  } catch (const TraceError& e) {
    err << trace_path << ": " << e.what() << "\n";
    return kExitConfig;
  }
  write_report(rep, out);
  if (csv_path) {
    std::ofstream csv(*csv_path);
    if (!csv) {
      err << "cannot write '" << *csv_path << "'\n";
      return kExitConfig;
    }
    write_report_csv(rep, csv);
  }
  return kExitOk;
}

}  // namespace torusim::cli
