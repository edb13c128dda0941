#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "torusim/faultinject.hpp"

using namespace torusim;
using namespace torusim::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("torusim_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path / name) << text;
    return path / name;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kPipeline =
    "app name=pipe\n"
    "process app=pipe id=src behavior=source(300)\n"
    "process app=pipe id=flt behavior=identity\n"
    "process app=pipe id=snk behavior=sink\n"
    "channel app=pipe src=src dst=flt capacity=4\n"
    "channel app=pipe src=flt dst=snk capacity=4\n"
    "event at=0 event=start(pipe)\n";

std::string config(const std::string& extra_run = "", const std::string& extra = "") {
  return "[topology]\ndims = 2x2x2\n" + extra + "\n[run]\napp = pipe.app\nuntil = 200000\n" + extra_run;
}

int run(const RunOptions& o, std::string* out = nullptr, std::string* err = nullptr) {
  std::ostringstream so, se;
  const int rc = cmd_run(o, so, se);
  if (out) *out = so.str();
  if (err) *err = se.str();
  return rc;
}

}  // namespace

TEST_CASE("same config and seed replay to identical artifacts") {
  TempDir d("replay");
  d.write("pipe.app", kPipeline);
  d.write("kill.fault", "kind=link_drop where=link(0,+x) when=window 0..100000 prob=0.3\n");
  const auto cfg = d.write("run.ini", config("fault = kill.fault\nseed = 5\n"));
  RunOptions a{cfg.string(), {}, {}, {}, (d.path / "a").string()};
  RunOptions b = a;
  b.out = (d.path / "b").string();
  REQUIRE(run(a) == kExitOk);
  REQUIRE(run(b) == kExitOk);
  for (const char* f : {"trace.log", "hash.txt", "metrics.csv", "faults.txt", "summary.txt", "output_pipe.txt"}) {
    CAPTURE(f);
    CHECK(slurp(d.path / "a" / f) == slurp(d.path / "b" / f));
  }
  CHECK(slurp(d.path / "a" / "output_pipe.txt").size() > 0);

  // a different seed changes which probes drop
  RunOptions c = a;
  c.out = (d.path / "c").string();
  c.seed = 6;
  REQUIRE(run(c) == kExitOk);
  CHECK(slurp(d.path / "a" / "hash.txt") != slurp(d.path / "c" / "hash.txt"));
  CHECK(slurp(d.path / "a" / "output_pipe.txt") == slurp(d.path / "c" / "output_pipe.txt"));
}

TEST_CASE("missing fault spec is a config error with no artifacts") {
  TempDir d("missing");
  d.write("pipe.app", kPipeline);
  const auto cfg = d.write("run.ini", config());
  RunOptions o{cfg.string(), (d.path / "nope.fault").string(), {}, {}, (d.path / "out").string()};
  std::string err;
  CHECK(run(o, nullptr, &err) == kExitConfig);
  CHECK(err.find("nope.fault") != std::string::npos);
  CHECK_FALSE(fs::exists(d.path / "out"));
}

TEST_CASE("config errors are named") {
  TempDir d("cfgerr");
  d.write("pipe.app", kPipeline);
  auto expect = [&](const std::string& text, const std::string& fragment) {
    CAPTURE(text);
    const auto p = d.write("bad.ini", text);
    try {
      load_run_config(p.string());
      FAIL("accepted");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect("[topology]\ndims = 2x0x2\n", "dims");
  expect("[topology]\nsize = 3\n", "size");
  expect("[warp]\nspeed = 9\n", "warp");
  expect("[link]\nmtu = lots\n", "mtu");
  expect("[link]\nmtu = 0\n", "mtu");
  expect("[lofamo]\nheartbeat_period = 10000\nt_wd = 10000\n", "heartbeat");
  expect("[run]\napp = missing.app\n", "missing.app");
  expect("[run]\ntrace = packet,gossip\n", "gossip");
  d.write("broken.app", "app name=x\nprocess app=x id=a behavior=teleport\n");
  expect("[run]\napp = broken.app\n", "line 2");
}

TEST_CASE("config values reach the run") {
  TempDir d("values");
  d.write("pipe.app", kPipeline);
  const auto p = d.write("run.ini",
                         "[topology]\ndims = 4x2x2\n[link]\nservice_net = dedicated\nttl = 9\n"
                         "[lofamo]\nenabled = false\nt_wd = 20000\n[dal]\nspares = 2\n"
                         "[dpsnn]\nplastic = false\nw_max = 7.5\n[stencil]\nconstant = 2.5\n"
                         "[run]\napp = pipe.app\nseed = 42\nshuffle = 3\nuntil = 77\ntrace = app,lofamo\n");
  const RunConfig c = load_run_config(p.string());
  CHECK(c.geometry.to_string() == "4x2x2");
  CHECK(c.dnp.service_net == ServiceNet::Dedicated);
  CHECK(c.dnp.ttl == 9);
  CHECK_FALSE(c.lofamo);
  CHECK(c.lofamo_cfg.t_wd == 20000);
  CHECK(c.runtime.map.spares == 2);
  CHECK_FALSE(c.dpsnn.plastic);
  CHECK(c.dpsnn.stdp.w_max == 7.5);
  CHECK(c.stencil.constant == 2.5);
  CHECK(c.seed == 42);
  CHECK(c.shuffle == 3);
  CHECK(c.until == 77);
  CHECK(c.trace == std::set<TraceCategory>{TraceCategory::App, TraceCategory::Lofamo});
  CHECK(fs::path(c.app_path) == (d.path / "pipe.app").lexically_normal());
}

TEST_CASE("until 0 gives an empty trace") {
  TempDir d("until");
  d.write("pipe.app", kPipeline);
  const auto cfg = d.write("run.ini", config());
  RunOptions o{cfg.string(), {}, {}, SimTime{0}, (d.path / "out").string()};
  REQUIRE(run(o) == kExitOk);
  std::istringstream trace(slurp(d.path / "out" / "trace.log"));
  const TraceReport r = analyze_trace(trace);
  CHECK(r.records == 0);
  CHECK(r.header.count("dims") == 1);
}

TEST_CASE("output directory falls back to the environment") {
  TempDir d("env");
  d.write("pipe.app", kPipeline);
  const auto cfg = d.write("run.ini", config());
  ::setenv(kOutEnv, (d.path / "from_env").c_str(), 1);
  RunOptions o{cfg.string(), {}, {}, SimTime{1000}, {}};
  CHECK(run(o) == kExitOk);
  ::unsetenv(kOutEnv);
  CHECK(fs::exists(d.path / "from_env" / "trace.log"));
}

TEST_CASE("a failed application exits 3") {
  TempDir d("failed");
  StencilConfig sc;
  sc.split = {2, 2, 2, 2};  // 16 blocks, one per tile, only 8 tiles
  d.write("st.app", print_app_spec(build_stencil(sc)));
  const auto cfg = d.write("run.ini", "[dal]\ntile_capacity = 1\n[run]\napp = st.app\nuntil = 100000\n");
  std::string out;
  CHECK(run({cfg.string(), {}, {}, {}, (d.path / "out").string()}, &out) == kExitAppFailed);
  CHECK(out.find("FAILED") != std::string::npos);
}

TEST_CASE("stencil and dpsnn runs report their results") {
  TempDir d("bench");
  StencilConfig sc;
  sc.split = {2, 2, 2, 1};
  d.write("st.app", print_app_spec(build_stencil(sc)));
  DpsnnConfig dc;
  dc.neurons = 200;
  dc.synapses_per_neuron = 20;
  dc.partitions = 4;
  dc.duration_ms = 100;
  d.write("dp.app", print_app_spec(build_dpsnn(dc)));
  const auto st = d.write("st.ini", "[dal]\ntile_capacity = 1\n[run]\napp = st.app\nuntil = 200000\n");
  const auto dp = d.write("dp.ini", "[dal]\ntile_capacity = 1\n[run]\napp = dp.app\nuntil = 200000\n");
  REQUIRE(run({st.string(), {}, {}, {}, (d.path / "st").string()}) == kExitOk);
  REQUIRE(run({dp.string(), {}, {}, {}, (d.path / "dp").string()}) == kExitOk);

  const StencilResult ref = run_stencil(sc, {});
  CHECK(slurp(d.path / "st" / "output_stencil.txt") == "checksum " + hex64(ref.checksum) + "\n");
  dc.partitions = 1;
  const DpsnnResult one = run_dpsnn(dc, {});
  CHECK(slurp(d.path / "dp" / "raster_dpsnn.txt") == raster_text(one.raster));
}

// ---------------------------------------------------------------------------

TEST_CASE("validate echoes canonical forms and round-trips") {
  TempDir d("validate");
  const auto app = d.write("a.app", std::string("# comment\n") + kPipeline);
  const auto flt = d.write("f.fault", "seed=4\nwhen=at 10 kind=link_kill where=link(1,-z)\n");
  std::ostringstream out, err;
  REQUIRE(cmd_validate({app.string(), flt.string()}, TorusGeometry(2, 2, 2), out, err) == kExitOk);
  const std::string text = out.str();
  CHECK(text.find("kind=link_kill where=link(1,-z) when=at 10 stream=1\n") != std::string::npos);
  CHECK(text.find("seed=4") != std::string::npos);

  // feeding the echo back gives the same echo
  std::string app_echo = text.substr(text.find("app name="), text.find("# ", text.find("app name=")) - text.find("app name="));
  const auto app2 = d.write("b.app", app_echo);
  std::ostringstream out2, err2;
  REQUIRE(cmd_validate({app2.string()}, TorusGeometry(2, 2, 2), out2, err2) == kExitOk);
  CHECK(out2.str().substr(out2.str().find('\n') + 1) == app_echo);
}

TEST_CASE("validate round-trip over a random fault corpus") {
  TempDir d("corpus");
  std::mt19937_64 rng(11);
  const char* kinds[] = {"link_kill", "link_drop", "link_corrupt", "tile_kill_host", "tile_kill_dnp"};
  const char* dirs[] = {"+x", "-x", "+y", "-y", "+z", "-z"};
  for (int i = 0; i < 50; ++i) {
    std::string text;
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int c = 0; c < n; ++c) {
      const std::string kind = kinds[rng() % 5];
      std::string where = kind.rfind("tile", 0) == 0 ? "tile(" + std::to_string(rng() % 8) + ")"
                                                     : "link(" + std::to_string(rng() % 8) + "," + dirs[rng() % 6] + ")";
      text += "kind=" + kind + " where=" + where + " when=at " + std::to_string(rng() % 100000);
      if (kind == "link_drop" || kind == "link_corrupt") text += " prob=0.5";
      text += "\n";
    }
    const auto p = d.write("c.fault", text);
    std::ostringstream o1, e1;
    REQUIRE(cmd_validate({p.string()}, TorusGeometry(2, 2, 2), o1, e1) == kExitOk);
    const std::string echo = o1.str().substr(o1.str().find('\n') + 1);
    const auto p2 = d.write("c2.fault", echo);
    std::ostringstream o2, e2;
    REQUIRE(cmd_validate({p2.string()}, TorusGeometry(2, 2, 2), o2, e2) == kExitOk);
    CHECK(o2.str().substr(o2.str().find('\n') + 1) == echo);
  }
}

TEST_CASE("validate names semantic errors") {
  TempDir d("semantic");
  const auto p = d.write("f.fault", "kind=tile_kill_dnp where=tile(12) when=at 5\n");
  std::ostringstream out, err;
  CHECK(cmd_validate({p.string()}, TorusGeometry(2, 2, 2), out, err) == kExitConfig);
  CHECK(err.str().find("rank 12") != std::string::npos);
  // the same rank is fine on a bigger torus
  std::ostringstream out2, err2;
  CHECK(cmd_validate({p.string()}, TorusGeometry(4, 2, 2), out2, err2) == kExitOk);
}

// ---------------------------------------------------------------------------

TEST_CASE("trace lines parse with spaced values and a repeated seq key") {
  const TraceRecord r =
      parse_trace_line("t=12 seq=3 cat=packet kind=drop pkt=put src=0 dst=1 transfer_id=2 seq=7 why=link down", 1);
  CHECK(r.t == 12);
  CHECK(r.seq == 3);
  CHECK(r.cat == TraceCategory::Packet);
  CHECK(r.kind == "drop");
  REQUIRE(r.get("seq"));
  CHECK(*r.get("seq") == "7");
  REQUIRE(r.get("why"));
  CHECK(*r.get("why") == "link down");
  CHECK_THROWS_AS(parse_trace_line("seq=1 t=2 cat=app kind=x", 4), TraceError);
  CHECK_THROWS_AS(parse_trace_line("t=1 seq=1 cat=weather kind=x", 4), TraceError);
  CHECK_THROWS_AS(parse_trace_line("t=1 seq=1", 4), TraceError);
}

TEST_CASE("corrupt trace is rejected with its line number") {
  TempDir d("corrupt");
  const auto p = d.write("trace.log",
                         "# torusim dims=2x2x2\n"
                         "t=1 seq=0 cat=app kind=state app=a state=RUNNING epoch=1\n"
                         "t=2 seq=1 cat=app kind=st\xff\n"
                         "t=x seq=2 cat=app kind=state\n");
  std::ostringstream out, err;
  CHECK(cmd_report(p.string(), std::nullopt, out, err) == kExitConfig);
  CHECK(err.str().find("trace line 4") != std::string::npos);

  const auto q = d.write("order.log", "t=5 seq=0 cat=app kind=a\nt=4 seq=1 cat=app kind=b\n");
  std::ostringstream out2, err2;
  CHECK(cmd_report(q.string(), std::nullopt, out2, err2) == kExitConfig);
  CHECK(err2.str().find("trace line 2") != std::string::npos);
}

TEST_CASE("healthy run reports an empty fault timeline and sane links") {
  TempDir d("healthy");
  d.write("pipe.app", kPipeline);
  const auto cfg = d.write("run.ini", config());
  REQUIRE(run({cfg.string(), {}, {}, {}, (d.path / "out").string()}) == kExitOk);
  const std::string trace = slurp(d.path / "out" / "trace.log");
  std::istringstream in(trace);
  const TraceReport r = analyze_trace(in);
  CHECK(r.timeline.empty());
  CHECK(r.detections.empty());
  CHECK(r.alarms == 0);
  REQUIRE(r.completions.size() == 1);
  CHECK(r.completions[0].find("pipe COMPLETED") != std::string::npos);
  CHECK(r.delivered > 0);
  CHECK_FALSE(r.links.empty());

  std::ostringstream out, err;
  REQUIRE(cmd_report((d.path / "out" / "trace.log").string(), (d.path / "m.csv").string(), out, err) == kExitOk);
  CHECK(out.str().find("fault timeline\n  (none)") != std::string::npos);
  CHECK(slurp(d.path / "out" / "trace.log") == trace);  // read only
  std::ostringstream again, err3;
  cmd_report((d.path / "out" / "trace.log").string(), std::nullopt, again, err3);
  CHECK(again.str() == out.str());
}

TEST_CASE("single link kill is one DOWN within the detection bound") {
  TempDir d("linkkill");
  d.write("pipe.app", kPipeline);
  d.write("k.fault", "kind=link_kill where=link(5,-y) when=at 40000\n");
  const auto cfg = d.write("run.ini", config("fault = k.fault\n"));
  REQUIRE(run({cfg.string(), {}, {}, {}, (d.path / "out").string()}) == kExitOk);
  std::ifstream in(d.path / "out" / "trace.log");
  const TraceReport r = analyze_trace(in);

  // bound from the monitoring parameters
  Kernel k;
  Scheduler s(k);
  Trace tr;
  Fabric f(s, TorusGeometry(2, 2, 2), DnpConfig{}, tr);
  LofamoConfig lc;
  Lofamo lf(k, f, tr, lc);
  const SimTime bound = lc.t_wd + lc.t_check + lc.heartbeat_period + 2 * lf.propagation_leg();
  REQUIRE(r.header.count("detection_bound"));
  CHECK(std::stoull(r.header.at("detection_bound")) == bound);

  REQUIRE(r.detections.size() == 1);
  const Detection& det = r.detections[0];
  // on a 2-wide ring 5:-y and 7:+y are one physical link, reported by its canonical name
  const TorusGeometry g(2, 2, 2);
  const LinkId canon = g.link_at(g.physical_index(LinkId{5, Direction::NegY}));
  CHECK(det.entity == "link " + to_string(canon) + " DOWN");
  REQUIRE(det.flagged_at);
  CHECK(*det.flagged_at - det.injected_at <= bound);
  std::size_t flags = 0;
  for (const auto& s2 : r.timeline) flags += s2.find(" flag ") != std::string::npos;
  CHECK(flags == 1);
}

TEST_CASE("link utilization never exceeds bandwidth") {
  TempDir d("util");
  StencilConfig sc;
  sc.split = {2, 2, 2, 1};
  d.write("st.app", print_app_spec(build_stencil(sc)));
  const auto cfg = d.write("run.ini", "[dal]\ntile_capacity = 1\n[run]\napp = st.app\nuntil = 30000\n");
  REQUIRE(run({cfg.string(), {}, {}, {}, (d.path / "out").string()}) == kExitOk);
  std::ifstream in(d.path / "out" / "trace.log");
  const TraceReport r = analyze_trace(in);
  const double bw = std::stod(r.header.at("bandwidth_bits_per_cycle"));
  REQUIRE_FALSE(r.links.empty());
  bool busy = false;
  for (const auto& [name, u] : r.links) {
    CAPTURE(name);
    CHECK(u.overlaps == 0);
    CHECK(u.busy <= r.span());
    CHECK(static_cast<double>(u.payload_bytes) * 8.0 <= bw * static_cast<double>(u.busy));
    busy = busy || u.busy * 10 > r.span();
  }
  CHECK(busy);  // the halo exchange actually loaded some link
}
