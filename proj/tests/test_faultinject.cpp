#include <string>
#include <vector>

#include "doctest.h"
#include "torusim/faultinject.hpp"

using namespace torusim;

TEST_CASE("minimal link kill clause") {
  auto s = parse_fault_spec("kind=link_kill where=link(0,+x) when=at 50000\n");
  REQUIRE(s.clauses.size() == 1);
  const auto& c = s.clauses[0];
  CHECK(c.kind == FaultKind::LinkKill);
  CHECK(std::get<LinkId>(c.where) == LinkId{0, Direction::PosX});
  CHECK(std::get<WhenAt>(c.when).t == 50000);
  CHECK_FALSE(s.seed);
  CHECK(print_fault_spec(s) == "kind=link_kill where=link(0,+x) when=at 50000 stream=1\n");
}

TEST_CASE("keys in any order, comments and seed line") {
  auto s = parse_fault_spec(
      "# scenario\n"
      "seed=99\n"
      "\n"
      "prob=0.25 when=window 10..20 where=link(3,-y) kind=link_drop stream=7  # trailing\n"
      "kind=critical_event where=tile(2) when=periodic 1000,5000 code=17\n");
  REQUIRE(s.seed);
  CHECK(*s.seed == 99);
  REQUIRE(s.clauses.size() == 2);
  CHECK(s.clauses[0].prob == 0.25);
  CHECK(s.clauses[0].stream == 7);
  CHECK(std::get<WhenWindow>(s.clauses[0].when) == WhenWindow{10, 20});
  CHECK(s.clauses[1].code == 17);
  CHECK(s.clauses[1].stream == 2);
  CHECK(std::get<WhenPeriodic>(s.clauses[1].when) == WhenPeriodic{1000, 5000});
}

namespace {
void expect_error(const std::string& text, int line, int col, const std::string& fragment) {
  CAPTURE(text);
  try {
    parse_fault_spec(text);
    FAIL("expected SpecError");
  } catch (const SpecError& e) {
    CHECK(e.line() == line);
    if (col > 0) CHECK(e.column() == col);
    CHECK(std::string(e.what()).find(fragment) != std::string::npos);
  }
}
}  // namespace

TEST_CASE("parse errors carry line and column") {
  expect_error("kind=link_drop where=link(0,+x) when=at 5 prob=1.5\n", 1, 48, "prob must lie in [0,1]");
  expect_error("\nkind=link_kill where=link(0,+x) when=at 5 colour=red\n", 2, 43, "unknown key 'colour'");
  expect_error("kind=link_melt where=link(0,+x) when=at 5\n", 1, 6, "unknown fault kind");
  expect_error("kind=link_kill where=link(0,+w) when=at 5\n", 1, 22, "invalid direction");
  expect_error("kind=link_kill where=tile(0) when=at 5\n", 1, 22, "needs a link target");
  expect_error("kind=link_kill where=link(0,+x) when=window 1..2\n", 1, 38, "not a valid time");
  expect_error("kind=link_drop where=link(0,+x) when=window 9..2 prob=1\n", 1, 38, "ends before");
  expect_error("kind=link_drop where=link(0,+x) when=at 1\n", 1, 1, "missing key 'prob'");
  expect_error("kind=link_kill where=link(0,+x) when=at 1 prob=0.5\n", 1, 43, "not valid for link_kill");
  expect_error("kind=link_degrade where=link(0,+x) when=at 1 factor=0\n", 1, 53, "factor must be >= 1");
  expect_error("kind=tile_kill_host where=tile(1) when=at x\n", 1, 40, "invalid time");
  expect_error("kind=tile_kill_host kind=tile_kill_dnp where=tile(1) when=at 1\n", 1, 21, "duplicate key");
  expect_error("garbage\n", 1, 1, "expected key=value");
}

TEST_CASE("validation names the invalid rank") {
  auto s = parse_fault_spec("kind=tile_kill_dnp where=tile(3)  when=at 1\nkind=link_kill where=link(16,+z) when=at 2\n");
  try {
    validate_fault_spec(s, TorusGeometry(4, 2, 2));
    FAIL("expected SpecError");
  } catch (const SpecError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("rank 16") != std::string::npos);
  }
  CHECK_NOTHROW(validate_fault_spec(s, TorusGeometry(4, 2, 4)));
}

TEST_CASE("parse, print, parse round-trips over a generated corpus") {
  CounterRng rng(77);
  const char* dirs[] = {"+x", "-x", "+y", "-y", "+z", "-z"};
  for (std::uint64_t n = 0; n < 50; ++n) {
    RngStream s{n, 0};
    std::string text;
    if (s.below(rng, 2)) text += "seed=" + std::to_string(s.below(rng, 1000)) + "\n";
    const auto clauses = 1 + s.below(rng, 6);
    for (std::uint64_t i = 0; i < clauses; ++i) {
      std::vector<std::string> parts;
      const auto kind = s.below(rng, 7);
      const std::string link = "where=link(" + std::to_string(s.below(rng, 16)) + "," + dirs[s.below(rng, 6)] + ")";
      const std::string tile = "where=tile(" + std::to_string(s.below(rng, 16)) + ")";
      const std::string at = "when=at " + std::to_string(s.below(rng, 100000));
      const auto t1 = s.below(rng, 50000);
      const std::string window = "when=window " + std::to_string(t1) + ".." + std::to_string(t1 + s.below(rng, 50000));
      switch (kind) {
        case 0:
        case 1:
          parts = {kind == 0 ? "kind=link_drop" : "kind=link_corrupt", link, s.below(rng, 2) ? at : window,
                   "prob=" + std::to_string(s.uniform(rng))};
          break;
        case 2: parts = {"kind=link_kill", link, at}; break;
        case 3: parts = {"kind=link_degrade", link, s.below(rng, 2) ? at : window, "factor=" + std::to_string(1 + s.below(rng, 8))}; break;
        case 4: parts = {"kind=tile_kill_host", tile, at}; break;
        case 5: parts = {"kind=tile_kill_dnp", tile, at}; break;
        default:
          parts = {"kind=critical_event", tile,
                   s.below(rng, 2) ? at : "when=periodic " + std::to_string(s.below(rng, 1000)) + "," + std::to_string(1 + s.below(rng, 1000)),
                   "code=" + std::to_string(s.below(rng, 100))};
      }
      if (s.below(rng, 2)) parts.push_back("stream=" + std::to_string(s.draw(rng)));
      // Shuffle key order.
      for (std::size_t k = parts.size(); k > 1; --k) std::swap(parts[k - 1], parts[s.below(rng, k)]);
      for (const auto& p : parts) text += p + std::string(1 + s.below(rng, 3), ' ');
      text += "\n";
    }
    CAPTURE(text);
    const FaultSpec a = parse_fault_spec(text);
    const std::string printed = print_fault_spec(a);
    const FaultSpec b = parse_fault_spec(printed);
    CHECK(a == b);
    CHECK(print_fault_spec(b) == printed);
  }
}

namespace {
FaultClause probe_clause(FaultKind kind, double prob) {
  FaultClause c;
  c.kind = kind;
  c.where = LinkId{0, Direction::PosX};
  c.when = WhenAt{0};
  c.prob = prob;
  c.stream = 3;
  return c;
}
}  // namespace

TEST_CASE("probe probability edges") {
  CounterRng rng(1);
  Packet p;
  p.payload.assign(100, 0);
  RngStream s0{3, 0}, s1{3, 0};
  for (int i = 0; i < 1000; ++i) {
    CHECK(apply_probe(p, probe_clause(FaultKind::LinkDrop, 0.0), rng, s0).kind == PacketActionKind::Deliver);
    CHECK(apply_probe(p, probe_clause(FaultKind::LinkDrop, 1.0), rng, s1).kind == PacketActionKind::Drop);
  }
}

TEST_CASE("drop fraction at prob 0.1 stays within 0.01 over 1e5 packets") {
  CounterRng rng(2024);
  Packet p;
  RngStream s{3, 0};
  const auto c = probe_clause(FaultKind::LinkDrop, 0.1);
  int drops = 0;
  for (int i = 0; i < 100000; ++i) drops += apply_probe(p, c, rng, s).kind == PacketActionKind::Drop;
  CHECK(std::abs(drops / 100000.0 - 0.1) <= 0.01);
}

TEST_CASE("corrupt picks a bit inside the payload") {
  CounterRng rng(9);
  Packet p;
  p.payload.assign(3, 0);
  RngStream s{3, 0};
  const auto c = probe_clause(FaultKind::LinkCorrupt, 1.0);
  std::vector<int> hits(24, 0);
  for (int i = 0; i < 2400; ++i) {
    auto a = apply_probe(p, c, rng, s);
    REQUIRE(a.kind == PacketActionKind::Corrupt);
    REQUIRE(a.bit < 24);
    hits[a.bit]++;
  }
  for (int h : hits) CHECK(h > 0);
}

namespace {
struct Rig {
  Kernel k;
  Scheduler s{k};
  Trace tr;
  Fabric f;
  std::vector<std::pair<SimTime, Rank>> host_kills, dnp_kills;
  std::vector<std::uint32_t> codes;
  FaultInjector inj;
  explicit Rig(std::uint64_t seed = 1)
      : f(s, TorusGeometry(4, 2, 2), DnpConfig{}, tr),
        inj(k, f, tr,
            FaultTargets{[this](Rank r) { host_kills.push_back({k.now(), r}); },
                         [this](Rank r) { dnp_kills.push_back({k.now(), r}); },
                         [this](Rank, std::uint32_t code) { codes.push_back(code); }},
            seed) {
    tr.keep_lines(true);
  }
};
}  // namespace

TEST_CASE("tile kills fire at exactly their time") {
  Rig rig;
  rig.inj.arm(parse_fault_spec("kind=tile_kill_host where=tile(5) when=at 20000\n"
                               "kind=tile_kill_dnp where=tile(6) when=at 30000\n"));
  rig.k.run_until(100000);
  CHECK(rig.host_kills == std::vector<std::pair<SimTime, Rank>>{{20000, 5}});
  CHECK(rig.dnp_kills == std::vector<std::pair<SimTime, Rank>>{{30000, 6}});
  CHECK_FALSE(rig.f.dnp_alive(6));
  CHECK(rig.f.dnp_alive(5));
}

TEST_CASE("link kill and degrade act on both directions") {
  Rig rig;
  rig.inj.arm(parse_fault_spec("kind=link_kill where=link(0,+x) when=at 100\n"
                               "kind=link_degrade where=link(2,+y) when=window 50..500 factor=4\n"));
  rig.k.run_until(60);
  CHECK(rig.f.link_up({1, Direction::NegX}));
  CHECK(rig.f.link_degrade({6, Direction::NegY}) == 4);
  rig.k.run_until(1000);
  CHECK_FALSE(rig.f.link_up({0, Direction::PosX}));
  CHECK_FALSE(rig.f.link_up({1, Direction::NegX}));
  CHECK(rig.f.link_degrade({2, Direction::PosY}) == 1);
}

TEST_CASE("periodic critical events repeat") {
  Rig rig;
  rig.inj.arm(parse_fault_spec("kind=critical_event where=tile(2) when=periodic 1000,5000 code=17\n"));
  rig.k.run_until(20999);
  CHECK(rig.codes.size() == 4);  // 1000, 6000, 11000, 16000
}

TEST_CASE("window probes touch only packets inside the window") {
  Rig rig;
  rig.inj.arm(parse_fault_spec("kind=link_drop where=link(0,+x) when=window 10000..20000 prob=1\n"));
  std::vector<TransferId> ids;
  for (SimTime t = 0; t < 30000; t += 2500) {
    rig.k.schedule(t, EventClass::Application, "send", [&] { ids.push_back(rig.f.send(0, 1, Bytes{1})); });
  }
  rig.k.run_until(30000);
  rig.k.run_until(rig.k.now() + 2 * rig.f.transfer_timeout());
  int failed = 0;
  for (auto id : ids) {
    const auto& t = rig.f.transfer(id);
    const bool inside = t.issued_at >= 10000 && t.issued_at <= 20000;
    CHECK((t.status == TransferStatus::Failed) == inside);
    failed += t.status == TransferStatus::Failed;
  }
  CHECK(failed == 5);
  // Reverse-direction ACKs are untouched: the probe is directional.
  CHECK(rig.f.counters().dropped_probe == 5);
}

TEST_CASE("identical spec and seed replay identical probe decisions") {
  auto run = [](std::uint64_t seed) {
    Rig rig(seed);
    rig.inj.arm(parse_fault_spec("kind=link_corrupt where=link(0,+x) when=at 0 prob=0.3\n"
                                 "kind=link_drop where=link(1,-x) when=at 0 prob=0.2\n"));
    for (int i = 0; i < 200; ++i) {
      rig.k.schedule(static_cast<SimTime>(i) * 1500, EventClass::Application, "send",
                     [&rig, i] { rig.f.send(0, 1, Bytes(static_cast<std::size_t>(i % 50 + 1), 7)); });
    }
    rig.k.run_until(10'000'000);
    return std::pair{rig.inj.action_hash(), rig.inj.log().size()};
  };
  const auto a = run(5), b = run(5), c = run(6);
  CHECK(a == b);
  CHECK(a.second > 0);
  CHECK(a.first != c.first);
}
