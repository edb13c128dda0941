#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "torusim/crc32.hpp"
#include "torusim/dnp.hpp"
#include "torusim/presto.hpp"
#include "torusim/rng.hpp"

using namespace torusim;

namespace {

// Bit-at-a-time CRC-32 written from the polynomial, independent of the table.
std::uint32_t crc_oracle(const std::vector<std::uint8_t>& data) {
  std::uint32_t crc = 0xFFFFFFFFU;
  for (std::uint8_t b : data) {
    for (int i = 0; i < 8; ++i) {
      const std::uint32_t bit = ((b >> i) & 1U) ^ (crc & 1U);
      crc >>= 1;
      if (bit) crc ^= 0xEDB88320U;
    }
  }
  return crc ^ 0xFFFFFFFFU;
}

Bytes pattern(std::size_t n, std::uint64_t key) {
  CounterRng rng(5);
  Bytes b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<std::uint8_t>(rng.at(key, i));
  return b;
}

struct Sim {
  Kernel k;
  Scheduler s{k};
  Trace tr;
  Fabric f;
  explicit Sim(TorusGeometry g = TorusGeometry(4, 2, 2), DnpConfig c = {}) : f(s, g, c, tr) {
    tr.keep_lines(true);
  }
  std::uint64_t total_link_packets() const {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < f.geometry().link_count(); ++i) n += f.link_counters(f.geometry().link_at(i)).packets;
    return n;
  }
  std::size_t count_lines(const std::string& needle) const {
    std::size_t n = 0;
    for (auto& l : tr.lines()) n += l.find(needle) != std::string::npos;
    return n;
  }
  bool conserved() const {
    const auto& c = f.counters();
    return c.injected == c.delivered + c.dropped_probe + c.dropped_link + c.dropped_dnp + c.crc_discarded +
                             c.undeliverable + f.in_flight();
  }
};

}  // namespace

TEST_CASE("crc32 check values") {
  CHECK(crc32({}) == 0x00000000U);
  const std::string s = "123456789";
  const Bytes b(s.begin(), s.end());
  CHECK(crc32(b) == 0xCBF43926U);
  CHECK(crc_oracle(b) == 0xCBF43926U);
  for (std::uint64_t key = 0; key < 50; ++key) {
    auto data = pattern(key * 37 + 1, key);
    CHECK(crc32(data) == crc_oracle(data));
  }
}

TEST_CASE("crc32 chains across split buffers") {
  auto data = pattern(300, 9);
  const auto first = crc32(std::span<const std::uint8_t>(data.data(), 100));
  CHECK(crc32(std::span<const std::uint8_t>(data.data() + 100, 200), first) == crc32(data));
}

TEST_CASE("every single-bit flip in a 64-byte packet is detected") {
  Packet p;
  p.src = 3;
  p.dst = 7;
  p.transfer_id = 42;
  p.payload = pattern(64, 1);
  p.seal();
  REQUIRE(p.intact());
  for (std::size_t bit = 0; bit < 64 * 8; ++bit) {
    Packet q = p;
    q.payload[bit / 8] ^= static_cast<std::uint8_t>(1U << (bit % 8));
    CHECK_FALSE(q.intact());
  }
  for (unsigned bit = 0; bit < 32; ++bit) {
    Packet q = p;
    q.seq ^= 1U << bit;
    CHECK_FALSE(q.intact());
  }
}

TEST_CASE("serialization uses header, payload and crc bytes") {
  Sim sim;
  // (24 + 4096 + 8) * 8 / 34 rounded up
  CHECK(sim.f.serialization(4096) == 972);
  CHECK(sim.f.serialization(0) == 8);
  CHECK(sim.f.transfer_timeout() == 10 * (4 + 16) * (972 + 100));
}

TEST_CASE("loopback PUT completes with zero link traversals") {
  Sim sim;
  sim.f.register_region(2, 0x1000, 16);
  const Bytes one{0xAB};
  auto id = sim.f.rdma_put(2, 2, one, 0x1000);
  sim.k.run_until(1000);
  CHECK(sim.f.transfer(id).status == TransferStatus::Complete);
  CHECK(sim.f.region(2, 0x1000, 1)[0] == 0xAB);
  CHECK(sim.total_link_packets() == 0);
}

TEST_CASE("10 KB PUT is split into 3 packets and lands intact") {
  Sim sim;
  sim.f.register_region(5, 0, 10240);
  auto data = pattern(10240, 2);
  auto id = sim.f.rdma_put(0, 5, data, 0);
  sim.k.run_until(1'000'000);
  const auto& t = sim.f.transfer(id);
  CHECK(t.packets_total == 3);
  CHECK(t.status == TransferStatus::Complete);
  auto mem = sim.f.region(5, 0, 10240);
  CHECK(std::equal(mem.begin(), mem.end(), data.begin()));
  CHECK(sim.count_lines("kind=deliver pkt=put") == 3);
  // One completion at each side.
  auto a = sim.f.poll_completion(0);
  auto b = sim.f.poll_completion(5);
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->transfer_id == id);
  CHECK(b->rank == 5);
  CHECK_FALSE(sim.f.poll_completion(0));
  CHECK_FALSE(sim.f.poll_completion(5));
  CHECK(sim.conserved());
}

TEST_CASE("PUT across a killed link reroutes with extra hops") {
  Sim sim;
  const auto& g = sim.f.geometry();
  const Rank dst = g.rank_of({1, 0, 0});
  sim.f.register_region(dst, 0, 100);
  const LinkId dead{0, Direction::PosX};
  sim.f.set_link_up(dead, false);
  sim.f.routing_status().set_both(g, dead, false);
  auto id = sim.f.rdma_put(0, dst, pattern(100, 3), 0);
  sim.k.run_until(1'000'000);
  CHECK(sim.f.transfer(id).status == TransferStatus::Complete);
  CHECK(sim.count_lines("kind=hop pkt=put") > g.hop_distance(0, dst));
}

TEST_CASE("PUT to an unregistered region fails remotely") {
  Sim sim;
  auto id = sim.f.rdma_put(0, 1, pattern(8, 4), 0x500);
  sim.k.run_until(1'000'000);
  CHECK(sim.f.transfer(id).status == TransferStatus::Failed);
  CHECK(sim.f.transfer(id).reason == FailReason::Remote);
}

TEST_CASE("GET returns the bytes a PUT wrote") {
  Sim sim;
  sim.f.register_region(7, 0x40, 9000);
  auto data = pattern(9000, 5);
  auto put = sim.f.rdma_put(0, 7, data, 0x40);
  sim.k.run_until(1'000'000);
  REQUIRE(sim.f.transfer(put).status == TransferStatus::Complete);
  auto get = sim.f.rdma_get(3, 7, 0x40, 9000);
  sim.k.run_until(2'000'000);
  const auto& t = sim.f.transfer(get);
  CHECK(t.status == TransferStatus::Complete);
  CHECK(t.data == data);
}

TEST_CASE("zero-length GET and empty PUT are rejected") {
  Sim sim;
  CHECK_THROWS_AS(sim.f.rdma_get(0, 1, 0, 0), SimError);
  CHECK_THROWS_AS(sim.f.rdma_put(0, 1, Bytes{}, 0), SimError);
}

TEST_CASE("GET of unregistered memory fails remotely") {
  Sim sim;
  auto id = sim.f.rdma_get(0, 1, 0x99, 10);
  sim.k.run_until(1'000'000);
  CHECK(sim.f.transfer(id).reason == FailReason::Remote);
}

TEST_CASE("GET latency is at least twice the one-way PUT latency") {
  Sim sim;
  const Rank dst = sim.f.geometry().rank_of({2, 1, 1});
  sim.f.register_region(dst, 0, 64);
  auto put = sim.f.rdma_put(0, dst, pattern(1, 6), 0);
  sim.k.run_until(1'000'000);
  const auto& p = sim.f.transfer(put);
  const SimTime one_way = p.data_landed_at - p.issued_at;
  // 4 hops of a 1-byte packet
  CHECK(one_way == 4 * (sim.f.serialization(1) + 100));
  const SimTime t0 = sim.k.now();
  auto get = sim.f.rdma_get(0, dst, 0, 1);
  sim.k.run_until(2'000'000);
  CHECK(sim.f.transfer(get).completed_at - t0 >= 2 * one_way);
}

TEST_CASE("SENDs on one pair arrive in order") {
  Sim sim;
  for (std::uint8_t i = 0; i < 5; ++i) sim.f.send(1, 6, Bytes{i});
  sim.k.run_until(1'000'000);
  for (std::uint8_t i = 0; i < 5; ++i) {
    auto e = sim.f.recv_ring(6);
    REQUIRE(e);
    CHECK(e->payload == Bytes{i});
  }
  CHECK_FALSE(sim.f.recv_ring(6));
}

TEST_CASE("full ring holds the third SEND until a recv") {
  DnpConfig c;
  c.ring_capacity = 2;
  Sim sim(TorusGeometry(4, 2, 2), c);
  std::vector<TransferId> ids;
  for (std::uint8_t i = 0; i < 3; ++i) ids.push_back(sim.f.send(0, 1, Bytes{i}));
  sim.k.run_until(100'000);
  CHECK(sim.f.ring_size(1) == 2);
  CHECK(sim.f.transfer(ids[2]).status == TransferStatus::InFlight);
  // Held well beyond the inactivity timeout is not a failure.
  sim.k.run_until(10 * sim.f.transfer_timeout());
  CHECK(sim.f.transfer(ids[2]).status == TransferStatus::InFlight);
  const SimTime t_recv = sim.k.now();
  auto e = sim.f.recv_ring(1);
  REQUIRE(e);
  CHECK(e->payload == Bytes{0});
  sim.k.run_until(t_recv + 1);
  CHECK(sim.f.ring_size(1) == 2);
  sim.k.run_until(t_recv + 100'000);
  CHECK(sim.f.transfer(ids[2]).status == TransferStatus::Complete);
  CHECK(sim.f.recv_ring(1)->payload == Bytes{1});
  CHECK(sim.f.recv_ring(1)->payload == Bytes{2});
  CHECK(sim.conserved());
}

TEST_CASE("SENDs from two sources interleave by arrival time") {
  Sim sim;
  const auto& g = sim.f.geometry();
  const Rank dst = 0;
  const Rank near = g.rank_of({1, 0, 0});
  const Rank far = g.rank_of({2, 1, 1});
  sim.f.send(far, dst, Bytes{1});
  sim.f.send(near, dst, Bytes{2});
  sim.k.run_until(1'000'000);
  std::vector<Rank> order;
  while (auto e = sim.f.recv_ring(dst)) order.push_back(e->src);
  // Arrival time order; equal-time arrivals keep issue order.
  CHECK(order == std::vector<Rank>{near, far});
}

namespace {
Process ping(Fabric& f, Rank me, Rank peer, Bytes msg, Bytes& back) {
  co_await presto_send(f, me, peer, msg);
  back = co_await presto_recv(f, me, peer);
}
Process pong(Fabric& f, Rank me, Rank peer) {
  Bytes m = co_await presto_recv(f, me, peer);
  co_await presto_send(f, me, peer, m);
}
Process recv_into(Fabric& f, Rank me, Rank from, Bytes& out, bool& done) {
  out = co_await presto_recv(f, me, from);
  done = true;
}
}  // namespace

TEST_CASE("presto ping-pong returns the message intact") {
  Sim sim;
  Bytes back;
  auto msg = pattern(1000, 7);
  sim.s.spawn("pong", pong(sim.f, 1, 0));
  sim.s.spawn("ping", ping(sim.f, 0, 1, msg, back), 50);
  sim.k.run_until(1'000'000);
  CHECK(back == msg);
}

TEST_CASE("presto recv only matches its source") {
  Sim sim;
  Bytes out;
  bool done = false;
  sim.s.spawn("recv", recv_into(sim.f, 0, 3, out, done));
  sim.f.send(2, 0, Bytes{9});
  sim.k.run_until(1'000'000);
  CHECK_FALSE(done);
  sim.f.send(3, 0, Bytes{7});
  sim.k.run_until(2'000'000);
  CHECK(done);
  CHECK(out == Bytes{7});
  CHECK(sim.f.ring_size(0) == 1);
}

TEST_CASE("completions come out in completion-time order") {
  Sim sim;
  CHECK_FALSE(sim.f.poll_completion(0));
  const Rank far = sim.f.geometry().rank_of({2, 1, 1});
  auto a = sim.f.send(0, far, Bytes{1});
  auto b = sim.f.send(0, 1, Bytes{2});
  sim.k.run_until(1'000'000);
  auto e1 = sim.f.poll_completion(0);
  auto e2 = sim.f.poll_completion(0);
  REQUIRE(e1);
  REQUIRE(e2);
  CHECK(e1->transfer_id == b);
  CHECK(e2->transfer_id == a);
  CHECK(e1->at <= e2->at);
  CHECK_FALSE(sim.f.poll_completion(0));
}

TEST_CASE("1 MB PUT over one hop reaches 90% of link bandwidth") {
  Sim sim;
  const std::size_t n = 1 << 20;
  sim.f.register_region(1, 0, n);
  auto id = sim.f.rdma_put(0, 1, pattern(n, 8), 0);
  sim.k.run_until(100'000'000);
  const auto& t = sim.f.transfer(id);
  REQUIRE(t.status == TransferStatus::Complete);
  const double goodput = static_cast<double>(n) * 8 / static_cast<double>(t.data_landed_at - t.issued_at);
  CHECK(goodput >= 0.9 * 34);
  CHECK(goodput <= 34.0);
}

TEST_CASE("link busy time never exceeds wall time") {
  Sim sim;
  for (Rank r = 0; r < 16; ++r) sim.f.register_region(r, 0, 1 << 16);
  for (Rank s = 0; s < 16; ++s) {
    for (Rank d = 0; d < 16; ++d) {
      if (s != d) sim.f.rdma_put(s, d, pattern(5000, s * 16 + d), 0);
    }
  }
  sim.k.run_until(50'000'000);
  const SimTime wall = sim.k.now();
  for (std::size_t i = 0; i < sim.f.geometry().link_count(); ++i) {
    const auto& c = sim.f.link_counters(sim.f.geometry().link_at(i));
    CHECK(c.busy_cycles <= wall);
    CHECK(static_cast<double>(c.wire_bytes) * 8 <= static_cast<double>(c.busy_cycles) * 34);
  }
  const auto& c = sim.f.counters();
  CHECK(sim.f.in_flight() == 0);
  CHECK(c.injected == c.delivered);
}

TEST_CASE("corrupted packets are discarded and the transfer times out") {
  Sim sim;
  sim.f.register_region(1, 0, 64);
  std::vector<std::size_t> crc_errors;
  sim.f.on_crc_error([&](Rank at, Direction in, const Packet&) {
    CHECK(at == 1);
    CHECK(in == Direction::NegX);
    crc_errors.push_back(at);
  });
  bool alarm = false;
  sim.f.on_integrity_alarm = [&](const Packet&) { alarm = true; };
  std::size_t draws = 0;
  sim.f.add_probe({0, Direction::PosX}, [&](const Packet& p) {
    return PacketAction{PacketActionKind::Corrupt, (draws++ * 131) % (p.payload.size() * 8 + 1)};
  });
  auto id = sim.f.rdma_put(0, 1, pattern(64, 9), 0);
  sim.k.run_until(10'000'000);
  const auto& t = sim.f.transfer(id);
  CHECK(t.status == TransferStatus::Failed);
  CHECK(t.reason == FailReason::Timeout);
  CHECK(t.completed_at == t.issued_at + sim.f.transfer_timeout());
  CHECK(crc_errors.size() == 1);
  CHECK_FALSE(alarm);
  CHECK(sim.f.counters().crc_escapes == 0);
  auto mem = sim.f.region(1, 0, 64);
  CHECK(std::all_of(mem.begin(), mem.end(), [](std::uint8_t b) { return b == 0; }));
  CHECK(sim.conserved());
}

TEST_CASE("retransmit recovers from a transient drop") {
  Sim sim;
  sim.f.register_region(1, 0, 64);
  int dropped = 0;
  sim.f.add_probe({0, Direction::PosX}, [&](const Packet&) {
    return PacketAction{dropped++ == 0 ? PacketActionKind::Drop : PacketActionKind::Deliver, 0};
  });
  Fabric::Options o;
  o.retransmit = true;
  auto id = sim.f.rdma_put(0, 1, pattern(64, 10), 0, o);
  sim.k.run_until(10'000'000);
  CHECK(sim.f.transfer(id).status == TransferStatus::Complete);
  CHECK(sim.f.transfer(id).attempts == 2);
  CHECK(sim.conserved());
}

TEST_CASE("an isolated destination makes the transfer fail with a route error") {
  Sim sim(TorusGeometry(2, 2, 2));
  const auto& g = sim.f.geometry();
  for (Direction d : kDirections) sim.f.routing_status().set_both(g, {7, d}, false);
  int undeliverable = 0;
  sim.f.on_undeliverable([&](Rank, const Packet&) { ++undeliverable; });
  sim.f.register_region(7, 0, 8);
  auto id = sim.f.rdma_put(0, 7, pattern(8, 11), 0);
  sim.k.run_until(10'000'000);
  CHECK(sim.f.transfer(id).reason == FailReason::Route);
  CHECK(undeliverable == 1);
  CHECK(sim.conserved());
}

TEST_CASE("a killed link loses packets until routing learns of it") {
  Sim sim;
  sim.f.set_link_up({0, Direction::PosX}, false);
  CHECK_FALSE(sim.f.link_up({1, Direction::NegX}));
  auto id = sim.f.send(0, 1, Bytes{1});
  sim.k.run_until(10'000'000);
  CHECK(sim.f.transfer(id).reason == FailReason::Timeout);
  CHECK(sim.f.counters().dropped_link == 1);
  CHECK(sim.conserved());
}

TEST_CASE("dedicated service network carries service packets over dead torus links") {
  DnpConfig c;
  c.service_net = ServiceNet::Dedicated;
  Sim sim(TorusGeometry(2, 2, 2), c);
  for (std::size_t i = 0; i < sim.f.geometry().link_count(); ++i) sim.f.set_link_up(sim.f.geometry().link_at(i), false);
  int got = 0;
  sim.f.set_service_handler(ServiceType::Diagnostic, [&](Rank at, const Packet& p) {
    CHECK(at == 7);
    CHECK(p.payload == Bytes{4, 2});
    ++got;
  });
  sim.f.send_service(0, 7, ServiceType::Diagnostic, Bytes{4, 2});
  sim.k.run_until(1'000'000);
  CHECK(got == 1);
  CHECK(sim.total_link_packets() == 0);
}

TEST_CASE("service packets overtake queued data on a shared link") {
  Sim sim;
  sim.f.register_region(1, 0, 1 << 16);
  sim.f.rdma_put(0, 1, pattern(1 << 16, 12), 0);
  SimTime at = 0;
  sim.f.set_service_handler(ServiceType::Control, [&](Rank, const Packet&) { at = sim.k.now(); });
  sim.f.send_service(0, 1, ServiceType::Control, Bytes{1});
  sim.k.run_until(1'000'000);
  // Waits only for the data packet already on the wire.
  CHECK(at == sim.f.serialization(4096) + sim.f.serialization(1) + 100);
}

TEST_CASE("link keepalives report their transmit start and degrade factor") {
  Sim sim;
  sim.f.set_link_degrade({0, Direction::PosX}, 4);
  std::vector<SimTime> measured;
  sim.f.on_keepalive([&](Rank at, Direction in, const Packet&, SimTime sent) {
    CHECK(at == 1);
    CHECK(in == Direction::NegX);
    measured.push_back(sim.k.now() - sent - 100);
  });
  sim.f.send_link_keepalive(0, Direction::PosX, Bytes(8, 0));
  sim.k.run_until(100'000);
  REQUIRE(measured.size() == 1);
  CHECK(measured[0] == 4 * sim.f.serialization(8));
}
