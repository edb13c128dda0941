#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "torusim/engine.hpp"
#include "torusim/process.hpp"
#include "torusim/topology.hpp"
#include "torusim/trace.hpp"

namespace torusim {

using Bytes = std::vector<std::uint8_t>;
using TransferId = std::uint64_t;

enum class PacketKind : std::uint8_t { Put, GetReq, GetReply, Send, Ldm, Ack };
const char* to_string(PacketKind k);

/// Sub-type of service-class (LDM) packets.
enum class ServiceType : std::uint8_t { Diagnostic, LinkKeepalive, Control };
const char* to_string(ServiceType s);

enum class ServiceNet : std::uint8_t { Shared, Dedicated };

/// Ring buffer ports. Port 0 is the user/Presto ring; port 1 carries the
/// application runtime's channel traffic.
inline constexpr std::uint16_t kUserPort = 0;
inline constexpr std::uint16_t kRuntimePort = 1;
inline constexpr std::uint16_t kPortCount = 2;

struct Packet {
  // Header, covered by header_crc.
  Rank src = 0;
  Rank dst = 0;
  PacketKind kind = PacketKind::Send;
  ServiceType service = ServiceType::Diagnostic;
  std::uint16_t port = 0;
  std::uint8_t status = 0;  // Ack status
  TransferId transfer_id = 0;
  std::uint32_t seq = 0;
  std::uint64_t addr = 0;
  std::uint64_t total_len = 0;
  Bytes payload;
  std::uint32_t header_crc = 0;
  std::uint32_t payload_crc = 0;

  // Routing state rewritten at each hop.
  std::uint32_t ttl = 0;
  std::optional<Rank> prev_hop;
  std::uint32_t hops = 0;
  std::optional<Direction> link_local;  // single-hop link keepalive

  // Simulator bookkeeping, never visible to protocol logic.
  std::uint64_t id = 0;
  SimTime injected_at = 0;
  SimTime tx_start = 0;
  bool corrupted = false;

  bool service_class() const { return kind == PacketKind::Ldm; }
  std::uint32_t compute_header_crc() const;
  std::uint32_t compute_payload_crc() const;
  void seal() {
    header_crc = compute_header_crc();
    payload_crc = compute_payload_crc();
  }
  bool intact() const { return header_crc == compute_header_crc() && payload_crc == compute_payload_crc(); }
};
using PacketPtr = std::shared_ptr<Packet>;

enum class TransferStatus : std::uint8_t { InFlight, Complete, Failed };
enum class FailReason : std::uint8_t { None, Route, Timeout, Remote, DnpDown };
const char* to_string(TransferStatus s);
const char* to_string(FailReason r);

struct Transfer {
  TransferId id = 0;
  PacketKind kind = PacketKind::Put;
  Rank initiator = 0;
  Rank target = 0;
  std::uint64_t remote_addr = 0;
  std::uint16_t port = 0;
  std::size_t total_len = 0;
  std::uint32_t packets_total = 0;
  std::uint32_t packets_outstanding = 0;
  TransferStatus status = TransferStatus::InFlight;
  FailReason reason = FailReason::None;
  SimTime issued_at = 0;
  SimTime completed_at = 0;
  SimTime data_landed_at = 0;  // PUT: last data byte written at the target
  SimTime last_progress = 0;
  unsigned attempts = 1;
  bool retransmit = false;
  bool post_completion = true;
  bool held_at_target = false;  // SEND waiting for ring space
  Bytes data;  // PUT/SEND source bytes; GET result
  std::vector<bool> got;  // GET reply chunks received
  std::function<void(const Transfer&)> on_complete;

  bool terminal() const { return status != TransferStatus::InFlight; }
};

struct CompletionEvent {
  TransferId transfer_id = 0;
  SimTime at = 0;
  TransferStatus status = TransferStatus::Complete;
  FailReason reason = FailReason::None;
  Rank rank = 0;  // where the completion is resident
};

struct RingEntry {
  Rank src = 0;
  TransferId transfer_id = 0;
  SimTime at = 0;
  Bytes payload;
};

enum class PacketActionKind : std::uint8_t { Deliver, Drop, Corrupt };
struct PacketAction {
  PacketActionKind kind = PacketActionKind::Deliver;
  std::size_t bit = 0;  // Corrupt: payload bit index
};
/// Probe invoked when a packet starts crossing a torus link.
using LinkProbe = std::function<PacketAction(const Packet&)>;

struct DnpConfig {
  std::size_t mtu = 4096;
  std::size_t header_bytes = 24;
  std::size_t crc_bytes = 8;
  std::uint32_t bandwidth_bits_per_cycle = 34;  // 34 Gbps at 1 cycle = 1 ns
  SimTime hop_latency = 100;
  std::size_t ring_capacity = 1024;
  ServiceNet service_net = ServiceNet::Shared;
  bool retransmit = false;
  unsigned max_attempts = 4;
  std::uint32_t ttl = 0;  // 0 selects the geometry default
};

struct LinkCounters {
  std::uint64_t packets = 0;
  std::uint64_t wire_bytes = 0;
  std::uint64_t payload_bytes = 0;
  SimTime busy_cycles = 0;
  std::array<std::uint64_t, 6> payload_by_kind{};  // indexed by PacketKind
};

struct NetCounters {
  std::uint64_t injected = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_probe = 0;
  std::uint64_t dropped_link = 0;
  std::uint64_t dropped_dnp = 0;
  std::uint64_t crc_discarded = 0;
  std::uint64_t crc_escapes = 0;
  std::uint64_t undeliverable = 0;
  std::uint64_t corrupted_by_probe = 0;
};

struct TransferOptions {
  std::optional<bool> retransmit;  // default from DnpConfig
  std::function<void(const Transfer&)> on_complete;
  bool post_completion = true;  // false: no CompletionEvent is queued
};

/// All DNPs of the torus plus the links between them.
///
/// Store-and-forward: each directed link serializes one packet at a time
/// (service class first), and a packet reaches the next router after its
/// serialization time plus the per-hop latency. Router queues are unbounded.
class Fabric {
 public:
  Fabric(Scheduler& sched, TorusGeometry geometry, DnpConfig config, Trace& trace);
  Fabric(const Fabric&) = delete;
  Fabric& operator=(const Fabric&) = delete;

  const TorusGeometry& geometry() const { return geom_; }
  const DnpConfig& config() const { return cfg_; }
  Scheduler& scheduler() { return sched_; }
  Kernel& kernel() { return sched_.kernel(); }
  Trace& trace() { return trace_; }

  // --- RDMA ---------------------------------------------------------------
  using Options = TransferOptions;
  TransferId rdma_put(Rank src, Rank dst, std::span<const std::uint8_t> data,
                      std::uint64_t remote_addr, Options opts = {});
  TransferId rdma_get(Rank src, Rank dst, std::uint64_t remote_addr, std::size_t len,
                      Options opts = {});
  TransferId send(Rank src, Rank dst, std::span<const std::uint8_t> payload,
                  std::uint16_t port = kUserPort, Options opts = {});

  /// Pops the head of a ring, or nullopt.
  std::optional<RingEntry> recv_ring(Rank dst, std::uint16_t port = kUserPort);
  /// Removes the oldest entry from `src`, or nullopt.
  std::optional<RingEntry> recv_ring_from(Rank dst, Rank src, std::uint16_t port = kUserPort);
  std::size_t ring_size(Rank dst, std::uint16_t port = kUserPort) const;
  WaitQueue& ring_waiters(Rank dst, std::uint16_t port = kUserPort);

  std::optional<CompletionEvent> poll_completion(Rank rank);
  WaitQueue& completion_waiters(Rank rank);

  const Transfer& transfer(TransferId id) const;
  bool has_transfer(TransferId id) const { return transfers_.count(id) != 0; }

  /// Registers a zero-filled memory region that PUT/GET may address.
  void register_region(Rank rank, std::uint64_t addr, std::size_t len);
  std::span<std::uint8_t> region(Rank rank, std::uint64_t addr, std::size_t len);

  // --- service class --------------------------------------------------------
  using ServiceHandler = std::function<void(Rank at, const Packet&)>;
  void set_service_handler(ServiceType type, ServiceHandler h);
  void send_service(Rank src, Rank dst, ServiceType type, Bytes payload);
  /// Sends a keepalive across exactly one link, bypassing routing.
  void send_link_keepalive(Rank src, Direction port, Bytes payload);

  using CrcErrorHook = std::function<void(Rank at, Direction in_port, const Packet&)>;
  using KeepaliveHook = std::function<void(Rank at, Direction in_port, const Packet&, SimTime sent)>;
  using UndeliverableHook = std::function<void(Rank at, const Packet&)>;
  void on_crc_error(CrcErrorHook h) { crc_hook_ = std::move(h); }
  void on_keepalive(KeepaliveHook h) { keepalive_hook_ = std::move(h); }
  void on_undeliverable(UndeliverableHook h) { undeliverable_hook_ = std::move(h); }

  // --- fault surface --------------------------------------------------------
  /// Physical state of a bidirectional torus link.
  void set_link_up(const LinkId& l, bool up);
  bool link_up(const LinkId& l) const { return torus_[l.index()].up; }
  void set_link_degrade(const LinkId& l, std::uint32_t factor);
  std::uint32_t link_degrade(const LinkId& l) const { return torus_[l.index()].factor; }
  void add_probe(const LinkId& l, LinkProbe probe);

  void set_dnp_alive(Rank r, bool alive);
  bool dnp_alive(Rank r) const { return nics_[r].alive; }

  /// Link status each router believes in. Entry (r, d) is owned by tile r.
  LinkStatus& routing_status() { return known_; }
  const LinkStatus& routing_status() const { return known_; }

  // --- accounting -----------------------------------------------------------
  const NetCounters& counters() const { return counters_; }
  const LinkCounters& link_counters(const LinkId& l) const { return torus_[l.index()].counters; }
  std::uint64_t in_flight() const { return in_flight_; }

  /// Serialization cycles for a packet with `payload` bytes on a healthy link.
  SimTime serialization(std::size_t payload) const;
  /// (diameter + ttl) hops of MTU-sized packets.
  SimTime worst_path_latency() const;
  SimTime transfer_timeout() const { return 10 * worst_path_latency(); }
  std::uint32_t ttl() const { return cfg_.ttl ? cfg_.ttl : geom_.default_ttl(); }

  /// Fired when a corrupted payload passes CRC checks (never expected).
  std::function<void(const Packet&)> on_integrity_alarm;

 private:
  struct LinkState {
    std::deque<PacketPtr> service_q;
    std::deque<PacketPtr> data_q;
    bool busy = false;
    bool up = true;
    std::uint32_t factor = 1;
    std::uint64_t epoch = 0;
    std::vector<LinkProbe> probes;
    LinkCounters counters;
  };
  struct PutRx {
    std::vector<bool> got;
    std::uint32_t count = 0;
    bool done = false;
    bool failed = false;
  };
  struct Nic {
    bool alive = true;
    std::map<std::uint64_t, Bytes> regions;
    std::array<std::deque<RingEntry>, kPortCount> rings;
    std::array<std::deque<PacketPtr>, kPortCount> held;
    std::array<bool, kPortCount> drain_pending{};
    std::array<WaitQueue, kPortCount> ring_wq;
    std::deque<CompletionEvent> cq;
    WaitQueue cq_wq;
    std::unordered_set<TransferId> sends_seen;
    std::unordered_map<TransferId, PutRx> put_rx;
  };

  PacketPtr make_packet(Rank src, Rank dst, PacketKind kind);
  void inject(PacketPtr p);
  void route_at(Rank node, PacketPtr p);
  void enqueue(std::vector<LinkState>& net, const LinkId& l, PacketPtr p);
  void start_tx(std::vector<LinkState>& net, const LinkId& l);
  void arrive(std::vector<LinkState>& net, const LinkId& l, PacketPtr p, std::uint64_t epoch);
  void deliver(Rank node, const PacketPtr& p);
  void deliver_send(Rank node, const PacketPtr& p);
  void drain_held(Rank node, std::uint16_t port);
  void send_ack(Rank from, const Packet& about, std::uint8_t status);
  void drop(const PacketPtr& p, const char* reason, std::optional<LinkId> link = std::nullopt);
  void progress(TransferId id);
  void arm_timeout(TransferId id);
  void on_timeout(TransferId id);
  void launch(Transfer& t);
  void finish(Transfer& t, TransferStatus status, FailReason reason);
  Bytes* find_region(Rank rank, std::uint64_t addr, std::size_t len, std::uint64_t* offset);
  Transfer& new_transfer(PacketKind kind, Rank src, Rank dst, Options& opts);
  void trace_packet(const char* kind, const Packet& p, std::optional<LinkId> link = std::nullopt,
                    const char* reason = nullptr);

  Scheduler& sched_;
  TorusGeometry geom_;
  DnpConfig cfg_;
  Trace& trace_;
  std::vector<LinkState> torus_;
  std::vector<LinkState> service_;  // dedicated service network, when enabled
  LinkStatus known_;
  LinkStatus service_status_;
  std::vector<Nic> nics_;
  std::unordered_map<TransferId, Transfer> transfers_;
  std::array<ServiceHandler, 3> service_handlers_;
  CrcErrorHook crc_hook_;
  KeepaliveHook keepalive_hook_;
  UndeliverableHook undeliverable_hook_;
  NetCounters counters_;
  TransferId next_transfer_ = 1;
  std::uint64_t next_packet_ = 1;
  std::uint64_t in_flight_ = 0;
};

enum : std::uint8_t { kAckOk = 0, kAckRemoteFail = 1 };

}  // namespace torusim
