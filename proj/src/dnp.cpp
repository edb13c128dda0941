#include "torusim/dnp.hpp"

#include <algorithm>
#include <cstring>
#include <string_view>

#include "torusim/crc32.hpp"

namespace torusim {

const char* to_string(PacketKind k) {
  switch (k) {
    case PacketKind::Put: return "put";
    case PacketKind::GetReq: return "get_req";
    case PacketKind::GetReply: return "get_reply";
    case PacketKind::Send: return "send";
    case PacketKind::Ldm: return "ldm";
    case PacketKind::Ack: return "ack";
  }
  return "?";
}

const char* to_string(ServiceType s) {
  switch (s) {
    case ServiceType::Diagnostic: return "diagnostic";
    case ServiceType::LinkKeepalive: return "keepalive";
    case ServiceType::Control: return "control";
  }
  return "?";
}

const char* to_string(TransferStatus s) {
  switch (s) {
    case TransferStatus::InFlight: return "in_flight";
    case TransferStatus::Complete: return "complete";
    case TransferStatus::Failed: return "failed";
  }
  return "?";
}

const char* to_string(FailReason r) {
  switch (r) {
    case FailReason::None: return "none";
    case FailReason::Route: return "route";
    case FailReason::Timeout: return "timeout";
    case FailReason::Remote: return "remote";
    case FailReason::DnpDown: return "dnp_down";
  }
  return "?";
}

namespace {
template <typename T>
std::uint32_t crc_pod(std::uint32_t crc, const T& v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  return crc32(std::span<const std::uint8_t>(buf, sizeof(T)), crc);
}
}  // namespace

std::uint32_t Packet::compute_header_crc() const {
  std::uint32_t c = 0;
  c = crc_pod(c, src);
  c = crc_pod(c, dst);
  c = crc_pod(c, kind);
  c = crc_pod(c, service);
  c = crc_pod(c, port);
  c = crc_pod(c, status);
  c = crc_pod(c, transfer_id);
  c = crc_pod(c, seq);
  c = crc_pod(c, addr);
  c = crc_pod(c, total_len);
  c = crc_pod(c, static_cast<std::uint64_t>(payload.size()));
  return c;
}

std::uint32_t Packet::compute_payload_crc() const { return crc32(payload); }

Fabric::Fabric(Scheduler& sched, TorusGeometry geometry, DnpConfig config, Trace& trace)
    : sched_(sched),
      geom_(geometry),
      cfg_(config),
      trace_(trace),
      torus_(geom_.link_count()),
      known_(geom_),
      service_status_(geom_),
      nics_(geom_.size()) {
  if (cfg_.mtu == 0 || cfg_.bandwidth_bits_per_cycle == 0) throw SimError("dnp: mtu and bandwidth must be positive");
  if (cfg_.ring_capacity == 0) throw SimError("dnp: ring capacity must be positive");
  if (cfg_.service_net == ServiceNet::Dedicated) service_.resize(geom_.link_count());
  for (auto& n : nics_) {
    n.cq_wq.bind(sched_);
    for (auto& w : n.ring_wq) w.bind(sched_);
  }
}

SimTime Fabric::serialization(std::size_t payload) const {
  const std::uint64_t bits = (cfg_.header_bytes + payload + cfg_.crc_bytes) * 8ULL;
  return (bits + cfg_.bandwidth_bits_per_cycle - 1) / cfg_.bandwidth_bits_per_cycle;
}

SimTime Fabric::worst_path_latency() const {
  return static_cast<SimTime>(geom_.diameter() + ttl()) * (serialization(cfg_.mtu) + cfg_.hop_latency);
}

void Fabric::trace_packet(const char* kind, const Packet& p, std::optional<LinkId> link,
                          const char* reason) {
  if (!trace_.on(TraceCategory::Packet)) return;
  TraceFields f;
  f.kv("pkt", to_string(p.kind))
      .kv("src", p.src)
      .kv("dst", p.dst)
      .kv("transfer_id", p.transfer_id)
      .kv("seq", p.seq);
  if (p.kind == PacketKind::Ldm) f.kv("svc", to_string(p.service));
  if (link) f.kv("link", to_string(*link));
  if (reason) f.kv("reason", reason);
  if (std::string_view(kind) == "deliver") f.kv("hops", p.hops);
  trace_.emit(kernel().now(), TraceCategory::Packet, kind, f);
}

// --- packet path ------------------------------------------------------------

PacketPtr Fabric::make_packet(Rank src, Rank dst, PacketKind kind) {
  auto p = std::make_shared<Packet>();
  p->src = src;
  p->dst = dst;
  p->kind = kind;
  p->ttl = ttl();
  p->id = next_packet_++;
  return p;
}

void Fabric::inject(PacketPtr p) {
  p->injected_at = kernel().now();
  p->seal();
  ++counters_.injected;
  ++in_flight_;
  trace_packet("inject", *p);
  if (!nics_[p->src].alive) {
    drop(p, "dnp_down");
    return;
  }
  if (p->src == p->dst) {
    kernel().schedule_in(0, EventClass::Network, "dnp.loopback", [this, p] { deliver(p->dst, p); });
    return;
  }
  const Rank src = p->src;
  route_at(src, std::move(p));
}

void Fabric::route_at(Rank node, PacketPtr p) {
  if (node == p->dst) {
    deliver(node, p);
    return;
  }
  const bool dedicated = p->service_class() && !service_.empty();
  const LinkStatus& status = dedicated ? service_status_ : known_;
  auto d = route_next_hop(node, p->dst, geom_, status, p->prev_hop, p->ttl);
  if (!d) {
    ++counters_.undeliverable;
    --in_flight_;
    trace_packet("undeliverable", *p);
    if (undeliverable_hook_) undeliverable_hook_(node, *p);
    if (p->transfer_id != 0) {
      auto it = transfers_.find(p->transfer_id);
      if (it != transfers_.end() && !it->second.terminal()) finish(it->second, TransferStatus::Failed, FailReason::Route);
    }
    return;
  }
  if (d->misroute) --p->ttl;
  enqueue(dedicated ? service_ : torus_, LinkId{node, d->dir}, std::move(p));
}

void Fabric::enqueue(std::vector<LinkState>& net, const LinkId& l, PacketPtr p) {
  auto& s = net[l.index()];
  (p->service_class() ? s.service_q : s.data_q).push_back(std::move(p));
  if (!s.busy) start_tx(net, l);
}

void Fabric::start_tx(std::vector<LinkState>& net, const LinkId& l) {
  auto& s = net[l.index()];
  const bool is_torus = &net == &torus_;
  while (true) {
    auto& q = !s.service_q.empty() ? s.service_q : s.data_q;
    if (q.empty()) return;
    PacketPtr p = std::move(q.front());
    q.pop_front();
    if (!s.up) {
      drop(p, "link_down", l);
      continue;
    }
    const SimTime ser = serialization(p->payload.size()) * s.factor;
    p->tx_start = kernel().now();
    s.busy = true;
    s.counters.packets++;
    s.counters.wire_bytes += cfg_.header_bytes + p->payload.size() + cfg_.crc_bytes;
    s.counters.payload_bytes += p->payload.size();
    s.counters.payload_by_kind[static_cast<std::size_t>(p->kind)] += p->payload.size();
    s.counters.busy_cycles += ser;
    if (trace_.on(TraceCategory::Packet)) {
      TraceFields f;
      f.kv("pkt", to_string(p->kind))
          .kv("src", p->src)
          .kv("dst", p->dst)
          .kv("transfer_id", p->transfer_id)
          .kv("seq", p->seq)
          .kv("link", to_string(l))
          .kv("bytes", static_cast<std::uint64_t>(p->payload.size()))
          .kv("ser", ser);
      trace_.emit(kernel().now(), TraceCategory::Packet, "hop", f);
    }
    if (p->transfer_id != 0) progress(p->transfer_id);

    bool lost = false;
    if (is_torus) {
      for (auto& probe : s.probes) {
        PacketAction a = probe(*p);
        if (a.kind == PacketActionKind::Drop) {
          lost = true;
          break;
        }
        if (a.kind == PacketActionKind::Corrupt) {
          if (p->payload.empty()) {
            p->seq ^= 1U << (a.bit % 32);
          } else {
            const std::size_t bit = a.bit % (p->payload.size() * 8);
            p->payload[bit / 8] ^= static_cast<std::uint8_t>(1U << (bit % 8));
          }
          p->corrupted = true;
          ++counters_.corrupted_by_probe;
          trace_packet("corrupt", *p, l);
        }
      }
    }
    auto* netp = &net;
    kernel().schedule_in(ser, EventClass::Network, "dnp.tx_done", [this, netp, l] {
      (*netp)[l.index()].busy = false;
      start_tx(*netp, l);
    });
    if (lost) {
      --in_flight_;
      ++counters_.dropped_probe;
      trace_packet("drop", *p, l, "probe");
    } else {
      const std::uint64_t epoch = s.epoch;
      kernel().schedule_in(ser + cfg_.hop_latency, EventClass::Network, "dnp.arrive",
                           [this, netp, l, p, epoch] { arrive(*netp, l, p, epoch); });
    }
    return;
  }
}

void Fabric::arrive(std::vector<LinkState>& net, const LinkId& l, PacketPtr p, std::uint64_t epoch) {
  if (net[l.index()].epoch != epoch) {
    drop(p, "link_down", l);
    return;
  }
  const Rank node = geom_.neighbor(l.src, l.dir);
  const Direction in_port = opposite(l.dir);
  if (!nics_[node].alive) {
    drop(p, "dnp_down", l);
    return;
  }
  p->hops++;
  p->prev_hop = l.src;
  if (!p->intact()) {
    ++counters_.crc_discarded;
    --in_flight_;
    trace_packet("crc_error", *p, l);
    if (crc_hook_) crc_hook_(node, in_port, *p);
    return;
  }
  if (p->corrupted) {
    ++counters_.crc_escapes;
    trace_packet("integrity_alarm", *p, l);
    if (on_integrity_alarm) on_integrity_alarm(*p);
  }
  if (p->transfer_id != 0) progress(p->transfer_id);
  if (p->link_local) {
    ++counters_.delivered;
    --in_flight_;
    if (keepalive_hook_) keepalive_hook_(node, in_port, *p, p->tx_start);
    return;
  }
  route_at(node, std::move(p));
}

void Fabric::drop(const PacketPtr& p, const char* reason, std::optional<LinkId> link) {
  --in_flight_;
  if (std::strcmp(reason, "dnp_down") == 0) {
    ++counters_.dropped_dnp;
  } else {
    ++counters_.dropped_link;
  }
  trace_packet("drop", *p, link, reason);
}

void Fabric::deliver(Rank node, const PacketPtr& p) {
  ++counters_.delivered;
  --in_flight_;
  trace_packet("deliver", *p);
  auto& nic = nics_[node];
  switch (p->kind) {
    case PacketKind::Put: {
      auto& rx = nic.put_rx[p->transfer_id];
      const std::uint32_t n = static_cast<std::uint32_t>((p->total_len + cfg_.mtu - 1) / cfg_.mtu);
      if (rx.done || rx.failed) {
        send_ack(node, *p, rx.failed ? kAckRemoteFail : kAckOk);
        return;
      }
      if (rx.got.empty()) rx.got.assign(n, false);
      if (p->seq >= n || rx.got[p->seq]) return;
      std::uint64_t off = 0;
      const std::uint64_t at = p->addr + static_cast<std::uint64_t>(p->seq) * cfg_.mtu;
      Bytes* mem = find_region(node, at, p->payload.size(), &off);
      if (!mem) {
        rx.failed = true;
        send_ack(node, *p, kAckRemoteFail);
        return;
      }
      std::copy(p->payload.begin(), p->payload.end(), mem->begin() + static_cast<std::ptrdiff_t>(off));
      rx.got[p->seq] = true;
      if (++rx.count == n) {
        rx.done = true;
        auto it = transfers_.find(p->transfer_id);
        if (it != transfers_.end()) {
          it->second.data_landed_at = kernel().now();
          if (it->second.post_completion) {
            nic.cq.push_back({p->transfer_id, kernel().now(), TransferStatus::Complete, FailReason::None, node});
          }
        }
        nic.cq_wq.notify_all();
        send_ack(node, *p, kAckOk);
      }
      return;
    }
    case PacketKind::GetReq: {
      std::uint64_t off = 0;
      Bytes* mem = find_region(node, p->addr, p->total_len, &off);
      if (!mem) {
        send_ack(node, *p, kAckRemoteFail);
        return;
      }
      const std::size_t len = p->total_len;
      std::uint32_t seq = 0;
      for (std::size_t pos = 0; pos < len; pos += cfg_.mtu, ++seq) {
        auto r = make_packet(node, p->src, PacketKind::GetReply);
        r->transfer_id = p->transfer_id;
        r->seq = seq;
        r->addr = p->addr;
        r->total_len = len;
        const std::size_t n = std::min(cfg_.mtu, len - pos);
        auto b = mem->begin() + static_cast<std::ptrdiff_t>(off + pos);
        r->payload.assign(b, b + static_cast<std::ptrdiff_t>(n));
        inject(r);
      }
      return;
    }
    case PacketKind::GetReply: {
      auto it = transfers_.find(p->transfer_id);
      if (it == transfers_.end() || it->second.terminal()) return;
      Transfer& t = it->second;
      if (p->seq >= t.got.size() || t.got[p->seq]) return;
      std::copy(p->payload.begin(), p->payload.end(),
                t.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(p->seq) * cfg_.mtu));
      t.got[p->seq] = true;
      if (--t.packets_outstanding == 0) finish(t, TransferStatus::Complete, FailReason::None);
      return;
    }
    case PacketKind::Send:
      deliver_send(node, p);
      return;
    case PacketKind::Ldm: {
      auto& h = service_handlers_[static_cast<std::size_t>(p->service)];
      if (h) h(node, *p);
      return;
    }
    case PacketKind::Ack: {
      auto it = transfers_.find(p->transfer_id);
      if (it == transfers_.end() || it->second.terminal()) return;
      if (p->status == kAckOk) {
        finish(it->second, TransferStatus::Complete, FailReason::None);
      } else {
        finish(it->second, TransferStatus::Failed, FailReason::Remote);
      }
      return;
    }
  }
}

void Fabric::deliver_send(Rank node, const PacketPtr& p) {
  auto& nic = nics_[node];
  const std::uint16_t port = p->port < kPortCount ? p->port : kUserPort;
  if (!nic.sends_seen.insert(p->transfer_id).second) {
    // Duplicate from a retransmit. Re-acknowledge unless the original is
    // still waiting for ring space.
    const bool held = std::any_of(nic.held[port].begin(), nic.held[port].end(),
                                  [&](const PacketPtr& h) { return h->transfer_id == p->transfer_id; });
    if (!held) send_ack(node, *p, kAckOk);
    return;
  }
  auto& ring = nic.rings[port];
  if (ring.size() >= cfg_.ring_capacity || !nic.held[port].empty()) {
    nic.held[port].push_back(p);
    auto it = transfers_.find(p->transfer_id);
    if (it != transfers_.end()) it->second.held_at_target = true;
    trace_packet("held", *p);
    return;
  }
  ring.push_back({p->src, p->transfer_id, kernel().now(), p->payload});
  nic.ring_wq[port].notify_all();
  send_ack(node, *p, kAckOk);
}

void Fabric::drain_held(Rank node, std::uint16_t port) {
  auto& nic = nics_[node];
  nic.drain_pending[port] = false;
  bool moved = false;
  while (!nic.held[port].empty() && nic.rings[port].size() < cfg_.ring_capacity) {
    PacketPtr p = std::move(nic.held[port].front());
    nic.held[port].pop_front();
    auto it = transfers_.find(p->transfer_id);
    if (it != transfers_.end()) {
      it->second.held_at_target = false;
      it->second.last_progress = kernel().now();
    }
    nic.rings[port].push_back({p->src, p->transfer_id, kernel().now(), p->payload});
    send_ack(node, *p, kAckOk);
    moved = true;
  }
  if (moved) nic.ring_wq[port].notify_all();
}

void Fabric::send_ack(Rank from, const Packet& about, std::uint8_t status) {
  auto a = make_packet(from, about.src, PacketKind::Ack);
  a->transfer_id = about.transfer_id;
  a->status = status;
  inject(a);
}

// --- transfers --------------------------------------------------------------

Transfer& Fabric::new_transfer(PacketKind kind, Rank src, Rank dst, Options& opts) {
  if (!geom_.valid(src) || !geom_.valid(dst)) {
    throw SimError("dnp: rank out of range (" + std::to_string(src) + " -> " + std::to_string(dst) + ")");
  }
  const TransferId id = next_transfer_++;
  Transfer& t = transfers_[id];
  t.id = id;
  t.kind = kind;
  t.initiator = src;
  t.target = dst;
  t.issued_at = kernel().now();
  t.last_progress = t.issued_at;
  t.retransmit = opts.retransmit.value_or(cfg_.retransmit);
  t.post_completion = opts.post_completion;
  t.on_complete = std::move(opts.on_complete);
  return t;
}

TransferId Fabric::rdma_put(Rank src, Rank dst, std::span<const std::uint8_t> data,
                            std::uint64_t remote_addr, Options opts) {
  if (data.empty()) throw SimError("dnp: empty PUT");
  Transfer& t = new_transfer(PacketKind::Put, src, dst, opts);
  t.remote_addr = remote_addr;
  t.total_len = data.size();
  t.data.assign(data.begin(), data.end());
  t.packets_total = static_cast<std::uint32_t>((data.size() + cfg_.mtu - 1) / cfg_.mtu);
  t.packets_outstanding = t.packets_total;
  launch(t);
  return t.id;
}

TransferId Fabric::rdma_get(Rank src, Rank dst, std::uint64_t remote_addr, std::size_t len, Options opts) {
  if (len == 0) throw SimError("dnp: zero-length GET");
  Transfer& t = new_transfer(PacketKind::GetReq, src, dst, opts);
  t.remote_addr = remote_addr;
  t.total_len = len;
  t.data.assign(len, 0);
  t.packets_total = static_cast<std::uint32_t>((len + cfg_.mtu - 1) / cfg_.mtu);
  t.packets_outstanding = t.packets_total;
  t.got.assign(t.packets_total, false);
  launch(t);
  return t.id;
}

TransferId Fabric::send(Rank src, Rank dst, std::span<const std::uint8_t> payload, std::uint16_t port,
                        Options opts) {
  if (payload.size() > cfg_.mtu) throw SimError("dnp: SEND payload exceeds MTU");
  if (port >= kPortCount) throw SimError("dnp: no such ring port");
  Transfer& t = new_transfer(PacketKind::Send, src, dst, opts);
  t.port = port;
  t.total_len = payload.size();
  t.data.assign(payload.begin(), payload.end());
  t.packets_total = 1;
  t.packets_outstanding = 1;
  launch(t);
  return t.id;
}

void Fabric::launch(Transfer& t) {
  const TransferId id = t.id;
  if (!nics_[t.initiator].alive) {
    kernel().schedule_in(0, EventClass::Protocol, "dnp.fail", [this, id] {
      auto& tr = transfers_.at(id);
      if (!tr.terminal()) finish(tr, TransferStatus::Failed, FailReason::DnpDown);
    });
    return;
  }
  switch (t.kind) {
    case PacketKind::Put:
      for (std::uint32_t seq = 0; seq < t.packets_total; ++seq) {
        auto p = make_packet(t.initiator, t.target, PacketKind::Put);
        p->transfer_id = id;
        p->seq = seq;
        p->addr = t.remote_addr;
        p->total_len = t.total_len;
        const std::size_t pos = static_cast<std::size_t>(seq) * cfg_.mtu;
        const std::size_t n = std::min(cfg_.mtu, t.total_len - pos);
        p->payload.assign(t.data.begin() + static_cast<std::ptrdiff_t>(pos),
                          t.data.begin() + static_cast<std::ptrdiff_t>(pos + n));
        inject(p);
      }
      break;
    case PacketKind::GetReq: {
      auto p = make_packet(t.initiator, t.target, PacketKind::GetReq);
      p->transfer_id = id;
      p->addr = t.remote_addr;
      p->total_len = t.total_len;
      inject(p);
      break;
    }
    case PacketKind::Send: {
      auto p = make_packet(t.initiator, t.target, PacketKind::Send);
      p->transfer_id = id;
      p->port = t.port;
      p->total_len = t.total_len;
      p->payload = t.data;
      inject(p);
      break;
    }
    default:
      break;
  }
  // Transfers may already be terminal (loopback completes in a later event,
  // but an unroutable first hop fails synchronously).
  auto it = transfers_.find(id);
  if (it != transfers_.end() && !it->second.terminal()) arm_timeout(id);
}

void Fabric::progress(TransferId id) {
  auto it = transfers_.find(id);
  if (it != transfers_.end()) it->second.last_progress = kernel().now();
}

void Fabric::arm_timeout(TransferId id) {
  const SimTime at = transfers_.at(id).last_progress + transfer_timeout();
  kernel().schedule(std::max(at, kernel().now()), EventClass::Protocol, "dnp.timeout",
                    [this, id] { on_timeout(id); });
}

void Fabric::on_timeout(TransferId id) {
  auto it = transfers_.find(id);
  if (it == transfers_.end() || it->second.terminal()) return;
  Transfer& t = it->second;
  const SimTime now = kernel().now();
  if (t.held_at_target || now - t.last_progress < transfer_timeout()) {
    if (t.held_at_target) t.last_progress = now;
    arm_timeout(id);
    return;
  }
  if (t.retransmit && t.attempts < cfg_.max_attempts && nics_[t.initiator].alive) {
    ++t.attempts;
    t.last_progress = now;
    if (trace_.on(TraceCategory::Packet)) {
      trace_.emit(now, TraceCategory::Packet, "retransmit",
                  TraceFields().kv("transfer_id", id).kv("attempt", t.attempts));
    }
    launch(t);
    return;
  }
  finish(t, TransferStatus::Failed, FailReason::Timeout);
}

void Fabric::finish(Transfer& t, TransferStatus status, FailReason reason) {
  t.status = status;
  t.reason = reason;
  t.completed_at = kernel().now();
  if (status == TransferStatus::Complete) t.packets_outstanding = 0;
  if (trace_.on(TraceCategory::Packet)) {
    TraceFields f;
    f.kv("transfer_id", t.id).kv("op", to_string(t.kind)).kv("src", t.initiator).kv("dst", t.target);
    if (status == TransferStatus::Failed) f.kv("reason", to_string(reason));
    trace_.emit(t.completed_at, TraceCategory::Packet, status == TransferStatus::Complete ? "complete" : "fail", f);
  }
  auto& nic = nics_[t.initiator];
  if (t.post_completion) nic.cq.push_back({t.id, t.completed_at, status, reason, t.initiator});
  nic.cq_wq.notify_all();
  if (t.on_complete) {
    auto cb = t.on_complete;  // the callback may start new transfers
    cb(t);
  }
}

// --- rings, completions, memory ---------------------------------------------

std::optional<RingEntry> Fabric::recv_ring(Rank dst, std::uint16_t port) {
  auto& nic = nics_.at(dst);
  auto& ring = nic.rings.at(port);
  if (ring.empty()) return std::nullopt;
  RingEntry e = std::move(ring.front());
  ring.pop_front();
  if (!nic.held[port].empty() && !nic.drain_pending[port]) {
    nic.drain_pending[port] = true;
    kernel().schedule_in(1, EventClass::Network, "dnp.drain", [this, dst, port] { drain_held(dst, port); });
  }
  return e;
}

std::optional<RingEntry> Fabric::recv_ring_from(Rank dst, Rank src, std::uint16_t port) {
  auto& nic = nics_.at(dst);
  auto& ring = nic.rings.at(port);
  auto it = std::find_if(ring.begin(), ring.end(), [src](const RingEntry& e) { return e.src == src; });
  if (it == ring.end()) return std::nullopt;
  RingEntry e = std::move(*it);
  ring.erase(it);
  if (!nic.held[port].empty() && !nic.drain_pending[port]) {
    nic.drain_pending[port] = true;
    kernel().schedule_in(1, EventClass::Network, "dnp.drain", [this, dst, port] { drain_held(dst, port); });
  }
  return e;
}

std::size_t Fabric::ring_size(Rank dst, std::uint16_t port) const { return nics_.at(dst).rings.at(port).size(); }

WaitQueue& Fabric::ring_waiters(Rank dst, std::uint16_t port) { return nics_.at(dst).ring_wq.at(port); }

std::optional<CompletionEvent> Fabric::poll_completion(Rank rank) {
  auto& cq = nics_.at(rank).cq;
  if (cq.empty()) return std::nullopt;
  CompletionEvent e = cq.front();
  cq.pop_front();
  return e;
}

WaitQueue& Fabric::completion_waiters(Rank rank) { return nics_.at(rank).cq_wq; }

const Transfer& Fabric::transfer(TransferId id) const {
  auto it = transfers_.find(id);
  if (it == transfers_.end()) throw SimError("dnp: unknown transfer " + std::to_string(id));
  return it->second;
}

void Fabric::register_region(Rank rank, std::uint64_t addr, std::size_t len) {
  auto& regions = nics_.at(rank).regions;
  regions[addr].assign(len, 0);
}

Bytes* Fabric::find_region(Rank rank, std::uint64_t addr, std::size_t len, std::uint64_t* offset) {
  auto& regions = nics_.at(rank).regions;
  auto it = regions.upper_bound(addr);
  if (it == regions.begin()) return nullptr;
  --it;
  const std::uint64_t off = addr - it->first;
  if (off + len > it->second.size()) return nullptr;
  *offset = off;
  return &it->second;
}

std::span<std::uint8_t> Fabric::region(Rank rank, std::uint64_t addr, std::size_t len) {
  std::uint64_t off = 0;
  Bytes* mem = find_region(rank, addr, len, &off);
  if (!mem) throw SimError("dnp: no region at rank " + std::to_string(rank));
  return {mem->data() + off, len};
}

// --- service class ----------------------------------------------------------

void Fabric::set_service_handler(ServiceType type, ServiceHandler h) {
  service_handlers_[static_cast<std::size_t>(type)] = std::move(h);
}

void Fabric::send_service(Rank src, Rank dst, ServiceType type, Bytes payload) {
  auto p = make_packet(src, dst, PacketKind::Ldm);
  p->service = type;
  p->payload = std::move(payload);
  inject(p);
}

void Fabric::send_link_keepalive(Rank src, Direction port, Bytes payload) {
  if (!nics_[src].alive) return;
  auto p = make_packet(src, geom_.neighbor(src, port), PacketKind::Ldm);
  p->service = ServiceType::LinkKeepalive;
  p->link_local = port;
  p->payload = std::move(payload);
  p->injected_at = kernel().now();
  p->seal();
  ++counters_.injected;
  ++in_flight_;
  enqueue(torus_, LinkId{src, port}, std::move(p));
}

// --- fault surface ----------------------------------------------------------

void Fabric::set_link_up(const LinkId& l, bool up) {
  for (const LinkId& d : {l, geom_.reverse(l)}) {
    auto& s = torus_[d.index()];
    if (s.up == up) continue;
    s.up = up;
    if (!up) {
      ++s.epoch;
      for (auto* q : {&s.service_q, &s.data_q}) {
        while (!q->empty()) {
          drop(q->front(), "link_down", d);
          q->pop_front();
        }
      }
    }
  }
}

void Fabric::set_link_degrade(const LinkId& l, std::uint32_t factor) {
  if (factor == 0) throw SimError("dnp: degrade factor must be >= 1");
  torus_[l.index()].factor = factor;
  torus_[geom_.reverse(l).index()].factor = factor;
}

void Fabric::add_probe(const LinkId& l, LinkProbe probe) { torus_[l.index()].probes.push_back(std::move(probe)); }

void Fabric::set_dnp_alive(Rank r, bool alive) {
  auto& nic = nics_.at(r);
  if (nic.alive == alive) return;
  nic.alive = alive;
  if (alive) return;
  // The router stops: queued and in-flight outgoing packets are lost.
  for (auto* net : {&torus_, &service_}) {
    if (net->empty()) continue;
    for (Direction d : kDirections) {
      const LinkId l{r, d};
      auto& s = (*net)[l.index()];
      ++s.epoch;
      for (auto* q : {&s.service_q, &s.data_q}) {
        while (!q->empty()) {
          drop(q->front(), "dnp_down", l);
          q->pop_front();
        }
      }
    }
  }
  for (std::uint16_t port = 0; port < kPortCount; ++port) {
    while (!nic.held[port].empty()) {
      // Held packets were already counted as delivered to the DNP.
      nic.held[port].pop_front();
    }
  }
}

}  // namespace torusim
