#include "torusim/lofamo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "torusim/bytes.hpp"

namespace torusim {

const char* to_string(LocalEventKind k) {
  switch (k) {
    case LocalEventKind::HostFaultSuspected: return "HOST_FAULT_SUSPECTED";
    case LocalEventKind::DnpFaultSuspected: return "DNP_FAULT_SUSPECTED";
    case LocalEventKind::LinkFault: return "LINK_FAULT";
    case LocalEventKind::LinkDegraded: return "LINK_DEGRADED";
    case LocalEventKind::LinkRestored: return "LINK_RESTORED";
    case LocalEventKind::RoutingFailure: return "ROUTING_FAILURE";
    case LocalEventKind::CriticalEvent: return "CRITICAL_EVENT";
    case LocalEventKind::TileDown: return "TILE_DOWN";
  }
  return "?";
}

const char* to_string(LinkHealth h) {
  switch (h) {
    case LinkHealth::Up: return "UP";
    case LinkHealth::Down: return "DOWN";
    case LinkHealth::Degraded: return "DEGRADED";
  }
  return "?";
}

namespace {

int severity(bool v) { return v ? 1 : 0; }
int severity(LinkHealth h) {
  switch (h) {
    case LinkHealth::Up: return 0;
    case LinkHealth::Degraded: return 1;
    case LinkHealth::Down: return 2;
  }
  return 0;
}

void encode_event(ByteWriter& w, const LocalFaultEvent& e) {
  w.put<std::uint64_t>(e.at).put<std::uint32_t>(e.tile).put<std::uint8_t>(static_cast<std::uint8_t>(e.kind));
  w.put<std::uint64_t>(e.target).put<std::uint32_t>(e.code);
}

LocalFaultEvent decode_event(ByteReader& r) {
  LocalFaultEvent e;
  e.at = r.get<std::uint64_t>();
  e.tile = r.get<std::uint32_t>();
  e.kind = static_cast<LocalEventKind>(r.get<std::uint8_t>());
  e.target = r.get<std::uint64_t>();
  e.code = r.get<std::uint32_t>();
  return e;
}

bool add_unique(std::vector<LocalFaultEvent>& v, const LocalFaultEvent& e) {
  if (std::find(v.begin(), v.end(), e) != v.end()) return false;
  v.push_back(e);
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// FaultTable

FaultTable::FaultTable(const TorusGeometry& g) : tiles_(g.size()) {}

template <typename T>
bool FaultTable::merge_entry(Versioned<T>& into, const Versioned<T>& from, bool) {
  if (!from.set) return false;
  const bool take = !into.set || from.at > into.at ||
                    (from.at == into.at && severity(from.value) > severity(into.value));
  if (!take) return false;
  const bool changed = !into.set || into.value != from.value || into.at != from.at;
  into = from;
  return changed;
}

bool FaultTable::apply(const LocalFaultEvent& e, const TorusGeometry& g) {
  auto tile_entry = [&](Versioned<bool>& slot) {
    return merge_entry(slot, Versioned<bool>{true, e.at, true}, true);
  };
  auto link_entry = [&](LinkHealth h) {
    const auto idx = static_cast<std::size_t>(e.target);
    if (idx >= g.link_count()) return false;
    return merge_entry(links_[g.physical_index(g.link_at(idx))], Versioned<LinkHealth>{h, e.at, true},
                       h != LinkHealth::Up);
  };
  const auto r = static_cast<Rank>(e.target);
  switch (e.kind) {
    case LocalEventKind::HostFaultSuspected:
      return r < tiles_.size() && tile_entry(tiles_[r].host);
    case LocalEventKind::DnpFaultSuspected:
      return r < tiles_.size() && tile_entry(tiles_[r].dnp);
    case LocalEventKind::TileDown: {
      if (r >= tiles_.size()) return false;
      const bool a = tile_entry(tiles_[r].host);
      const bool b = tile_entry(tiles_[r].dnp);
      return a || b;
    }
    case LocalEventKind::LinkFault: return link_entry(LinkHealth::Down);
    case LocalEventKind::LinkDegraded: return link_entry(LinkHealth::Degraded);
    case LocalEventKind::LinkRestored: return link_entry(LinkHealth::Up);
    case LocalEventKind::CriticalEvent: return add_unique(criticals_, e);
    case LocalEventKind::RoutingFailure: return add_unique(routing_, e);
  }
  return false;
}

bool FaultTable::merge(const FaultTable& o) {
  bool changed = false;
  if (tiles_.size() < o.tiles_.size()) tiles_.resize(o.tiles_.size());
  for (std::size_t r = 0; r < o.tiles_.size(); ++r) {
    changed |= merge_entry(tiles_[r].host, o.tiles_[r].host, true);
    changed |= merge_entry(tiles_[r].dnp, o.tiles_[r].dnp, true);
  }
  for (const auto& [idx, v] : o.links_) changed |= merge_entry(links_[idx], v, v.value != LinkHealth::Up);
  for (const auto& e : o.criticals_) changed |= add_unique(criticals_, e);
  for (const auto& e : o.routing_) changed |= add_unique(routing_, e);
  return changed;
}

LinkHealth FaultTable::link(std::size_t canonical) const {
  auto it = links_.find(canonical);
  return it == links_.end() ? LinkHealth::Up : it->second.value;
}

std::vector<std::uint8_t> FaultTable::encode() const {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tiles_.size()));
  std::uint32_t n = 0;
  for (const auto& t : tiles_) n += t.host.set + t.dnp.set;
  w.put(n);
  for (std::size_t r = 0; r < tiles_.size(); ++r) {
    for (int which = 0; which < 2; ++which) {
      const auto& v = which == 0 ? tiles_[r].host : tiles_[r].dnp;
      if (!v.set) continue;
      w.put<std::uint32_t>(static_cast<std::uint32_t>(r)).put<std::uint8_t>(static_cast<std::uint8_t>(which));
      w.put<std::uint8_t>(v.value).put<std::uint64_t>(v.at);
    }
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(links_.size()));
  for (const auto& [idx, v] : links_) {
    w.put<std::uint64_t>(idx).put<std::uint8_t>(static_cast<std::uint8_t>(v.value)).put<std::uint64_t>(v.at);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(criticals_.size()));
  for (const auto& e : criticals_) encode_event(w, e);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(routing_.size()));
  for (const auto& e : routing_) encode_event(w, e);
  return w.take();
}

FaultTable FaultTable::decode(std::span<const std::uint8_t> bytes, std::size_t tiles) {
  ByteReader r(bytes);
  FaultTable t;
  const auto count = r.get<std::uint32_t>();
  t.tiles_.resize(std::max<std::size_t>(tiles, count));
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto rank = r.get<std::uint32_t>();
    const auto which = r.get<std::uint8_t>();
    Versioned<bool> v{r.get<std::uint8_t>() != 0, 0, true};
    v.at = r.get<std::uint64_t>();
    if (rank >= t.tiles_.size()) throw std::runtime_error("fault table: rank out of range");
    (which == 0 ? t.tiles_[rank].host : t.tiles_[rank].dnp) = v;
  }
  const auto nl = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nl; ++i) {
    const auto idx = r.get<std::uint64_t>();
    Versioned<LinkHealth> v{static_cast<LinkHealth>(r.get<std::uint8_t>()), 0, true};
    v.at = r.get<std::uint64_t>();
    t.links_[static_cast<std::size_t>(idx)] = v;
  }
  const auto nc = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nc; ++i) t.criticals_.push_back(decode_event(r));
  const auto nr = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nr; ++i) t.routing_.push_back(decode_event(r));
  return t;
}

bool FaultTable::operator==(const FaultTable& o) const {
  if (tiles_.size() != o.tiles_.size()) return false;
  for (std::size_t r = 0; r < tiles_.size(); ++r) {
    if (host_down(static_cast<Rank>(r)) != o.host_down(static_cast<Rank>(r))) return false;
    if (dnp_down(static_cast<Rank>(r)) != o.dnp_down(static_cast<Rank>(r))) return false;
  }
  auto non_up = [](const FaultTable& t) {
    std::map<std::size_t, LinkHealth> m;
    for (const auto& [i, v] : t.links_)
      if (v.value != LinkHealth::Up) m[i] = v.value;
    return m;
  };
  if (non_up(*this) != non_up(o)) return false;
  auto sorted = [](std::vector<LocalFaultEvent> v) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      return std::tie(a.at, a.tile, a.target, a.code) < std::tie(b.at, b.tile, b.target, b.code);
    });
    return v;
  };
  return sorted(criticals_) == sorted(o.criticals_) && sorted(routing_) == sorted(o.routing_);
}

std::vector<std::string> FaultTable::flagged(const TorusGeometry& g) const {
  std::vector<std::string> out;
  for (std::size_t r = 0; r < tiles_.size(); ++r) {
    if (tiles_[r].host.value) out.push_back("tile " + std::to_string(r) + " HOST_DOWN");
    if (tiles_[r].dnp.value) out.push_back("tile " + std::to_string(r) + " DNP_DOWN");
  }
  for (const auto& [idx, v] : links_) {
    if (v.value == LinkHealth::Up) continue;
    out.push_back("link " + to_string(g.link_at(idx)) + " " + to_string(v.value));
  }
  return out;
}

std::string FaultTable::report(const TorusGeometry& g) const {
  std::ostringstream os;
  for (const auto& s : flagged(g)) os << s << "\n";
  for (const auto& e : criticals_)
    os << "tile " << e.tile << " CRITICAL_EVENT code=" << e.code << " at=" << e.at << "\n";
  for (const auto& e : routing_)
    os << "tile " << e.tile << " ROUTING_FAILURE dst=" << e.target << " at=" << e.at << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// LofamoConfig

std::string LofamoConfig::validate() const {
  if (heartbeat_period == 0) return "heartbeat_period must be > 0";
  if (t_check == 0) return "t_check must be > 0";
  if (t_wd < heartbeat_period) return "t_wd must be >= heartbeat_period";
  if (keepalive_period == 0) return "keepalive_period must be > 0";
  if (keepalive_grace >= keepalive_period) return "keepalive_grace must be < keepalive_period";
  if (threshold == 0) return "threshold must be >= 1";
  if (!(degrade_ratio > 1.0)) return "degrade_ratio must be > 1";
  if (controller_period < 4) return "controller_period must be >= 4";
  return {};
}

// ---------------------------------------------------------------------------
// Lofamo

Lofamo::Lofamo(Kernel& k, Fabric& f, Trace& trace, LofamoConfig cfg)
    : k_(k), f_(f), trace_(trace), cfg_(cfg), g_(f.geometry()) {
  if (auto err = cfg_.validate(); !err.empty()) throw std::invalid_argument("lofamo: " + err);
  tiles_.resize(g_.size());
  for (Rank r = 0; r < g_.size(); ++r) {
    tiles_[r].controller = controller_of(r);
    tiles_[r].local = FaultTable(g_);
  }
  for (Rank r = 0; r < g_.size(); ++r) {
    if (!is_controller(r)) continue;
    auto& c = controllers_[r];
    c.rank = r;
    c.table = FaultTable(g_);
  }
  for (Rank r = 0; r < g_.size(); ++r) controllers_[tiles_[r].controller].leaves[r] = Leaf{};
  for (auto& [r, c] : controllers_)
    if (r != master()) controllers_[master()].children[r] = Leaf{};

  f_.on_keepalive([this](Rank at, Direction in, const Packet& p, SimTime sent) { lifama_keepalive(at, in, p, sent); });
  f_.on_crc_error([this](Rank at, Direction in, const Packet&) {
    tiles_[at].ports[static_cast<std::size_t>(in)].bad_in_window = true;
    lifama_bad(at, in);
  });
  f_.on_undeliverable([this](Rank at, const Packet& p) {
    if (p.service_class()) return;
    if (!tiles_[at].unreachable.insert(p.dst).second) return;
    emit(at, LocalEventKind::RoutingFailure, p.dst);
  });
  f_.set_service_handler(ServiceType::Diagnostic,
                         [this](Rank at, const Packet& p) { deliver(at, Path::Torus, p.payload); });
}

Rank Lofamo::controller_of(Rank r) const {
  const auto c = g_.coords_of(r);
  return g_.rank_of(Coord{0, 0, c.z});
}

bool Lofamo::is_controller(Rank r) const { return controller_of(r) == r; }

bool Lofamo::port_down(Rank r, Direction d) const {
  return tiles_[r].ports[static_cast<std::size_t>(d)].reported_down;
}

SimTime Lofamo::propagation_leg() const { return std::max(cfg_.mgmt_latency, f_.worst_path_latency()); }

SimTime Lofamo::detection_bound() const {
  return cfg_.t_wd + cfg_.t_check + cfg_.heartbeat_period + 2 * propagation_leg();
}

void Lofamo::every(SimTime period, SimTime offset, const char* label, std::function<bool()> body) {
  auto step = std::make_shared<std::function<void()>>();
  *step = [this, period, label, body = std::move(body), weak = std::weak_ptr(step)]() {
    if (!body()) return;
    if (auto s = weak.lock()) k_.schedule_in(period, EventClass::Protocol, label, [s] { (*s)(); });
  };
  k_.schedule(k_.now() + offset, EventClass::Protocol, label, [step] { (*step)(); });
}

void Lofamo::start() {
  if (started_) return;
  started_ = true;
  for (Rank r = 0; r < g_.size(); ++r) {
    every(cfg_.heartbeat_period, cfg_.heartbeat_period, "lofamo.host_hb", [this, r] {
      if (!tiles_[r].host_alive) return false;
      tiles_[r].hwr = k_.now();
      return true;
    });
    every(cfg_.heartbeat_period, cfg_.heartbeat_period, "lofamo.dnp_hb", [this, r] {
      if (!f_.dnp_alive(r)) return false;
      tiles_[r].dwr = k_.now();
      return true;
    });
    // DNP Fault Manager watches the host register.
    every(cfg_.t_check, cfg_.t_check, "lofamo.dfm", [this, r] {
      if (!f_.dnp_alive(r)) return false;
      auto& t = tiles_[r];
      if (!t.host_suspected && k_.now() - t.hwr > cfg_.t_wd) {
        t.host_suspected = true;
        emit(r, LocalEventKind::HostFaultSuspected, r, static_cast<std::uint32_t>(k_.now() - t.hwr));
      }
      return true;
    });
    // Host Fault Manager watches the DNP register.
    every(cfg_.t_check, cfg_.t_check, "lofamo.hfm", [this, r] {
      if (!tiles_[r].host_alive) return false;
      auto& t = tiles_[r];
      if (!t.dnp_suspected && k_.now() - t.dwr > cfg_.t_wd) {
        t.dnp_suspected = true;
        emit(r, LocalEventKind::DnpFaultSuspected, r, static_cast<std::uint32_t>(k_.now() - t.dwr));
      }
      return true;
    });
    // Link Fault Manager.
    every(cfg_.keepalive_period, cfg_.keepalive_period, "lofamo.lifama_tx", [this, r] {
      if (!f_.dnp_alive(r)) return false;
      for (auto d : kDirections) {
        const auto& port = tiles_[r].ports[static_cast<std::size_t>(d)];
        f_.send_link_keepalive(r, d, Bytes{static_cast<std::uint8_t>(port.local_down)});
      }
      return true;
    });
    every(cfg_.keepalive_period, cfg_.keepalive_period + cfg_.keepalive_grace, "lofamo.lifama_check", [this, r] {
      if (!f_.dnp_alive(r)) return false;
      for (auto d : kDirections) {
        auto& port = tiles_[r].ports[static_cast<std::size_t>(d)];
        const bool clean = port.got_clean;
        const bool counted = port.bad_in_window;
        port.got_clean = false;
        port.bad_in_window = false;
        if (clean) {
          lifama_good(r, d);
        } else if (!counted) {
          lifama_bad(r, d);
        }
      }
      return true;
    });
    // Tile keepalives carry the local table up, once per path.
    every(cfg_.controller_period, cfg_.controller_period, "lofamo.tile_ka_torus", [this, r] {
      if (!f_.dnp_alive(r)) return false;
      send_path(r, tiles_[r].controller, Path::Torus, Msg::TileKeepalive, tiles_[r].local.encode());
      return true;
    });
    every(cfg_.controller_period, cfg_.controller_period, "lofamo.tile_ka_mgmt", [this, r] {
      if (!tiles_[r].host_alive) return false;
      send_path(r, tiles_[r].controller, Path::Mgmt, Msg::TileKeepalive, tiles_[r].local.encode());
      return true;
    });
  }
  for (auto& [r, c] : controllers_) {
    const Rank cr = r;
    every(cfg_.controller_period / 4, cfg_.controller_period / 4, "lofamo.absence", [this, cr] {
      if (!tile_alive(cr)) return false;
      check_absence(controllers_.at(cr));
      return true;
    });
    if (cr == master()) continue;
    every(cfg_.controller_period, cfg_.controller_period, "lofamo.ctrl_ka_torus", [this, cr] {
      if (!f_.dnp_alive(cr)) return false;
      send_path(cr, master(), Path::Torus, Msg::CtrlKeepalive, controllers_.at(cr).table.encode());
      return true;
    });
    every(cfg_.controller_period, cfg_.controller_period, "lofamo.ctrl_ka_mgmt", [this, cr] {
      if (!tiles_[cr].host_alive) return false;
      send_path(cr, master(), Path::Mgmt, Msg::CtrlKeepalive, controllers_.at(cr).table.encode());
      return true;
    });
  }
}

void Lofamo::kill_host(Rank r) {
  if (!tiles_[r].host_alive) return;
  tiles_[r].host_alive = false;
  if (trace_.on(TraceCategory::Lofamo))
    trace_.emit(k_.now(), TraceCategory::Lofamo, "host_dead", TraceFields().kv("tile", r));
}

void Lofamo::kill_dnp(Rank r) {
  if (f_.dnp_alive(r)) f_.set_dnp_alive(r, false);
}

void Lofamo::critical(Rank r, std::uint32_t code) {
  if (!tile_alive(r)) return;
  emit(r, LocalEventKind::CriticalEvent, r, code);
}

void Lofamo::emit(Rank tile, LocalEventKind kind, std::uint64_t target, std::uint32_t code) {
  LocalFaultEvent e{k_.now(), tile, kind, target, code};
  events_.push_back(e);
  tiles_[tile].local.apply(e, g_);
  if (trace_.on(TraceCategory::Lofamo)) {
    trace_.emit(k_.now(), TraceCategory::Lofamo, "event",
                TraceFields().kv("tile", tile).kv("event", to_string(kind)).kv("target", target).kv("code", code));
  }
  ByteWriter w;
  encode_event(w, e);
  send_up(tile, tiles_[tile].controller, Msg::Event, w.take());
}

void Lofamo::send_up(Rank from, Rank to, Msg type, const std::vector<std::uint8_t>& body) {
  send_path(from, to, Path::Torus, type, body);
  send_path(from, to, Path::Mgmt, type, body);
}

void Lofamo::send_path(Rank from, Rank to, Path path, Msg type, const std::vector<std::uint8_t>& body) {
  ByteWriter w;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(type)).put<std::uint32_t>(from);
  auto msg = w.take();
  msg.insert(msg.end(), body.begin(), body.end());
  if (path == Path::Torus) {
    if (!f_.dnp_alive(from)) return;
    if (from == to) {
      k_.schedule_in(0, EventClass::Protocol, "lofamo.local", [this, to, msg = std::move(msg)] {
        if (f_.dnp_alive(to)) deliver(to, Path::Torus, msg);
      });
    } else {
      f_.send_service(from, to, ServiceType::Diagnostic, std::move(msg));
    }
    return;
  }
  if (!tiles_[from].host_alive) return;
  const SimTime delay = from == to ? 0 : cfg_.mgmt_latency;
  k_.schedule_in(delay, EventClass::Protocol, "lofamo.mgmt", [this, to, msg = std::move(msg)] {
    if (tiles_[to].host_alive) deliver(to, Path::Mgmt, msg);
  });
}

void Lofamo::deliver(Rank at, Path path, std::span<const std::uint8_t> msg) {
  ByteReader r(msg);
  const auto type = static_cast<Msg>(r.get<std::uint8_t>());
  const Rank from = r.get<std::uint32_t>();
  if (type == Msg::Rehome) {
    ByteReader b(r.rest());
    tiles_[at].controller = b.get<std::uint32_t>();
    return;
  }
  auto it = controllers_.find(at);
  if (it == controllers_.end()) return;
  controller_receive(it->second, from, path, type, r.rest());
}

void Lofamo::controller_receive(Controller& c, Rank from, Path path, Msg type,
                                std::span<const std::uint8_t> body) {
  auto touch = [&](Leaf& l) {
    (path == Path::Torus ? l.last_torus : l.last_mgmt) = k_.now();
  };
  switch (type) {
    case Msg::Event: {
      ByteReader r(body);
      const auto e = decode_event(r);
      apply_at(c, e);
      if (c.rank != master()) send_up(c.rank, master(), Msg::Event, std::vector<std::uint8_t>(body.begin(), body.end()));
      break;
    }
    case Msg::TileKeepalive: {
      touch(c.leaves[from]);
      merge_into(c, FaultTable::decode(body, g_.size()));
      break;
    }
    case Msg::CtrlKeepalive: {
      if (c.rank != master()) break;
      touch(c.children[from]);
      merge_into(c, FaultTable::decode(body, g_.size()));
      break;
    }
    case Msg::Rehome: break;
  }
}

void Lofamo::apply_at(Controller& c, const LocalFaultEvent& e) {
  if (c.table.apply(e, g_)) after_change(c);
}

void Lofamo::merge_into(Controller& c, const FaultTable& t) {
  if (c.table.merge(t)) after_change(c);
}

void Lofamo::after_change(Controller& c) {
  const bool is_master = c.rank == master();
  if (trace_.on(TraceCategory::Lofamo)) {
    trace_.emit(k_.now(), TraceCategory::Lofamo, "table",
                TraceFields()
                    .kv("level", is_master ? "master" : "controller")
                    .kv("tile", c.rank)
                    .kv("flagged", static_cast<std::uint64_t>(c.table.flagged(g_).size())));
  }
  if (!is_master) return;
  for (const auto& s : c.table.flagged(g_)) {
    if (flag_times_.emplace(s, k_.now()).second && trace_.on(TraceCategory::Lofamo))
      trace_.emit(k_.now(), TraceCategory::Lofamo, "flag", TraceFields().kv("entity", s));
  }
  if (master_cb_) master_cb_(c.table);
}

void Lofamo::check_absence(Controller& c) {
  const SimTime now = k_.now();
  const SimTime limit = cfg_.controller_period + cfg_.controller_period / 2;
  auto silent = [&](const Leaf& l) { return now - l.last_torus > limit && now - l.last_mgmt > limit; };
  for (auto& [r, leaf] : c.leaves) {
    if (r == c.rank || leaf.dead || !silent(leaf)) continue;
    leaf.dead = true;
    emit(c.rank, LocalEventKind::TileDown, r);
  }
  if (c.rank != master()) return;
  for (auto& [child, leaf] : c.children) {
    if (leaf.dead || !silent(leaf)) continue;
    leaf.dead = true;
    emit(c.rank, LocalEventKind::TileDown, child);
    for (Rank r = 0; r < g_.size(); ++r) {
      if (r == child || tiles_[r].controller != child) continue;
      c.leaves[r] = Leaf{now, now, false};
      ByteWriter w;
      w.put<std::uint32_t>(master());
      send_up(c.rank, r, Msg::Rehome, w.take());
    }
  }
}

void Lofamo::lifama_keepalive(Rank at, Direction in, const Packet& p, SimTime sent) {
  auto& port = tiles_[at].ports[static_cast<std::size_t>(in)];
  port.got_clean = true;
  const double measured = static_cast<double>(k_.now() - sent - f_.config().hop_latency);
  const double nominal = static_cast<double>(f_.serialization(p.payload.size()));
  const LinkId link{at, in};
  const auto canonical = static_cast<std::uint64_t>(g_.physical_index(link));
  if (measured > cfg_.degrade_ratio * nominal) {
    port.fast = 0;
    if (++port.slow >= cfg_.threshold && !port.degraded) {
      port.degraded = true;
      if (!port.reported_down) emit(at, LocalEventKind::LinkDegraded, canonical);
    }
  } else {
    port.slow = 0;
    if (++port.fast >= cfg_.threshold && port.degraded) {
      port.degraded = false;
      if (!port.reported_down) emit(at, LocalEventKind::LinkRestored, canonical);
    }
  }
  port.peer_down = !p.payload.empty() && p.payload[0] != 0;
  lifama_update(at, in);
}

void Lofamo::lifama_bad(Rank at, Direction in) {
  auto& port = tiles_[at].ports[static_cast<std::size_t>(in)];
  port.good = 0;
  if (++port.bad >= cfg_.threshold) port.local_down = true;
  lifama_update(at, in);
}

void Lofamo::lifama_good(Rank at, Direction in) {
  auto& port = tiles_[at].ports[static_cast<std::size_t>(in)];
  port.bad = 0;
  if (++port.good >= cfg_.threshold) port.local_down = false;
  lifama_update(at, in);
}

void Lofamo::lifama_update(Rank at, Direction in) {
  auto& port = tiles_[at].ports[static_cast<std::size_t>(in)];
  const bool down = port.local_down || port.peer_down;
  if (down == port.reported_down) return;
  port.reported_down = down;
  const LinkId link{at, in};
  f_.routing_status().set(link, !down);
  const auto canonical = static_cast<std::uint64_t>(g_.physical_index(link));
  LocalEventKind kind = LocalEventKind::LinkFault;
  if (!down) kind = port.degraded ? LocalEventKind::LinkDegraded : LocalEventKind::LinkRestored;
  emit(at, kind, canonical);
}

std::vector<std::string> Lofamo::root_causes() const {
  const auto& t = master_table();
  std::vector<std::string> out;
  for (Rank r = 0; r < t.tiles(); ++r) {
    if (t.host_down(r)) out.push_back("tile " + std::to_string(r) + " HOST_DOWN");
    if (t.dnp_down(r)) out.push_back("tile " + std::to_string(r) + " DNP_DOWN");
  }
  for (const auto& [idx, v] : t.links()) {
    if (v.value == LinkHealth::Up) continue;
    const auto l = g_.link_at(idx);
    if (t.dnp_down(l.src) || t.dnp_down(g_.neighbor(l.src, l.dir))) continue;
    out.push_back("link " + to_string(l) + " " + to_string(v.value));
  }
  return out;
}

}  // namespace torusim
