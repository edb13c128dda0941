#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "torusim/dnp.hpp"
#include "torusim/engine.hpp"
#include "torusim/topology.hpp"
#include "torusim/trace.hpp"

namespace torusim {

enum class LocalEventKind : std::uint8_t {
  HostFaultSuspected,
  DnpFaultSuspected,
  LinkFault,
  LinkDegraded,
  LinkRestored,
  RoutingFailure,
  CriticalEvent,
  TileDown,  // inferred by a controller from silence on both paths
};
const char* to_string(LocalEventKind k);

struct LocalFaultEvent {
  SimTime at = 0;
  Rank tile = 0;  // reporting tile
  LocalEventKind kind = LocalEventKind::HostFaultSuspected;
  std::uint64_t target = 0;  // rank, canonical link index or destination
  std::uint32_t code = 0;    // critical-event code / evidence
  friend bool operator==(const LocalFaultEvent&, const LocalFaultEvent&) = default;
};

enum class LinkHealth : std::uint8_t { Up, Down, Degraded };
const char* to_string(LinkHealth h);

template <typename T>
struct Versioned {
  T value{};
  SimTime at = 0;
  bool set = false;
};

/// Health of tiles and physical links as known at one level of the hierarchy.
///
/// Each entry keeps the time of the observation that produced it. Merging
/// keeps the later observation; at equal times a fault beats OK.
class FaultTable {
 public:
  FaultTable() = default;
  explicit FaultTable(const TorusGeometry& g);

  /// Returns true if anything changed.
  bool apply(const LocalFaultEvent& e, const TorusGeometry& g);
  bool merge(const FaultTable& other);

  bool host_down(Rank r) const { return tiles_[r].host.value; }
  bool dnp_down(Rank r) const { return tiles_[r].dnp.value; }
  bool tile_ok(Rank r) const { return !host_down(r) && !dnp_down(r); }
  /// Health of the physical link containing `canonical` (use physical_index).
  LinkHealth link(std::size_t canonical) const;
  const std::map<std::size_t, Versioned<LinkHealth>>& links() const { return links_; }
  std::size_t tiles() const { return tiles_.size(); }

  const std::vector<LocalFaultEvent>& criticals() const { return criticals_; }
  const std::vector<LocalFaultEvent>& routing_failures() const { return routing_; }

  std::vector<std::uint8_t> encode() const;
  static FaultTable decode(std::span<const std::uint8_t> bytes, std::size_t tiles);

  bool operator==(const FaultTable& o) const;

  /// Flagged entities, one per line, e.g. "tile 5 HOST_DOWN" or "link 3:+x DOWN".
  std::vector<std::string> flagged(const TorusGeometry& g) const;
  std::string report(const TorusGeometry& g) const;

 private:
  struct TileEntry {
    Versioned<bool> host;
    Versioned<bool> dnp;
  };
  template <typename T>
  static bool merge_entry(Versioned<T>& into, const Versioned<T>& from, bool from_is_fault);

  std::vector<TileEntry> tiles_;
  std::map<std::size_t, Versioned<LinkHealth>> links_;
  std::vector<LocalFaultEvent> criticals_;
  std::vector<LocalFaultEvent> routing_;
};

struct LofamoConfig {
  SimTime heartbeat_period = 2000;
  SimTime t_wd = 10000;
  SimTime t_check = 10000;
  SimTime keepalive_period = 5000;  // LiFaMa, per link
  SimTime keepalive_grace = 500;    // window check offset after each keepalive
  unsigned threshold = 3;           // K
  double degrade_ratio = 2.0;       // measured / nominal serialization
  SimTime controller_period = 10000;
  SimTime mgmt_latency = 1000;  // host management network, one way

  /// Empty string if valid, otherwise the first problem.
  std::string validate() const;
};

/// The LO|FA|MO stack on every tile plus the controller hierarchy.
///
/// Per tile: host and DNP write each other's watchdog registers; the DNP
/// Fault Manager checks the host register and the Host Fault Manager checks
/// the DNP register. The Link Fault Manager sends keepalives on all six ports
/// and turns CRC errors, missed keepalives and slow keepalives into link
/// state. Reports go up to the Z-plane controller and from there to the
/// master at rank 0, over the torus service class when the sender's DNP is
/// alive and over the host management network when its host is alive.
class Lofamo {
 public:
  Lofamo(Kernel& k, Fabric& f, Trace& trace, LofamoConfig cfg);
  Lofamo(const Lofamo&) = delete;
  Lofamo& operator=(const Lofamo&) = delete;

  void start();

  // Fault surface used by the injector.
  void kill_host(Rank r);
  void kill_dnp(Rank r);
  void critical(Rank r, std::uint32_t code);

  bool host_alive(Rank r) const { return tiles_[r].host_alive; }
  bool dnp_alive(Rank r) const { return f_.dnp_alive(r); }

  Rank master() const { return 0; }
  Rank controller_of(Rank r) const;
  bool is_controller(Rank r) const;

  const FaultTable& master_table() const { return controllers_.at(master()).table; }
  const FaultTable& controller_table(Rank c) const { return controllers_.at(c).table; }
  const FaultTable& local_table(Rank r) const { return tiles_[r].local; }

  /// Master table entries that are not explained by another entry: links
  /// touching a tile whose DNP is down are dropped.
  std::vector<std::string> root_causes() const;

  /// First time each flagged entity (as named by FaultTable::flagged)
  /// appeared in the master table.
  const std::map<std::string, SimTime>& master_flag_times() const { return flag_times_; }

  /// Every local event emitted anywhere, in emission order.
  const std::vector<LocalFaultEvent>& events() const { return events_; }

  /// Called after every change to the master table.
  void on_master_change(std::function<void(const FaultTable&)> cb) { master_cb_ = std::move(cb); }

  /// Documented worst-case detection latency for host/DNP/link faults:
  /// T_wd + T_check + heartbeat + propagation (two legs).
  SimTime detection_bound() const;
  /// Upper bound on one report leg (tile to controller or controller to master).
  SimTime propagation_leg() const;

  const LofamoConfig& config() const { return cfg_; }

  // Register-level access for tests.
  SimTime hwr(Rank r) const { return tiles_[r].hwr; }
  SimTime dwr(Rank r) const { return tiles_[r].dwr; }
  bool port_down(Rank r, Direction d) const;

 private:
  enum class Msg : std::uint8_t { Event, TileKeepalive, CtrlKeepalive, Rehome };
  enum class Path : std::uint8_t { Torus, Mgmt };

  struct Port {
    bool got_clean = false;
    bool bad_in_window = false;  // CRC error already counted this window
    unsigned bad = 0, good = 0;
    bool local_down = false;
    bool peer_down = false;
    unsigned slow = 0, fast = 0;
    bool degraded = false;
    bool reported_down = false;
  };
  struct Tile {
    bool host_alive = true;
    SimTime hwr = 0;  // written by host
    SimTime dwr = 0;  // written by DNP
    bool host_suspected = false;
    bool dnp_suspected = false;
    std::array<Port, 6> ports{};
    Rank controller = 0;
    FaultTable local;
    std::set<Rank> unreachable;
  };
  struct Leaf {
    SimTime last_torus = 0;
    SimTime last_mgmt = 0;
    bool dead = false;
  };
  struct Controller {
    Rank rank = 0;
    FaultTable table;
    std::map<Rank, Leaf> leaves;      // tiles reporting here
    std::map<Rank, Leaf> children;    // sub-controllers (master only)
  };

  bool tile_alive(Rank r) const { return tiles_[r].host_alive || f_.dnp_alive(r); }

  void every(SimTime period, SimTime offset, const char* label, std::function<bool()> body);
  void emit(Rank tile, LocalEventKind kind, std::uint64_t target, std::uint32_t code = 0);
  void send_up(Rank from, Rank to, Msg type, const std::vector<std::uint8_t>& body);
  void send_path(Rank from, Rank to, Path path, Msg type, const std::vector<std::uint8_t>& body);
  void deliver(Rank at, Path path, std::span<const std::uint8_t> msg);
  void controller_receive(Controller& c, Rank from, Path path, Msg type, std::span<const std::uint8_t> body);
  void merge_into(Controller& c, const FaultTable& t);
  void apply_at(Controller& c, const LocalFaultEvent& e);
  void after_change(Controller& c);
  void check_absence(Controller& c);

  void lifama_keepalive(Rank at, Direction in_port, const Packet& p, SimTime sent);
  void lifama_bad(Rank at, Direction in_port);
  void lifama_good(Rank at, Direction in_port);
  void lifama_update(Rank at, Direction in_port);

  Kernel& k_;
  Fabric& f_;
  Trace& trace_;
  LofamoConfig cfg_;
  const TorusGeometry& g_;
  std::vector<Tile> tiles_;
  std::map<Rank, Controller> controllers_;
  std::vector<LocalFaultEvent> events_;
  std::map<std::string, SimTime> flag_times_;
  std::function<void(const FaultTable&)> master_cb_;
  bool started_ = false;
};

}  // namespace torusim
