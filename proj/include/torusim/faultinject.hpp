#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "torusim/dnp.hpp"
#include "torusim/engine.hpp"
#include "torusim/rng.hpp"
#include "torusim/topology.hpp"
#include "torusim/trace.hpp"

namespace torusim {

enum class FaultKind : std::uint8_t {
  LinkDrop,
  LinkCorrupt,
  LinkKill,
  LinkDegrade,
  TileKillHost,
  TileKillDnp,
  CriticalEvent,
};
const char* to_string(FaultKind k);
bool is_probe(FaultKind k);
bool is_link_fault(FaultKind k);

struct WhenAt {
  SimTime t = 0;
  friend bool operator==(const WhenAt&, const WhenAt&) = default;
};
struct WhenWindow {
  SimTime t1 = 0, t2 = 0;
  friend bool operator==(const WhenWindow&, const WhenWindow&) = default;
};
struct WhenPeriodic {
  SimTime start = 0, interval = 0;
  friend bool operator==(const WhenPeriodic&, const WhenPeriodic&) = default;
};
using When = std::variant<WhenAt, WhenWindow, WhenPeriodic>;

struct FaultClause {
  FaultKind kind = FaultKind::LinkKill;
  std::variant<LinkId, Rank> where;
  When when;
  double prob = 0;            // probes only
  std::uint64_t stream = 0;   // RNG key
  std::uint32_t factor = 1;   // degrade only
  std::uint32_t code = 0;     // critical event only
  int line = 0;               // source line, for diagnostics

  bool operator==(const FaultClause& o) const {
    return kind == o.kind && where == o.where && when == o.when && prob == o.prob && stream == o.stream &&
           factor == o.factor && code == o.code;
  }
};

struct FaultSpec {
  std::optional<std::uint64_t> seed;
  std::vector<FaultClause> clauses;
  bool operator==(const FaultSpec& o) const { return seed == o.seed && clauses == o.clauses; }
};

class SpecError : public std::runtime_error {
 public:
  SpecError(int line, int column, const std::string& msg);
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

/// Line-oriented fault specification:
///
///   # comment
///   seed=42
///   kind=link_drop where=link(0,+x) when=window 1000..5000 prob=0.25 stream=7
///   kind=link_kill where=link(3,-y) when=at 50000
///   kind=link_degrade where=link(1,+z) when=window 0..90000 factor=4
///   kind=tile_kill_host where=tile(5) when=at 20000
///   kind=critical_event where=tile(2) when=periodic 1000,5000 code=17
///
/// Keys may appear in any order. Clauses without `stream=` get their 1-based
/// clause index as the key.
FaultSpec parse_fault_spec(std::string_view text);
std::string print_fault_spec(const FaultSpec& spec);
std::string print_clause(const FaultClause& c);

/// Checks ranks and links against the geometry. Throws SpecError.
void validate_fault_spec(const FaultSpec& spec, const TorusGeometry& g);

/// Decision for one packet on a probe link: draw u; u < prob applies the
/// clause's action, and CORRUPT draws the payload bit from the same stream.
PacketAction apply_probe(const Packet& p, const FaultClause& clause, const CounterRng& rng,
                         RngStream& stream);

/// Receivers of injected tile faults and synthetic critical events.
struct FaultTargets {
  std::function<void(Rank)> kill_host;
  std::function<void(Rank)> kill_dnp;
  std::function<void(Rank, std::uint32_t code)> critical;
};

struct InjectedAction {
  SimTime at = 0;
  FaultKind kind{};
  std::string target;
  std::string action;
};

/// Arms a fault spec on the kernel and fabric.
class FaultInjector {
 public:
  FaultInjector(Kernel& k, Fabric& f, Trace& trace, FaultTargets targets, std::uint64_t seed);

  void arm(const FaultSpec& spec);

  /// Hash over every (time, target, action) the injector applied.
  std::uint64_t action_hash() const { return hash_.value(); }
  const std::vector<InjectedAction>& log() const { return log_; }
  std::uint64_t probe_decisions() const { return decisions_; }

 private:
  void record(FaultKind kind, const std::string& target, const std::string& action);
  void arm_clause(const FaultClause& c);
  void schedule_periodic(const FaultClause& c, SimTime at);

  Kernel& k_;
  Fabric& f_;
  Trace& trace_;
  FaultTargets targets_;
  CounterRng rng_;
  Fnv1a hash_;
  std::vector<InjectedAction> log_;
  std::uint64_t decisions_ = 0;
};

}  // namespace torusim
