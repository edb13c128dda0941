#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "torusim/faultinject.hpp"  // SpecError
#include "torusim/lofamo.hpp"
#include "torusim/process.hpp"
#include "torusim/topology.hpp"

namespace torusim {

class ProcessContext;

// ---------------------------------------------------------------------------
// Behaviors

/// `name(arg,arg,...)` from an application spec.
struct BehaviorToken {
  std::string name;
  std::vector<std::string> args;
  std::string text() const;
  friend bool operator==(const BehaviorToken&, const BehaviorToken&) = default;
};

/// Builds the coroutine body of one process instance.
using ProcessBody = std::function<Process(ProcessContext&)>;

struct BehaviorDef {
  /// Empty string if the arguments and port counts are acceptable.
  std::function<std::string(const BehaviorToken&, std::size_t inputs, std::size_t outputs)> check;
  std::function<ProcessBody(const BehaviorToken&)> make;
  bool is_source = false;  // stops at the next firing boundary on a draining STOP
};

/// Fixed library of behaviors an application spec may name.
class BehaviorRegistry {
 public:
  void add(const std::string& name, BehaviorDef def) { defs_[name] = std::move(def); }
  const BehaviorDef* find(const std::string& name) const {
    auto it = defs_.find(name);
    return it == defs_.end() ? nullptr : &it->second;
  }

 private:
  std::map<std::string, BehaviorDef> defs_;
};

/// source, sink, identity, affine, table, merge, plus anything registered
/// later (the benchmarks add dpsnn).
BehaviorRegistry& default_registry();

// ---------------------------------------------------------------------------
// Process networks and scenario FSM

inline constexpr std::uint32_t kDefaultCapacity = 64;

struct ProcessSpec {
  std::string id;
  BehaviorToken behavior;
  std::uint32_t weight = 1;
  friend bool operator==(const ProcessSpec&, const ProcessSpec&) = default;
};

struct ChannelSpec {
  std::size_t src = 0;  // process index
  std::size_t dst = 0;
  std::uint32_t capacity = kDefaultCapacity;  // items; 0 is a rendezvous
  friend bool operator==(const ChannelSpec&, const ChannelSpec&) = default;
};

struct ProcessNetwork {
  std::string name;
  std::vector<ProcessSpec> processes;
  std::vector<ChannelSpec> channels;
  bool critical = false;

  std::optional<std::size_t> index_of(const std::string& id) const;
  std::vector<std::size_t> inputs_of(std::size_t p) const;   // channel indices, declaration order
  std::vector<std::size_t> outputs_of(std::size_t p) const;
  friend bool operator==(const ProcessNetwork&, const ProcessNetwork&) = default;
};

enum class FsmEventKind : std::uint8_t { Start, Stop, Fault };
struct FsmEvent {
  FsmEventKind kind = FsmEventKind::Start;
  std::string app;
  std::string text() const;
  friend bool operator==(const FsmEvent&, const FsmEvent&) = default;
};

struct FsmTransition {
  std::string from;
  FsmEvent event;
  std::string to;
  friend bool operator==(const FsmTransition&, const FsmTransition&) = default;
};

/// States are named sets of concurrently running applications. With no
/// declared states the FSM is implicit: every set is a state and start/stop
/// move between them.
struct ScenarioFsm {
  std::vector<std::pair<std::string, std::set<std::string>>> states;
  std::string initial;
  std::vector<FsmTransition> transitions;

  bool implicit() const { return states.empty(); }
  const std::set<std::string>* apps_of(const std::string& state) const;
  std::optional<std::string> state_with(const std::set<std::string>& apps) const;
  std::optional<std::string> step(const std::string& state, const FsmEvent& e) const;
  friend bool operator==(const ScenarioFsm&, const ScenarioFsm&) = default;
};

struct ScriptedEvent {
  SimTime at = 0;
  FsmEvent event;
  friend bool operator==(const ScriptedEvent&, const ScriptedEvent&) = default;
};

struct AppSpec {
  std::vector<ProcessNetwork> apps;
  ScenarioFsm fsm;
  std::vector<ScriptedEvent> script;

  const ProcessNetwork* app(const std::string& name) const;
  std::optional<std::size_t> app_index(const std::string& name) const;
  friend bool operator==(const AppSpec&, const AppSpec&) = default;
};

/// Line-oriented application spec:
///
///   app name=pipe critical=false
///   process app=pipe id=src behavior=source(100) weight=2
///   process app=pipe id=snk behavior=sink
///   channel app=pipe src=src dst=snk capacity=8
///   state name=idle apps=
///   state name=run apps=pipe
///   initial state=idle
///   transition from=idle event=start(pipe) to=run
///   event at=1000 event=start(pipe)
///
/// Keys may appear in any order after the record word.
AppSpec parse_app_spec(std::string_view text, const BehaviorRegistry& reg = default_registry());
std::string print_app_spec(const AppSpec& spec);

// ---------------------------------------------------------------------------
// Mapping

struct MapConfig {
  std::uint32_t tile_capacity = 0;  // max total weight per tile; 0 is unbounded
  std::uint32_t spares = 0;         // highest healthy ranks held back for recovery
};

struct Mapping {
  std::vector<Rank> tile_of;  // per process
  std::set<Rank> spares;

  std::set<Rank> used() const { return {tile_of.begin(), tile_of.end()}; }
  friend bool operator==(const Mapping&, const Mapping&) = default;
};

class MappingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Total weight already placed on each tile by other mappings.
std::map<Rank, std::uint64_t> tile_loads(const std::vector<std::pair<const ProcessNetwork*, Mapping>>& existing);

struct MapRequest {
  std::map<std::size_t, Rank> pinned;  // processes that stay where they are
  std::set<Rank> exclude;              // tiles not to use
  std::set<Rank> prefer;               // tried first; also disables spare reservation
  std::optional<std::set<std::size_t>> only;  // place just these (others are ignored)
};

/// Greedy placement: processes by descending weight (ties by index), each to
/// the healthy tile minimizing (resulting load, hop-weighted traffic to peers
/// already placed, rank). Throws MappingError when a process fits nowhere.
Mapping map_network(const ProcessNetwork& net, const TorusGeometry& g, const FaultTable& health,
                    const std::map<Rank, std::uint64_t>& load, const MapConfig& cfg, const MapRequest& req = {});

/// Largest per-tile load (including `load`) of a placement.
std::uint64_t max_load(const ProcessNetwork& net, const std::vector<Rank>& tile_of,
                       const std::map<Rank, std::uint64_t>& load = {});

/// Exhaustive minimum of max_load over all placements on `tiles`.
std::uint64_t optimal_max_load(const ProcessNetwork& net, const std::vector<Rank>& tiles);

}  // namespace torusim
