#pragma once

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "torusim/dal.hpp"
#include "torusim/dnp.hpp"
#include "torusim/lofamo.hpp"
#include "torusim/process.hpp"
#include "torusim/trace.hpp"

namespace torusim {

using Item = Bytes;

Item item_u64(std::uint64_t v);
std::uint64_t u64_item(const Item& item);

enum class AppState : std::uint8_t { Idle, Starting, Running, Stopping, Completed, Failed };
const char* to_string(AppState s);

enum class ControlVerb : std::uint8_t { Start, Stop, Pause, Resume, InstallChannel, Migrate };
const char* to_string(ControlVerb v);

struct RuntimeConfig {
  MapConfig map;
  SimTime ack_timeout = 50000;          // NACK-by-timeout for control commands
  SimTime watchdog_period = 2'000'000;  // zero-progress check, 0 disables
  SimTime drain_timeout = 1'000'000;    // STOP waits this long for a clean drain
  bool record_items = true;             // keep every channel value, not just the hash
};

struct ChannelLog {
  std::uint64_t count = 0;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  std::vector<Item> items;
};

struct RecoveryRecord {
  SimTime at = 0;
  std::string app;
  Rank failed_tile = 0;  // kNoTile for a scripted fault event
  Mapping mapping;
  std::uint32_t epoch = 0;
};

inline constexpr Rank kNoTile = ~Rank{0};

class DalRuntime;
struct ProcInstance;

/// What a behavior sees of the runtime. Inputs and outputs are numbered in
/// channel declaration order.
class ProcessContext {
 public:
  ProcessContext(DalRuntime& rt, ProcInstance& self) : rt_(rt), self_(self) {}

  /// Next item of input `i`; nullopt once the writer closed it.
  Task<std::optional<Item>> read(std::size_t i);
  /// Blocks while the channel is full.
  Task<void> write(std::size_t o, Item item);
  Task<void> write_all(const Item& item);
  Task<void> close(std::size_t o);
  Task<void> close_all();
  /// Lowest-numbered input among `inputs` that has an item or end-of-stream
  /// ready, waiting if none has. Not a Kahn operation; used by the comparator.
  Task<std::size_t> ready_any(std::vector<std::size_t> inputs);
  bool ready(std::size_t i) const;

  /// Firing boundary: waits while paused. Returns false when a draining STOP
  /// asks a source to finish.
  Task<bool> fire();

  /// Appends to the application's visible output (sinks).
  void emit(Item item);
  void integrity_alarm(const std::string& what);

  std::size_t inputs() const;
  std::size_t outputs() const;
  const std::string& id() const;
  Rank tile() const;
  std::uint32_t epoch() const;
  /// Index of this process in the deployed network.
  std::size_t index() const;
  /// Tile currently hosting process `proc` of the same application.
  Rank tile_of(std::size_t proc) const;
  Scheduler& scheduler();
  /// Direct DNP access for benchmarks that use RDMA next to their channels.
  Fabric& fabric();

 private:
  DalRuntime& rt_;
  ProcInstance& self_;
};

/// One running process on one tile.
struct ProcInstance {
  std::uint32_t app = 0, epoch = 0;
  std::size_t proc = 0;
  Rank tile = 0;
  std::string id;
  std::vector<std::uint32_t> in, out;  // deployed channel indices
  bool paused = false;
  bool stop = false;
  bool done = false;
  WaitQueue wq;
  std::unique_ptr<ProcessContext> ctx;
  ProcessRef ref;
};

/// Distributed application layer: a master controller on rank 0, a slave
/// controller on every tile, and the processes of the running applications.
///
/// Control commands travel as service-class packets; channel traffic uses
/// SEND into ring port 1 with credit-based flow control.
class DalRuntime {
 public:
  DalRuntime(Scheduler& s, Fabric& f, Trace& trace, AppSpec spec, RuntimeConfig cfg = {},
             const BehaviorRegistry& reg = default_registry());
  ~DalRuntime();
  DalRuntime(const DalRuntime&) = delete;
  DalRuntime& operator=(const DalRuntime&) = delete;

  /// Recovery follows the master fault table of `lofamo`.
  void attach(Lofamo& lofamo);

  /// Starts controllers and schedules the spec's scripted events.
  void start();
  /// Queues a scenario event at `at` (default now).
  void post(const FsmEvent& e, std::optional<SimTime> at = std::nullopt);
  void pause(const std::string& app, std::optional<SimTime> at = std::nullopt);
  void resume(const std::string& app, std::optional<SimTime> at = std::nullopt);

  /// Host death: everything running on `r` stops, its slave goes silent.
  void kill_host(Rank r);

  // --- observation ----------------------------------------------------------
  AppState state(const std::string& app) const;
  std::uint32_t epoch(const std::string& app) const;
  /// Current placement, or null if the app never deployed.
  const Mapping* mapping(const std::string& app) const;
  /// The network as deployed: critical apps are expanded into two replicas
  /// plus a comparator in front of every sink.
  const ProcessNetwork& deployed(const std::string& app) const;
  /// Sink output of the current epoch, sinks in process order.
  std::vector<Item> output(const std::string& app) const;
  /// Values written on each deployed channel during the current epoch.
  const std::vector<ChannelLog>& channel_logs(const std::string& app) const;

  const std::string& fsm_state() const { return fsm_state_; }
  /// Applications the current FSM state says are running.
  std::set<std::string> fsm_apps() const;
  /// Applications deployed right now (Starting, Running, Completed).
  std::set<std::string> deployed_apps() const;

  const std::vector<RecoveryRecord>& recoveries() const { return recoveries_; }
  const std::vector<std::string>& alarms() const { return alarms_; }
  const std::vector<std::string>& stalls() const { return stalls_; }
  const std::vector<std::string>& rejected() const { return rejected_; }
  std::uint64_t commands_sent() const { return commands_sent_; }
  /// True when the master has nothing queued or in progress.
  bool master_idle() const { return work_.empty() && !busy_; }

 private:
  friend class ProcessContext;

  enum class Wire : std::uint8_t { Data, Eos, Credit };
  enum class Ctl : std::uint8_t { Command, Ack, Done };

  struct Endpoint {
    std::uint32_t app = 0, epoch = 0, chan = 0;
    bool reader = false;
    Rank peer = 0;
    std::uint32_t capacity = 0;
    std::uint64_t sent = 0, consumed = 0;  // writer
    std::uint64_t next = 0;                // reader
    std::map<std::uint64_t, Item> pending;     // complete items by sequence number
    std::map<std::uint64_t, std::pair<Item, std::size_t>> partial;  // fragments, bytes so far
    std::optional<std::uint64_t> eos_at;
    WaitQueue wq;
  };
  using EpKey = std::tuple<std::uint32_t, std::uint32_t, bool>;  // app, channel, reader

  struct Slave {
    bool alive = true;
    std::map<EpKey, std::unique_ptr<Endpoint>> endpoints;
    std::map<std::pair<std::uint32_t, std::size_t>, std::unique_ptr<ProcInstance>> procs;
    ProcessRef dispatcher;
  };

  struct AppRun {
    ProcessNetwork net;      // as deployed
    std::vector<int> group;  // critical apps: replica 0/1, 2 for comparator and sinks
    AppState state = AppState::Idle;
    std::uint32_t epoch = 0;
    std::optional<Mapping> mapping;
    std::set<std::size_t> done;
    std::vector<ChannelLog> logs;
    std::map<std::size_t, std::vector<Item>> outputs;
    std::uint64_t progress = 0, watched = 0;
    bool stalled = false;
    bool paused = false;
    std::set<int> lost_replicas;
    std::size_t routing_seen = 0;
  };

  struct Work {
    enum class Kind { Event, Pause, Resume, Faults } kind = Kind::Event;
    FsmEvent event;
    bool boot = false;  // apps of the initial state; no FSM transition
  };

  enum class DeployResult { Ok, NoCapacity, Nack };

  // Slave side.
  void on_control(Rank at, const Packet& p);
  void apply_command(Rank at, std::span<const std::uint8_t> body);
  void on_wire(Rank at, const RingEntry& e);
  Process dispatcher(Rank at);
  void start_process(Rank at, std::uint32_t app, std::uint32_t epoch, std::size_t proc);
  void abort_app(Rank at, std::uint32_t app, std::uint32_t below_epoch);
  void process_exit(ProcInstance& pi);
  Endpoint* endpoint(Rank at, std::uint32_t app, std::uint32_t chan, bool reader, std::uint32_t epoch);
  void send_wire(Rank from, Rank to, Wire w, std::uint32_t app, std::uint32_t epoch, std::uint32_t chan,
                 std::uint64_t n, const Item* item = nullptr);
  void log_write(const ProcInstance& pi, std::uint32_t chan, const Item& item);
  void note_progress(std::uint32_t app, std::uint32_t epoch);
  void check_complete(std::uint32_t app);
  Task<void> wait_timeout(WaitQueue& q, SimTime deadline);

  // Master side.
  Process master_loop();
  Task<void> handle_event(FsmEvent e);
  Task<void> handle_faults();
  Task<void> broadcast(std::uint32_t app, ControlVerb verb, std::uint64_t arg = 0);
  Task<void> recover(std::uint32_t app, Rank failed);
  Task<DeployResult> deploy(std::uint32_t app, const MapRequest& base, std::set<Rank>& nacked);
  Task<bool> deploy_with_retry(std::uint32_t app, MapRequest req);
  Task<bool> await_acks(const std::vector<std::uint64_t>& ids, std::set<Rank>* nacked);
  std::uint64_t command(Rank to, ControlVerb verb, std::uint32_t app, std::uint32_t epoch, std::uint64_t a = 0,
                        std::uint64_t b = 0, std::uint64_t c = 0, std::uint64_t d = 0);
  Mapping compute_mapping(std::uint32_t app, const MapRequest& req) const;
  void set_state(std::uint32_t app, AppState s);
  void fsm_move(const std::string& to, std::set<std::string> apps, const FsmEvent& e);
  /// Target state of `e` from the current state, or nullopt if the FSM forbids it.
  std::optional<std::pair<std::string, std::set<std::string>>> fsm_target(const FsmEvent& e) const;
  void fail_app(std::uint32_t app, const std::string& why);
  void watchdog();
  void enqueue(Work w);
  void alarm(const std::string& what);

  static ProcessNetwork expand_critical(const ProcessNetwork& net, std::vector<int>& group);

  Scheduler& s_;
  Kernel& k_;
  Fabric& f_;
  Trace& trace_;
  AppSpec spec_;
  RuntimeConfig cfg_;
  const BehaviorRegistry& reg_;
  const TorusGeometry& g_;
  Lofamo* lofamo_ = nullptr;
  FaultTable health_;

  std::vector<Slave> slaves_;
  std::vector<AppRun> apps_;

  std::string fsm_state_;
  std::set<std::string> fsm_set_;  // implicit FSM
  std::deque<Work> work_;
  WaitQueue work_wq_;
  bool busy_ = false;
  ProcessRef master_;
  std::map<std::uint64_t, bool> acks_;
  std::map<std::uint64_t, Rank> ack_target_;
  WaitQueue ack_wq_;
  std::uint64_t next_cmd_id_ = 1;
  std::uint64_t commands_sent_ = 0;
  std::set<Rank> suspect_;  // NACKed tiles, kept out of new mappings
  WaitQueue done_wq_;
  std::vector<std::unique_ptr<ProcInstance>> graveyard_;

  std::vector<RecoveryRecord> recoveries_;
  std::vector<std::string> alarms_;
  std::vector<std::string> stalls_;
  std::vector<std::string> rejected_;
  bool started_ = false;
};

}  // namespace torusim
