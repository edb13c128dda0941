#include "torusim/dal_runtime.hpp"

#include <algorithm>
#include <limits>

#include "torusim/bytes.hpp"

namespace torusim {

namespace {

std::string set_name(const std::set<std::string>& apps) {
  std::string s = "{";
  for (const auto& a : apps) s += (s.size() > 1 ? "," : "") + a;
  return s + "}";
}

// Room left in one SEND for item bytes after the wire header.
constexpr std::size_t kWireHeader = 1 + 4 + 4 + 4 + 8 + 4 + 4;

}  // namespace

const char* to_string(AppState s) {
  switch (s) {
    case AppState::Idle: return "IDLE";
    case AppState::Starting: return "STARTING";
    case AppState::Running: return "RUNNING";
    case AppState::Stopping: return "STOPPING";
    case AppState::Completed: return "COMPLETED";
    case AppState::Failed: return "FAILED";
  }
  return "?";
}

const char* to_string(ControlVerb v) {
  switch (v) {
    case ControlVerb::Start: return "START";
    case ControlVerb::Stop: return "STOP";
    case ControlVerb::Pause: return "PAUSE";
    case ControlVerb::Resume: return "RESUME";
    case ControlVerb::InstallChannel: return "INSTALL_CHANNEL";
    case ControlVerb::Migrate: return "MIGRATE";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ProcessContext

Task<std::optional<Item>> ProcessContext::read(std::size_t i) {
  DalRuntime& rt = rt_;
  ProcInstance& me = self_;
  const std::uint32_t chan = me.in.at(i);
  for (;;) {
    auto* ep = rt.endpoint(me.tile, me.app, chan, true, me.epoch);
    if (!ep) {
      co_await me.wq.wait();  // torn down; the kill is on its way
      continue;
    }
    if (auto it = ep->pending.find(ep->next); it != ep->pending.end()) {
      Item item = std::move(it->second);
      ep->pending.erase(it);
      ++ep->next;
      rt.send_wire(me.tile, ep->peer, DalRuntime::Wire::Credit, me.app, me.epoch, chan, ep->next);
      rt.note_progress(me.app, me.epoch);
      co_return item;
    }
    if (ep->eos_at && ep->next >= *ep->eos_at) co_return std::nullopt;
    co_await ep->wq.wait();
  }
}

Task<void> ProcessContext::write(std::size_t o, Item item) {
  DalRuntime& rt = rt_;
  ProcInstance& me = self_;
  const std::uint32_t chan = me.out.at(o);
  auto* ep = rt.endpoint(me.tile, me.app, chan, false, me.epoch);
  while (!ep) {
    co_await me.wq.wait();
    ep = rt.endpoint(me.tile, me.app, chan, false, me.epoch);
  }
  const std::uint64_t limit = std::max<std::uint32_t>(ep->capacity, 1);
  while (ep->sent - ep->consumed >= limit) co_await ep->wq.wait();
  const std::uint64_t n = ep->sent++;
  rt.log_write(me, chan, item);
  rt.send_wire(me.tile, ep->peer, DalRuntime::Wire::Data, me.app, me.epoch, chan, n, &item);
  rt.note_progress(me.app, me.epoch);
  // Rendezvous: the write completes when the reader has taken the item.
  if (ep->capacity == 0)
    while (ep->consumed < ep->sent) co_await ep->wq.wait();
}

Task<void> ProcessContext::write_all(const Item& item) {
  for (std::size_t o = 0; o < self_.out.size(); ++o) co_await write(o, item);
}

Task<void> ProcessContext::close(std::size_t o) {
  const std::uint32_t chan = self_.out.at(o);
  if (auto* ep = rt_.endpoint(self_.tile, self_.app, chan, false, self_.epoch))
    rt_.send_wire(self_.tile, ep->peer, DalRuntime::Wire::Eos, self_.app, self_.epoch, chan, ep->sent);
  co_return;
}

Task<void> ProcessContext::close_all() {
  for (std::size_t o = 0; o < self_.out.size(); ++o) co_await close(o);
}

bool ProcessContext::ready(std::size_t i) const {
  auto* ep = rt_.endpoint(self_.tile, self_.app, self_.in.at(i), true, self_.epoch);
  if (!ep) return false;
  return ep->pending.count(ep->next) || (ep->eos_at && ep->next >= *ep->eos_at);
}

Task<std::size_t> ProcessContext::ready_any(std::vector<std::size_t> inputs) {
  for (;;) {
    std::vector<WaitQueue*> qs;
    for (std::size_t i : inputs) {
      if (ready(i)) co_return i;
      if (auto* ep = rt_.endpoint(self_.tile, self_.app, self_.in.at(i), true, self_.epoch)) qs.push_back(&ep->wq);
    }
    qs.push_back(&self_.wq);
    co_await rt_.s_.wait_any(std::move(qs));
  }
}

Task<bool> ProcessContext::fire() {
  while (self_.paused && !self_.stop) co_await self_.wq.wait();
  co_return !self_.stop;
}

void ProcessContext::emit(Item item) {
  auto& run = rt_.apps_[self_.app];
  if (self_.epoch != run.epoch) return;
  run.outputs[self_.proc].push_back(std::move(item));
  rt_.note_progress(self_.app, self_.epoch);
}

void ProcessContext::integrity_alarm(const std::string& what) {
  rt_.alarm(rt_.apps_[self_.app].net.name + "/" + self_.id + ": " + what);
}

std::size_t ProcessContext::inputs() const { return self_.in.size(); }
std::size_t ProcessContext::outputs() const { return self_.out.size(); }
const std::string& ProcessContext::id() const { return self_.id; }
Rank ProcessContext::tile() const { return self_.tile; }
std::uint32_t ProcessContext::epoch() const { return self_.epoch; }
std::size_t ProcessContext::index() const { return self_.proc; }
Rank ProcessContext::tile_of(std::size_t proc) const { return rt_.apps_[self_.app].mapping->tile_of.at(proc); }
Scheduler& ProcessContext::scheduler() { return rt_.s_; }
Fabric& ProcessContext::fabric() { return rt_.f_; }

// ---------------------------------------------------------------------------
// Construction and observation

DalRuntime::DalRuntime(Scheduler& s, Fabric& f, Trace& trace, AppSpec spec, RuntimeConfig cfg,
                       const BehaviorRegistry& reg)
    : s_(s),
      k_(s.kernel()),
      f_(f),
      trace_(trace),
      spec_(std::move(spec)),
      cfg_(cfg),
      reg_(reg),
      g_(f.geometry()),
      health_(f.geometry()),
      slaves_(f.geometry().size()),
      work_wq_(s),
      ack_wq_(s),
      done_wq_(s) {
  apps_.resize(spec_.apps.size());
  for (std::size_t i = 0; i < apps_.size(); ++i) {
    apps_[i].net = spec_.apps[i];
    if (spec_.apps[i].critical) apps_[i].net = expand_critical(spec_.apps[i], apps_[i].group);
  }
  if (spec_.fsm.implicit()) {
    fsm_state_ = set_name({});
  } else {
    fsm_state_ = spec_.fsm.initial;
    if (const auto* a = spec_.fsm.apps_of(fsm_state_)) fsm_set_ = *a;
  }
  f_.set_service_handler(ServiceType::Control, [this](Rank at, const Packet& p) { on_control(at, p); });
}

DalRuntime::~DalRuntime() {
  f_.set_service_handler(ServiceType::Control, nullptr);
  for (auto& sl : slaves_) {
    s_.kill(sl.dispatcher);
    for (auto& [key, pi] : sl.procs) s_.kill(pi->ref);
  }
  s_.kill(master_);
}

void DalRuntime::attach(Lofamo& lofamo) {
  lofamo_ = &lofamo;
  health_ = lofamo.master_table();
  lofamo.on_master_change([this](const FaultTable& t) {
    health_ = t;
    // One pending Faults item covers any number of table changes.
    for (const auto& w : work_)
      if (w.kind == Work::Kind::Faults) return;
    enqueue(Work{Work::Kind::Faults, {}});
  });
}

void DalRuntime::start() {
  if (started_) return;
  started_ = true;
  for (Rank r = 0; r < slaves_.size(); ++r) slaves_[r].dispatcher = s_.spawn("dal.slave." + std::to_string(r), dispatcher(r));
  master_ = s_.spawn("dal.master", master_loop());
  for (const auto& a : fsm_set_) {
    Work w{Work::Kind::Event, FsmEvent{FsmEventKind::Start, a}};
    w.boot = true;
    enqueue(w);
  }
  for (const auto& ev : spec_.script) post(ev.event, ev.at);
  if (cfg_.watchdog_period) k_.schedule_in(cfg_.watchdog_period, EventClass::Protocol, "dal.watchdog", [this] { watchdog(); });
}

void DalRuntime::post(const FsmEvent& e, std::optional<SimTime> at) {
  k_.schedule(at.value_or(k_.now()), EventClass::Protocol, "dal.event",
              [this, e] { enqueue(Work{Work::Kind::Event, e}); });
}

void DalRuntime::pause(const std::string& app, std::optional<SimTime> at) {
  k_.schedule(at.value_or(k_.now()), EventClass::Protocol, "dal.pause",
              [this, app] { enqueue(Work{Work::Kind::Pause, FsmEvent{FsmEventKind::Start, app}}); });
}

void DalRuntime::resume(const std::string& app, std::optional<SimTime> at) {
  k_.schedule(at.value_or(k_.now()), EventClass::Protocol, "dal.resume",
              [this, app] { enqueue(Work{Work::Kind::Resume, FsmEvent{FsmEventKind::Start, app}}); });
}

void DalRuntime::kill_host(Rank r) {
  auto& sl = slaves_.at(r);
  if (!sl.alive) return;
  sl.alive = false;
  s_.kill(sl.dispatcher);
  for (std::uint32_t a = 0; a < apps_.size(); ++a) abort_app(r, a, std::numeric_limits<std::uint32_t>::max());
  if (r == 0) s_.kill(master_);
  trace_.emit(k_.now(), TraceCategory::App, "slave_down", TraceFields().kv("tile", r));
}

AppState DalRuntime::state(const std::string& app) const { return apps_.at(spec_.app_index(app).value()).state; }
std::uint32_t DalRuntime::epoch(const std::string& app) const { return apps_.at(spec_.app_index(app).value()).epoch; }

const Mapping* DalRuntime::mapping(const std::string& app) const {
  const auto& m = apps_.at(spec_.app_index(app).value()).mapping;
  return m ? &*m : nullptr;
}

const ProcessNetwork& DalRuntime::deployed(const std::string& app) const {
  return apps_.at(spec_.app_index(app).value()).net;
}

std::vector<Item> DalRuntime::output(const std::string& app) const {
  std::vector<Item> out;
  for (const auto& [p, items] : apps_.at(spec_.app_index(app).value()).outputs)
    out.insert(out.end(), items.begin(), items.end());
  return out;
}

const std::vector<ChannelLog>& DalRuntime::channel_logs(const std::string& app) const {
  return apps_.at(spec_.app_index(app).value()).logs;
}

std::set<std::string> DalRuntime::fsm_apps() const { return fsm_set_; }

std::set<std::string> DalRuntime::deployed_apps() const {
  std::set<std::string> out;
  for (const auto& a : apps_)
    if (a.state == AppState::Starting || a.state == AppState::Running || a.state == AppState::Stopping ||
        a.state == AppState::Completed)
      out.insert(a.net.name);
  return out;
}

// ---------------------------------------------------------------------------
// Slave side

void DalRuntime::on_control(Rank at, const Packet& p) {
  if (!s_.current()) graveyard_.clear();
  ByteReader r(p.payload);
  const auto ctl = static_cast<Ctl>(r.get<std::uint8_t>());
  if (!slaves_[at].alive) return;
  switch (ctl) {
    case Ctl::Command:
      apply_command(at, r.rest());
      break;
    case Ctl::Ack: {
      if (at != 0) return;
      const auto id = r.get<std::uint64_t>();
      const bool ok = r.get<std::uint8_t>() != 0;
      if (!ack_target_.count(id)) return;
      acks_[id] = ok;
      ack_wq_.notify_all();
      break;
    }
    case Ctl::Done: {
      if (at != 0) return;
      const auto app = r.get<std::uint32_t>();
      const auto ep = r.get<std::uint32_t>();
      const auto proc = r.get<std::uint64_t>();
      auto& run = apps_.at(app);
      if (ep != run.epoch) return;
      run.done.insert(proc);
      done_wq_.notify_all();
      if (run.state == AppState::Running) check_complete(app);
      break;
    }
  }
}

void DalRuntime::apply_command(Rank at, std::span<const std::uint8_t> body) {
  ByteReader r(body);
  const auto id = r.get<std::uint64_t>();
  const auto verb = static_cast<ControlVerb>(r.get<std::uint8_t>());
  const auto app = r.get<std::uint32_t>();
  const auto epoch = r.get<std::uint32_t>();
  const auto a = r.get<std::uint64_t>(), b = r.get<std::uint64_t>();
  const auto c = r.get<std::uint64_t>(), d = r.get<std::uint64_t>();
  auto& sl = slaves_[at];
  trace_.emit(k_.now(), TraceCategory::Control, "apply",
              TraceFields().kv("tile", at).kv("id", id).kv("verb", to_string(verb)).kv("app", app).kv("epoch", epoch));

  auto each_proc = [&](auto fn) {
    for (auto& [key, pi] : sl.procs)
      if (pi->app == app && pi->epoch == epoch) fn(*pi);
  };
  switch (verb) {
    case ControlVerb::InstallChannel: {
      abort_app(at, app, epoch);
      const EpKey key{app, static_cast<std::uint32_t>(a), b != 0};
      auto& slot = sl.endpoints[key];
      if (!slot || slot->epoch != epoch) {
        slot = std::make_unique<Endpoint>();
        slot->app = app;
        slot->epoch = epoch;
        slot->chan = static_cast<std::uint32_t>(a);
        slot->reader = b != 0;
        slot->peer = static_cast<Rank>(c);
        slot->capacity = static_cast<std::uint32_t>(d);
        slot->wq.bind(s_);
      }
      break;
    }
    case ControlVerb::Start:
      start_process(at, app, epoch, a);
      break;
    case ControlVerb::Stop:
      if (a) {
        each_proc([](ProcInstance& pi) {
          if (pi.in.empty()) {
            pi.stop = true;
            pi.wq.notify_all();
          }
        });
      } else {
        abort_app(at, app, epoch + 1);
      }
      break;
    case ControlVerb::Pause:
    case ControlVerb::Resume:
      each_proc([&](ProcInstance& pi) {
        pi.paused = verb == ControlVerb::Pause;
        pi.wq.notify_all();
      });
      break;
    case ControlVerb::Migrate:
      abort_app(at, app, epoch);
      break;
  }
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(Ctl::Ack)).put(id).put(std::uint8_t{1}).put(at);
  f_.send_service(at, 0, ServiceType::Control, w.take());
}

void DalRuntime::start_process(Rank at, std::uint32_t app, std::uint32_t epoch, std::size_t proc) {
  auto& sl = slaves_[at];
  auto& slot = sl.procs[{app, proc}];
  if (slot && slot->epoch == epoch) return;  // duplicate START
  if (slot) {
    s_.kill(slot->ref);
    graveyard_.push_back(std::move(slot));
  }
  const auto& net = apps_[app].net;
  const auto& ps = net.processes.at(proc);
  auto pi = std::make_unique<ProcInstance>();
  pi->app = app;
  pi->epoch = epoch;
  pi->proc = proc;
  pi->tile = at;
  pi->id = ps.id;
  for (auto c : net.inputs_of(proc)) pi->in.push_back(static_cast<std::uint32_t>(c));
  for (auto c : net.outputs_of(proc)) pi->out.push_back(static_cast<std::uint32_t>(c));
  pi->wq.bind(s_);
  pi->ctx = std::make_unique<ProcessContext>(*this, *pi);
  const BehaviorDef* def = reg_.find(ps.behavior.name);
  if (!def) throw SimError("dal: unknown behavior '" + ps.behavior.name + "'");
  auto body = def->make(ps.behavior)(*pi->ctx);
  pi->ref = s_.spawn(net.name + "/" + ps.id + "@" + std::to_string(epoch), std::move(body));
  ProcInstance* raw = pi.get();
  pi->ref->on_exit = [this, raw] { process_exit(*raw); };
  slot = std::move(pi);
}

void DalRuntime::abort_app(Rank at, std::uint32_t app, std::uint32_t below_epoch) {
  auto& sl = slaves_[at];
  for (auto it = sl.procs.begin(); it != sl.procs.end();) {
    if (it->first.first == app && it->second->epoch < below_epoch) {
      s_.kill(it->second->ref);
      graveyard_.push_back(std::move(it->second));
      it = sl.procs.erase(it);
    } else {
      ++it;
    }
  }
  for (auto it = sl.endpoints.begin(); it != sl.endpoints.end();) {
    if (std::get<0>(it->first) == app && it->second->epoch < below_epoch)
      it = sl.endpoints.erase(it);
    else
      ++it;
  }
}

void DalRuntime::process_exit(ProcInstance& pi) {
  pi.done = true;
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(Ctl::Done)).put(pi.app).put(pi.epoch).put(static_cast<std::uint64_t>(pi.proc));
  f_.send_service(pi.tile, 0, ServiceType::Control, w.take());
}

DalRuntime::Endpoint* DalRuntime::endpoint(Rank at, std::uint32_t app, std::uint32_t chan, bool reader,
                                           std::uint32_t epoch) {
  auto& eps = slaves_[at].endpoints;
  auto it = eps.find(EpKey{app, chan, reader});
  if (it == eps.end() || it->second->epoch != epoch) return nullptr;
  return it->second.get();
}

void DalRuntime::send_wire(Rank from, Rank to, Wire w, std::uint32_t app, std::uint32_t epoch, std::uint32_t chan,
                           std::uint64_t n, const Item* item) {
  TransferOptions opts;
  opts.retransmit = true;
  opts.post_completion = false;
  auto header = [&](std::uint32_t total, std::uint32_t off) {
    ByteWriter bw;
    bw.put(static_cast<std::uint8_t>(w)).put(app).put(epoch).put(chan).put(n).put(total).put(off);
    return bw;
  };
  if (!item) {
    auto bw = header(0, 0);
    f_.send(from, to, bw.data(), kRuntimePort, opts);
    return;
  }
  // Items larger than one packet go as fragments; the reader reassembles by offset.
  const std::size_t room = f_.config().mtu - kWireHeader;
  const auto total = static_cast<std::uint32_t>(item->size());
  std::size_t off = 0;
  do {
    const std::size_t len = std::min(room, item->size() - off);
    auto bw = header(total, static_cast<std::uint32_t>(off));
    auto& buf = bw.data();
    buf.insert(buf.end(), item->begin() + static_cast<std::ptrdiff_t>(off),
               item->begin() + static_cast<std::ptrdiff_t>(off + len));
    f_.send(from, to, buf, kRuntimePort, opts);
    off += len;
  } while (off < item->size());
}

Process DalRuntime::dispatcher(Rank at) {
  for (;;) {
    while (auto e = f_.recv_ring(at, kRuntimePort)) on_wire(at, *e);
    co_await f_.ring_waiters(at, kRuntimePort).wait();
  }
}

void DalRuntime::on_wire(Rank at, const RingEntry& e) {
  if (!slaves_[at].alive) return;
  ByteReader r(e.payload);
  const auto w = static_cast<Wire>(r.get<std::uint8_t>());
  const auto app = r.get<std::uint32_t>();
  const auto epoch = r.get<std::uint32_t>();
  const auto chan = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  const auto total = r.get<std::uint32_t>();
  const auto off = r.get<std::uint32_t>();
  auto* ep = endpoint(at, app, chan, w != Wire::Credit, epoch);
  if (!ep) return;  // stale epoch or torn down
  switch (w) {
    case Wire::Data: {
      if (n < ep->next || ep->pending.count(n)) return;
      const auto bytes = r.rest();
      if (total == bytes.size()) {
        ep->pending.emplace(n, Item(bytes.begin(), bytes.end()));
      } else {
        auto& [buf, got] = ep->partial[n];
        buf.resize(total);
        std::copy(bytes.begin(), bytes.end(), buf.begin() + off);
        got += bytes.size();
        if (got < total) return;
        ep->pending.emplace(n, std::move(buf));
        ep->partial.erase(n);
      }
      break;
    }
    case Wire::Eos:
      ep->eos_at = n;
      break;
    case Wire::Credit:
      ep->consumed = std::max(ep->consumed, n);
      break;
  }
  ep->wq.notify_all();
}

void DalRuntime::log_write(const ProcInstance& pi, std::uint32_t chan, const Item& item) {
  auto& run = apps_[pi.app];
  if (pi.epoch != run.epoch || chan >= run.logs.size()) return;
  auto& log = run.logs[chan];
  ++log.count;
  Fnv1a h;
  h.update_pod(log.hash);
  const auto len = static_cast<std::uint64_t>(item.size());
  h.update_pod(len);
  h.update(item.data(), item.size());
  log.hash = h.value();
  if (cfg_.record_items) log.items.push_back(item);
}

void DalRuntime::note_progress(std::uint32_t app, std::uint32_t epoch) {
  auto& run = apps_[app];
  if (epoch == run.epoch) ++run.progress;
}

// ---------------------------------------------------------------------------
// Master side

void DalRuntime::enqueue(Work w) {
  work_.push_back(std::move(w));
  work_wq_.notify_all();
}

Process DalRuntime::master_loop() {
  for (;;) {
    while (work_.empty()) co_await work_wq_.wait();
    Work w = std::move(work_.front());
    work_.pop_front();
    busy_ = true;
    switch (w.kind) {
      case Work::Kind::Event:
        if (w.boot) {
          // Boot starts bypass the transition table; the FSM is already there.
          const auto idx = spec_.app_index(w.event.app);
          if (idx && apps_[*idx].state == AppState::Idle) {
            auto& run = apps_[*idx];
            ++run.epoch;
            set_state(*idx, AppState::Starting);
            if (co_await deploy_with_retry(*idx, {})) {
              set_state(*idx, AppState::Running);
              check_complete(*idx);
            } else {
              fail_app(*idx, "no capacity");
            }
          }
        } else {
          co_await handle_event(w.event);
        }
        break;
      case Work::Kind::Pause:
      case Work::Kind::Resume: {
        const auto idx = spec_.app_index(w.event.app);
        const bool pausing = w.kind == Work::Kind::Pause;
        if (!idx || apps_[*idx].state != AppState::Running || apps_[*idx].paused == pausing) {
          rejected_.push_back(std::string(pausing ? "pause(" : "resume(") + w.event.app + ") in " + fsm_state_);
          break;
        }
        apps_[*idx].paused = pausing;
        co_await broadcast(*idx, pausing ? ControlVerb::Pause : ControlVerb::Resume);
        trace_.emit(k_.now(), TraceCategory::App, pausing ? "paused" : "resumed",
                    TraceFields().kv("app", w.event.app));
        break;
      }
      case Work::Kind::Faults:
        co_await handle_faults();
        break;
    }
    busy_ = false;
  }
}

std::optional<std::pair<std::string, std::set<std::string>>> DalRuntime::fsm_target(const FsmEvent& e) const {
  std::set<std::string> next = fsm_set_;
  if (e.kind == FsmEventKind::Start) {
    if (next.count(e.app)) return std::nullopt;
    next.insert(e.app);
  } else if (e.kind == FsmEventKind::Stop) {
    if (!next.count(e.app)) return std::nullopt;
    next.erase(e.app);
  }
  if (spec_.fsm.implicit()) return std::make_pair(set_name(next), next);
  if (spec_.fsm.apps_of(fsm_state_)) {
    if (auto to = spec_.fsm.step(fsm_state_, e)) return std::make_pair(*to, *spec_.fsm.apps_of(*to));
    if (e.kind == FsmEventKind::Fault) return std::make_pair(fsm_state_, fsm_set_);
    return std::nullopt;
  }
  // Synthesized failure state: only moves back into a declared state.
  if (auto to = spec_.fsm.state_with(next)) return std::make_pair(*to, next);
  return std::nullopt;
}

void DalRuntime::fsm_move(const std::string& to, std::set<std::string> apps, const FsmEvent& e) {
  trace_.emit(k_.now(), TraceCategory::App, "fsm",
              TraceFields().kv("from", fsm_state_).kv("event", e.text()).kv("to", to));
  fsm_state_ = to;
  fsm_set_ = std::move(apps);
}

void DalRuntime::set_state(std::uint32_t app, AppState s) {
  auto& run = apps_[app];
  if (run.state == s) return;
  run.state = s;
  trace_.emit(k_.now(), TraceCategory::App, "state",
              TraceFields().kv("app", run.net.name).kv("state", to_string(s)).kv("epoch", run.epoch));
}

void DalRuntime::check_complete(std::uint32_t app) {
  auto& run = apps_[app];
  if (run.state != AppState::Running) return;
  // Done when every sink has finished; a net without sinks needs every process.
  bool any_sink = false;
  for (std::size_t p = 0; p < run.net.processes.size(); ++p) {
    if (!run.net.outputs_of(p).empty()) continue;
    any_sink = true;
    if (!run.done.count(p)) return;
  }
  if (!any_sink && run.done.size() < run.net.processes.size()) return;
  set_state(app, AppState::Completed);
}

void DalRuntime::fail_app(std::uint32_t app, const std::string& why) {
  auto& run = apps_[app];
  for (Rank r : run.mapping ? run.mapping->used() : std::set<Rank>{})
    if (health_.tile_ok(r)) command(r, ControlVerb::Migrate, app, run.epoch + 1);
  ++run.epoch;
  run.paused = false;
  set_state(app, AppState::Failed);
  trace_.emit(k_.now(), TraceCategory::App, "failed", TraceFields().kv("app", run.net.name).kv("why", why));
  auto next = fsm_set_;
  next.erase(run.net.name);
  std::string name;
  if (spec_.fsm.implicit())
    name = set_name(next);
  else
    name = spec_.fsm.state_with(next).value_or("failed(" + run.net.name + ")");
  fsm_move(name, next, FsmEvent{FsmEventKind::Fault, run.net.name});
}

void DalRuntime::alarm(const std::string& what) {
  alarms_.push_back(what);
  trace_.emit(k_.now(), TraceCategory::App, "integrity_alarm", TraceFields().kv("what", what));
}

Task<void> DalRuntime::handle_event(FsmEvent e) {
  const auto idx = spec_.app_index(e.app);
  auto target = fsm_target(e);
  auto reject = [&] { rejected_.push_back(e.text() + " in " + fsm_state_); };
  if (!idx || !target) {
    reject();
    co_return;
  }
  auto& run = apps_[*idx];
  switch (e.kind) {
    case FsmEventKind::Start: {
      if (run.state != AppState::Idle && run.state != AppState::Failed) {
        reject();
        co_return;
      }
      ++run.epoch;
      run.paused = false;
      run.lost_replicas.clear();
      set_state(*idx, AppState::Starting);
      if (co_await deploy_with_retry(*idx, {})) {
        set_state(*idx, AppState::Running);
        fsm_move(target->first, target->second, e);
        check_complete(*idx);
      } else {
        fail_app(*idx, "no capacity");
      }
      break;
    }
    case FsmEventKind::Stop: {
      fsm_move(target->first, target->second, e);
      if (run.state == AppState::Running) {
        set_state(*idx, AppState::Stopping);
        if (run.paused) {
          run.paused = false;
          co_await broadcast(*idx, ControlVerb::Resume);
        }
        co_await broadcast(*idx, ControlVerb::Stop, 1);
        const SimTime deadline = k_.now() + cfg_.drain_timeout;
        while (run.done.size() < run.net.processes.size() && k_.now() < deadline)
          co_await wait_timeout(done_wq_, deadline);
        trace_.emit(k_.now(), TraceCategory::App, "drained",
                    TraceFields().kv("app", e.app).kv("clean", run.done.size() == run.net.processes.size() ? 1 : 0));
      }
      if (run.mapping && (run.state == AppState::Stopping || run.state == AppState::Completed))
        co_await broadcast(*idx, ControlVerb::Stop, 0);
      set_state(*idx, AppState::Idle);
      break;
    }
    case FsmEventKind::Fault:
      if (run.state != AppState::Running) {
        reject();
        co_return;
      }
      co_await recover(*idx, kNoTile);
      break;
  }
}

Task<void> DalRuntime::handle_faults() {
  const auto& rf = health_.routing_failures();
  for (std::uint32_t idx = 0; idx < apps_.size(); ++idx) {
    auto& run = apps_[idx];
    if (run.state != AppState::Running || !run.mapping) {
      run.routing_seen = rf.size();
      continue;
    }
    const auto used = run.mapping->used();
    std::set<Rank> bad;
    for (Rank r : used)
      if (!health_.tile_ok(r)) bad.insert(r);
    // Link faults matter only once the app's own traffic became undeliverable.
    for (std::size_t i = run.routing_seen; i < rf.size(); ++i)
      if (used.count(rf[i].tile) && used.count(static_cast<Rank>(rf[i].target))) bad.insert(static_cast<Rank>(rf[i].target));
    run.routing_seen = rf.size();
    if (bad.empty()) continue;

    if (run.net.critical || !run.group.empty()) {
      std::set<int> hit;
      for (std::size_t p = 0; p < run.group.size(); ++p)
        if (bad.count(run.mapping->tile_of[p])) hit.insert(run.group[p]);
      std::set<int> lost = run.lost_replicas;
      lost.insert(hit.begin(), hit.end());
      if (!hit.count(2) && lost.size() == 1) {
        if (run.lost_replicas.empty()) {
          run.lost_replicas = lost;
          trace_.emit(k_.now(), TraceCategory::App, "replica_lost",
                      TraceFields().kv("app", run.net.name).kv("replica", *lost.begin()).kv("tile", *bad.begin()));
        }
        continue;
      }
    }
    co_await recover(idx, *bad.begin());
  }
}

Task<void> DalRuntime::recover(std::uint32_t app, Rank failed) {
  auto& run = apps_[app];
  const Mapping old = *run.mapping;
  const std::uint32_t new_epoch = run.epoch + 1;
  trace_.emit(k_.now(), TraceCategory::App, "recover",
              TraceFields().kv("app", run.net.name).kv("failed", failed == kNoTile ? std::string("-") : std::to_string(failed)));

  std::set<Rank> gone;
  for (Rank r : old.used())
    if (!health_.tile_ok(r) || suspect_.count(r) || r == failed) gone.insert(r);
  std::vector<std::uint64_t> ids;
  for (Rank r : old.used())
    if (!gone.count(r)) ids.push_back(command(r, ControlVerb::Migrate, app, new_epoch));
  std::set<Rank> nacked;
  co_await await_acks(ids, &nacked);
  suspect_.insert(nacked.begin(), nacked.end());
  gone.insert(nacked.begin(), nacked.end());

  run.epoch = new_epoch;
  run.lost_replicas.clear();
  set_state(app, AppState::Starting);
  MapRequest req;
  for (std::size_t p = 0; p < old.tile_of.size(); ++p)
    if (!gone.count(old.tile_of[p])) req.pinned[p] = old.tile_of[p];
  req.exclude = gone;
  req.prefer = old.spares;
  if (co_await deploy_with_retry(app, req)) {
    set_state(app, AppState::Running);
    recoveries_.push_back({k_.now(), run.net.name, failed, *run.mapping, run.epoch});
    const FsmEvent fe{FsmEventKind::Fault, run.net.name};
    if (auto t = fsm_target(fe)) fsm_move(t->first, t->second, fe);
    check_complete(app);
  } else {
    fail_app(app, "no capacity after fault");
  }
}

Mapping DalRuntime::compute_mapping(std::uint32_t app, const MapRequest& req) const {
  const auto& run = apps_[app];
  std::vector<std::pair<const ProcessNetwork*, Mapping>> others;
  for (std::uint32_t i = 0; i < apps_.size(); ++i) {
    const auto& o = apps_[i];
    if (i == app || !o.mapping) continue;
    if (o.state == AppState::Starting || o.state == AppState::Running || o.state == AppState::Completed ||
        o.state == AppState::Stopping)
      others.emplace_back(&o.net, *o.mapping);
  }
  const auto load = tile_loads(others);
  MapRequest base = req;
  base.exclude.insert(suspect_.begin(), suspect_.end());
  if (run.group.empty()) return map_network(run.net, g_, health_, load, cfg_.map, base);

  // Replicas and the comparator/sink group go to pairwise disjoint tile sets.
  Mapping out;
  out.tile_of.assign(run.net.processes.size(), 0);
  std::set<Rank> taken;
  for (int grp = 0; grp < 3; ++grp) {
    MapRequest sub;
    sub.only.emplace();
    for (std::size_t p = 0; p < run.group.size(); ++p)
      if (run.group[p] == grp) sub.only->insert(p);
      else if (auto it = base.pinned.find(p); it != base.pinned.end()) taken.insert(it->second);
    for (const auto& [p, r] : base.pinned)
      if (run.group[p] == grp) sub.pinned[p] = r;
    sub.exclude = base.exclude;
    sub.exclude.insert(taken.begin(), taken.end());
    for (Rank r : base.prefer)
      if (!sub.exclude.count(r)) sub.prefer.insert(r);
    auto m = map_network(run.net, g_, health_, load, cfg_.map, sub);
    for (std::size_t p : *sub.only) {
      out.tile_of[p] = m.tile_of[p];
      taken.insert(m.tile_of[p]);
    }
    out.spares.insert(m.spares.begin(), m.spares.end());
  }
  for (Rank r : out.used()) out.spares.erase(r);
  return out;
}

Task<DalRuntime::DeployResult> DalRuntime::deploy(std::uint32_t app, const MapRequest& base, std::set<Rank>& nacked) {
  auto& run = apps_[app];
  Mapping m;
  try {
    m = compute_mapping(app, base);
  } catch (const MappingError& e) {
    trace_.emit(k_.now(), TraceCategory::App, "map_failed", TraceFields().kv("app", run.net.name).kv("why", e.what()));
    co_return DeployResult::NoCapacity;
  }
  run.mapping = m;
  run.done.clear();
  run.outputs.clear();
  run.logs.assign(run.net.channels.size(), ChannelLog{});
  run.progress = run.watched = 0;
  run.stalled = false;
  {
    TraceFields tf;
    tf.kv("app", run.net.name).kv("epoch", run.epoch);
    std::string tiles;
    for (Rank r : m.tile_of) tiles += (tiles.empty() ? "" : ",") + std::to_string(r);
    tf.kv("tiles", tiles);
    trace_.emit(k_.now(), TraceCategory::App, "mapped", tf);
  }

  // Channels first, on both ends, then the processes.
  std::vector<std::uint64_t> ids;
  for (std::size_t c = 0; c < run.net.channels.size(); ++c) {
    const auto& ch = run.net.channels[c];
    const Rank wt = m.tile_of[ch.src], rd = m.tile_of[ch.dst];
    ids.push_back(command(wt, ControlVerb::InstallChannel, app, run.epoch, c, 0, rd, ch.capacity));
    ids.push_back(command(rd, ControlVerb::InstallChannel, app, run.epoch, c, 1, wt, ch.capacity));
  }
  if (!co_await await_acks(ids, &nacked)) co_return DeployResult::Nack;
  ids.clear();
  for (std::size_t p = 0; p < run.net.processes.size(); ++p)
    ids.push_back(command(m.tile_of[p], ControlVerb::Start, app, run.epoch, p));
  if (!co_await await_acks(ids, &nacked)) co_return DeployResult::Nack;
  co_return DeployResult::Ok;
}

Task<bool> DalRuntime::deploy_with_retry(std::uint32_t app, MapRequest req) {
  auto& run = apps_[app];
  for (std::uint32_t attempt = 0; attempt <= g_.size(); ++attempt) {
    std::set<Rank> nacked;
    const auto res = co_await deploy(app, req, nacked);
    if (res == DeployResult::Ok) co_return true;
    if (res == DeployResult::NoCapacity) co_return false;
    // A tile did not answer: keep it out, clear what was placed, try again one epoch up.
    suspect_.insert(nacked.begin(), nacked.end());
    trace_.emit(k_.now(), TraceCategory::App, "nack", TraceFields().kv("app", run.net.name).kv("tiles", nacked.size()));
    std::vector<std::uint64_t> ids;
    for (Rank r : run.mapping->used())
      if (!suspect_.count(r)) ids.push_back(command(r, ControlVerb::Migrate, app, run.epoch + 1));
    std::set<Rank> more;
    co_await await_acks(ids, &more);
    suspect_.insert(more.begin(), more.end());
    ++run.epoch;
    for (auto it = req.pinned.begin(); it != req.pinned.end();)
      it = suspect_.count(it->second) ? req.pinned.erase(it) : std::next(it);
  }
  co_return false;
}

Task<void> DalRuntime::broadcast(std::uint32_t app, ControlVerb verb, std::uint64_t arg) {
  auto& run = apps_[app];
  if (!run.mapping) co_return;
  std::vector<std::uint64_t> ids;
  for (Rank r : run.mapping->used())
    if (!suspect_.count(r)) ids.push_back(command(r, verb, app, run.epoch, arg));
  std::set<Rank> nacked;
  co_await await_acks(ids, &nacked);
  suspect_.insert(nacked.begin(), nacked.end());
}

std::uint64_t DalRuntime::command(Rank to, ControlVerb verb, std::uint32_t app, std::uint32_t epoch, std::uint64_t a,
                                  std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  const std::uint64_t id = next_cmd_id_++;
  ack_target_[id] = to;
  ++commands_sent_;
  ByteWriter w;
  w.put(static_cast<std::uint8_t>(Ctl::Command)).put(id).put(static_cast<std::uint8_t>(verb)).put(app).put(epoch);
  w.put(a).put(b).put(c).put(d);
  trace_.emit(k_.now(), TraceCategory::Control, "command",
              TraceFields().kv("id", id).kv("to", to).kv("verb", to_string(verb)).kv("app", app).kv("epoch", epoch).kv("arg", a));
  f_.send_service(0, to, ServiceType::Control, w.take());
  return id;
}

Task<void> DalRuntime::wait_timeout(WaitQueue& q, SimTime deadline) {
  k_.schedule(deadline, EventClass::Protocol, "dal.timeout", [&q] { q.notify_all(); });
  co_await q.wait();
}

Task<bool> DalRuntime::await_acks(const std::vector<std::uint64_t>& ids, std::set<Rank>* nacked) {
  const SimTime deadline = k_.now() + cfg_.ack_timeout;
  auto pending = [&] {
    return std::any_of(ids.begin(), ids.end(), [&](std::uint64_t id) { return !acks_.count(id); });
  };
  while (pending() && k_.now() < deadline) co_await wait_timeout(ack_wq_, deadline);
  bool ok = true;
  for (auto id : ids) {
    auto it = acks_.find(id);
    if (it == acks_.end() || !it->second) {
      ok = false;
      if (nacked) nacked->insert(ack_target_[id]);
      trace_.emit(k_.now(), TraceCategory::Control, "nack", TraceFields().kv("id", id).kv("tile", ack_target_[id]));
    }
    acks_.erase(id);
    ack_target_.erase(id);
  }
  co_return ok;
}

void DalRuntime::watchdog() {
  for (auto& run : apps_) {
    if (run.state != AppState::Running || run.paused) continue;
    if (run.progress == run.watched) {
      if (!run.stalled) {
        run.stalled = true;
        stalls_.push_back(run.net.name + " made no progress by t=" + std::to_string(k_.now()));
        trace_.emit(k_.now(), TraceCategory::App, "stall", TraceFields().kv("app", run.net.name));
      }
    } else {
      run.stalled = false;
    }
    run.watched = run.progress;
  }
  k_.schedule_in(cfg_.watchdog_period, EventClass::Protocol, "dal.watchdog", [this] { watchdog(); });
}

ProcessNetwork DalRuntime::expand_critical(const ProcessNetwork& net, std::vector<int>& group) {
  const std::size_t n = net.processes.size();
  std::vector<bool> sink(n);
  for (std::size_t p = 0; p < n; ++p) sink[p] = net.outputs_of(p).empty() && !net.inputs_of(p).empty();

  ProcessNetwork out;
  out.name = net.name;
  out.critical = true;
  group.clear();
  std::vector<std::array<std::size_t, 2>> rep(n);
  for (int r = 0; r < 2; ++r)
    for (std::size_t p = 0; p < n; ++p) {
      if (sink[p]) continue;
      auto ps = net.processes[p];
      ps.id += "#" + std::to_string(r);
      rep[p][r] = out.processes.size();
      out.processes.push_back(ps);
      group.push_back(r);
    }
  std::vector<std::size_t> cmp(n), snk(n);
  for (std::size_t p = 0; p < n; ++p) {
    if (!sink[p]) continue;
    cmp[p] = out.processes.size();
    out.processes.push_back(ProcessSpec{"cmp." + net.processes[p].id, BehaviorToken{"compare", {}}, 1});
    group.push_back(2);
    snk[p] = out.processes.size();
    out.processes.push_back(net.processes[p]);
    group.push_back(2);
  }
  // Declaration order keeps every process's port numbering: comparator input
  // 2j is replica 0's copy of sink input j, 2j+1 replica 1's.
  for (const auto& c : net.channels)
    for (int r = 0; r < 2; ++r)
      out.channels.push_back({rep[c.src][r], sink[c.dst] ? cmp[c.dst] : rep[c.dst][r], c.capacity});
  for (std::size_t p = 0; p < n; ++p) {
    if (!sink[p]) continue;
    for (std::size_t c : net.inputs_of(p)) out.channels.push_back({cmp[p], snk[p], net.channels[c].capacity});
  }
  return out;
}

}  // namespace torusim
