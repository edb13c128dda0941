#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

namespace torusim {

/// Simulation time in cycles. One cycle is one nanosecond by convention.
using SimTime = std::uint64_t;

inline constexpr SimTime kNever = ~SimTime{0};

/// Same-time events are dispatched in this order.
enum class EventClass : std::uint8_t {
  FaultInjection = 0,
  Network = 1,
  Protocol = 2,
  Application = 3,
};

const char* to_string(EventClass c);

/// Raised for configuration and integrity errors inside the simulation.
class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunStats {
  std::uint64_t events = 0;
  SimTime final_time = 0;
};

struct Event {
  SimTime at = 0;
  EventClass cls = EventClass::Application;
  std::uint64_t seq = 0;
  std::uint64_t tie = 0;  // equals seq unless same-time shuffling is enabled
  const char* label = "";
  std::function<void()> action;
};

/// Deterministic discrete-event kernel.
///
/// Events are dispatched in strict (at, class, seq) order. When a shuffle key
/// is set, events sharing (at, class) are dispatched in a keyed pseudo-random
/// permutation instead of issue order; this is a legal reordering used to
/// test that higher layers do not depend on same-time tie-breaking.
class Kernel {
 public:
  explicit Kernel(std::uint64_t shuffle_key = 0) : shuffle_key_(shuffle_key) {}
  Kernel(const Kernel&) = delete;
  Kernel& operator=(const Kernel&) = delete;

  SimTime now() const { return now_; }

  /// Enqueue an action. Scheduling before now() throws SimError.
  std::uint64_t schedule(SimTime at, EventClass cls, const char* label,
                         std::function<void()> action);
  std::uint64_t schedule_in(SimTime delay, EventClass cls, const char* label,
                            std::function<void()> action) {
    return schedule(now_ + delay, cls, label, std::move(action));
  }

  /// Dispatch all events with at <= t_end. Resumable: run_until(a) followed
  /// by run_until(b) is equivalent to run_until(b).
  RunStats run_until(SimTime t_end);

  /// Makes the current run_until return after the event being dispatched.
  void request_stop() { stop_requested_ = true; }
  bool stop_requested() const { return stop_requested_; }

  std::size_t pending() const { return queue_.size(); }
  SimTime next_event_time() const { return queue_.empty() ? kNever : queue_.top().at; }
  std::uint64_t dispatched() const { return dispatched_; }

  /// Running FNV-1a hash over (at, class, seq, label) of every dispatched event.
  std::uint64_t dispatch_hash() const { return dispatch_hash_; }

  void set_dispatch_log(std::vector<std::string>* log) { log_ = log; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.at != b.at) return a.at > b.at;
      if (a.cls != b.cls) return a.cls > b.cls;
      if (a.tie != b.tie) return a.tie > b.tie;
      return a.seq > b.seq;
    }
  };

  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  SimTime now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t dispatched_ = 0;
  std::uint64_t dispatch_hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t shuffle_key_;
  bool stop_requested_ = false;
  std::vector<std::string>* log_ = nullptr;
};

/// FNV-1a 64-bit, used for trace and dispatch-log hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename T>
  void update_pod(const T& v) { update(&v, sizeof(T)); }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

}  // namespace torusim
