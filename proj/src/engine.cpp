#include "torusim/engine.hpp"

#include <cstdio>
#include <cstring>

#include "torusim/rng.hpp"

namespace torusim {

const char* to_string(EventClass c) {
  switch (c) {
    case EventClass::FaultInjection: return "fault";
    case EventClass::Network: return "network";
    case EventClass::Protocol: return "protocol";
    case EventClass::Application: return "application";
  }
  return "?";
}

std::uint64_t Kernel::schedule(SimTime at, EventClass cls, const char* label,
                               std::function<void()> action) {
  if (at < now_) {
    throw SimError(std::string("event '") + label + "' scheduled at t=" + std::to_string(at) +
                   " which is before now=" + std::to_string(now_));
  }
  Event ev;
  ev.at = at;
  ev.cls = cls;
  ev.seq = next_seq_++;
  ev.tie = shuffle_key_ == 0 ? ev.seq : mix64(shuffle_key_ ^ mix64(ev.seq));
  ev.label = label;
  ev.action = std::move(action);
  queue_.push(std::move(ev));
  return next_seq_ - 1;
}

RunStats Kernel::run_until(SimTime t_end) {
  RunStats stats;
  stop_requested_ = false;
  SimTime last_at = now_;
  EventClass last_cls = EventClass::FaultInjection;
  std::uint64_t last_tie = 0;
  std::uint64_t issued_at_last = 0;
  bool have_last = false;
  while (!queue_.empty() && queue_.top().at <= t_end) {
    // priority_queue::top is const; the action is moved out before pop.
    Event ev = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    // Events already pending when the previous one ran must not precede it.
    // A same-time event issued by that previous action may.
    if (have_last && (ev.at < last_at ||
                      (ev.seq < issued_at_last && ev.at == last_at &&
                       (ev.cls < last_cls || (ev.cls == last_cls && ev.tie < last_tie))))) {
      throw SimError("event order violated at '" + std::string(ev.label) + "'");
    }
    have_last = true;
    last_at = ev.at;
    last_cls = ev.cls;
    last_tie = ev.tie;
    issued_at_last = next_seq_;

    now_ = ev.at;
    Fnv1a h;
    h.update_pod(dispatch_hash_);
    h.update_pod(ev.at);
    h.update_pod(ev.cls);
    h.update_pod(ev.seq);
    h.update(ev.label, std::strlen(ev.label));
    dispatch_hash_ = h.value();
    if (log_) {
      log_->push_back(std::to_string(ev.at) + " " + to_string(ev.cls) + " " +
                      std::to_string(ev.seq) + " " + ev.label);
    }
    ++dispatched_;
    ++stats.events;
    try {
      ev.action();
    } catch (const SimError&) {
      throw;
    } catch (const std::exception& e) {
      throw SimError("event '" + std::string(ev.label) + "' at t=" + std::to_string(ev.at) +
                     " failed: " + e.what());
    }
    if (stop_requested_) break;
  }
  if (!stop_requested_ && now_ < t_end) now_ = t_end;
  stats.final_time = now_;
  return stats;
}

void Fnv1a::update(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h_ ^= p[i];
    h_ *= 0x100000001b3ULL;
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace torusim
