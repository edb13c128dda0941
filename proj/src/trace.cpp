#include "torusim/trace.hpp"

#include <cstdio>

namespace torusim {

namespace {
constexpr std::array<const char*, kTraceCategories> kNames = {"packet", "fault", "lofamo",
                                                              "control", "app", "injector"};
}

const char* to_string(TraceCategory c) { return kNames[static_cast<std::size_t>(c)]; }

bool parse_trace_category(std::string_view s, TraceCategory& out) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (s == kNames[i]) {
      out = static_cast<TraceCategory>(i);
      return true;
    }
  }
  return false;
}

TraceFields& TraceFields::kv(std::string_view key, std::string_view value) {
  text_ += ' ';
  text_ += key;
  text_ += '=';
  text_ += value;
  return *this;
}

TraceFields& TraceFields::kv(std::string_view key, std::int64_t value) {
  return kv(key, std::string_view(std::to_string(value)));
}

TraceFields& TraceFields::kv(std::string_view key, std::uint64_t value) {
  return kv(key, std::string_view(std::to_string(value)));
}

TraceFields& TraceFields::kv(std::string_view key, double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return kv(key, std::string_view(buf));
}

Trace::Trace() { enabled_.fill(true); }

void Trace::emit(SimTime t, TraceCategory c, std::string_view kind, const TraceFields& fields) {
  if (!on(c)) return;
  std::string line = "t=" + std::to_string(t) + " seq=" + std::to_string(seq_++) + " cat=" +
                     to_string(c) + " kind=" + std::string(kind) + fields.text();
  line += '\n';
  hash_.update(line);
  if (os_) *os_ << line;
  if (keep_) {
    line.pop_back();
    lines_.push_back(std::move(line));
  }
}

}  // namespace torusim
