#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "torusim/engine.hpp"

namespace torusim {

enum class TraceCategory : std::uint8_t { Packet, Fault, Lofamo, Control, App, Injector };
inline constexpr std::size_t kTraceCategories = 6;

const char* to_string(TraceCategory c);
bool parse_trace_category(std::string_view s, TraceCategory& out);

/// Ordered key=value fields of one trace record.
class TraceFields {
 public:
  TraceFields& kv(std::string_view key, std::string_view value);
  TraceFields& kv(std::string_view key, const std::string& value) {
    return kv(key, std::string_view(value));
  }
  TraceFields& kv(std::string_view key, const char* value) { return kv(key, std::string_view(value)); }
  TraceFields& kv(std::string_view key, std::int64_t value);
  TraceFields& kv(std::string_view key, std::uint64_t value);
  TraceFields& kv(std::string_view key, int value) { return kv(key, static_cast<std::int64_t>(value)); }
  TraceFields& kv(std::string_view key, unsigned value) {
    return kv(key, static_cast<std::uint64_t>(value));
  }
  TraceFields& kv(std::string_view key, double value);
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

/// Line-oriented trace sink.
///
/// Record layout: `t=<cycles> seq=<n> cat=<category> kind=<kind>` followed by
/// the record's own fields in emission order. A running FNV-1a hash over
/// every emitted line (newline included) identifies the run.
class Trace {
 public:
  Trace();

  void set_stream(std::ostream* os) { os_ = os; }
  void keep_lines(bool keep) { keep_ = keep; }
  void enable(TraceCategory c, bool on) { enabled_[static_cast<std::size_t>(c)] = on; }
  bool on(TraceCategory c) const { return enabled_[static_cast<std::size_t>(c)]; }

  void emit(SimTime t, TraceCategory c, std::string_view kind, const TraceFields& fields = {});

  std::uint64_t hash() const { return hash_.value(); }
  std::uint64_t count() const { return seq_; }
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::array<bool, kTraceCategories> enabled_{};
  std::ostream* os_ = nullptr;
  bool keep_ = false;
  std::uint64_t seq_ = 0;
  Fnv1a hash_;
  std::vector<std::string> lines_;
};

}  // namespace torusim
