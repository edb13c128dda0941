#include "torusim/faultinject.hpp"

#include <charconv>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <map>
#include <sstream>

namespace torusim {

namespace {

struct KindName {
  FaultKind kind;
  const char* name;
};
constexpr KindName kKindNames[] = {
    {FaultKind::LinkDrop, "link_drop"},           {FaultKind::LinkCorrupt, "link_corrupt"},
    {FaultKind::LinkKill, "link_kill"},           {FaultKind::LinkDegrade, "link_degrade"},
    {FaultKind::TileKillHost, "tile_kill_host"},  {FaultKind::TileKillDnp, "tile_kill_dnp"},
    {FaultKind::CriticalEvent, "critical_event"},
};

struct Token {
  std::string key;
  std::string value;
  int key_col = 0;
  int value_col = 0;
};

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

bool is_key(std::string_view w, std::size_t eq) {
  if (eq == 0 || eq == std::string_view::npos) return false;
  for (std::size_t i = 0; i < eq; ++i) {
    const char c = w[i];
    if (!(std::islower(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

// Splits a line into key=value tokens. A value runs until the next word that
// starts a new key, so `when=window 10..20` keeps its space.
std::vector<Token> tokenize(std::string_view line, int lineno) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    std::string_view word = line.substr(i, j - i);
    const std::size_t eq = word.find('=');
    const int col = static_cast<int>(i) + 1;
    if (is_key(word, eq)) {
      Token t;
      t.key = std::string(word.substr(0, eq));
      t.value = std::string(word.substr(eq + 1));
      t.key_col = col;
      t.value_col = col + static_cast<int>(eq) + 1;
      out.push_back(std::move(t));
    } else if (out.empty()) {
      throw SpecError(lineno, col, "expected key=value, found '" + std::string(word) + "'");
    } else {
      auto& v = out.back().value;
      if (!v.empty()) v += ' ';
      v += word;
    }
    i = j;
  }
  return out;
}

template <typename T>
T parse_uint(std::string_view s, int line, int col, const char* what) {
  T v{};
  auto s2 = trim(s);
  auto [p, ec] = std::from_chars(s2.data(), s2.data() + s2.size(), v);
  if (ec != std::errc() || p != s2.data() + s2.size() || s2.empty()) {
    throw SpecError(line, col, std::string("invalid ") + what + " '" + s2 + "'");
  }
  return v;
}

double parse_double(std::string_view s, int line, int col, const char* what) {
  auto s2 = trim(s);
  double v = 0;
  auto [p, ec] = std::from_chars(s2.data(), s2.data() + s2.size(), v);
  if (ec != std::errc() || p != s2.data() + s2.size() || s2.empty() || !std::isfinite(v)) {
    throw SpecError(line, col, std::string("invalid ") + what + " '" + s2 + "'");
  }
  return v;
}

std::variant<LinkId, Rank> parse_where(const std::string& v, int line, int col) {
  auto inner = [&](const char* prefix) -> std::optional<std::string> {
    const std::string p = prefix;
    if (v.size() > p.size() + 1 && v.compare(0, p.size(), p) == 0 && v[p.size()] == '(' && v.back() == ')') {
      return v.substr(p.size() + 1, v.size() - p.size() - 2);
    }
    return std::nullopt;
  };
  if (auto s = inner("tile")) return parse_uint<Rank>(*s, line, col, "rank");
  if (auto s = inner("link")) {
    const auto comma = s->find(',');
    if (comma == std::string::npos) throw SpecError(line, col, "link needs (rank,dir)");
    const Rank r = parse_uint<Rank>(s->substr(0, comma), line, col, "rank");
    const std::string d = trim(s->substr(comma + 1));
    auto dir = parse_direction(d);
    if (!dir) throw SpecError(line, col, "invalid direction '" + d + "'");
    return LinkId{r, *dir};
  }
  throw SpecError(line, col, "where must be link(r,dir) or tile(r), found '" + v + "'");
}

When parse_when(const std::string& v, int line, int col) {
  const auto sp = v.find(' ');
  const std::string form = v.substr(0, sp);
  const std::string rest = sp == std::string::npos ? "" : trim(v.substr(sp + 1));
  if (form == "at") return WhenAt{parse_uint<SimTime>(rest, line, col, "time")};
  if (form == "window") {
    const auto dots = rest.find("..");
    if (dots == std::string::npos) throw SpecError(line, col, "window needs t1..t2");
    return WhenWindow{parse_uint<SimTime>(rest.substr(0, dots), line, col, "time"),
                      parse_uint<SimTime>(rest.substr(dots + 2), line, col, "time")};
  }
  if (form == "periodic") {
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw SpecError(line, col, "periodic needs start,interval");
    return WhenPeriodic{parse_uint<SimTime>(rest.substr(0, comma), line, col, "time"),
                        parse_uint<SimTime>(rest.substr(comma + 1), line, col, "interval")};
  }
  throw SpecError(line, col, "when must be 'at T', 'window T1..T2' or 'periodic S,I'");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Shortest form that still round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char b2[40];
    std::snprintf(b2, sizeof b2, "%.*g", prec, v);
    if (std::strtod(b2, nullptr) == v) return b2;
  }
  return buf;
}

std::string when_to_string(const When& w) {
  if (auto* a = std::get_if<WhenAt>(&w)) return "at " + std::to_string(a->t);
  if (auto* b = std::get_if<WhenWindow>(&w)) return "window " + std::to_string(b->t1) + ".." + std::to_string(b->t2);
  const auto& p = std::get<WhenPeriodic>(w);
  return "periodic " + std::to_string(p.start) + "," + std::to_string(p.interval);
}

std::string target_to_string(const std::variant<LinkId, Rank>& w) {
  if (auto* l = std::get_if<LinkId>(&w)) return "link(" + std::to_string(l->src) + "," + to_string(l->dir) + ")";
  return "tile(" + std::to_string(std::get<Rank>(w)) + ")";
}

}  // namespace

SpecError::SpecError(int line, int column, const std::string& msg)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + msg),
      line_(line),
      column_(column) {}

const char* to_string(FaultKind k) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == k) return kn.name;
  }
  return "?";
}

bool is_probe(FaultKind k) { return k == FaultKind::LinkDrop || k == FaultKind::LinkCorrupt; }

bool is_link_fault(FaultKind k) {
  return k == FaultKind::LinkDrop || k == FaultKind::LinkCorrupt || k == FaultKind::LinkKill ||
         k == FaultKind::LinkDegrade;
}

FaultSpec parse_fault_spec(std::string_view text) {
  FaultSpec spec;
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    auto toks = tokenize(line, lineno);

    if (toks.size() == 1 && toks[0].key == "seed") {
      if (spec.seed) throw SpecError(lineno, toks[0].key_col, "duplicate seed");
      spec.seed = parse_uint<std::uint64_t>(toks[0].value, lineno, toks[0].value_col, "seed");
      continue;
    }

    std::map<std::string, const Token*> by_key;
    for (const auto& t : toks) {
      static const char* kKnown[] = {"kind", "where", "when", "prob", "stream", "factor", "code"};
      bool known = false;
      for (const char* k : kKnown) known |= t.key == k;
      if (!known) throw SpecError(lineno, t.key_col, "unknown key '" + t.key + "'");
      if (!by_key.emplace(t.key, &t).second) throw SpecError(lineno, t.key_col, "duplicate key '" + t.key + "'");
    }
    for (const char* req : {"kind", "where", "when"}) {
      if (!by_key.count(req)) throw SpecError(lineno, 1, std::string("missing key '") + req + "'");
    }

    FaultClause c;
    c.line = lineno;
    const Token& kt = *by_key["kind"];
    bool found = false;
    for (const auto& kn : kKindNames) {
      if (kt.value == kn.name) {
        c.kind = kn.kind;
        found = true;
      }
    }
    if (!found) throw SpecError(lineno, kt.value_col, "unknown fault kind '" + kt.value + "'");

    const Token& wt = *by_key["where"];
    c.where = parse_where(wt.value, lineno, wt.value_col);
    const bool link_target = std::holds_alternative<LinkId>(c.where);
    if (link_target != is_link_fault(c.kind)) {
      throw SpecError(lineno, wt.value_col,
                      std::string(to_string(c.kind)) + " needs a " + (is_link_fault(c.kind) ? "link" : "tile") + " target");
    }

    const Token& tt = *by_key["when"];
    c.when = parse_when(tt.value, lineno, tt.value_col);
    const bool at = std::holds_alternative<WhenAt>(c.when);
    const bool window = std::holds_alternative<WhenWindow>(c.when);
    const bool periodic = std::holds_alternative<WhenPeriodic>(c.when);
    bool ok = false;
    switch (c.kind) {
      case FaultKind::LinkKill:
      case FaultKind::TileKillHost:
      case FaultKind::TileKillDnp: ok = at; break;
      case FaultKind::LinkDrop:
      case FaultKind::LinkCorrupt:
      case FaultKind::LinkDegrade: ok = at || window; break;
      case FaultKind::CriticalEvent: ok = at || periodic; break;
    }
    if (!ok) throw SpecError(lineno, tt.value_col, std::string("'") + tt.value + "' is not a valid time for " + to_string(c.kind));
    if (auto* w = std::get_if<WhenWindow>(&c.when); w && w->t1 > w->t2) {
      throw SpecError(lineno, tt.value_col, "window ends before it starts");
    }
    if (auto* p = std::get_if<WhenPeriodic>(&c.when); p && p->interval == 0) {
      throw SpecError(lineno, tt.value_col, "periodic interval must be positive");
    }

    auto only_for = [&](const char* key, bool allowed) -> const Token* {
      auto it = by_key.find(key);
      if (it == by_key.end()) return nullptr;
      if (!allowed) throw SpecError(lineno, it->second->key_col, std::string("'") + key + "' is not valid for " + to_string(c.kind));
      return it->second;
    };
    if (auto* t = only_for("prob", is_probe(c.kind))) {
      c.prob = parse_double(t->value, lineno, t->value_col, "probability");
      if (c.prob < 0 || c.prob > 1) throw SpecError(lineno, t->value_col, "prob must lie in [0,1], got " + t->value);
    } else if (is_probe(c.kind)) {
      throw SpecError(lineno, 1, "missing key 'prob'");
    }
    if (auto* t = only_for("factor", c.kind == FaultKind::LinkDegrade)) {
      c.factor = parse_uint<std::uint32_t>(t->value, lineno, t->value_col, "factor");
      if (c.factor < 1) throw SpecError(lineno, t->value_col, "factor must be >= 1");
    } else if (c.kind == FaultKind::LinkDegrade) {
      throw SpecError(lineno, 1, "missing key 'factor'");
    }
    if (auto* t = only_for("code", c.kind == FaultKind::CriticalEvent)) {
      c.code = parse_uint<std::uint32_t>(t->value, lineno, t->value_col, "code");
    }
    if (auto* t = only_for("stream", true)) {
      c.stream = parse_uint<std::uint64_t>(t->value, lineno, t->value_col, "stream");
    } else {
      c.stream = spec.clauses.size() + 1;
    }
    spec.clauses.push_back(c);
  }
  return spec;
}

std::string print_clause(const FaultClause& c) {
  std::string s = std::string("kind=") + to_string(c.kind) + " where=" + target_to_string(c.where) +
                  " when=" + when_to_string(c.when);
  if (is_probe(c.kind)) s += " prob=" + format_double(c.prob);
  if (c.kind == FaultKind::LinkDegrade) s += " factor=" + std::to_string(c.factor);
  if (c.kind == FaultKind::CriticalEvent) s += " code=" + std::to_string(c.code);
  s += " stream=" + std::to_string(c.stream);
  return s;
}

std::string print_fault_spec(const FaultSpec& spec) {
  std::string out;
  if (spec.seed) out += "seed=" + std::to_string(*spec.seed) + "\n";
  for (const auto& c : spec.clauses) out += print_clause(c) + "\n";
  return out;
}

void validate_fault_spec(const FaultSpec& spec, const TorusGeometry& g) {
  for (const auto& c : spec.clauses) {
    const Rank r = std::holds_alternative<LinkId>(c.where) ? std::get<LinkId>(c.where).src : std::get<Rank>(c.where);
    if (!g.valid(r)) {
      throw SpecError(c.line, 1, "rank " + std::to_string(r) + " does not exist in " + g.to_string() + " (" +
                                     target_to_string(c.where) + ")");
    }
  }
}

PacketAction apply_probe(const Packet& p, const FaultClause& clause, const CounterRng& rng, RngStream& stream) {
  const double u = stream.uniform(rng);
  if (!(u < clause.prob)) return {};
  if (clause.kind == FaultKind::LinkDrop) return {PacketActionKind::Drop, 0};
  const std::uint64_t bits = p.payload.empty() ? 32 : p.payload.size() * 8;
  return {PacketActionKind::Corrupt, static_cast<std::size_t>(stream.below(rng, bits))};
}

FaultInjector::FaultInjector(Kernel& k, Fabric& f, Trace& trace, FaultTargets targets, std::uint64_t seed)
    : k_(k), f_(f), trace_(trace), targets_(std::move(targets)), rng_(seed) {}

void FaultInjector::record(FaultKind kind, const std::string& target, const std::string& action) {
  const SimTime now = k_.now();
  hash_.update_pod(now);
  hash_.update(target);
  hash_.update(action);
  log_.push_back({now, kind, target, action});
  trace_.emit(now, TraceCategory::Injector, "inject",
              TraceFields().kv("fault", to_string(kind)).kv("target", target).kv("action", action).kv("origin", "injector"));
}

void FaultInjector::arm(const FaultSpec& spec) {
  validate_fault_spec(spec, f_.geometry());
  for (const auto& c : spec.clauses) arm_clause(c);
}

void FaultInjector::arm_clause(const FaultClause& c) {
  const std::string target = target_to_string(c.where);
  switch (c.kind) {
    case FaultKind::LinkDrop:
    case FaultKind::LinkCorrupt: {
      const LinkId l = std::get<LinkId>(c.where);
      SimTime t1 = 0, t2 = kNever;
      if (auto* a = std::get_if<WhenAt>(&c.when)) t1 = a->t;
      if (auto* w = std::get_if<WhenWindow>(&c.when)) {
        t1 = w->t1;
        t2 = w->t2;
      }
      auto stream = std::make_shared<RngStream>(RngStream{c.stream, 0});
      f_.add_probe(l, [this, c, t1, t2, stream, target](const Packet& p) -> PacketAction {
        const SimTime now = k_.now();
        if (now < t1 || now > t2) return {};
        ++decisions_;
        PacketAction a = apply_probe(p, c, rng_, *stream);
        if (a.kind != PacketActionKind::Deliver) {
          const std::string action = a.kind == PacketActionKind::Drop
                                         ? "drop packet " + std::to_string(p.id)
                                         : "corrupt packet " + std::to_string(p.id) + " bit " + std::to_string(a.bit);
          record(c.kind, target, action);
        }
        return a;
      });
      break;
    }
    case FaultKind::LinkKill: {
      const LinkId l = std::get<LinkId>(c.where);
      k_.schedule(std::get<WhenAt>(c.when).t, EventClass::FaultInjection, "inject.link_kill", [this, l, target] {
        f_.set_link_up(l, false);
        record(FaultKind::LinkKill, target, "kill");
      });
      break;
    }
    case FaultKind::LinkDegrade: {
      const LinkId l = std::get<LinkId>(c.where);
      const std::uint32_t factor = c.factor;
      SimTime t1 = 0;
      std::optional<SimTime> t2;
      if (auto* a = std::get_if<WhenAt>(&c.when)) t1 = a->t;
      if (auto* w = std::get_if<WhenWindow>(&c.when)) {
        t1 = w->t1;
        t2 = w->t2;
      }
      k_.schedule(t1, EventClass::FaultInjection, "inject.degrade", [this, l, factor, target] {
        f_.set_link_degrade(l, factor);
        record(FaultKind::LinkDegrade, target, "degrade x" + std::to_string(factor));
      });
      if (t2) {
        k_.schedule(*t2, EventClass::FaultInjection, "inject.degrade_end", [this, l, target] {
          f_.set_link_degrade(l, 1);
          record(FaultKind::LinkDegrade, target, "degrade end");
        });
      }
      break;
    }
    case FaultKind::TileKillHost:
    case FaultKind::TileKillDnp: {
      const Rank r = std::get<Rank>(c.where);
      const FaultKind kind = c.kind;
      k_.schedule(std::get<WhenAt>(c.when).t, EventClass::FaultInjection, "inject.tile_kill", [this, r, kind, target] {
        if (kind == FaultKind::TileKillDnp) {
          f_.set_dnp_alive(r, false);
          if (targets_.kill_dnp) targets_.kill_dnp(r);
        } else if (targets_.kill_host) {
          targets_.kill_host(r);
        }
        record(kind, target, "kill");
      });
      break;
    }
    case FaultKind::CriticalEvent: {
      if (auto* a = std::get_if<WhenAt>(&c.when)) {
        const Rank r = std::get<Rank>(c.where);
        const std::uint32_t code = c.code;
        k_.schedule(a->t, EventClass::FaultInjection, "inject.critical", [this, r, code, target] {
          if (targets_.critical) targets_.critical(r, code);
          record(FaultKind::CriticalEvent, target, "critical code " + std::to_string(code));
        });
      } else {
        schedule_periodic(c, std::get<WhenPeriodic>(c.when).start);
      }
      break;
    }
  }
}

void FaultInjector::schedule_periodic(const FaultClause& c, SimTime at) {
  k_.schedule(at, EventClass::FaultInjection, "inject.critical", [this, c, at] {
    const Rank r = std::get<Rank>(c.where);
    if (targets_.critical) targets_.critical(r, c.code);
    record(FaultKind::CriticalEvent, target_to_string(c.where), "critical code " + std::to_string(c.code));
    // Re-armed lazily so a periodic clause costs one pending event.
    schedule_periodic(c, at + std::get<WhenPeriodic>(c.when).interval);
  });
}

}  // namespace torusim
