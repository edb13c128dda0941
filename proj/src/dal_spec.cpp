#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "torusim/dal.hpp"

namespace torusim {

namespace {

struct Word {
  std::string key;
  std::string value;
  int key_col = 0;
  int value_col = 0;
};

struct Record {
  std::string type;
  int line = 0;
  std::map<std::string, Word> kv;

  const Word* get(const std::string& k) const {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  }
  const Word& need(const std::string& k) const {
    auto* w = get(k);
    if (!w) throw SpecError(line, 1, type + " record needs '" + k + "='");
    return *w;
  }
};

Record split_record(std::string_view line, int lineno, const std::map<std::string, std::set<std::string>>& keys) {
  Record r;
  r.line = lineno;
  std::size_t i = 0;
  bool first = true;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    const std::string word(line.substr(i, j - i));
    const int col = static_cast<int>(i) + 1;
    if (first) {
      if (!keys.count(word)) throw SpecError(lineno, col, "unknown record '" + word + "'");
      r.type = word;
      first = false;
    } else {
      const auto eq = word.find('=');
      if (eq == std::string::npos || eq == 0) throw SpecError(lineno, col, "expected key=value, found '" + word + "'");
      Word w{word.substr(0, eq), word.substr(eq + 1), col, col + static_cast<int>(eq) + 1};
      if (!keys.at(r.type).count(w.key)) throw SpecError(lineno, col, "unknown key '" + w.key + "' for " + r.type);
      if (r.kv.count(w.key)) throw SpecError(lineno, col, "duplicate key '" + w.key + "'");
      r.kv.emplace(w.key, std::move(w));
    }
    i = j;
  }
  return r;
}

template <typename T>
T to_uint(const Word& w, int line, const char* what) {
  T v{};
  auto [p, ec] = std::from_chars(w.value.data(), w.value.data() + w.value.size(), v);
  if (ec != std::errc() || p != w.value.data() + w.value.size() || w.value.empty())
    throw SpecError(line, w.value_col, std::string("invalid ") + what + " '" + w.value + "'");
  return v;
}

bool to_bool(const Word& w, int line) {
  if (w.value == "true" || w.value == "1") return true;
  if (w.value == "false" || w.value == "0") return false;
  throw SpecError(line, w.value_col, "expected true or false, found '" + w.value + "'");
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::optional<BehaviorToken> parse_token(const std::string& s) {
  BehaviorToken t;
  const auto open = s.find('(');
  if (open == std::string::npos) {
    t.name = s;
  } else {
    if (s.back() != ')') return std::nullopt;
    t.name = s.substr(0, open);
    const std::string inner = s.substr(open + 1, s.size() - open - 2);
    if (!inner.empty()) {
      std::size_t a = 0;
      while (true) {
        const auto c = inner.find(',', a);
        t.args.push_back(inner.substr(a, c == std::string::npos ? std::string::npos : c - a));
        if (c == std::string::npos) break;
        a = c + 1;
      }
      for (const auto& arg : t.args)
        if (arg.empty()) return std::nullopt;
    }
  }
  if (!valid_name(t.name)) return std::nullopt;
  return t;
}

std::optional<FsmEvent> parse_event(const std::string& s) {
  auto t = parse_token(s);
  if (!t || t->args.size() != 1) return std::nullopt;
  FsmEvent e;
  if (t->name == "start") {
    e.kind = FsmEventKind::Start;
  } else if (t->name == "stop") {
    e.kind = FsmEventKind::Stop;
  } else if (t->name == "fault") {
    e.kind = FsmEventKind::Fault;
  } else {
    return std::nullopt;
  }
  e.app = t->args[0];
  return e;
}

// A cycle made only of rendezvous channels can never make progress.
bool zero_capacity_cycle(const ProcessNetwork& n) {
  std::vector<std::vector<std::size_t>> adj(n.processes.size());
  for (const auto& c : n.channels)
    if (c.capacity == 0) adj[c.src].push_back(c.dst);
  std::vector<int> color(n.processes.size(), 0);
  std::function<bool(std::size_t)> dfs = [&](std::size_t u) {
    color[u] = 1;
    for (auto v : adj[u]) {
      if (color[v] == 1) return true;
      if (color[v] == 0 && dfs(v)) return true;
    }
    color[u] = 2;
    return false;
  };
  for (std::size_t u = 0; u < adj.size(); ++u)
    if (color[u] == 0 && dfs(u)) return true;
  return false;
}

std::string join(const std::set<std::string>& s) {
  std::string out;
  for (const auto& a : s) {
    if (!out.empty()) out += ',';
    out += a;
  }
  return out;
}

}  // namespace

std::string BehaviorToken::text() const {
  if (args.empty()) return name;
  std::string s = name + "(";
  for (std::size_t i = 0; i < args.size(); ++i) s += (i ? "," : "") + args[i];
  return s + ")";
}

std::string FsmEvent::text() const {
  const char* k = kind == FsmEventKind::Start ? "start" : kind == FsmEventKind::Stop ? "stop" : "fault";
  return std::string(k) + "(" + app + ")";
}

std::optional<std::size_t> ProcessNetwork::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < processes.size(); ++i)
    if (processes[i].id == id) return i;
  return std::nullopt;
}

std::vector<std::size_t> ProcessNetwork::inputs_of(std::size_t p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < channels.size(); ++i)
    if (channels[i].dst == p) out.push_back(i);
  return out;
}

std::vector<std::size_t> ProcessNetwork::outputs_of(std::size_t p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < channels.size(); ++i)
    if (channels[i].src == p) out.push_back(i);
  return out;
}

const std::set<std::string>* ScenarioFsm::apps_of(const std::string& state) const {
  for (const auto& [n, s] : states)
    if (n == state) return &s;
  return nullptr;
}

std::optional<std::string> ScenarioFsm::state_with(const std::set<std::string>& apps) const {
  for (const auto& [n, s] : states)
    if (s == apps) return n;
  return std::nullopt;
}

std::optional<std::string> ScenarioFsm::step(const std::string& state, const FsmEvent& e) const {
  for (const auto& t : transitions)
    if (t.from == state && t.event == e) return t.to;
  return std::nullopt;
}

const ProcessNetwork* AppSpec::app(const std::string& name) const {
  for (const auto& a : apps)
    if (a.name == name) return &a;
  return nullptr;
}

std::optional<std::size_t> AppSpec::app_index(const std::string& name) const {
  for (std::size_t i = 0; i < apps.size(); ++i)
    if (apps[i].name == name) return i;
  return std::nullopt;
}

AppSpec parse_app_spec(std::string_view text, const BehaviorRegistry& reg) {
  static const std::map<std::string, std::set<std::string>> kKeys = {
      {"app", {"name", "critical"}},
      {"process", {"app", "id", "behavior", "weight"}},
      {"channel", {"app", "src", "dst", "capacity"}},
      {"state", {"name", "apps"}},
      {"initial", {"state"}},
      {"transition", {"from", "event", "to"}},
      {"event", {"at", "event"}},
  };
  AppSpec spec;
  std::map<std::string, int> app_line;
  std::vector<std::vector<int>> process_lines;
  std::vector<int> transition_lines;
  int initial_line = 0;

  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    if (std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }))
      continue;
    const Record r = split_record(line, lineno, kKeys);

    auto find_app = [&](const Word& w) -> ProcessNetwork& {
      for (auto& a : spec.apps)
        if (a.name == w.value) return a;
      throw SpecError(lineno, w.value_col, "unknown app '" + w.value + "'");
    };

    if (r.type == "app") {
      const Word& n = r.need("name");
      if (!valid_name(n.value)) throw SpecError(lineno, n.value_col, "invalid app name '" + n.value + "'");
      if (spec.app(n.value)) throw SpecError(lineno, n.value_col, "duplicate app '" + n.value + "'");
      ProcessNetwork net;
      net.name = n.value;
      if (auto* c = r.get("critical")) net.critical = to_bool(*c, lineno);
      spec.apps.push_back(std::move(net));
      process_lines.emplace_back();
      app_line[n.value] = lineno;
    } else if (r.type == "process") {
      ProcessNetwork& net = find_app(r.need("app"));
      const Word& id = r.need("id");
      if (!valid_name(id.value)) throw SpecError(lineno, id.value_col, "invalid process id '" + id.value + "'");
      if (net.index_of(id.value)) throw SpecError(lineno, id.value_col, "duplicate process id '" + id.value + "'");
      const Word& b = r.need("behavior");
      auto tok = parse_token(b.value);
      if (!tok) throw SpecError(lineno, b.value_col, "malformed behavior '" + b.value + "'");
      if (!reg.find(tok->name)) throw SpecError(lineno, b.value_col, "unknown behavior '" + tok->name + "'");
      ProcessSpec p{id.value, *tok, 1};
      if (auto* w = r.get("weight")) {
        p.weight = to_uint<std::uint32_t>(*w, lineno, "weight");
        if (p.weight == 0) throw SpecError(lineno, w->value_col, "weight must be >= 1");
      }
      net.processes.push_back(std::move(p));
      process_lines[*spec.app_index(net.name)].push_back(lineno);
    } else if (r.type == "channel") {
      ProcessNetwork& net = find_app(r.need("app"));
      const Word& s = r.need("src");
      const Word& d = r.need("dst");
      auto si = net.index_of(s.value);
      if (!si) throw SpecError(lineno, s.value_col, "channel source '" + s.value + "' is not a process of " + net.name);
      auto di = net.index_of(d.value);
      if (!di) throw SpecError(lineno, d.value_col, "channel sink '" + d.value + "' is not a process of " + net.name);
      ChannelSpec c{*si, *di, kDefaultCapacity};
      if (auto* cap = r.get("capacity")) c.capacity = to_uint<std::uint32_t>(*cap, lineno, "capacity");
      net.channels.push_back(c);
    } else if (r.type == "state") {
      const Word& n = r.need("name");
      if (!valid_name(n.value)) throw SpecError(lineno, n.value_col, "invalid state name '" + n.value + "'");
      if (spec.fsm.apps_of(n.value)) throw SpecError(lineno, n.value_col, "duplicate state '" + n.value + "'");
      std::set<std::string> apps;
      if (auto* a = r.get("apps"); a && !a->value.empty()) {
        std::size_t p = 0;
        while (true) {
          const auto c = a->value.find(',', p);
          const std::string name = a->value.substr(p, c == std::string::npos ? std::string::npos : c - p);
          if (!spec.app(name)) throw SpecError(lineno, a->value_col, "unknown app '" + name + "' in state");
          apps.insert(name);
          if (c == std::string::npos) break;
          p = c + 1;
        }
      }
      spec.fsm.states.emplace_back(n.value, std::move(apps));
    } else if (r.type == "initial") {
      const Word& s = r.need("state");
      if (!spec.fsm.initial.empty()) throw SpecError(lineno, 1, "duplicate initial record");
      spec.fsm.initial = s.value;
      initial_line = lineno;
    } else if (r.type == "transition") {
      const Word& e = r.need("event");
      auto ev = parse_event(e.value);
      if (!ev) throw SpecError(lineno, e.value_col, "event must be start(app), stop(app) or fault(app)");
      spec.fsm.transitions.push_back({r.need("from").value, *ev, r.need("to").value});
      transition_lines.push_back(lineno);
    } else if (r.type == "event") {
      const Word& e = r.need("event");
      auto ev = parse_event(e.value);
      if (!ev) throw SpecError(lineno, e.value_col, "event must be start(app), stop(app) or fault(app)");
      if (!spec.app(ev->app)) throw SpecError(lineno, e.value_col, "unknown app '" + ev->app + "'");
      const SimTime at = to_uint<SimTime>(r.need("at"), lineno, "time");
      if (!spec.script.empty() && spec.script.back().at > at)
        throw SpecError(lineno, r.need("at").value_col, "scripted events must be in time order");
      spec.script.push_back({at, *ev});
    }
  }

  // Whole-network checks.
  for (std::size_t a = 0; a < spec.apps.size(); ++a) {
    const auto& net = spec.apps[a];
    if (net.processes.empty()) throw SpecError(app_line[net.name], 1, "app '" + net.name + "' has no processes");
    for (std::size_t p = 0; p < net.processes.size(); ++p) {
      const auto& ps = net.processes[p];
      const auto* def = reg.find(ps.behavior.name);
      const auto err = def->check ? def->check(ps.behavior, net.inputs_of(p).size(), net.outputs_of(p).size()) : "";
      if (!err.empty()) throw SpecError(process_lines[a][p], 1, "process '" + ps.id + "': " + err);
    }
    if (zero_capacity_cycle(net))
      throw SpecError(app_line[net.name], 1, "app '" + net.name + "' has a cycle of zero-capacity channels");
  }

  auto& fsm = spec.fsm;
  if (!fsm.states.empty() && fsm.initial.empty()) throw SpecError(lineno, 1, "states declared without an initial state");
  if (!fsm.initial.empty() && !fsm.apps_of(fsm.initial))
    throw SpecError(initial_line, 1, "unknown initial state '" + fsm.initial + "'");
  for (std::size_t i = 0; i < fsm.transitions.size(); ++i) {
    const auto& t = fsm.transitions[i];
    const int ln = transition_lines[i];
    const auto* from = fsm.apps_of(t.from);
    const auto* to = fsm.apps_of(t.to);
    if (!from) throw SpecError(ln, 1, "unknown state '" + t.from + "'");
    if (!to) throw SpecError(ln, 1, "unknown state '" + t.to + "'");
    if (!spec.app(t.event.app)) throw SpecError(ln, 1, "unknown app '" + t.event.app + "'");
    for (std::size_t j = 0; j < i; ++j)
      if (fsm.transitions[j].from == t.from && fsm.transitions[j].event == t.event)
        throw SpecError(ln, 1, "second transition from '" + t.from + "' on " + t.event.text());
    std::set<std::string> expect = *from;
    switch (t.event.kind) {
      case FsmEventKind::Start:
        if (from->count(t.event.app)) throw SpecError(ln, 1, t.event.app + " already runs in '" + t.from + "'");
        expect.insert(t.event.app);
        break;
      case FsmEventKind::Stop:
      case FsmEventKind::Fault:
        if (!from->count(t.event.app)) throw SpecError(ln, 1, t.event.app + " does not run in '" + t.from + "'");
        if (t.event.kind == FsmEventKind::Stop) expect.erase(t.event.app);
        break;
    }
    if (expect != *to)
      throw SpecError(ln, 1, "state '" + t.to + "' must run {" + join(expect) + "} after " + t.event.text());
  }
  return spec;
}

std::string print_app_spec(const AppSpec& spec) {
  std::ostringstream os;
  for (const auto& a : spec.apps) {
    os << "app name=" << a.name << " critical=" << (a.critical ? "true" : "false") << "\n";
    for (const auto& p : a.processes)
      os << "process app=" << a.name << " id=" << p.id << " behavior=" << p.behavior.text() << " weight=" << p.weight
         << "\n";
    for (const auto& c : a.channels)
      os << "channel app=" << a.name << " src=" << a.processes[c.src].id << " dst=" << a.processes[c.dst].id
         << " capacity=" << c.capacity << "\n";
  }
  for (const auto& [n, s] : spec.fsm.states) os << "state name=" << n << " apps=" << join(s) << "\n";
  if (!spec.fsm.initial.empty()) os << "initial state=" << spec.fsm.initial << "\n";
  for (const auto& t : spec.fsm.transitions)
    os << "transition from=" << t.from << " event=" << t.event.text() << " to=" << t.to << "\n";
  for (const auto& e : spec.script) os << "event at=" << e.at << " event=" << e.event.text() << "\n";
  return os.str();
}

}  // namespace torusim
