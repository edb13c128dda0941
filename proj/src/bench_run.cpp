#include <charconv>

#include "bench_internal.hpp"

namespace torusim {

std::vector<std::uint64_t> bench_args(const BehaviorToken& t, std::size_t n, std::string* err) {
  if (t.args.size() != n) {
    *err = t.name + " takes " + std::to_string(n) + " arguments";
    return {};
  }
  std::vector<std::uint64_t> v;
  for (const auto& a : t.args) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(a.data(), a.data() + a.size(), x);
    if (ec != std::errc() || p != a.data() + a.size()) {
      *err = t.name + ": '" + a + "' is not a non-negative integer";
      return {};
    }
    v.push_back(x);
  }
  return v;
}

void register_bench_behaviors(BehaviorRegistry& reg, const DpsnnConfig& dpsnn_base,
                              const StencilConfig& stencil_base) {
  reg.add("dpsnn", dpsnn_behavior(dpsnn_base));
  reg.add("stencil", stencil_behavior(stencil_base));
}

BenchResult run_bench(const AppSpec& spec, const BehaviorRegistry& reg, const BenchPlatform& platform) {
  Kernel k(platform.shuffle);
  Scheduler s(k);
  Trace tr;
  Fabric f(s, platform.geometry, DnpConfig{}, tr);
  DalRuntime rt(s, f, tr, spec, platform.runtime, reg);
  rt.start();

  const std::string& app = spec.apps.at(0).name;
  constexpr SimTime kSlice = 100'000;
  BenchResult res;
  for (;;) {
    res.state = rt.state(app);
    if (res.state == AppState::Completed || res.state == AppState::Failed) break;
    if (k.now() >= platform.limit) break;
    k.run_until(std::min(k.now() + kSlice, platform.limit));
  }
  res.finished_at = k.now();
  res.alarms = rt.alarms();
  res.stalls = rt.stalls();
  res.output = rt.output(app);
  if (const Mapping* m = rt.mapping(app)) res.mapping = *m;
  const auto& g = platform.geometry;
  res.links.resize(g.link_count());
  for (std::size_t i = 0; i < g.link_count(); ++i) res.links[i] = f.link_counters(g.link_at(i));
  return res;
}

}  // namespace torusim
