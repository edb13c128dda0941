#include <algorithm>
#include <numeric>
#include <tuple>

#include "torusim/dal.hpp"

namespace torusim {

std::map<Rank, std::uint64_t> tile_loads(const std::vector<std::pair<const ProcessNetwork*, Mapping>>& existing) {
  std::map<Rank, std::uint64_t> load;
  for (const auto& [net, m] : existing)
    for (std::size_t p = 0; p < m.tile_of.size(); ++p) load[m.tile_of[p]] += net->processes[p].weight;
  return load;
}

Mapping map_network(const ProcessNetwork& net, const TorusGeometry& g, const FaultTable& health,
                    const std::map<Rank, std::uint64_t>& base_load, const MapConfig& cfg, const MapRequest& req) {
  const auto& pinned = req.pinned;
  const auto& exclude = req.exclude;
  const auto& prefer = req.prefer;
  std::vector<Rank> healthy;
  for (Rank r = 0; r < g.size(); ++r)
    if (health.tile_ok(r) && !exclude.count(r)) healthy.push_back(r);

  // Spares come off the top of the healthy list unless the caller asks for them.
  std::set<Rank> spares;
  if (prefer.empty()) {
    for (auto it = healthy.rbegin(); it != healthy.rend() && spares.size() < cfg.spares; ++it) spares.insert(*it);
    if (spares.size() == healthy.size()) spares.clear();
  }
  std::vector<Rank> general;
  for (Rank r : healthy)
    if (!spares.count(r)) general.push_back(r);
  std::vector<Rank> preferred;
  for (Rank r : healthy)
    if (prefer.count(r)) preferred.push_back(r);

  const std::size_t n = net.processes.size();
  std::vector<std::optional<Rank>> at(n);
  std::map<Rank, std::uint64_t> load = base_load;
  for (const auto& [p, r] : pinned) {
    at[p] = r;
    load[r] += net.processes[p].weight;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return net.processes[a].weight > net.processes[b].weight; });

  for (std::size_t p : order) {
    if (at[p] || (req.only && !req.only->count(p))) continue;
    const std::uint64_t w = net.processes[p].weight;
    auto best_of = [&](const std::vector<Rank>& cands) -> std::optional<Rank> {
      std::optional<std::tuple<std::uint64_t, std::uint64_t, Rank>> best;
      for (Rank r : cands) {
        const std::uint64_t after = load[r] + w;
        if (cfg.tile_capacity && after > cfg.tile_capacity) continue;
        std::uint64_t comm = 0;
        for (const auto& c : net.channels) {
          std::optional<std::size_t> peer;
          if (c.src == p) peer = c.dst;
          if (c.dst == p) peer = c.src;
          if (peer && *peer != p && at[*peer]) comm += g.hop_distance(r, *at[*peer]);
        }
        auto key = std::make_tuple(after, comm, r);
        if (!best || key < *best) best = key;
      }
      if (!best) return std::nullopt;
      return std::get<2>(*best);
    };
    std::optional<Rank> r = best_of(preferred);
    if (!r) r = best_of(general);
    if (!r)
      throw MappingError("no healthy tile can take process '" + net.processes[p].id + "' of " + net.name);
    at[p] = *r;
    load[*r] += w;
  }

  Mapping m;
  for (auto& t : at) m.tile_of.push_back(t.value_or(0));
  const auto used = m.used();
  for (Rank s : spares)
    if (!used.count(s)) m.spares.insert(s);
  return m;
}

std::uint64_t max_load(const ProcessNetwork& net, const std::vector<Rank>& tile_of,
                       const std::map<Rank, std::uint64_t>& base) {
  std::map<Rank, std::uint64_t> load = base;
  for (std::size_t p = 0; p < tile_of.size(); ++p) load[tile_of[p]] += net.processes[p].weight;
  std::uint64_t m = 0;
  for (const auto& [r, l] : load) m = std::max(m, l);
  return m;
}

std::uint64_t optimal_max_load(const ProcessNetwork& net, const std::vector<Rank>& tiles) {
  const std::size_t n = net.processes.size();
  std::vector<std::size_t> digit(n, 0);
  std::uint64_t best = ~std::uint64_t{0};
  std::vector<Rank> tile_of(n);
  while (true) {
    for (std::size_t i = 0; i < n; ++i) tile_of[i] = tiles[digit[i]];
    best = std::min(best, max_load(net, tile_of));
    std::size_t i = 0;
    while (i < n && ++digit[i] == tiles.size()) digit[i++] = 0;
    if (i == n) break;
  }
  return best;
}

}  // namespace torusim
