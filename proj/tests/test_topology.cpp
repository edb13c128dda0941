#include <deque>
#include <vector>

#include "doctest.h"
#include "torusim/topology.hpp"

using namespace torusim;

namespace {
// Breadth-first search over links that are up. Returns hop counts from src,
// -1 for unreachable.
std::vector<int> bfs(const TorusGeometry& g, const LinkStatus& st, Rank src) {
  std::vector<int> dist(g.size(), -1);
  std::deque<Rank> q{src};
  dist[src] = 0;
  while (!q.empty()) {
    Rank r = q.front();
    q.pop_front();
    for (Direction d : kDirections) {
      if (!st.up({r, d})) continue;
      Rank n = g.neighbor(r, d);
      if (dist[n] < 0) {
        dist[n] = dist[r] + 1;
        q.push_back(n);
      }
    }
  }
  return dist;
}

// Follows route_next_hop; returns hop count or -1 when Undeliverable.
int walk(const TorusGeometry& g, const LinkStatus& st, Rank src, Rank dst) {
  Rank cur = src;
  std::optional<Rank> prev;
  std::uint32_t ttl = g.default_ttl();
  int hops = 0;
  while (cur != dst) {
    auto dec = route_next_hop(cur, dst, g, st, prev, ttl);
    if (!dec) return -1;
    if (dec->misroute) --ttl;
    prev = cur;
    cur = g.neighbor(cur, dec->dir);
    ++hops;
    if (hops > 1000) return -2;
  }
  return hops;
}
}  // namespace

TEST_CASE("rank layout is x-major and bijective") {
  TorusGeometry g(4, 2, 2);
  CHECK(g.rank_of({0, 0, 0}) == 0);
  CHECK(g.rank_of({3, 1, 1}) == 15);
  std::vector<bool> hit(g.size(), false);
  for (std::uint32_t z = 0; z < 2; ++z)
    for (std::uint32_t y = 0; y < 2; ++y)
      for (std::uint32_t x = 0; x < 4; ++x) {
        Rank r = g.rank_of({x, y, z});
        CHECK(r == x + 4 * (y + 2 * z));
        CHECK_FALSE(hit[r]);
        hit[r] = true;
        CHECK(g.coords_of(r) == Coord{x, y, z});
      }
  CHECK_THROWS(g.rank_of({4, 0, 0}));
}

TEST_CASE("geometry parsing") {
  CHECK(TorusGeometry::parse("4x2x2") == TorusGeometry(4, 2, 2));
  CHECK_THROWS(TorusGeometry::parse("4x2"));
  CHECK_THROWS(TorusGeometry::parse("0x2x2"));
  CHECK_THROWS(TorusGeometry::parse("4x2x2x"));
}

TEST_CASE("neighbors wrap around") {
  TorusGeometry g(4, 2, 2);
  CHECK(g.neighbor(g.rank_of({3, 0, 0}), Direction::PosX) == 0);
  CHECK(g.neighbor(g.rank_of({0, 1, 0}), Direction::NegY) == 0);
  TorusGeometry line(4, 1, 1);
  CHECK(line.neighbor(2, Direction::PosY) == 2);
  CHECK(line.neighbor(2, Direction::NegZ) == 2);
}

TEST_CASE("hop distance is the ring metric and matches BFS") {
  TorusGeometry g(4, 2, 2);
  CHECK(g.hop_distance(5, 5) == 0);
  CHECK(g.hop_distance(0, g.rank_of({2, 1, 1})) == 4);
  LinkStatus all(g);
  for (Rank a = 0; a < g.size(); ++a) {
    auto d = bfs(g, all, a);
    for (Rank b = 0; b < g.size(); ++b) CHECK(static_cast<int>(g.hop_distance(a, b)) == d[b]);
  }
}

TEST_CASE("dimension-order routing basics") {
  TorusGeometry g(4, 2, 2);
  LinkStatus st(g);
  auto d = route_next_hop(0, g.rank_of({2, 0, 0}), g, st, std::nullopt, 8);
  REQUIRE(d);
  CHECK(d->dir == Direction::PosX);
  CHECK_FALSE(d->misroute);

  st.set({0, Direction::PosX}, false);
  d = route_next_hop(0, g.rank_of({1, 1, 0}), g, st, std::nullopt, 8);
  REQUIRE(d);
  CHECK(d->dir == Direction::PosY);
  CHECK_FALSE(d->misroute);
}

TEST_CASE("healthy fabric: every pair delivered in exactly hop_distance hops") {
  for (auto g : {TorusGeometry(4, 2, 2), TorusGeometry(2, 2, 2), TorusGeometry(3, 3, 1)}) {
    LinkStatus st(g);
    for (Rank a = 0; a < g.size(); ++a)
      for (Rank b = 0; b < g.size(); ++b) {
        if (a == b) continue;
        CHECK(walk(g, st, a, b) == static_cast<int>(g.hop_distance(a, b)));
      }
  }
}

TEST_CASE("any single dead link: connected pairs still delivered within TTL") {
  for (auto g : {TorusGeometry(4, 2, 2), TorusGeometry(2, 2, 2)}) {
    for (std::size_t li = 0; li < g.link_count(); ++li) {
      LinkId l = g.link_at(li);
      if (g.physical_index(l) != li) continue;
      LinkStatus st(g);
      st.set_both(g, l, false);
      for (Rank a = 0; a < g.size(); ++a) {
        auto reach = bfs(g, st, a);
        for (Rank b = 0; b < g.size(); ++b) {
          if (a == b || reach[b] < 0) continue;
          const int hops = walk(g, st, a, b);
          CHECK(hops >= reach[b]);
          CHECK(hops <= reach[b] + 2 * static_cast<int>(g.default_ttl()));
        }
      }
    }
  }
}

TEST_CASE("isolated destination becomes undeliverable") {
  TorusGeometry g(4, 2, 2);
  LinkStatus st(g);
  const Rank dst = 5;
  for (Direction d : kDirections) st.set_both(g, {dst, d}, false);
  CHECK(walk(g, st, 0, dst) == -1);
}

TEST_CASE("routing is a pure function of its inputs") {
  TorusGeometry g(4, 2, 2);
  LinkStatus st(g);
  st.set_both(g, {1, Direction::PosX}, false);
  auto a = route_next_hop(1, 2, g, st, 0, 3);
  auto b = route_next_hop(1, 2, g, st, 0, 3);
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->dir == b->dir);
  CHECK(a->misroute == b->misroute);
  CHECK_FALSE(route_next_hop(1, 2, g, st, 0, 0));
}
