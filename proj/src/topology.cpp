#include "torusim/topology.hpp"

#include <charconv>
#include <stdexcept>
#include <tuple>

namespace torusim {

namespace {
constexpr std::array<const char*, 6> kDirNames = {"+x", "-x", "+y", "-y", "+z", "-z"};
}

const char* to_string(Direction d) { return kDirNames[static_cast<std::size_t>(d)]; }

std::optional<Direction> parse_direction(std::string_view s) {
  for (std::size_t i = 0; i < kDirNames.size(); ++i) {
    if (s == kDirNames[i]) return static_cast<Direction>(i);
  }
  return std::nullopt;
}

std::string to_string(const LinkId& l) { return std::to_string(l.src) + ":" + to_string(l.dir); }

TorusGeometry::TorusGeometry(std::uint32_t x, std::uint32_t y, std::uint32_t z) : dims_{x, y, z} {
  if (x == 0 || y == 0 || z == 0) throw std::invalid_argument("torus dimensions must be >= 1");
}

TorusGeometry TorusGeometry::parse(std::string_view text) {
  std::array<std::uint32_t, 3> d{};
  std::size_t pos = 0;
  for (int axis = 0; axis < 3; ++axis) {
    if (axis > 0) {
      if (pos >= text.size() || (text[pos] != 'x' && text[pos] != 'X')) {
        throw std::invalid_argument("topology must look like XxYxZ, got '" + std::string(text) + "'");
      }
      ++pos;
    }
    const char* first = text.data() + pos;
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, d[static_cast<std::size_t>(axis)]);
    if (ec != std::errc() || ptr == first) {
      throw std::invalid_argument("topology must look like XxYxZ, got '" + std::string(text) + "'");
    }
    pos = static_cast<std::size_t>(ptr - text.data());
  }
  if (pos != text.size()) {
    throw std::invalid_argument("trailing characters in topology '" + std::string(text) + "'");
  }
  return TorusGeometry(d[0], d[1], d[2]);
}

std::string TorusGeometry::to_string() const {
  return std::to_string(dims_[0]) + "x" + std::to_string(dims_[1]) + "x" + std::to_string(dims_[2]);
}

Rank TorusGeometry::rank_of(const Coord& c) const {
  if (c.x >= dims_[0] || c.y >= dims_[1] || c.z >= dims_[2]) {
    throw std::out_of_range("coordinate outside " + to_string());
  }
  return c.x + dims_[0] * (c.y + dims_[1] * c.z);
}

Coord TorusGeometry::coords_of(Rank r) const {
  if (!valid(r)) throw std::out_of_range("rank " + std::to_string(r) + " outside " + to_string());
  return {r % dims_[0], (r / dims_[0]) % dims_[1], r / (dims_[0] * dims_[1])};
}

Rank TorusGeometry::neighbor(Rank r, Direction d) const {
  Coord c = coords_of(r);
  const int axis = axis_of(d);
  std::uint32_t* v = axis == 0 ? &c.x : axis == 1 ? &c.y : &c.z;
  const std::uint32_t n = dims_[static_cast<std::size_t>(axis)];
  *v = is_positive(d) ? (*v + 1) % n : (*v + n - 1) % n;
  return rank_of(c);
}

std::size_t TorusGeometry::physical_index(const LinkId& l) const {
  const std::size_t a = l.index();
  const std::size_t b = reverse(l).index();
  return a < b ? a : b;
}

std::int64_t TorusGeometry::displacement(Rank a, Rank b, int axis) const {
  const Coord ca = coords_of(a);
  const Coord cb = coords_of(b);
  const std::array<std::uint32_t, 3> va{ca.x, ca.y, ca.z};
  const std::array<std::uint32_t, 3> vb{cb.x, cb.y, cb.z};
  const auto n = static_cast<std::int64_t>(dims_[static_cast<std::size_t>(axis)]);
  const std::int64_t fwd =
      (static_cast<std::int64_t>(vb[static_cast<std::size_t>(axis)]) -
       static_cast<std::int64_t>(va[static_cast<std::size_t>(axis)]) + n) % n;
  const std::int64_t back = (n - fwd) % n;
  return fwd <= back ? fwd : -back;
}

std::uint32_t TorusGeometry::hop_distance(Rank a, Rank b) const {
  std::uint32_t h = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t d = displacement(a, b, axis);
    h += static_cast<std::uint32_t>(d < 0 ? -d : d);
  }
  return h;
}

std::uint32_t TorusGeometry::diameter() const {
  return dims_[0] / 2 + dims_[1] / 2 + dims_[2] / 2;
}

std::optional<RouteDecision> route_next_hop(Rank cur, Rank dst, const TorusGeometry& g,
                                            const LinkStatus& status,
                                            std::optional<Rank> prev_hop, std::uint32_t ttl) {
  if (cur == dst) throw std::invalid_argument("route_next_hop called at destination");

  std::optional<int> blocked_axis;
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t d = g.displacement(cur, dst, axis);
    if (d == 0) continue;
    const auto dir = static_cast<Direction>(axis * 2 + (d > 0 ? 0 : 1));
    if (status.up({cur, dir})) return RouteDecision{dir, false};
    if (!blocked_axis) blocked_axis = axis;
  }

  if (ttl == 0) return std::nullopt;
  std::optional<Direction> best;
  std::tuple<std::uint32_t, int, int> best_key{};
  for (Direction dir : kDirections) {
    if (!status.up({cur, dir})) continue;
    const Rank next = g.neighbor(cur, dir);
    if (prev_hop && next == *prev_hop && next != dst) continue;
    const std::tuple<std::uint32_t, int, int> key{g.hop_distance(next, dst),
                                                  axis_of(dir) == blocked_axis ? 1 : 0,
                                                  static_cast<int>(dir)};
    if (!best || key < best_key) {
      best = dir;
      best_key = key;
    }
  }
  if (!best) return std::nullopt;
  return RouteDecision{*best, true};
}

}  // namespace torusim
