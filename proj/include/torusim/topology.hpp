#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace torusim {

using Rank = std::uint32_t;

enum class Direction : std::uint8_t { PosX = 0, NegX, PosY, NegY, PosZ, NegZ };
inline constexpr std::array<Direction, 6> kDirections = {
    Direction::PosX, Direction::NegX, Direction::PosY,
    Direction::NegY, Direction::PosZ, Direction::NegZ};

constexpr int axis_of(Direction d) { return static_cast<int>(d) / 2; }
constexpr bool is_positive(Direction d) { return static_cast<int>(d) % 2 == 0; }
constexpr Direction opposite(Direction d) {
  return static_cast<Direction>(static_cast<int>(d) ^ 1);
}
const char* to_string(Direction d);
std::optional<Direction> parse_direction(std::string_view s);

struct Coord {
  std::uint32_t x = 0, y = 0, z = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

/// One directed link: the port `dir` of tile `src`.
struct LinkId {
  Rank src = 0;
  Direction dir = Direction::PosX;
  friend bool operator==(const LinkId&, const LinkId&) = default;
  std::size_t index() const { return static_cast<std::size_t>(src) * 6 + static_cast<std::size_t>(dir); }
};
std::string to_string(const LinkId& l);

/// 3D torus shape. Ranks are laid out x-major: rank = x + X*(y + Y*z).
class TorusGeometry {
 public:
  TorusGeometry() = default;
  TorusGeometry(std::uint32_t x, std::uint32_t y, std::uint32_t z);

  /// Parses "XxYxZ", e.g. "4x2x2".
  static TorusGeometry parse(std::string_view text);

  std::uint32_t dim(int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  std::uint32_t size() const { return dims_[0] * dims_[1] * dims_[2]; }
  std::size_t link_count() const { return static_cast<std::size_t>(size()) * 6; }
  std::string to_string() const;

  bool valid(Rank r) const { return r < size(); }
  Rank rank_of(const Coord& c) const;
  Coord coords_of(Rank r) const;
  Rank neighbor(Rank r, Direction d) const;
  LinkId reverse(const LinkId& l) const { return {neighbor(l.src, l.dir), opposite(l.dir)}; }
  LinkId link_at(std::size_t index) const {
    return {static_cast<Rank>(index / 6), static_cast<Direction>(index % 6)};
  }
  /// Canonical index of the physical (bidirectional) link carrying `l`.
  std::size_t physical_index(const LinkId& l) const;

  /// Signed shortest ring displacement from a to b on `axis`; ties resolve to +.
  std::int64_t displacement(Rank a, Rank b, int axis) const;
  std::uint32_t hop_distance(Rank a, Rank b) const;
  std::uint32_t diameter() const;
  /// Default misroute budget: 4 * diameter.
  std::uint32_t default_ttl() const { return 4 * diameter(); }

  friend bool operator==(const TorusGeometry&, const TorusGeometry&) = default;

 private:
  std::array<std::uint32_t, 3> dims_{1, 1, 1};
};

/// Per-directed-link up/down view used by routing.
class LinkStatus {
 public:
  LinkStatus() = default;
  explicit LinkStatus(const TorusGeometry& g) : up_(g.link_count(), 1) {}
  bool up(const LinkId& l) const { return up_[l.index()] != 0; }
  void set(const LinkId& l, bool up) { up_[l.index()] = up ? 1 : 0; }
  /// Sets both directions of the physical link.
  void set_both(const TorusGeometry& g, const LinkId& l, bool up) {
    set(l, up);
    set(g.reverse(l), up);
  }
  std::size_t size() const { return up_.size(); }

 private:
  std::vector<std::uint8_t> up_;
};

struct RouteDecision {
  Direction dir = Direction::PosX;
  bool misroute = false;  // consumes one unit of TTL
};

/// Next hop for a packet at `cur` headed to `dst` (cur != dst).
///
/// Dimension-order on a healthy fabric: X, then Y, then Z, shorter ring
/// direction with ties toward +. If the preferred link is down the remaining
/// dimensions with nonzero displacement are tried in X, Y, Z order. Failing
/// that, any healthy link that does not lead straight back to `prev_hop` is
/// taken as a misroute, preferring neighbors closest to `dst`, then links off
/// the blocked axis, then port order. Returns nullopt (Undeliverable) when a
/// misroute is needed with ttl == 0 or no usable link exists.
std::optional<RouteDecision> route_next_hop(Rank cur, Rank dst, const TorusGeometry& g,
                                            const LinkStatus& status,
                                            std::optional<Rank> prev_hop, std::uint32_t ttl);

}  // namespace torusim
