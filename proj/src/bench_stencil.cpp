#include <algorithm>
#include <cstring>
#include <set>

#include "bench_internal.hpp"
#include "torusim/rng.hpp"

namespace torusim {

namespace {

constexpr std::uint64_t kFieldTag = 0x6669656c64000000ULL;
constexpr std::uint64_t kRegionBase = 0x1000'0000;
constexpr std::uint64_t kRegionStride = 0x10'0000;
constexpr std::uint64_t kReadyToken = ~std::uint64_t{0};

using Coord4 = std::array<std::uint32_t, 4>;

// Block decomposition seen from one process.
struct Layout {
  Coord4 n{};      // block extent
  Coord4 split{};  // blocks per axis
  Coord4 block{};  // this block's position

  explicit Layout(const StencilConfig& cfg, std::uint32_t index = 0) : split(cfg.split) {
    for (int a = 0; a < 4; ++a) n[a] = cfg.dims[a] / cfg.split[a];
    for (int a = 0; a < 4; ++a) {
      block[a] = index % split[a];
      index /= split[a];
    }
  }
  std::size_t cells() const { return std::size_t{n[0]} * n[1] * n[2] * n[3]; }
  std::size_t index(const Coord4& c) const { return c[0] + n[0] * (c[1] + std::size_t{n[1]} * (c[2] + std::size_t{n[2]} * c[3])); }
  std::size_t face(int axis) const { return cells() / n[axis]; }
  // Position of cell `c` inside the face perpendicular to `axis`.
  std::size_t face_index(const Coord4& c, int axis) const {
    std::size_t fi = 0, stride = 1;
    for (int a = 0; a < 4; ++a) {
      if (a == axis) continue;
      fi += c[a] * stride;
      stride *= n[a];
    }
    return fi;
  }
  std::uint32_t neighbor(int axis, int side) const {
    Coord4 b = block;
    b[axis] = (b[axis] + (side ? 1 : split[axis] - 1)) % split[axis];
    std::uint32_t idx = 0;
    for (int a = 3; a >= 0; --a) idx = idx * split[a] + b[a];
    return idx;
  }
  // Halo slot (axis, side, parity) inside a process's region. Side 0 holds
  // the cells below the block, side 1 those above.
  std::uint64_t slot_offset(int axis, int side, unsigned parity) const {
    std::uint64_t off = 0;
    for (int a = 0; a < 4; ++a)
      for (int s = 0; s < 2; ++s)
        for (unsigned p = 0; p < 2; ++p) {
          if (a == axis && s == side && p == parity) return off;
          off += face(a) * sizeof(double);
        }
    return off;
  }
  std::uint64_t region_bytes() const { return slot_offset(3, 1, 1) + face(3) * sizeof(double); }
  std::set<std::uint32_t> neighbors(std::uint32_t self) const {
    std::set<std::uint32_t> s;
    for (int a = 0; a < 4; ++a)
      for (int side = 0; side < 2; ++side)
        if (neighbor(a, side) != self) s.insert(neighbor(a, side));
    return s;
  }
};

std::uint64_t region_base(std::size_t proc) { return kRegionBase + proc * kRegionStride; }

std::uint32_t processes(const StencilConfig& cfg) { return cfg.split[0] * cfg.split[1] * cfg.split[2] * cfg.split[3]; }

double initial_value(const StencilConfig& cfg, std::uint64_t global_index) {
  if (cfg.constant) return *cfg.constant;
  return to_unit(CounterRng(cfg.seed).at(kFieldTag, global_index));
}

std::vector<double> extract_face(const Layout& L, const std::vector<double>& f, int axis, std::uint32_t at) {
  std::vector<double> out(L.face(axis));
  Coord4 c{};
  for (c[3] = 0; c[3] < L.n[3]; ++c[3])
    for (c[2] = 0; c[2] < L.n[2]; ++c[2])
      for (c[1] = 0; c[1] < L.n[1]; ++c[1])
        for (c[0] = 0; c[0] < L.n[0]; ++c[0])
          if (c[axis] == at) out[L.face_index(c, axis)] = f[L.index(c)];
  return out;
}

Process stencil_body(ProcessContext& ctx, StencilConfig cfg, std::uint32_t index) {
  const Layout L(cfg, index);
  const std::vector<std::uint32_t> nb = [&] {
    auto s = L.neighbors(index);
    return std::vector<std::uint32_t>(s.begin(), s.end());
  }();
  Fabric& fab = ctx.fabric();
  const Rank me = ctx.tile();
  const std::uint64_t base = region_base(index);
  fab.register_region(me, base, L.region_bytes());

  std::vector<double> cur(L.cells()), next(L.cells());
  {
    Coord4 c{};
    for (c[3] = 0; c[3] < L.n[3]; ++c[3])
      for (c[2] = 0; c[2] < L.n[2]; ++c[2])
        for (c[1] = 0; c[1] < L.n[1]; ++c[1])
          for (c[0] = 0; c[0] < L.n[0]; ++c[0]) {
            std::uint64_t g = 0;
            for (int a = 3; a >= 0; --a) g = g * cfg.dims[a] + L.block[a] * L.n[a] + c[a];
            cur[L.index(c)] = initial_value(cfg, g);
          }
  }

  // Everyone has registered before the first PUT lands.
  if (!nb.empty()) {
    co_await ctx.write_all(item_u64(kReadyToken));
    for (std::size_t i = 0; i < nb.size(); ++i) {
      auto t = co_await ctx.read(i);
      if (!t || u64_item(*t) != kReadyToken) {
        ctx.integrity_alarm("stencil handshake broken");
        co_return;
      }
    }
  }

  for (std::uint32_t it = 0; it < cfg.iterations; ++it) {
    co_await ctx.fire();
    const unsigned parity = it % 2;
    std::vector<TransferId> puts;
    for (int a = 0; a < 4; ++a)
      for (int side = 0; side < 2; ++side) {
        // Our boundary on `side` is the neighbor's halo on the other side.
        const auto face = extract_face(L, cur, a, side ? L.n[a] - 1 : 0);
        const std::uint32_t to = L.neighbor(a, side);
        const std::uint64_t addr = region_base(to) + L.slot_offset(a, 1 - side, parity);
        const std::size_t bytes = face.size() * sizeof(double);
        if (to == index) {
          std::memcpy(fab.region(me, addr, bytes).data(), face.data(), bytes);
          continue;
        }
        TransferOptions opts;
        opts.post_completion = false;
        puts.push_back(fab.rdma_put(me, ctx.tile_of(to),
                                    std::span(reinterpret_cast<const std::uint8_t*>(face.data()), bytes), addr, opts));
      }
    for (;;) {
      bool pending = false;
      for (auto id : puts)
        if (!fab.transfer(id).terminal()) pending = true;
      if (!pending) break;
      co_await fab.completion_waiters(me).wait();
    }
    for (auto id : puts)
      if (fab.transfer(id).status != TransferStatus::Complete) {
        ctx.integrity_alarm(std::string("halo PUT failed: ") + to_string(fab.transfer(id).reason));
        co_return;
      }
    co_await ctx.write_all(item_u64(it));
    for (std::size_t i = 0; i < nb.size(); ++i) {
      auto t = co_await ctx.read(i);
      if (!t || u64_item(*t) != it) {
        ctx.integrity_alarm("stencil iterations out of step");
        co_return;
      }
    }

    auto halo = [&](int axis, int side) {
      const std::size_t bytes = L.face(axis) * sizeof(double);
      return reinterpret_cast<const double*>(fab.region(me, base + L.slot_offset(axis, side, parity), bytes).data());
    };
    const double* h[4][2];
    for (int a = 0; a < 4; ++a)
      for (int s = 0; s < 2; ++s) h[a][s] = halo(a, s);
    auto value = [&](Coord4 c, int axis, int delta) {
      if (delta < 0 && c[axis] == 0) return h[axis][0][L.face_index(c, axis)];
      if (delta > 0 && c[axis] == L.n[axis] - 1) return h[axis][1][L.face_index(c, axis)];
      c[axis] = static_cast<std::uint32_t>(static_cast<int>(c[axis]) + delta);
      return cur[L.index(c)];
    };
    Coord4 c{};
    for (c[3] = 0; c[3] < L.n[3]; ++c[3])
      for (c[2] = 0; c[2] < L.n[2]; ++c[2])
        for (c[1] = 0; c[1] < L.n[1]; ++c[1])
          for (c[0] = 0; c[0] < L.n[0]; ++c[0]) {
            double s = cur[L.index(c)];
            for (int a = 0; a < 4; ++a) {
              s += value(c, a, -1);
              s += value(c, a, +1);
            }
            next[L.index(c)] = s / 9.0;
          }
    cur.swap(next);
  }

  Item out(4 + cur.size() * sizeof(double));
  std::memcpy(out.data(), &index, 4);
  std::memcpy(out.data() + 4, cur.data(), cur.size() * sizeof(double));
  ctx.emit(std::move(out));
  co_await ctx.close_all();
}

}  // namespace

std::string validate(const StencilConfig& cfg) {
  for (int a = 0; a < 4; ++a) {
    if (cfg.dims[a] == 0 || cfg.split[a] == 0) return "stencil: zero extent on axis " + std::to_string(a);
    if (cfg.dims[a] % cfg.split[a] != 0)
      return "stencil: axis " + std::to_string(a) + " of " + std::to_string(cfg.dims[a]) + " cells does not split into " +
             std::to_string(cfg.split[a]) + " blocks";
  }
  if (Layout(cfg).region_bytes() > kRegionStride) return "stencil: blocks too large for their halo regions";
  return "";
}

std::uint32_t stencil_processes(const StencilConfig& cfg) { return processes(cfg); }

std::vector<double> stencil_initial(const StencilConfig& cfg) {
  const std::size_t n = std::size_t{cfg.dims[0]} * cfg.dims[1] * cfg.dims[2] * cfg.dims[3];
  std::vector<double> f(n);
  for (std::size_t g = 0; g < n; ++g) f[g] = initial_value(cfg, g);
  return f;
}

std::uint64_t field_checksum(const std::vector<double>& field) {
  Fnv1a h;
  for (double v : field) h.update_pod(v);
  return h.value();
}

AppSpec build_stencil(const StencilConfig& cfg, const std::string& app) {
  if (auto e = validate(cfg); !e.empty()) throw SpecError(0, 0, e);
  const std::uint32_t P = processes(cfg);
  ProcessNetwork net;
  net.name = app;
  for (std::uint32_t i = 0; i < P; ++i) {
    ProcessSpec p;
    p.id = "b" + std::to_string(i);
    p.behavior.name = "stencil";
    for (auto v : cfg.dims) p.behavior.args.push_back(std::to_string(v));
    for (auto v : cfg.split) p.behavior.args.push_back(std::to_string(v));
    p.behavior.args.push_back(std::to_string(cfg.iterations));
    p.behavior.args.push_back(std::to_string(cfg.seed));
    p.behavior.args.push_back(std::to_string(i));
    net.processes.push_back(std::move(p));
  }
  for (std::uint32_t a = 0; a < P; ++a)
    for (std::uint32_t b : Layout(cfg, a).neighbors(a)) net.channels.push_back({a, b, kDefaultCapacity});
  AppSpec spec;
  spec.apps.push_back(std::move(net));
  spec.script.push_back({0, {FsmEventKind::Start, app}});
  return spec;
}

BehaviorDef stencil_behavior(const StencilConfig& base) {
  auto config_of = [base](const BehaviorToken& t, std::string* err) {
    StencilConfig cfg = base;
    std::uint32_t index = 0;
    auto v = bench_args(t, 11, err);
    if (v.size() == 11) {
      for (int a = 0; a < 4; ++a) {
        cfg.dims[a] = static_cast<std::uint32_t>(v[a]);
        cfg.split[a] = static_cast<std::uint32_t>(v[4 + a]);
      }
      cfg.iterations = static_cast<std::uint32_t>(v[8]);
      cfg.seed = v[9];
      index = static_cast<std::uint32_t>(v[10]);
    }
    return std::pair{cfg, index};
  };
  BehaviorDef def;
  def.check = [config_of](const BehaviorToken& t, std::size_t in, std::size_t out) -> std::string {
    std::string err;
    auto [cfg, index] = config_of(t, &err);
    if (!err.empty()) return err;
    if (auto e = validate(cfg); !e.empty()) return e;
    if (index >= processes(cfg)) return "stencil: block index " + std::to_string(index) + " out of range";
    const auto want = Layout(cfg, index).neighbors(index).size();
    if (in != want || out != want)
      return "stencil block " + std::to_string(index) + " needs a channel to and from each of its " +
             std::to_string(want) + " neighbors";
    return "";
  };
  def.make = [config_of](const BehaviorToken& t) -> ProcessBody {
    std::string err;
    auto [cfg, index] = config_of(t, &err);
    if (!err.empty()) throw SpecError(0, 0, err);
    return [cfg, index](ProcessContext& c) { return stencil_body(c, cfg, index); };
  };
  return def;
}

std::vector<double> collect_field(const StencilConfig& cfg, const std::vector<Item>& outputs) {
  std::vector<double> f(std::size_t{cfg.dims[0]} * cfg.dims[1] * cfg.dims[2] * cfg.dims[3]);
  std::vector<bool> seen(processes(cfg));
  for (const auto& it : outputs) {
    std::uint32_t index;
    if (it.size() < 4) throw SimError("stencil: malformed block item");
    std::memcpy(&index, it.data(), 4);
    if (index >= seen.size() || seen[index]) throw SimError("stencil: unexpected block " + std::to_string(index));
    seen[index] = true;
    const Layout L(cfg, index);
    if (it.size() != 4 + L.cells() * sizeof(double)) throw SimError("stencil: block item has the wrong size");
    Coord4 c{};
    for (c[3] = 0; c[3] < L.n[3]; ++c[3])
      for (c[2] = 0; c[2] < L.n[2]; ++c[2])
        for (c[1] = 0; c[1] < L.n[1]; ++c[1])
          for (c[0] = 0; c[0] < L.n[0]; ++c[0]) {
            std::uint64_t g = 0;
            for (int a = 3; a >= 0; --a) g = g * cfg.dims[a] + L.block[a] * L.n[a] + c[a];
            std::memcpy(&f[g], it.data() + 4 + L.index(c) * sizeof(double), sizeof(double));
          }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) throw SimError("stencil: missing blocks");
  return f;
}

StencilResult run_stencil(const StencilConfig& cfg, const BenchPlatform& platform) {
  BehaviorRegistry reg = default_registry();
  register_bench_behaviors(reg, DpsnnConfig{}, cfg);
  BenchPlatform pl = platform;
  if (pl.runtime.map.tile_capacity == 0) pl.runtime.map.tile_capacity = 1;
  StencilResult res;
  res.run = run_bench(build_stencil(cfg), reg, pl);
  if (res.run.state == AppState::Completed) {
    res.field = collect_field(cfg, res.run.output);
    res.checksum = field_checksum(res.field);
  }
  for (const auto& l : res.run.links) res.put_bytes += l.payload_by_kind[static_cast<std::size_t>(PacketKind::Put)];
  return res;
}

}  // namespace torusim
