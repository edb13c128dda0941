#include <charconv>
#include <cstring>
#include <deque>

#include "torusim/dal_runtime.hpp"

namespace torusim {

Item item_u64(std::uint64_t v) {
  Item it(8);
  std::memcpy(it.data(), &v, 8);
  return it;
}

std::uint64_t u64_item(const Item& item) {
  if (item.size() != 8) throw SimError("dal: expected an 8-byte item, got " + std::to_string(item.size()));
  std::uint64_t v;
  std::memcpy(&v, item.data(), 8);
  return v;
}

namespace {

std::optional<std::int64_t> num(const std::string& s) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string numeric_args(const BehaviorToken& t, std::size_t lo, std::size_t hi) {
  if (t.args.size() < lo || t.args.size() > hi)
    return t.name + " takes " + std::to_string(lo) + (lo == hi ? "" : ".." + std::to_string(hi)) + " arguments";
  for (const auto& a : t.args)
    if (!num(a)) return t.name + ": '" + a + "' is not an integer";
  return "";
}

std::string ports(const BehaviorToken& t, std::size_t in, std::size_t out, std::size_t want_in_lo,
                  std::size_t want_in_hi, std::size_t want_out_lo, std::size_t want_out_hi) {
  if (in < want_in_lo || in > want_in_hi)
    return t.name + " cannot have " + std::to_string(in) + " input channel(s)";
  if (out < want_out_lo || out > want_out_hi)
    return t.name + " cannot have " + std::to_string(out) + " output channel(s)";
  return "";
}

constexpr std::size_t kMany = ~std::size_t{0};

std::vector<std::int64_t> args_of(const BehaviorToken& t) {
  std::vector<std::int64_t> v;
  for (const auto& a : t.args) v.push_back(*num(a));
  return v;
}

Process source_body(ProcessContext& ctx, std::uint64_t n, std::uint64_t start, std::uint64_t step) {
  for (std::uint64_t i = 0; i < n; ++i) {
    if (!co_await ctx.fire()) break;
    co_await ctx.write_all(item_u64(start + i * step));
  }
  co_await ctx.close_all();
}

Process sink_body(ProcessContext& ctx) {
  std::vector<std::size_t> open(ctx.inputs());
  for (std::size_t i = 0; i < open.size(); ++i) open[i] = i;
  while (!open.empty()) {
    co_await ctx.fire();
    for (std::size_t k = 0; k < open.size();) {
      auto item = co_await ctx.read(open[k]);
      if (!item) {
        open.erase(open.begin() + static_cast<std::ptrdiff_t>(k));
        continue;
      }
      ctx.emit(std::move(*item));
      ++k;
    }
  }
}

// y = f(x) on one input, copied to every output.
Process map_body(ProcessContext& ctx, std::function<std::uint64_t(std::uint64_t)> f) {
  for (;;) {
    co_await ctx.fire();
    auto item = co_await ctx.read(0);
    if (!item) break;
    co_await ctx.write_all(item_u64(f(u64_item(*item))));
  }
  co_await ctx.close_all();
}

Process merge_body(ProcessContext& ctx) {
  for (;;) {
    co_await ctx.fire();
    std::uint64_t sum = 0;
    bool eos = false;
    for (std::size_t i = 0; i < ctx.inputs() && !eos; ++i) {
      auto item = co_await ctx.read(i);
      if (!item) eos = true;
      else sum += u64_item(*item);
    }
    if (eos) break;
    co_await ctx.write_all(item_u64(sum));
  }
  co_await ctx.close_all();
}

// Inputs 2j and 2j+1 carry the two replicas' copies of output j. The copy that
// is ahead is forwarded; the other is checked against it.
Process compare_body(ProcessContext& ctx) {
  const std::size_t k = ctx.outputs();
  struct Pair {
    std::uint64_t count[2] = {0, 0};
    bool eos[2] = {false, false};
    bool closed = false;
    bool finished = false;
    std::deque<Item> backlog;  // items of the leading copy not yet matched
  };
  std::vector<Pair> pairs(k);
  for (;;) {
    std::vector<std::size_t> cands;
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 2; ++c)
        if (!pairs[j].finished && !pairs[j].eos[c]) cands.push_back(2 * j + static_cast<std::size_t>(c));
    if (cands.empty()) break;
    co_await ctx.fire();
    const std::size_t i = co_await ctx.ready_any(cands);
    const std::size_t j = i / 2;
    const int c = static_cast<int>(i % 2), o = 1 - c;
    auto& pr = pairs[j];
    auto item = co_await ctx.read(i);
    if (!item) {
      pr.eos[c] = true;
      if (!pr.closed) {
        pr.closed = true;
        co_await ctx.close(j);
      }
      if (pr.eos[o] && pr.count[c] != pr.count[o]) ctx.integrity_alarm("replica streams differ in length");
      if (pr.eos[o] || pr.count[o] == pr.count[c]) pr.finished = true;
      continue;
    }
    const std::uint64_t n = ++pr.count[c];
    if (n > pr.count[o]) {
      if (pr.eos[o]) {
        ctx.integrity_alarm("replica streams differ in length");
        pr.finished = true;
        continue;
      }
      pr.backlog.push_back(*item);
      if (!pr.closed) co_await ctx.write(j, std::move(*item));
    } else {
      if (pr.backlog.front() != *item)
        ctx.integrity_alarm("replica mismatch on output " + std::to_string(j) + " item " + std::to_string(n - 1));
      pr.backlog.pop_front();
      if (pr.eos[o] && pr.count[c] == pr.count[o]) pr.finished = true;
    }
  }
}

BehaviorRegistry make_default() {
  BehaviorRegistry reg;
  reg.add("source", BehaviorDef{
                        [](const BehaviorToken& t, std::size_t in, std::size_t out) {
                          auto e = numeric_args(t, 1, 3);
                          if (e.empty()) e = ports(t, in, out, 0, 0, 1, kMany);
                          if (e.empty() && *num(t.args[0]) < 0) e = "source count must be non-negative";
                          return e;
                        },
                        [](const BehaviorToken& t) -> ProcessBody {
                          auto a = args_of(t);
                          const auto n = static_cast<std::uint64_t>(a[0]);
                          const auto start = static_cast<std::uint64_t>(a.size() > 1 ? a[1] : 0);
                          const auto step = static_cast<std::uint64_t>(a.size() > 2 ? a[2] : 1);
                          return [=](ProcessContext& c) { return source_body(c, n, start, step); };
                        },
                        true});
  reg.add("sink", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) {
                                auto e = numeric_args(t, 0, 0);
                                return e.empty() ? ports(t, in, out, 1, kMany, 0, 0) : e;
                              },
                              [](const BehaviorToken&) -> ProcessBody { return sink_body; }});
  reg.add("identity", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) {
                                    auto e = numeric_args(t, 0, 0);
                                    return e.empty() ? ports(t, in, out, 1, 1, 1, kMany) : e;
                                  },
                                  [](const BehaviorToken&) -> ProcessBody {
                                    return [](ProcessContext& c) {
                                      return map_body(c, [](std::uint64_t x) { return x; });
                                    };
                                  }});
  reg.add("affine", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) {
                                  auto e = numeric_args(t, 2, 2);
                                  return e.empty() ? ports(t, in, out, 1, 1, 1, kMany) : e;
                                },
                                [](const BehaviorToken& t) -> ProcessBody {
                                  auto a = args_of(t);
                                  const auto m = static_cast<std::uint64_t>(a[0]), b = static_cast<std::uint64_t>(a[1]);
                                  return [=](ProcessContext& c) {
                                    return map_body(c, [=](std::uint64_t x) { return m * x + b; });
                                  };
                                }});
  reg.add("table", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) {
                                 auto e = numeric_args(t, 1, kMany);
                                 return e.empty() ? ports(t, in, out, 1, 1, 1, kMany) : e;
                               },
                               [](const BehaviorToken& t) -> ProcessBody {
                                 std::vector<std::uint64_t> v;
                                 for (auto x : args_of(t)) v.push_back(static_cast<std::uint64_t>(x));
                                 return [=](ProcessContext& c) {
                                   return map_body(c, [v](std::uint64_t x) { return v[x % v.size()]; });
                                 };
                               }});
  reg.add("merge", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) {
                                 auto e = numeric_args(t, 0, 0);
                                 return e.empty() ? ports(t, in, out, 1, kMany, 1, kMany) : e;
                               },
                               [](const BehaviorToken&) -> ProcessBody { return merge_body; }});
  reg.add("compare", BehaviorDef{[](const BehaviorToken& t, std::size_t in, std::size_t out) -> std::string {
                                   auto e = numeric_args(t, 0, 0);
                                   if (!e.empty()) return e;
                                   if (out == 0 || in != 2 * out) return "compare needs two inputs per output";
                                   return "";
                                 },
                                 [](const BehaviorToken&) -> ProcessBody { return compare_body; }});
  return reg;
}

}  // namespace

BehaviorRegistry& default_registry() {
  static BehaviorRegistry reg = make_default();
  return reg;
}

}  // namespace torusim
