#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "bench_internal.hpp"
#include "torusim/rng.hpp"

namespace torusim {

bool izhikevich_step(NeuronState& n, double current) {
  bool spiked = false;
  if (n.v >= 30.0) {
    spiked = true;
    n.v = n.p.c;
    n.u += n.p.d;
  }
  n.v += 0.5 * (0.04 * n.v * n.v + 5.0 * n.v + 140.0 - n.u + current);
  n.v += 0.5 * (0.04 * n.v * n.v + 5.0 * n.v + 140.0 - n.u + current);
  n.u += n.p.a * (n.p.b * n.v - n.u);
  if (!std::isfinite(n.v) || !std::isfinite(n.u))
    throw SimError("neuron " + std::to_string(n.id) + " state is no longer finite");
  return spiked;
}

namespace {

double clip(double w, double hi) { return std::clamp(w, 0.0, hi); }

}  // namespace

void stdp_on_post(Synapse& s, std::int64_t t_post, const StdpParams& p) {
  if (s.plastic && s.last_pre != kNoSpike && s.last_pre <= t_post)
    s.w = clip(s.w + p.a_plus * std::exp(-static_cast<double>(t_post - s.last_pre) / p.tau_plus), p.w_max);
  s.last_post = t_post;
}

void stdp_on_arrival(Synapse& s, std::int64_t t_arrival, const StdpParams& p) {
  if (s.plastic && s.last_post != kNoSpike && s.last_post < t_arrival)
    s.w = clip(s.w - p.a_minus * std::exp(-static_cast<double>(t_arrival - s.last_post) / p.tau_minus), p.w_max);
  s.last_pre = t_arrival;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kTargetTag = 0x7461726765747300ULL;
constexpr std::uint64_t kDelayTag = 0x64656c6179730000ULL;
constexpr std::uint64_t kThalamicTag = 0x7468616c616d7573ULL;

}  // namespace

std::uint32_t excitatory_count(const DpsnnConfig& cfg) {
  return static_cast<std::uint32_t>(std::llround(cfg.excitatory_fraction * cfg.neurons));
}

std::string validate(const DpsnnConfig& cfg) {
  if (cfg.neurons == 0) return "dpsnn needs at least one neuron";
  if (cfg.partitions == 0 || cfg.neurons % cfg.partitions != 0)
    return "dpsnn: " + std::to_string(cfg.neurons) + " neurons do not split into " + std::to_string(cfg.partitions) +
           " equal partitions";
  if (cfg.excitatory_fraction < 0.0 || cfg.excitatory_fraction > 1.0) return "dpsnn: excitatory fraction outside [0,1]";
  if (cfg.max_delay == 0) return "dpsnn: delays need max_delay >= 1";
  const std::uint32_t ne = excitatory_count(cfg);
  if (cfg.synapses_per_neuron > 0 && ne > 0 && cfg.synapses_per_neuron > cfg.neurons - 1)
    return "dpsnn: more synapses per neuron than possible targets";
  if (cfg.synapses_per_neuron > 0 && ne < cfg.neurons && cfg.synapses_per_neuron > ne)
    return "dpsnn: inhibitory neurons need " + std::to_string(cfg.synapses_per_neuron) + " excitatory targets";
  if (cfg.stdp.w_max < 0.0) return "dpsnn: w_max is negative";
  for (const auto& s : cfg.stimulus)
    if (s.id >= cfg.neurons) return "dpsnn: stimulus names neuron " + std::to_string(s.id);
  return "";
}

std::vector<Synapse> outgoing_synapses(const DpsnnConfig& cfg, std::uint32_t pre) {
  const CounterRng rng(cfg.seed);
  const std::uint32_t ne = excitatory_count(cfg);
  const bool exc = pre < ne;
  RngStream targets{mix64(kTargetTag ^ pre)};
  RngStream delays{mix64(kDelayTag ^ pre)};
  std::vector<Synapse> out;
  std::set<std::uint32_t> seen;
  while (out.size() < cfg.synapses_per_neuron) {
    std::uint32_t post;
    if (exc) {
      post = static_cast<std::uint32_t>(targets.below(rng, cfg.neurons - 1));
      if (post >= pre) ++post;
    } else {
      post = static_cast<std::uint32_t>(targets.below(rng, ne));
    }
    if (!seen.insert(post).second) continue;
    Synapse s;
    s.pre = pre;
    s.post = post;
    s.w = exc ? cfg.w_exc : cfg.w_inh;
    s.delay = 1 + static_cast<std::uint32_t>(delays.below(rng, cfg.max_delay));
    s.plastic = exc && cfg.plastic;
    out.push_back(s);
  }
  return out;
}

DpsnnPartition::DpsnnPartition(const DpsnnConfig& cfg, std::uint32_t index) : cfg_(cfg) {
  if (auto e = validate(cfg); !e.empty()) throw SpecError(0, 0, e);
  const std::uint32_t n = cfg.neurons / cfg.partitions;
  if (index >= cfg.partitions) throw SpecError(0, 0, "dpsnn: partition " + std::to_string(index) + " out of range");
  first_ = index * n;
  const std::uint32_t ne = excitatory_count(cfg);
  for (std::uint32_t j = 0; j < n; ++j) {
    const std::uint32_t id = first_ + j;
    neurons_.push_back(NeuronState::at_rest(id < ne ? cfg.excitatory : cfg.inhibitory, id, id < ne));
  }
  by_pre_.resize(cfg.neurons);
  by_post_.resize(n);
  for (std::uint32_t pre = 0; pre < cfg.neurons; ++pre)
    for (const auto& s : outgoing_synapses(cfg, pre)) {
      if (s.post < first_ || s.post >= first_ + n) continue;
      const auto si = static_cast<std::uint32_t>(syn_.size());
      syn_.push_back(s);
      by_pre_[pre].push_back(si);
      by_post_[s.post - first_].push_back(si);
    }
  slots_.resize(cfg.max_delay + 1);
  last_spike_.assign(n, kNoSpike);
  counts_.assign(n, 0);
  current_.assign(n, 0.0);
}

std::vector<std::uint32_t> DpsnnPartition::step(std::uint32_t t, const std::vector<std::uint32_t>& fired_prev) {
  const std::uint32_t n = count();
  const auto ring = static_cast<std::uint32_t>(slots_.size());

  if (t > 0)
    for (std::uint32_t pre : fired_prev)
      for (std::uint32_t si : by_pre_.at(pre)) slots_[(t - 1 + syn_[si].delay) % ring].push_back(si);

  // Synaptic input in ascending (pre, synapse) order, then external input.
  std::fill(current_.begin(), current_.end(), 0.0);
  auto& slot = slots_[t % ring];
  std::sort(slot.begin(), slot.end());
  for (std::uint32_t si : slot) current_[syn_[si].post - first_] += syn_[si].w;
  std::vector<double> ext(n, 0.0);
  if (cfg_.thalamic_current != 0.0) {
    RngStream th{kThalamicTag, t};
    const auto j = static_cast<std::uint32_t>(th.below(CounterRng(cfg_.seed), cfg_.neurons));
    if (j >= first_ && j < first_ + n) ext[j - first_] += cfg_.thalamic_current;
  }
  for (const auto& s : cfg_.stimulus)
    if (s.t == t && s.id >= first_ && s.id < first_ + n) ext[s.id - first_] += s.current;

  std::vector<std::uint32_t> fired;
  for (std::uint32_t j = 0; j < n; ++j)
    if (izhikevich_step(neurons_[j], current_[j] + ext[j])) fired.push_back(first_ + j);

  for (std::uint32_t si : slot) stdp_on_arrival(syn_[si], t, cfg_.stdp);
  for (std::uint32_t id : fired) {
    const std::uint32_t j = id - first_;
    last_spike_[j] = t;
    ++counts_[j];
    for (std::uint32_t si : by_post_[j]) stdp_on_post(syn_[si], t, cfg_.stdp);
  }
  slot.clear();
  return fired;
}

// ---------------------------------------------------------------------------

AppSpec build_dpsnn(const DpsnnConfig& cfg, const std::string& app) {
  if (auto e = validate(cfg); !e.empty()) throw SpecError(0, 0, e);
  ProcessNetwork net;
  net.name = app;
  for (std::uint32_t i = 0; i < cfg.partitions; ++i) {
    ProcessSpec p;
    p.id = "n" + std::to_string(i);
    p.behavior.name = "dpsnn";
    for (std::uint64_t v : {std::uint64_t{cfg.neurons}, std::uint64_t{cfg.synapses_per_neuron},
                            std::uint64_t{cfg.partitions}, std::uint64_t{cfg.duration_ms}, cfg.seed, std::uint64_t{i}})
      p.behavior.args.push_back(std::to_string(v));
    net.processes.push_back(std::move(p));
  }
  for (std::size_t a = 0; a < cfg.partitions; ++a)
    for (std::size_t b = 0; b < cfg.partitions; ++b)
      if (a != b) net.channels.push_back({a, b, kDefaultCapacity});
  AppSpec spec;
  spec.apps.push_back(std::move(net));
  spec.script.push_back({0, {FsmEventKind::Start, app}});
  return spec;
}

namespace {

void put32(Item& it, std::uint32_t v) {
  const auto at = it.size();
  it.resize(at + 4);
  std::memcpy(it.data() + at, &v, 4);
}

std::uint32_t get32(const Item& it, std::size_t at) {
  if (at + 4 > it.size()) throw SimError("dpsnn: truncated item");
  std::uint32_t v;
  std::memcpy(&v, it.data() + at, 4);
  return v;
}

// Spike list of one millisecond: [t][count][ids...].
Item encode_spikes(std::uint32_t t, const std::vector<std::uint32_t>& ids) {
  Item it;
  put32(it, t);
  put32(it, static_cast<std::uint32_t>(ids.size()));
  for (auto id : ids) put32(it, id);
  return it;
}

Process dpsnn_body(ProcessContext& ctx, DpsnnConfig cfg, std::uint32_t index) {
  DpsnnPartition part(cfg, index);
  std::vector<std::uint32_t> mine;
  Item raster(8);
  for (std::uint32_t t = 0; t < cfg.duration_ms; ++t) {
    co_await ctx.fire();
    std::vector<std::uint32_t> all = mine;
    if (t > 0)
      for (std::size_t i = 0; i < ctx.inputs(); ++i) {
        auto item = co_await ctx.read(i);
        if (!item || get32(*item, 0) != t - 1) {
          ctx.integrity_alarm("spike exchange out of step at t=" + std::to_string(t));
          co_return;
        }
        const std::uint32_t k = get32(*item, 4);
        for (std::uint32_t j = 0; j < k; ++j) all.push_back(get32(*item, 8 + 4 * j));
      }
    std::sort(all.begin(), all.end());
    mine = part.step(t, all);
    for (auto id : mine) {
      put32(raster, t);
      put32(raster, id);
    }
    if (t + 1 < cfg.duration_ms && ctx.outputs() > 0) {
      const Item msg = encode_spikes(t, mine);
      co_await ctx.write_all(msg);
    }
  }
  std::uint64_t reported = 0;
  for (auto c : part.spike_counts()) reported += c;
  std::memcpy(raster.data(), &reported, 8);
  ctx.emit(std::move(raster));
  co_await ctx.close_all();
}

}  // namespace

BehaviorDef dpsnn_behavior(const DpsnnConfig& base) {
  auto config_of = [base](const BehaviorToken& t, std::string* err) {
    DpsnnConfig cfg = base;
    std::uint32_t index = 0;
    auto v = bench_args(t, 6, err);
    if (v.size() == 6) {
      cfg.neurons = static_cast<std::uint32_t>(v[0]);
      cfg.synapses_per_neuron = static_cast<std::uint32_t>(v[1]);
      cfg.partitions = static_cast<std::uint32_t>(v[2]);
      cfg.duration_ms = static_cast<std::uint32_t>(v[3]);
      cfg.seed = v[4];
      index = static_cast<std::uint32_t>(v[5]);
    }
    return std::pair{cfg, index};
  };
  BehaviorDef def;
  def.check = [config_of](const BehaviorToken& t, std::size_t in, std::size_t out) -> std::string {
    std::string err;
    auto [cfg, index] = config_of(t, &err);
    if (!err.empty()) return err;
    if (auto e = validate(cfg); !e.empty()) return e;
    if (index >= cfg.partitions) return "dpsnn: partition index " + std::to_string(index) + " out of range";
    if (in != cfg.partitions - 1 || out != cfg.partitions - 1)
      return "dpsnn needs a channel to and from each of the other " + std::to_string(cfg.partitions - 1) +
             " partitions";
    return "";
  };
  def.make = [config_of](const BehaviorToken& t) -> ProcessBody {
    std::string err;
    auto [cfg, index] = config_of(t, &err);
    if (!err.empty()) throw SpecError(0, 0, err);
    return [cfg, index](ProcessContext& c) { return dpsnn_body(c, cfg, index); };
  };
  return def;
}

SpikeRaster collect_raster(const std::vector<Item>& outputs, std::uint64_t* reported) {
  SpikeRaster r;
  for (const auto& it : outputs) {
    if (it.size() < 8 || (it.size() - 8) % 8 != 0) throw SimError("dpsnn: malformed raster item");
    std::uint64_t n;
    std::memcpy(&n, it.data(), 8);
    if (reported) *reported += n;
    for (std::size_t at = 8; at < it.size(); at += 8) r.push_back({get32(it, at), get32(it, at + 4)});
  }
  std::sort(r.begin(), r.end());
  return r;
}

std::string raster_text(const SpikeRaster& r) {
  std::ostringstream os;
  for (const auto& s : r) os << s.t << ' ' << s.id << '\n';
  return os.str();
}

DpsnnResult run_dpsnn(const DpsnnConfig& cfg, const BenchPlatform& platform) {
  BehaviorRegistry reg = default_registry();
  register_bench_behaviors(reg, cfg);
  DpsnnResult res;
  res.run = run_bench(build_dpsnn(cfg), reg, platform);
  res.raster = collect_raster(res.run.output, &res.reported_spikes);
  return res;
}

}  // namespace torusim
