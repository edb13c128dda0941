#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "torusim/dal_runtime.hpp"

namespace torusim {

// ---------------------------------------------------------------------------
// Izhikevich neurons

struct NeuronParams {
  double a = 0.02, b = 0.2, c = -65.0, d = 8.0;
};
inline constexpr NeuronParams kRegularSpiking{0.02, 0.2, -65.0, 8.0};
inline constexpr NeuronParams kFastSpiking{0.1, 0.2, -65.0, 2.0};

struct NeuronState {
  double v = -65.0;
  double u = -13.0;
  NeuronParams p;
  std::uint32_t id = 0;
  bool excitatory = true;

  static NeuronState at_rest(const NeuronParams& p, std::uint32_t id = 0, bool excitatory = true) {
    return {p.c, p.b * p.c, p, id, excitatory};
  }
};

/// One millisecond. A neuron at or above 30 mV spikes and resets first, then v
/// takes two 0.5 ms steps and u one 1 ms step under `current`. Returns whether
/// it spiked. Throws SimError if the state stops being finite.
bool izhikevich_step(NeuronState& n, double current);

// ---------------------------------------------------------------------------
// STDP

struct StdpParams {
  double a_plus = 0.10, a_minus = 0.12;
  double tau_plus = 20.0, tau_minus = 20.0;
  double w_max = 10.0;
};

inline constexpr std::int64_t kNoSpike = -1;

struct Synapse {
  std::uint32_t pre = 0, post = 0;
  double w = 0.0;
  std::uint32_t delay = 1;
  std::int64_t last_pre = kNoSpike;  // last arrival at the post neuron (spike time + delay)
  std::int64_t last_post = kNoSpike;  // last post spike seen by this synapse
  bool plastic = true;
  friend bool operator==(const Synapse&, const Synapse&) = default;
};

/// Potentiation for a post spike at `t_post`, paired with the last arrival.
void stdp_on_post(Synapse& s, std::int64_t t_post, const StdpParams& p);
/// Depression for an arrival at `t_arrival` after the last post spike.
void stdp_on_arrival(Synapse& s, std::int64_t t_arrival, const StdpParams& p);

// ---------------------------------------------------------------------------
// DPSNN

struct Spike {
  std::uint32_t t = 0;
  std::uint32_t id = 0;
  friend auto operator<=>(const Spike&, const Spike&) = default;
};
using SpikeRaster = std::vector<Spike>;

struct Stimulus {
  std::uint32_t t = 0, id = 0;
  double current = 0.0;
};

struct DpsnnConfig {
  std::uint32_t neurons = 1000;
  std::uint32_t synapses_per_neuron = 100;
  std::uint32_t partitions = 1;
  std::uint32_t duration_ms = 1000;
  std::uint64_t seed = 1;
  double excitatory_fraction = 0.8;
  std::uint32_t max_delay = 20;
  double w_exc = 6.0;
  double w_inh = -5.0;
  double thalamic_current = 20.0;  // one random neuron per ms
  bool plastic = true;
  NeuronParams excitatory = kRegularSpiking;
  NeuronParams inhibitory = kFastSpiking;
  StdpParams stdp;
  std::vector<Stimulus> stimulus;  // extra input, mostly for tests
};

/// Empty string if the configuration is usable.
std::string validate(const DpsnnConfig& cfg);

std::uint32_t excitatory_count(const DpsnnConfig& cfg);

/// Outgoing targets and delays of neuron `pre`, from its own keyed streams.
/// The same on every partition.
std::vector<Synapse> outgoing_synapses(const DpsnnConfig& cfg, std::uint32_t pre);

/// Neurons [first, first + count) with their incoming synapses.
class DpsnnPartition {
 public:
  DpsnnPartition(const DpsnnConfig& cfg, std::uint32_t index);

  std::uint32_t first() const { return first_; }
  std::uint32_t count() const { return static_cast<std::uint32_t>(neurons_.size()); }

  /// Millisecond `t`. `fired_prev` lists every neuron of the whole net that
  /// spiked at t-1, ascending. Returns the local neurons spiking at t, ascending.
  std::vector<std::uint32_t> step(std::uint32_t t, const std::vector<std::uint32_t>& fired_prev);

  const std::vector<NeuronState>& neurons() const { return neurons_; }
  /// Incoming synapses of the local neurons, by pre and then draw order.
  const std::vector<Synapse>& synapses() const { return syn_; }
  /// Spikes per local neuron so far.
  const std::vector<std::uint64_t>& spike_counts() const { return counts_; }

 private:
  DpsnnConfig cfg_;
  std::uint32_t first_ = 0;
  std::vector<NeuronState> neurons_;
  std::vector<Synapse> syn_;
  std::vector<std::vector<std::uint32_t>> by_pre_;   // global pre id -> local synapses
  std::vector<std::vector<std::uint32_t>> by_post_;  // local neuron -> incoming synapses
  std::vector<std::vector<std::uint32_t>> slots_;    // arrivals by time modulo max_delay+1
  std::vector<std::int64_t> last_spike_;
  std::vector<std::uint64_t> counts_;
  std::vector<double> current_;
};

/// P processes `n<i>` with a channel between every ordered pair.
AppSpec build_dpsnn(const DpsnnConfig& cfg, const std::string& app = "dpsnn");

// ---------------------------------------------------------------------------
// Stencil

struct StencilConfig {
  std::array<std::uint32_t, 4> dims{8, 8, 8, 8};   // x, y, z, t
  std::array<std::uint32_t, 4> split{1, 1, 1, 1};  // blocks per axis
  std::uint32_t iterations = 10;
  std::uint64_t seed = 1;
  /// Every element starts at this value instead of a random one.
  std::optional<double> constant;
};

std::string validate(const StencilConfig& cfg);
std::uint32_t stencil_processes(const StencilConfig& cfg);

/// Global field before the first iteration, x fastest.
std::vector<double> stencil_initial(const StencilConfig& cfg);
/// FNV-1a over the bit patterns, in global order.
std::uint64_t field_checksum(const std::vector<double>& field);

/// Processes `b<i>` with token channels between neighboring blocks. Halos move
/// by RDMA PUT, so every process needs a tile of its own.
AppSpec build_stencil(const StencilConfig& cfg, const std::string& app = "stencil");

// ---------------------------------------------------------------------------
// Running on the simulated machine

/// Adds dpsnn(N,M,P,T,seed,index) and
/// stencil(X,Y,Z,T,px,py,pz,pt,iterations,seed,index) to `reg`. Settings the
/// tokens do not carry come from the two base configurations.
void register_bench_behaviors(BehaviorRegistry& reg, const DpsnnConfig& dpsnn_base = {},
                              const StencilConfig& stencil_base = {});

struct BenchPlatform {
  TorusGeometry geometry{2, 2, 2};
  std::uint64_t shuffle = 0;
  RuntimeConfig runtime;
  SimTime limit = 50'000'000'000;  // give up after this much simulated time
};

struct BenchResult {
  AppState state = AppState::Idle;
  SimTime finished_at = 0;
  std::vector<std::string> alarms;
  std::vector<std::string> stalls;
  std::vector<Item> output;
  Mapping mapping;
  std::vector<LinkCounters> links;  // by LinkId::index()
};

struct DpsnnResult {
  BenchResult run;
  SpikeRaster raster;
  std::uint64_t reported_spikes = 0;  // sum of per-neuron counts
};
DpsnnResult run_dpsnn(const DpsnnConfig& cfg, const BenchPlatform& platform = {});

/// Raster out of dpsnn process outputs, canonical order; adds the per-neuron
/// counts the processes reported to `reported`.
SpikeRaster collect_raster(const std::vector<Item>& outputs, std::uint64_t* reported = nullptr);
std::string raster_text(const SpikeRaster& r);

struct StencilResult {
  BenchResult run;
  std::vector<double> field;
  std::uint64_t checksum = 0;
  std::uint64_t put_bytes = 0;  // PUT payload over all links
};
StencilResult run_stencil(const StencilConfig& cfg, const BenchPlatform& platform = {});

/// Field out of stencil process outputs.
std::vector<double> collect_field(const StencilConfig& cfg, const std::vector<Item>& outputs);

}  // namespace torusim
