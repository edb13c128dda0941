#pragma once

#include <string>
#include <vector>

#include "torusim/bench.hpp"

namespace torusim {

/// Exactly `n` non-negative integer arguments; sets `err` otherwise.
std::vector<std::uint64_t> bench_args(const BehaviorToken& t, std::size_t n, std::string* err);

BehaviorDef dpsnn_behavior(const DpsnnConfig& base);
BehaviorDef stencil_behavior(const StencilConfig& base);

/// Runs the single application of `spec` until it completes or fails.
BenchResult run_bench(const AppSpec& spec, const BehaviorRegistry& reg, const BenchPlatform& platform);

}  // namespace torusim
