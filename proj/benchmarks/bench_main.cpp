#include <benchmark/benchmark.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hsim/imac.hpp"
#include "hsim/rng.hpp"
#include "hsim/sched.hpp"
#include "hsim/systolic.hpp"
#include "hsim/topology.hpp"

using namespace hsim;

namespace {

NetworkTopology bundled(const std::string& name) {
    const std::string path = std::string(HSIM_SOURCE_DIR) + "/topologies/" + name + ".csv";
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_topology(ss.str(), name);
}

TernaryMatrix random_ternary(int64_t rows, int64_t cols, uint64_t seed) {
    TernaryMatrix t;
    t.rows = rows;
    t.cols = cols;
    t.v.resize(static_cast<size_t>(rows * cols));
    Rng rng(seed);
    for (int8_t& v : t.v) v = static_cast<int8_t>(rng.below(3)) - 1;
    return t;
}

void bm_gemm_cycles(benchmark::State& state) {
    const SystolicConfig cfg;
    const GemmShape g{state.range(0), state.range(1), state.range(2)};
    for (auto _ : state) benchmark::DoNotOptimize(gemm_cycles(g, cfg).cycles);
}

void bm_event_oracle(benchmark::State& state) {
    const SystolicConfig cfg;
    const GemmShape g{state.range(0), state.range(1), state.range(2)};
    for (auto _ : state) benchmark::DoNotOptimize(simulate_gemm_events(g, cfg));
}

void bm_generate_traces(benchmark::State& state) {
    const NetworkTopology lenet = bundled("lenet");
    const SystolicConfig cfg;
    for (auto _ : state) {
        const auto records = generate_traces(lenet.layers[0], cfg);
        benchmark::DoNotOptimize(records.size());
    }
}

void bm_mvm(benchmark::State& state) {
    const int64_t n = state.range(0);
    CrossbarConfig cfg;
    const Crossbar xbar = program_crossbar(random_ternary(n, n, 42), cfg);
    std::vector<double> x(static_cast<size_t>(n));
    Rng rng(7);
    for (double& v : x) v = rng.uniform() * 2.0 - 1.0;
    for (auto _ : state) benchmark::DoNotOptimize(mvm(xbar, x));
    state.SetItemsProcessed(state.iterations() * n * n);
}

void bm_run_hybrid(benchmark::State& state) {
    static const char* models[] = {"lenet", "mobilenet_v1", "mobilenet_v2", "vgg9", "resnet18"};
    const NetworkTopology topo = bundled(models[state.range(0)]);
    for (auto _ : state) {
        const SimulationReport rep = run(topo, SystolicConfig{}, CrossbarConfig{}, Mode::Hybrid);
        benchmark::DoNotOptimize(rep.total_cycles);
    }
    state.SetLabel(models[state.range(0)]);
}

BENCHMARK(bm_gemm_cycles)->Args({576, 25, 16})->Args({1, 1024, 10})->Args({4096, 1152, 256});
BENCHMARK(bm_event_oracle)->Args({32, 100, 32})->Args({64, 400, 16});
BENCHMARK(bm_generate_traces);
BENCHMARK(bm_mvm)->Arg(128)->Arg(1024);
BENCHMARK(bm_run_hybrid)->DenseRange(0, 4);

}  // namespace

BENCHMARK_MAIN();
