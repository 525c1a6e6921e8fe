#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsim/topology.hpp"

namespace hsim {

// Output-stationary array geometry plus the byte layout used for traces.
struct SystolicConfig {
    int rows = 32, cols = 32;
    uint64_t ifmap_offset = 0;
    uint64_t filter_offset = 10'000'000;
    uint64_t ofmap_offset = 20'000'000;
    int word_bytes = 4;
};

// One tiling pass of a GEMM onto the physical array.
struct Fold {
    int r = 1, c = 1;          // tile extent, r <= rows, c <= cols
    int64_t k = 1;             // inner-dimension length
    int64_t row_base = 0, col_base = 0;
};

struct CycleReport {
    uint64_t cycles = 0;
    uint64_t mac_ops = 0;
    double utilization = 0.0;  // mac_ops / (rows*cols*cycles)
    uint64_t reads_elems = 0;
    uint64_t writes_elems = 0;
};

enum class Region { Ifmap, Filter, Ofmap };

const char* to_string(Region region);

struct TraceRecord {
    uint64_t cycle = 0;
    char dir = 'R';            // 'R' or 'W'
    Region region = Region::Ifmap;
    uint64_t address = 0;
    int bytes = 4;
};

// Row-major tiling of the M x N output into at most rows x cols tiles.
std::vector<Fold> fold_schedule(const GemmShape& gemm, const SystolicConfig& cfg);

// Closed form k + 2r + c - 2: operands stream with unit diagonal skew, the
// last PE finishes after k + r + c - 2 cycles, then outputs drain downward
// one row per cycle (r cycles, not overlapped with the next fold).
uint64_t fold_cycles(const Fold& fold);

CycleReport gemm_cycles(const GemmShape& gemm, const SystolicConfig& cfg);

// Cycle-by-cycle replay of the array (shift-register operand wavefronts,
// per-PE MAC counting, explicit drain). Ground truth for fold_cycles.
// Guard: rows*cols <= 4096 and m*n*k <= 1e8, else OracleScaleError.
uint64_t simulate_gemm_events(const GemmShape& gemm, const SystolicConfig& cfg);

// Conv/Dense via to_gemm; DepthwiseConv summed per channel; pool/flatten
// cost zero array cycles (handled by a unit outside the array).
CycleReport layer_cycles(const LayerSpec& layer, const SystolicConfig& cfg);

// Per fold: k*r filter reads, k*c ifmap reads (each at the cycle the element
// enters the array edge), then r*c ofmap writes at drain cycles. Addresses
// are base + row-major element index * word_bytes. Conv/Dense layers only.
std::vector<TraceRecord> generate_traces(const LayerSpec& layer, const SystolicConfig& cfg);

void write_trace_csv(const std::vector<TraceRecord>& records, const std::string& path);

}  // namespace hsim
