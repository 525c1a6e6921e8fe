#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hsim/imac.hpp"
#include "hsim/systolic.hpp"
#include "hsim/topology.hpp"

namespace hsim {

enum class Unit { TPU, IMAC, AUX };
enum class Mode { TpuOnly, Hybrid };

const char* to_string(Unit unit);

struct ExecutionPlan {
    std::vector<std::pair<std::string, Unit>> assignments;
    std::optional<size_t> handoff_index;  // first Dense layer in hybrid mode
};

struct MemoryReport {
    uint64_t sram_bytes = 0;           // FP32 weights kept on the digital side
    uint64_t rram_bytes = 0;           // 2 bits per ternary weight
    uint64_t baseline_sram_bytes = 0;  // everything FP32
    double reduction = 0.0;            // 1 - (sram+rram)/baseline
};

struct LayerCost {
    std::string name;
    Unit unit = Unit::TPU;
    uint64_t cycles = 0;
    double utilization = 0.0;
    int64_t subarrays = 0;  // IMAC capacity metadata, 0 elsewhere
};

struct SimulationReport {
    std::vector<LayerCost> per_layer;
    uint64_t total_cycles = 0;
    uint64_t baseline_total_cycles = 0;
    double speedup = 0.0;
    MemoryReport memory;
    std::vector<Finding> findings;  // validation warnings carried through
};

// Hybrid: Dense -> IMAC, Conv/DepthwiseConv -> TPU, pool/flatten -> AUX.
// TPU-only: everything except pool/flatten on the TPU. Throws
// ValidationError when validate() reports errors for the mode.
ExecutionPlan plan(const NetworkTopology& topo, Mode mode);

// TPU layers cost layer_cycles; IMAC Dense layers cost exactly one cycle
// (the handoff itself costs zero); AUX layers cost aux_cost_per_elem per
// output element, rounded to the nearest cycle. The baseline column is
// always a TPU-only rerun of the same topology.
SimulationReport run(const NetworkTopology& topo, const SystolicConfig& sys_cfg,
                     const CrossbarConfig& xbar_cfg, Mode mode,
                     double aux_cost_per_elem = 0.0);

MemoryReport memory_report(const NetworkTopology& topo, Mode mode);

double speedup(const SimulationReport& report);

// Report emission: per-layer CSV plus a summary block, and an equivalent
// JSON document. MB values print with 3 decimals. Writes are atomic.
std::string report_to_csv(const SimulationReport& report);
std::string report_to_json(const SimulationReport& report, const std::string& topology_name);
void write_text_atomic(const std::string& text, const std::string& path);

}  // namespace hsim
