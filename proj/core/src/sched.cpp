#include "hsim/sched.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "hsim/errors.hpp"

namespace hsim {

const char* to_string(Unit unit) {
    switch (unit) {
        case Unit::TPU: return "TPU";
        case Unit::IMAC: return "IMAC";
        case Unit::AUX: return "AUX";
    }
    return "?";
}

namespace {

Unit assign_unit(const LayerSpec& layer, Mode mode) {
    switch (layer.kind) {
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
        case LayerKind::Flatten:
            return Unit::AUX;
        case LayerKind::Dense:
            return mode == Mode::Hybrid ? Unit::IMAC : Unit::TPU;
        default:
            return Unit::TPU;
    }
}

int64_t output_elems(const LayerSpec& layer) {
    const Shape3 out = output_shape(layer);
    return static_cast<int64_t>(out.h) * out.w * out.c;
}

}  // namespace

ExecutionPlan plan(const NetworkTopology& topo, Mode mode) {
    const auto findings = validate(topo, mode == Mode::Hybrid);
    for (const Finding& f : findings)
        if (f.severity == Severity::Error)
            throw ValidationError("layer '" + f.layer + "': " + f.message);

    ExecutionPlan p;
    for (size_t i = 0; i < topo.layers.size(); ++i) {
        const Unit unit = assign_unit(topo.layers[i], mode);
        p.assignments.emplace_back(topo.layers[i].name, unit);
        if (mode == Mode::Hybrid && !p.handoff_index &&
            topo.layers[i].kind == LayerKind::Dense)
            p.handoff_index = i;
    }
    return p;
}

MemoryReport memory_report(const NetworkTopology& topo, Mode mode) {
    int64_t dense_params = 0, other_params = 0;
    for (const LayerSpec& layer : topo.layers) {
        if (layer.kind == LayerKind::Dense)
            dense_params += param_count(layer);
        else
            other_params += param_count(layer);
    }
    MemoryReport mem;
    mem.baseline_sram_bytes = 4ull * static_cast<uint64_t>(dense_params + other_params);
    if (mode == Mode::Hybrid) {
        mem.sram_bytes = 4ull * static_cast<uint64_t>(other_params);
        mem.rram_bytes = static_cast<uint64_t>((dense_params * 2 + 7) / 8);
    } else {
        mem.sram_bytes = mem.baseline_sram_bytes;
        mem.rram_bytes = 0;
    }
    mem.reduction =
        mem.baseline_sram_bytes == 0
            ? 0.0
            : 1.0 - static_cast<double>(mem.sram_bytes + mem.rram_bytes) /
                        static_cast<double>(mem.baseline_sram_bytes);
    return mem;
}

SimulationReport run(const NetworkTopology& topo, const SystolicConfig& sys_cfg,
                     const CrossbarConfig& xbar_cfg, Mode mode, double aux_cost_per_elem) {
    const ExecutionPlan p = plan(topo, mode);

    SimulationReport rep;
    rep.findings = validate(topo, mode == Mode::Hybrid, sys_cfg.rows, sys_cfg.cols);
    for (size_t i = 0; i < topo.layers.size(); ++i) {
        const LayerSpec& layer = topo.layers[i];
        LayerCost cost;
        cost.name = layer.name;
        cost.unit = p.assignments[i].second;
        switch (cost.unit) {
            case Unit::TPU: {
                const CycleReport cr = layer_cycles(layer, sys_cfg);
                cost.cycles = cr.cycles;
                cost.utilization = cr.utilization;
                break;
            }
            case Unit::IMAC:
                cost.cycles = 1;  // one clock per FC layer, handoff is free
                cost.utilization = 1.0;
                cost.subarrays = subarrays_required(layer.channels_in, layer.num_filters, xbar_cfg);
                break;
            case Unit::AUX:
                cost.cycles = static_cast<uint64_t>(
                    std::llround(aux_cost_per_elem * static_cast<double>(output_elems(layer))));
                cost.utilization = 0.0;
                break;
        }
        rep.total_cycles += cost.cycles;
        rep.per_layer.push_back(std::move(cost));
    }

    if (mode == Mode::Hybrid) {
        const SimulationReport base = run(topo, sys_cfg, xbar_cfg, Mode::TpuOnly, aux_cost_per_elem);
        rep.baseline_total_cycles = base.total_cycles;
    } else {
        rep.baseline_total_cycles = rep.total_cycles;
    }
    rep.speedup = rep.total_cycles == 0
                      ? 0.0
                      : static_cast<double>(rep.baseline_total_cycles) /
                            static_cast<double>(rep.total_cycles);
    rep.memory = memory_report(topo, mode);
    return rep;
}

double speedup(const SimulationReport& report) {
    if (report.total_cycles == 0) throw DomainError("empty workload: zero cycles");
    return static_cast<double>(report.baseline_total_cycles) /
           static_cast<double>(report.total_cycles);
}

namespace {

std::string format_mb(uint64_t bytes) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(bytes) / (1024.0 * 1024.0));
    return buf;
}

std::string format(const char* fmt, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

}  // namespace

std::string report_to_csv(const SimulationReport& report) {
    std::string out = "layer, unit, cycles, utilization\n";
    for (const LayerCost& lc : report.per_layer) {
        out += lc.name;
        out += ", ";
        out += to_string(lc.unit);
        out += ", " + std::to_string(lc.cycles);
        out += ", " + format("%.6f", lc.utilization) + "\n";
    }
    out += "total_cycles, " + std::to_string(report.total_cycles) + "\n";
    out += "baseline_cycles, " + std::to_string(report.baseline_total_cycles) + "\n";
    out += "speedup, " + format("%.3f", report.speedup) + "\n";
    out += "sram_mb, " + format_mb(report.memory.sram_bytes) + "\n";
    out += "rram_mb, " + format_mb(report.memory.rram_bytes) + "\n";
    out += "total_mb, " + format_mb(report.memory.sram_bytes + report.memory.rram_bytes) + "\n";
    out += "reduction_pct, " + format("%.2f", report.memory.reduction * 100.0) + "\n";
    return out;
}

std::string report_to_json(const SimulationReport& report, const std::string& topology_name) {
    nlohmann::ordered_json doc;
    doc["topology"] = topology_name;
    doc["per_layer"] = nlohmann::ordered_json::array();
    for (const LayerCost& lc : report.per_layer) {
        nlohmann::ordered_json row;
        row["layer"] = lc.name;
        row["unit"] = to_string(lc.unit);
        row["cycles"] = lc.cycles;
        row["utilization"] = lc.utilization;
        if (lc.unit == Unit::IMAC) row["subarrays"] = lc.subarrays;
        doc["per_layer"].push_back(std::move(row));
    }
    doc["total_cycles"] = report.total_cycles;
    doc["baseline_cycles"] = report.baseline_total_cycles;
    doc["speedup"] = report.speedup;
    doc["memory"] = {{"sram_bytes", report.memory.sram_bytes},
                     {"rram_bytes", report.memory.rram_bytes},
                     {"baseline_sram_bytes", report.memory.baseline_sram_bytes},
                     {"reduction", report.memory.reduction}};
    if (!report.findings.empty()) {
        doc["findings"] = nlohmann::ordered_json::array();
        for (const Finding& f : report.findings)
            doc["findings"].push_back({{"severity", f.severity == Severity::Error ? "error" : "warning"},
                                       {"layer", f.layer},
                                       {"message", f.message}});
    }
    return doc.dump(2) + "\n";
}

void write_text_atomic(const std::string& text, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out << text;
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace hsim
