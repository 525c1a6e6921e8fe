#include "hsim/systolic.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hsim/errors.hpp"

namespace hsim {

const char* to_string(Region region) {
    switch (region) {
        case Region::Ifmap: return "ifmap";
        case Region::Filter: return "filter";
        case Region::Ofmap: return "ofmap";
    }
    return "?";
}

std::vector<Fold> fold_schedule(const GemmShape& gemm, const SystolicConfig& cfg) {
    const int64_t R = cfg.rows, C = cfg.cols;
    const int64_t nr = (gemm.m + R - 1) / R;
    const int64_t nc = (gemm.n + C - 1) / C;
    std::vector<Fold> folds;
    folds.reserve(static_cast<size_t>(nr * nc));
    for (int64_t i = 0; i < nr; ++i) {
        const int r = static_cast<int>(std::min(R, gemm.m - i * R));
        for (int64_t j = 0; j < nc; ++j) {
            const int c = static_cast<int>(std::min(C, gemm.n - j * C));
            folds.push_back({r, c, gemm.k, i * R, j * C});
        }
    }
    return folds;
}

uint64_t fold_cycles(const Fold& fold) {
    return static_cast<uint64_t>(fold.k) + 2 * fold.r + fold.c - 2;
}

CycleReport gemm_cycles(const GemmShape& gemm, const SystolicConfig& cfg) {
    CycleReport rep;
    for (const Fold& fold : fold_schedule(gemm, cfg)) {
        rep.cycles += fold_cycles(fold);
        rep.reads_elems += static_cast<uint64_t>(fold.k) * (fold.r + fold.c);
    }
    rep.mac_ops = static_cast<uint64_t>(gemm.m) * gemm.k * gemm.n;
    rep.writes_elems = static_cast<uint64_t>(gemm.m) * gemm.n;
    rep.utilization = rep.cycles == 0
                          ? 0.0
                          : static_cast<double>(rep.mac_ops) /
                                (static_cast<double>(cfg.rows) * cfg.cols * rep.cycles);
    return rep;
}

namespace {

// One fold of the replay. Operands move through explicit shift registers:
// a-values enter at the left edge and step right, b-values enter at the top
// edge and step down; a PE fires a MAC in any cycle where both registers
// hold live data. After the last MAC the accumulator plane shifts down one
// row per cycle until every output has left the bottom edge.
uint64_t replay_fold(int r, int c, int64_t k) {
    std::vector<uint8_t> a_live(static_cast<size_t>(r) * c, 0);
    std::vector<uint8_t> b_live(static_cast<size_t>(r) * c, 0);
    std::vector<int64_t> macs(static_cast<size_t>(r) * c, 0);
    auto at = [c](int i, int j) { return static_cast<size_t>(i) * c + j; };

    const int64_t total_macs = static_cast<int64_t>(r) * c * k;
    int64_t done = 0;
    uint64_t cycle = 0;
    for (;; ++cycle) {
        for (int i = 0; i < r; ++i) {
            for (int j = c - 1; j > 0; --j) a_live[at(i, j)] = a_live[at(i, j - 1)];
            a_live[at(i, 0)] =
                cycle >= static_cast<uint64_t>(i) && cycle < static_cast<uint64_t>(i) + k;
        }
        for (int j = 0; j < c; ++j) {
            for (int i = r - 1; i > 0; --i) b_live[at(i, j)] = b_live[at(i - 1, j)];
            b_live[at(0, j)] =
                cycle >= static_cast<uint64_t>(j) && cycle < static_cast<uint64_t>(j) + k;
        }
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                if (a_live[at(i, j)] && b_live[at(i, j)]) {
                    ++macs[at(i, j)];
                    ++done;
                }
        if (done == total_macs) break;
    }
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            if (macs[at(i, j)] != k) throw Error("replay lost a MAC");

    uint64_t compute_cycles = cycle + 1;

    int64_t drained = 0;
    uint64_t drain_cycles = 0;
    std::vector<uint8_t> held(static_cast<size_t>(r) * c, 1);
    while (drained < static_cast<int64_t>(r) * c) {
        ++drain_cycles;
        for (int j = 0; j < c; ++j) {
            if (held[at(r - 1, j)]) ++drained;
            for (int i = r - 1; i > 0; --i) held[at(i, j)] = held[at(i - 1, j)];
            held[at(0, j)] = 0;
        }
    }
    return compute_cycles + drain_cycles;
}

}  // namespace

uint64_t simulate_gemm_events(const GemmShape& gemm, const SystolicConfig& cfg) {
    if (static_cast<int64_t>(cfg.rows) * cfg.cols > 4096)
        throw OracleScaleError("oracle scale exceeded: array larger than 4096 PEs");
    if (gemm.m * gemm.n * gemm.k > 100'000'000)
        throw OracleScaleError("oracle scale exceeded: m*n*k > 1e8");
    uint64_t total = 0;
    for (const Fold& fold : fold_schedule(gemm, cfg))
        total += replay_fold(fold.r, fold.c, fold.k);
    return total;
}

CycleReport layer_cycles(const LayerSpec& layer, const SystolicConfig& cfg) {
    switch (layer.kind) {
        case LayerKind::Conv:
        case LayerKind::Dense:
            return gemm_cycles(to_gemm(layer), cfg);
        case LayerKind::DepthwiseConv: {
            const Shape3 out = output_shape(layer);
            const GemmShape per_channel{static_cast<int64_t>(out.h) * out.w,
                                        static_cast<int64_t>(layer.filter_h) * layer.filter_w, 1};
            const CycleReport one = gemm_cycles(per_channel, cfg);
            CycleReport rep;
            rep.cycles = one.cycles * layer.channels_in;
            rep.mac_ops = one.mac_ops * layer.channels_in;
            rep.reads_elems = one.reads_elems * layer.channels_in;
            rep.writes_elems = one.writes_elems * layer.channels_in;
            rep.utilization = rep.cycles == 0
                                  ? 0.0
                                  : static_cast<double>(rep.mac_ops) /
                                        (static_cast<double>(cfg.rows) * cfg.cols * rep.cycles);
            return rep;
        }
        default:
            return {};  // pool/flatten run on the auxiliary unit
    }
}

std::vector<TraceRecord> generate_traces(const LayerSpec& layer, const SystolicConfig& cfg) {
    const GemmShape gemm = to_gemm(layer);
    const int wb = cfg.word_bytes;

    // Region extents for this workload; overlapping regions corrupt traces.
    struct Extent {
        Region region;
        uint64_t lo, hi;  // [lo, hi)
    };
    const uint64_t a_bytes = static_cast<uint64_t>(gemm.m) * gemm.k * wb;
    const uint64_t b_bytes = static_cast<uint64_t>(gemm.k) * gemm.n * wb;
    const uint64_t o_bytes = static_cast<uint64_t>(gemm.m) * gemm.n * wb;
    const Extent extents[3] = {{Region::Filter, cfg.filter_offset, cfg.filter_offset + a_bytes},
                               {Region::Ifmap, cfg.ifmap_offset, cfg.ifmap_offset + b_bytes},
                               {Region::Ofmap, cfg.ofmap_offset, cfg.ofmap_offset + o_bytes}};
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            if (extents[i].lo < extents[j].hi && extents[j].lo < extents[i].hi)
                throw ValidationError(std::string("address regions overlap: ") +
                                      to_string(extents[i].region) + " and " +
                                      to_string(extents[j].region));

    std::vector<TraceRecord> records;
    uint64_t start = 0;
    std::vector<TraceRecord> block;
    auto flush_block = [&] {
        std::stable_sort(block.begin(), block.end(),
                         [](const TraceRecord& x, const TraceRecord& y) { return x.cycle < y.cycle; });
        records.insert(records.end(), block.begin(), block.end());
        block.clear();
    };

    for (const Fold& fold : fold_schedule(gemm, cfg)) {
        // Filter operands: element (row_base+i, t) of the M x K matrix enters
        // row i of the array at cycle start + t + i.
        for (int64_t t = 0; t < fold.k; ++t)
            for (int i = 0; i < fold.r; ++i) {
                const uint64_t idx = static_cast<uint64_t>(fold.row_base + i) * gemm.k + t;
                block.push_back({start + t + i, 'R', Region::Filter,
                                 cfg.filter_offset + idx * wb, wb});
            }
        flush_block();
        // Ifmap operands: element (t, col_base+j) of the K x N matrix enters
        // column j at cycle start + t + j.
        for (int64_t t = 0; t < fold.k; ++t)
            for (int j = 0; j < fold.c; ++j) {
                const uint64_t idx = static_cast<uint64_t>(t) * gemm.n + fold.col_base + j;
                block.push_back({start + t + j, 'R', Region::Ifmap,
                                 cfg.ifmap_offset + idx * wb, wb});
            }
        flush_block();
        // Drain: row r-1 leaves first, one row per cycle, whole rows in
        // parallel across columns.
        const uint64_t last_mac = start + fold.k + fold.r + fold.c - 3;
        for (int d = 0; d < fold.r; ++d) {
            const int i = fold.r - 1 - d;
            for (int j = 0; j < fold.c; ++j) {
                const uint64_t idx =
                    static_cast<uint64_t>(fold.row_base + i) * gemm.n + fold.col_base + j;
                block.push_back({last_mac + 1 + d, 'W', Region::Ofmap,
                                 cfg.ofmap_offset + idx * wb, wb});
            }
        }
        flush_block();
        start += fold_cycles(fold);
    }
    return records;
}

void write_trace_csv(const std::vector<TraceRecord>& records, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out << "cycle, dir, region, address, bytes\n";
        char line[96];
        for (const TraceRecord& rec : records) {
            std::snprintf(line, sizeof line, "%llu, %c, %s, %llu, %d\n",
                          static_cast<unsigned long long>(rec.cycle), rec.dir,
                          to_string(rec.region), static_cast<unsigned long long>(rec.address),
                          rec.bytes);
            out << line;
        }
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace hsim
