#include "hsim/topology.hpp"

#include <array>
#include <charconv>
#include <sstream>

#include "hsim/errors.hpp"

namespace hsim {

const char* to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "Conv";
        case LayerKind::DepthwiseConv: return "DepthwiseConv";
        case LayerKind::MaxPool: return "MaxPool";
        case LayerKind::AvgPool: return "AvgPool";
        case LayerKind::Dense: return "Dense";
        case LayerKind::Flatten: return "Flatten";
    }
    return "?";
}

LayerKind layer_kind_from(const std::string& token) {
    if (token == "Conv") return LayerKind::Conv;
    if (token == "DepthwiseConv") return LayerKind::DepthwiseConv;
    if (token == "MaxPool") return LayerKind::MaxPool;
    if (token == "AvgPool") return LayerKind::AvgPool;
    if (token == "Dense") return LayerKind::Dense;
    if (token == "Flatten") return LayerKind::Flatten;
    throw ParseError("unknown layer kind '" + token + "'");
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int parse_int(const std::string& field, int row, const char* col) {
    int v = 0;
    auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || p != field.data() + field.size())
        throw ParseError("row " + std::to_string(row) + ": non-numeric " + col + " '" + field + "'");
    return v;
}

void require_positive(int v, int row, const char* col) {
    if (v <= 0)
        throw ValidationError("row " + std::to_string(row) + ": " + col + " must be positive");
}

bool is_window_kind(LayerKind k) {
    return k == LayerKind::Conv || k == LayerKind::DepthwiseConv ||
           k == LayerKind::MaxPool || k == LayerKind::AvgPool;
}

}  // namespace

NetworkTopology parse_topology(const std::string& text, const std::string& name,
                               const std::string& dataset_tag) {
    NetworkTopology topo;
    topo.name = name;
    topo.dataset_tag = dataset_tag;

    std::istringstream in(text);
    std::string line;
    int row = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++row;
        line = trim(line);
        if (line.empty()) continue;
        if (!header_seen) {  // first non-empty line is the header
            header_seen = true;
            continue;
        }
        std::array<std::string, 9> fields;
        size_t nfields = 0, pos = 0;
        while (true) {
            size_t comma = line.find(',', pos);
            std::string field = trim(comma == std::string::npos ? line.substr(pos)
                                                                : line.substr(pos, comma - pos));
            if (nfields < fields.size()) fields[nfields] = field;
            ++nfields;
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (nfields != 9)
            throw ParseError("row " + std::to_string(row) + ": expected 9 columns, got " +
                             std::to_string(nfields));

        LayerSpec layer;
        layer.name = fields[0];
        layer.ifmap_h = parse_int(fields[1], row, "ifmap_h");
        layer.ifmap_w = parse_int(fields[2], row, "ifmap_w");
        layer.filter_h = parse_int(fields[3], row, "filter_h");
        layer.filter_w = parse_int(fields[4], row, "filter_w");
        layer.channels_in = parse_int(fields[5], row, "channels_in");
        layer.num_filters = parse_int(fields[6], row, "num_filters");
        layer.stride = parse_int(fields[7], row, "stride");
        layer.kind = layer_kind_from(fields[8]);

        require_positive(layer.ifmap_h, row, "ifmap_h");
        require_positive(layer.ifmap_w, row, "ifmap_w");
        require_positive(layer.filter_h, row, "filter_h");
        require_positive(layer.filter_w, row, "filter_w");
        require_positive(layer.channels_in, row, "channels_in");
        require_positive(layer.num_filters, row, "num_filters");
        require_positive(layer.stride, row, "stride");

        if (is_window_kind(layer.kind) &&
            (layer.filter_h > layer.ifmap_h || layer.filter_w > layer.ifmap_w))
            throw ValidationError("row " + std::to_string(row) + ": filter exceeds ifmap");
        if (layer.kind == LayerKind::DepthwiseConv && layer.num_filters != layer.channels_in)
            throw ValidationError("row " + std::to_string(row) +
                                  ": DepthwiseConv requires num_filters = channels_in");
        if (layer.kind == LayerKind::Dense && (layer.ifmap_h != 1 || layer.ifmap_w != 1))
            throw ValidationError("row " + std::to_string(row) +
                                  ": Dense requires ifmap_h = ifmap_w = 1");

        topo.layers.push_back(std::move(layer));
    }
    return topo;
}

Shape3 output_shape(const LayerSpec& layer) {
    switch (layer.kind) {
        case LayerKind::Conv:
        case LayerKind::DepthwiseConv:
        case LayerKind::MaxPool:
        case LayerKind::AvgPool: {
            Shape3 s;
            s.h = (layer.ifmap_h - layer.filter_h) / layer.stride + 1;
            s.w = (layer.ifmap_w - layer.filter_w) / layer.stride + 1;
            s.c = (layer.kind == LayerKind::MaxPool || layer.kind == LayerKind::AvgPool)
                      ? layer.channels_in
                      : layer.num_filters;
            return s;
        }
        case LayerKind::Dense:
        case LayerKind::Flatten:
            return {1, 1, layer.num_filters};
    }
    return {};
}

int64_t param_count(const LayerSpec& layer) {
    const int64_t fh = layer.filter_h, fw = layer.filter_w;
    const int64_t cin = layer.channels_in, nf = layer.num_filters;
    switch (layer.kind) {
        case LayerKind::Conv: return fh * fw * cin * nf + nf;
        case LayerKind::DepthwiseConv: return fh * fw * cin + cin;
        case LayerKind::Dense: return cin * nf;  // no bias on the crossbar
        default: return 0;
    }
}

int64_t param_count(const NetworkTopology& topo) {
    int64_t total = 0;
    for (const auto& layer : topo.layers) total += param_count(layer);
    return total;
}

GemmShape to_gemm(const LayerSpec& layer) {
    if (layer.kind == LayerKind::Conv) {
        const Shape3 out = output_shape(layer);
        return {static_cast<int64_t>(out.h) * out.w,
                static_cast<int64_t>(layer.filter_h) * layer.filter_w * layer.channels_in,
                layer.num_filters};
    }
    if (layer.kind == LayerKind::Dense)
        return {1, layer.channels_in, layer.num_filters};
    throw DomainError("layer '" + layer.name + "' (" + to_string(layer.kind) +
                      ") has no GEMM lowering");
}

std::vector<Finding> validate(const NetworkTopology& topo, bool hybrid_mode,
                              int array_rows, int array_cols) {
    std::vector<Finding> findings;
    auto error = [&](const std::string& layer, std::string msg) {
        findings.push_back({Severity::Error, layer, std::move(msg)});
    };
    auto warning = [&](const std::string& layer, std::string msg) {
        findings.push_back({Severity::Warning, layer, std::move(msg)});
    };

    bool dense_seen = false;
    Shape3 prev{};
    bool have_prev = false;
    for (const auto& layer : topo.layers) {
        if (layer.kind == LayerKind::Dense) {
            dense_seen = true;
        } else if (dense_seen && hybrid_mode) {
            error(layer.name, "FC block must be trailing: " + std::string(to_string(layer.kind)) +
                                  " follows a Dense layer");
        }

        if (have_prev) {
            if (layer.kind == LayerKind::Dense || layer.kind == LayerKind::Flatten) {
                const int64_t expect =
                    static_cast<int64_t>(prev.h) * prev.w * prev.c;
                const int64_t got = (layer.kind == LayerKind::Dense)
                                        ? layer.channels_in
                                        : static_cast<int64_t>(layer.ifmap_h) * layer.ifmap_w *
                                              layer.channels_in;
                if (layer.kind == LayerKind::Flatten &&
                    (layer.ifmap_h != prev.h || layer.ifmap_w != prev.w ||
                     layer.channels_in != prev.c))
                    error(layer.name, "flatten input " + std::to_string(layer.ifmap_h) + "x" +
                                          std::to_string(layer.ifmap_w) + "x" +
                                          std::to_string(layer.channels_in) +
                                          " does not match previous output");
                else if (layer.kind == LayerKind::Dense && got != expect)
                    error(layer.name, "input size " + std::to_string(got) +
                                          " does not match previous output " +
                                          std::to_string(expect));
            } else {
                // Pre-padded declarations are allowed: the ifmap may exceed the
                // previous output by up to filter-1 on each border.
                const int pad_h = layer.ifmap_h - prev.h;
                const int pad_w = layer.ifmap_w - prev.w;
                if (pad_h < 0 || pad_h > 2 * (layer.filter_h - 1) || pad_w < 0 ||
                    pad_w > 2 * (layer.filter_w - 1))
                    error(layer.name, "ifmap " + std::to_string(layer.ifmap_h) + "x" +
                                          std::to_string(layer.ifmap_w) +
                                          " does not chain from previous output " +
                                          std::to_string(prev.h) + "x" + std::to_string(prev.w));
                if (layer.channels_in != prev.c)
                    error(layer.name, "channels_in " + std::to_string(layer.channels_in) +
                                          " does not match previous output channels " +
                                          std::to_string(prev.c));
            }
        }
        if (layer.kind == LayerKind::Flatten) {
            const int64_t flat =
                static_cast<int64_t>(layer.ifmap_h) * layer.ifmap_w * layer.channels_in;
            if (flat != layer.num_filters)
                error(layer.name, "flatten num_filters " + std::to_string(layer.num_filters) +
                                      " != " + std::to_string(flat));
        }
        prev = output_shape(layer);
        have_prev = true;
    }

    if (hybrid_mode) {
        for (const auto& layer : topo.layers) {
            if (layer.kind != LayerKind::Dense) continue;
            const int64_t want = static_cast<int64_t>(array_rows) * array_cols;
            if (layer.channels_in != want)
                warning(layer.name, "flatten " + std::to_string(layer.channels_in) + " != " +
                                        std::to_string(want) + " (array rows*cols)");
            break;  // only the boundary layer carries the handoff constraint
        }
    }
    return findings;
}

}  // namespace hsim
