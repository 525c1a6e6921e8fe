#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hsim {

enum class LayerKind { Conv, DepthwiseConv, MaxPool, AvgPool, Dense, Flatten };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from(const std::string& token);

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    int ifmap_h = 1, ifmap_w = 1;
    int filter_h = 1, filter_w = 1;
    int channels_in = 1;
    int num_filters = 1;  // Dense: output node count
    int stride = 1;
};

struct NetworkTopology {
    std::string name;
    std::vector<LayerSpec> layers;
    std::string dataset_tag;
};

// The (M, K, N) matrix multiply a layer lowers to.
struct GemmShape {
    int64_t m = 1, k = 1, n = 1;
};

struct Shape3 {
    int h = 1, w = 1, c = 1;
};

enum class Severity { Warning, Error };

struct Finding {
    Severity severity = Severity::Error;
    std::string layer;
    std::string message;
};

// Parses the workload CSV (header line, then one row per layer with columns
// name, ifmap_h, ifmap_w, filter_h, filter_w, channels_in, num_filters,
// stride, kind). Throws ParseError / ValidationError.
NetworkTopology parse_topology(const std::string& text, const std::string& name = "",
                               const std::string& dataset_tag = "");

Shape3 output_shape(const LayerSpec& layer);

int64_t param_count(const LayerSpec& layer);
int64_t param_count(const NetworkTopology& topo);

// Conv and Dense only; DepthwiseConv is costed per-channel by layer_cycles.
GemmShape to_gemm(const LayerSpec& layer);

// Shape-chain checks, plus hybrid-mode structure checks: warning when the
// flatten entering the first Dense layer differs from array_rows*array_cols,
// error when a Dense layer precedes a non-Dense compute layer.
std::vector<Finding> validate(const NetworkTopology& topo, bool hybrid_mode,
                              int array_rows = 32, int array_cols = 32);

}  // namespace hsim
