#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hsim/imac.hpp"
#include "hsim/topology.hpp"

namespace hsim {

struct Hyper {
    double lr_step1 = 0.05;
    double lr_step2 = 0.02;
    double momentum = 0.9;
    int epochs_step1 = 6;
    int epochs_step2 = 6;
    int batch = 32;
    uint64_t seed = 7;
};

enum class Phase { Step1, Step2 };
enum class Backend { Digital, Analog };

struct LabeledDataset {
    int n = 0, h = 0, w = 0, c = 0;
    int classes = 10;
    std::vector<float> images;    // n * h * w * c, channel-last, scaled to [0,1]
    std::vector<uint8_t> labels;  // n entries, < classes

    const float* image(int i) const {
        return images.data() + static_cast<size_t>(i) * h * w * c;
    }
};

// Big-endian IDX files (image magic 0x00000803, label magic 0x00000801).
LabeledDataset load_mnist(const std::string& images_path, const std::string& labels_path);

struct TrainState {
    NetworkTopology topo;
    Phase phase = Phase::Step1;
    Hyper hyper;
    // Trainable tensors, indexed per conv-like / dense layer in topology
    // order. Conv weights are (filter_h*filter_w*channels_in) x num_filters
    // row-major; depthwise weights (filter_h*filter_w) x channels_in; dense
    // matrices num_filters x channels_in row-major (output-major, matching
    // the crossbar layout).
    std::vector<std::vector<double>> conv_w;
    std::vector<std::vector<double>> conv_b;
    std::vector<std::vector<double>> fc_shadow;
    std::vector<TernaryMatrix> fc_ternary;
};

// entry >= 0 -> +1, else -1
std::vector<double> sign_binarize(const std::vector<double>& v);

// Threshold rule: delta = 0.7 * mean(|w|); strictly above -> sign, else 0.
TernaryMatrix ternarize(const std::vector<double>& w, int64_t rows, int64_t cols);

using ProgressFn = std::function<void(const std::string&)>;

// Step 1: full-precision minibatch SGD with momentum. Conv activations are
// ReLU except for the layer feeding the flatten boundary, which stays
// linear so the boundary code (tanh here, sign in step 2) sees raw OFMaps;
// the flatten vector passes through tanh; FC hidden activations are ReLU;
// loss is softmax cross-entropy. Deterministic per seed.
TrainState train_step1(const NetworkTopology& topo, const LabeledDataset& data,
                       const Hyper& hyper, const ProgressFn& progress = {});

// Step 2: conv layers frozen, boundary tanh replaced by sign_binarize, FC
// forward in ternary weights with sigmoid hidden neurons, backward through
// the real-valued shadow weights (straight-through quantizers), ternary
// matrices re-derived after every update.
TrainState train_step2(const TrainState& state, const LabeledDataset& data,
                       const Hyper& hyper, const ProgressFn& progress = {});

// Correct-classification fraction. The digital backend mirrors the deployed
// arithmetic (ternary FC, sigmoid neurons, final ADC for Step2 states); the
// analog backend programs crossbars from fc_ternary and runs forward_fc.
double evaluate(const TrainState& state, const LabeledDataset& data, Backend backend,
                std::optional<CrossbarConfig> xbar_cfg = {},
                std::optional<uint64_t> seed = {});

// Per-sample class predictions under the same backends as evaluate.
std::vector<int> predict(const TrainState& state, const LabeledDataset& data, Backend backend,
                         std::optional<CrossbarConfig> xbar_cfg = {},
                         std::optional<uint64_t> seed = {});

// Raw flatten vector of the conv stack (before tanh/sign), exposed so the
// boundary contract can be tested end to end.
std::vector<double> conv_flatten(const TrainState& state, const float* image);

// Step-2 FC chain in plain arithmetic on +-1 sign bits; hidden and final
// sigmoid slope from cfg, final ADC optional.
std::vector<double> fc_forward_digital(const TrainState& state,
                                       const std::vector<double>& sign_bits,
                                       const CrossbarConfig& cfg, bool apply_adc);

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;    // coordinates measured; samples_per_group per tensor when none starve
    int crossings = 0;  // draws discarded because +-step crossed a ReLU/pool region boundary
};

// Central finite differences against the analytic step-1 gradients on one
// frozen minibatch; samples_per_group parameters from every weight/bias
// tensor. A difference quotient across a ReLU kink or a pool argmax switch
// does not estimate the derivative of anything, so coordinates whose
// +-step interval changes any activation region are redrawn (bounded
// retries; starved slots are left out of `checked`).
GradCheckResult gradient_check(const NetworkTopology& topo, const LabeledDataset& batch,
                               const Hyper& hyper, int samples_per_group, double step = 1e-3);

struct ManifestEntry {
    std::string layer;
    std::string kind;  // Conv, ConvBias, DepthwiseConv, DepthwiseConvBias, Dense
    int64_t rows = 0, cols = 0;
    std::string file;
};

struct Manifest {
    std::string topology;
    double step1_acc = -1.0, step2_acc = -1.0;  // negative when unrecorded
    std::vector<ManifestEntry> entries;
};

// Conv tensors as f32-LE files with a u64-LE dims header, FC layers in the
// ternary format, plus a manifest tying them to the topology.
void export_weights(const TrainState& state, const std::string& out_dir,
                    std::optional<double> step1_acc = {}, std::optional<double> step2_acc = {});

Manifest read_manifest(const std::string& path);

TrainState import_weights(const std::string& manifest_path, const NetworkTopology& topo);

}  // namespace hsim
