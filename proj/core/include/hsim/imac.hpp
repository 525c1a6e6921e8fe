#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace hsim {

// Device and circuit parameters for the analog engine. Each logical synapse
// is a differential device pair, so a sub_rows x sub_cols subarray holds
// 2*sub_rows physical device rows.
struct CrossbarConfig {
    int sub_rows = 256, sub_cols = 256;
    double g_on = 100e-6;   // siemens, 1/R_low
    double g_off = 1e-6;    // siemens, 1/R_high
    double v_read = 0.1;    // volts
    double neuron_slope = 1.0;
    int adc_bits = 8;
    double variation_sigma = 0.0;  // relative std-dev of programmed conductance
};

struct ConductancePair {
    double g_plus = 0.0, g_minus = 0.0;
};

struct TernaryMatrix {
    int64_t rows = 0, cols = 0;  // rows = outputs, cols = inputs
    std::vector<int8_t> v;       // row-major, entries in {-1, 0, +1}

    int8_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r) * cols + c]; }
    int8_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r) * cols + c]; }
};

struct Crossbar {
    CrossbarConfig config;
    int64_t inputs = 0, outputs = 0;
    std::vector<ConductancePair> pairs;  // [output][input], row-major

    const ConductancePair& pair(int64_t out, int64_t in) const {
        return pairs[static_cast<size_t>(out) * inputs + in];
    }
};

// Throws ConfigError unless g_on > g_off > 0, subarray dims are positive,
// adc_bits is in [1, 30] and variation_sigma >= 0.
void check_config(const CrossbarConfig& cfg);

ConductancePair encode_ternary(int w, const CrossbarConfig& cfg);

// (g_plus - g_minus) / (g_on - g_off); exactly -1, 0 or +1 at zero variation.
double decode(const ConductancePair& pair, const CrossbarConfig& cfg);

// Programs every weight through encode_ternary. With variation_sigma > 0 each
// device conductance is scaled by an independent N(1, sigma) factor from the
// seeded generator (row-major, g_plus drawn before g_minus) and clamped
// positive; the seed is then mandatory.
Crossbar program_crossbar(const TernaryMatrix& weights, const CrossbarConfig& cfg,
                          std::optional<uint64_t> seed = {});

// out[j] = sum_i x[i] * decode(pair(j, i)), accumulated in input order; the
// current summation and amplifier normalization by v_read*(g_on - g_off) are
// folded together so that at zero variation this is the exact ternary dot
// product. x entries are continuous: between chained layers the analog
// activations are passed through unquantized.
std::vector<double> mvm(const Crossbar& xbar, const std::vector<double>& x);

// 1 / (1 + exp(-slope * u))
double neuron(double u, const CrossbarConfig& cfg);

// Uniform quantization of [0,1] to 2^adc_bits levels.
std::vector<double> adc_quantize(const std::vector<double>& y, const CrossbarConfig& cfg);
double adc_quantize(double y, const CrossbarConfig& cfg);

// Chained FC forward pass: the first layer consumes +-1 sign bits, every
// layer applies the analog neuron, and only the final activations pass
// through the ADC.
std::vector<double> forward_fc(const std::vector<Crossbar>& xbars,
                               const std::vector<double>& sign_bits);

int64_t subarrays_required(int64_t inputs, int64_t outputs, const CrossbarConfig& cfg);

// Ternary weight file: u64-LE rows, u64-LE cols, then int8 row-major values.
void write_ternary(const TernaryMatrix& m, const std::string& path);
TernaryMatrix read_ternary(const std::string& path);

}  // namespace hsim
