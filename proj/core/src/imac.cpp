#include "hsim/imac.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "hsim/errors.hpp"
#include "hsim/rng.hpp"

namespace hsim {

void check_config(const CrossbarConfig& cfg) {
    if (!(cfg.g_on > cfg.g_off) || !(cfg.g_off > 0))
        throw ConfigError("crossbar requires g_on > g_off > 0");
    if (cfg.sub_rows < 1 || cfg.sub_cols < 1) throw ConfigError("subarray dims must be >= 1");
    if (cfg.adc_bits < 1 || cfg.adc_bits > 30)
        throw ConfigError("adc_bits must be in [1, 30]");
    if (cfg.variation_sigma < 0) throw ConfigError("variation_sigma must be >= 0");
}

ConductancePair encode_ternary(int w, const CrossbarConfig& cfg) {
    check_config(cfg);
    switch (w) {
        case +1: return {cfg.g_on, cfg.g_off};
        case -1: return {cfg.g_off, cfg.g_on};
        case 0: return {cfg.g_off, cfg.g_off};
    }
    throw DomainError("ternary weight must be -1, 0 or +1, got " + std::to_string(w));
}

double decode(const ConductancePair& pair, const CrossbarConfig& cfg) {
    return (pair.g_plus - pair.g_minus) / (cfg.g_on - cfg.g_off);
}

Crossbar program_crossbar(const TernaryMatrix& weights, const CrossbarConfig& cfg,
                          std::optional<uint64_t> seed) {
    check_config(cfg);
    if (cfg.variation_sigma > 0 && !seed)
        throw ConfigError("variation_sigma > 0 requires a seed");

    Crossbar xbar;
    xbar.config = cfg;
    xbar.inputs = weights.cols;
    xbar.outputs = weights.rows;
    xbar.pairs.resize(static_cast<size_t>(weights.rows) * weights.cols);

    std::optional<Rng> rng;
    if (cfg.variation_sigma > 0) rng.emplace(*seed);
    const double floor_g = 1e-15;  // clamp: conductances stay physical
    for (int64_t r = 0; r < weights.rows; ++r)
        for (int64_t c = 0; c < weights.cols; ++c) {
            ConductancePair pair = encode_ternary(weights.at(r, c), cfg);
            if (rng) {
                pair.g_plus = std::max(pair.g_plus * (1.0 + cfg.variation_sigma * rng->normal()),
                                       floor_g);
                pair.g_minus = std::max(pair.g_minus * (1.0 + cfg.variation_sigma * rng->normal()),
                                        floor_g);
            }
            xbar.pairs[static_cast<size_t>(r) * weights.cols + c] = pair;
        }
    return xbar;
}

std::vector<double> mvm(const Crossbar& xbar, const std::vector<double>& x) {
    if (static_cast<int64_t>(x.size()) != xbar.inputs)
        throw DimensionError("mvm input length " + std::to_string(x.size()) +
                             " != crossbar inputs " + std::to_string(xbar.inputs));
    std::vector<double> out(static_cast<size_t>(xbar.outputs));
    for (int64_t o = 0; o < xbar.outputs; ++o) {
        double acc = 0.0;
        const ConductancePair* row = &xbar.pairs[static_cast<size_t>(o) * xbar.inputs];
        for (int64_t i = 0; i < xbar.inputs; ++i)
            acc += x[static_cast<size_t>(i)] * decode(row[i], xbar.config);
        out[static_cast<size_t>(o)] = acc;
    }
    return out;
}

double neuron(double u, const CrossbarConfig& cfg) {
    return 1.0 / (1.0 + std::exp(-cfg.neuron_slope * u));
}

double adc_quantize(double y, const CrossbarConfig& cfg) {
    if (!(y >= 0.0 && y <= 1.0))
        throw DomainError("adc input " + std::to_string(y) + " outside [0,1]");
    const double levels = static_cast<double>((1u << cfg.adc_bits) - 1u);
    return std::round(y * levels) / levels;
}

std::vector<double> adc_quantize(const std::vector<double>& y, const CrossbarConfig& cfg) {
    std::vector<double> out(y.size());
    for (size_t i = 0; i < y.size(); ++i) out[i] = adc_quantize(y[i], cfg);
    return out;
}

std::vector<double> forward_fc(const std::vector<Crossbar>& xbars,
                               const std::vector<double>& sign_bits) {
    if (xbars.empty()) throw DimensionError("forward_fc needs at least one crossbar");
    for (double v : sign_bits)
        if (v != 1.0 && v != -1.0) throw DomainError("sign bits must be -1 or +1");

    std::vector<double> act = sign_bits;
    for (size_t l = 0; l < xbars.size(); ++l) {
        if (static_cast<int64_t>(act.size()) != xbars[l].inputs)
            throw DimensionError("layer " + std::to_string(l) + " expects " +
                                 std::to_string(xbars[l].inputs) + " inputs, got " +
                                 std::to_string(act.size()));
        act = mvm(xbars[l], act);
        for (double& u : act) u = neuron(u, xbars[l].config);
    }
    return adc_quantize(act, xbars.back().config);
}

int64_t subarrays_required(int64_t inputs, int64_t outputs, const CrossbarConfig& cfg) {
    if (inputs < 1 || outputs < 1) throw DomainError("layer dims must be positive");
    const int64_t a = (inputs + cfg.sub_rows - 1) / cfg.sub_rows;
    const int64_t b = (outputs + cfg.sub_cols - 1) / cfg.sub_cols;
    return a * b;
}

void write_ternary(const TernaryMatrix& m, const std::string& path) {
    if (static_cast<int64_t>(m.v.size()) != m.rows * m.cols)
        throw DimensionError("ternary matrix size mismatch");
    for (int8_t e : m.v)
        if (e < -1 || e > 1) throw DomainError("ternary entry outside {-1,0,+1}");
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        uint64_t dims[2] = {static_cast<uint64_t>(m.rows), static_cast<uint64_t>(m.cols)};
        unsigned char header[16];
        for (int d = 0; d < 2; ++d)
            for (int b = 0; b < 8; ++b)
                header[d * 8 + b] = static_cast<unsigned char>(dims[d] >> (8 * b));
        out.write(reinterpret_cast<const char*>(header), sizeof header);
        out.write(reinterpret_cast<const char*>(m.v.data()),
                  static_cast<std::streamsize>(m.v.size()));
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

TernaryMatrix read_ternary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    unsigned char header[16];
    in.read(reinterpret_cast<char*>(header), sizeof header);
    if (in.gcount() != sizeof header) throw ParseError("'" + path + "': truncated header");
    uint64_t dims[2] = {0, 0};
    for (int d = 0; d < 2; ++d)
        for (int b = 7; b >= 0; --b) dims[d] = (dims[d] << 8) | header[d * 8 + b];
    TernaryMatrix m;
    m.rows = static_cast<int64_t>(dims[0]);
    m.cols = static_cast<int64_t>(dims[1]);
    if (m.rows > (1 << 26) || m.cols > (1 << 26))
        throw ParseError("'" + path + "': implausible dims");
    m.v.resize(static_cast<size_t>(m.rows * m.cols));
    in.read(reinterpret_cast<char*>(m.v.data()), static_cast<std::streamsize>(m.v.size()));
    if (in.gcount() != static_cast<std::streamsize>(m.v.size()))
        throw ParseError("'" + path + "': truncated payload");
    for (int8_t e : m.v)
        if (e < -1 || e > 1) throw ParseError("'" + path + "': entry outside {-1,0,+1}");
    return m;
}

}  // namespace hsim
