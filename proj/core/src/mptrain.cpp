#include "hsim/mptrain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hsim/errors.hpp"
#include "hsim/rng.hpp"
#include "hsim/sched.hpp"

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

namespace hsim {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- dataset

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

uint32_t be32(const unsigned char* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}

}  // namespace

LabeledDataset load_mnist(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    if (img.size() < 16) throw ParseError("'" + images_path + "': truncated header");
    if (be32(img.data()) != 0x00000803u)
        throw ParseError("'" + images_path + "': bad image magic");
    const uint32_t n = be32(img.data() + 4);
    const uint32_t rows = be32(img.data() + 8);
    const uint32_t cols = be32(img.data() + 12);
    if (img.size() != 16 + size_t(n) * rows * cols)
        throw ParseError("'" + images_path + "': size does not match header");

    const auto lab = read_file(labels_path);
    if (lab.size() < 8) throw ParseError("'" + labels_path + "': truncated header");
    if (be32(lab.data()) != 0x00000801u)
        throw ParseError("'" + labels_path + "': bad label magic");
    const uint32_t ln = be32(lab.data() + 4);
    if (lab.size() != 8 + size_t(ln)) throw ParseError("'" + labels_path + "': size mismatch");
    if (ln != n) throw ParseError("image/label record counts differ");

    LabeledDataset ds;
    ds.n = static_cast<int>(n);
    ds.h = static_cast<int>(rows);
    ds.w = static_cast<int>(cols);
    ds.c = 1;
    ds.classes = 10;
    ds.images.resize(size_t(n) * rows * cols);
    for (size_t i = 0; i < ds.images.size(); ++i)
        ds.images[i] = static_cast<float>(img[16 + i]) * (1.0f / 255.0f);
    ds.labels.assign(lab.begin() + 8, lab.end());
    for (uint8_t l : ds.labels)
        if (l >= ds.classes) throw ParseError("label " + std::to_string(l) + " out of range");
    return ds;
}

// ------------------------------------------------------------- quantizers

std::vector<double> sign_binarize(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= 0.0 ? 1.0 : -1.0;
    return out;
}

TernaryMatrix ternarize(const std::vector<double>& w, int64_t rows, int64_t cols) {
    if (static_cast<int64_t>(w.size()) != rows * cols)
        throw DimensionError("ternarize: size != rows*cols");
    double mean_abs = 0.0;
    for (double x : w) mean_abs += std::fabs(x);
    if (!w.empty()) mean_abs /= static_cast<double>(w.size());
    const double delta = 0.7 * mean_abs;
    TernaryMatrix t;
    t.rows = rows;
    t.cols = cols;
    t.v.resize(w.size());
    for (size_t i = 0; i < w.size(); ++i)
        t.v[i] = std::fabs(w[i]) > delta ? (w[i] > 0 ? int8_t{1} : int8_t{-1}) : int8_t{0};
    return t;
}

// ------------------------------------------------------------ net plumbing

namespace {

struct ConvLayer {
    LayerSpec spec;
    Shape3 in, out;
    int64_t M = 0, K = 0, N = 0;  // GEMM dims (depthwise: per-channel M x K x 1)
    bool relu = true;             // false for the layer feeding the flatten
    int widx = -1;                // index into conv_w / conv_b, -1 for pools
};

struct FcLayer {
    int64_t in = 0, out = 0;
};

struct Net {
    std::vector<ConvLayer> convs;  // everything before the flatten
    int64_t flat_dim = 0;
    std::vector<FcLayer> fcs;
    int n_conv_params = 0;  // number of weight-bearing conv-like layers
};

Net build_net(const NetworkTopology& topo) {
    const auto findings = validate(topo, false);
    for (const Finding& f : findings)
        if (f.severity == Severity::Error)
            throw ValidationError("layer '" + f.layer + "': " + f.message);

    Net net;
    size_t i = 0;
    int last_conv = -1;
    for (; i < topo.layers.size(); ++i) {
        const LayerSpec& spec = topo.layers[i];
        if (spec.kind == LayerKind::Flatten) break;
        if (spec.kind == LayerKind::Dense)
            throw ConfigError("training requires a Flatten before Dense layers");
        if (spec.kind == LayerKind::AvgPool)
            throw ConfigError("AvgPool is not in the training operator set");
        ConvLayer layer;
        layer.spec = spec;
        layer.in = {spec.ifmap_h, spec.ifmap_w, spec.channels_in};
        layer.out = output_shape(spec);
        if (spec.kind == LayerKind::Conv) {
            const GemmShape g = to_gemm(spec);
            layer.M = g.m;
            layer.K = g.k;
            layer.N = g.n;
            layer.widx = net.n_conv_params++;
            last_conv = static_cast<int>(net.convs.size());
        } else if (spec.kind == LayerKind::DepthwiseConv) {
            layer.M = static_cast<int64_t>(layer.out.h) * layer.out.w;
            layer.K = static_cast<int64_t>(spec.filter_h) * spec.filter_w;
            layer.N = 1;
            layer.widx = net.n_conv_params++;
            last_conv = static_cast<int>(net.convs.size());
        }
        net.convs.push_back(std::move(layer));
    }
    if (i == topo.layers.size()) throw ConfigError("training requires a Flatten layer");
    if (net.convs.empty() || last_conv < 0)
        throw ConfigError("training requires at least one Conv layer");
    net.convs[static_cast<size_t>(last_conv)].relu = false;  // raw OFMaps at the boundary
    net.flat_dim = topo.layers[i].num_filters;
    for (++i; i < topo.layers.size(); ++i) {
        if (topo.layers[i].kind != LayerKind::Dense)
            throw ConfigError("only Dense layers may follow the Flatten");
        net.fcs.push_back({topo.layers[i].channels_in, topo.layers[i].num_filters});
    }
    if (net.fcs.empty()) throw ConfigError("training requires at least one Dense layer");
    return net;
}

size_t elems(const Shape3& s) { return static_cast<size_t>(s.h) * s.w * s.c; }

void check_data_shape(const Net& net, const LabeledDataset& data) {
    const Shape3& in = net.convs.front().in;
    if (data.h != in.h || data.w != in.w || data.c != in.c)
        throw ConfigError("dataset images are " + std::to_string(data.h) + "x" +
                          std::to_string(data.w) + "x" + std::to_string(data.c) +
                          " but the topology expects " + std::to_string(in.h) + "x" +
                          std::to_string(in.w) + "x" + std::to_string(in.c));
}

// Per-sample buffers, allocated once and reused.
struct Workspace {
    // conv part, per conv layer
    std::vector<std::vector<double>> pre;     // pre-activation output, M x N (HWC)
    std::vector<std::vector<double>> out;     // post-activation / pooled output
    std::vector<std::vector<double>> col;     // im2col of the layer input
    std::vector<std::vector<int>> argmax;     // pool winners
    std::vector<std::vector<double>> dout;    // gradients w.r.t. layer outputs
    std::vector<double> input;                // image as doubles
    // fc part
    std::vector<std::vector<double>> u;       // fc pre-activations
    std::vector<std::vector<double>> x;       // fc inputs (x[0] = boundary vector)
    std::vector<double> flat_raw;             // boundary before tanh/sign
    std::vector<double> prob;

    explicit Workspace(const Net& net) {
        pre.resize(net.convs.size());
        out.resize(net.convs.size());
        col.resize(net.convs.size());
        argmax.resize(net.convs.size());
        dout.resize(net.convs.size());
        for (size_t l = 0; l < net.convs.size(); ++l) {
            const ConvLayer& cl = net.convs[l];
            out[l].resize(elems(cl.out));
            dout[l].resize(elems(cl.out));
            if (cl.spec.kind == LayerKind::MaxPool) {
                argmax[l].resize(elems(cl.out));
            } else {
                pre[l].resize(elems(cl.out));
                if (cl.spec.kind == LayerKind::Conv)
                    col[l].resize(static_cast<size_t>(cl.M) * cl.K);
            }
        }
        if (!net.convs.empty()) input.resize(elems(net.convs[0].in));
        u.resize(net.fcs.size());
        x.resize(net.fcs.size());
        for (size_t l = 0; l < net.fcs.size(); ++l) {
            u[l].resize(static_cast<size_t>(net.fcs[l].out));
            x[l].resize(static_cast<size_t>(net.fcs[l].in));
        }
        flat_raw.resize(static_cast<size_t>(net.flat_dim));
        prob.resize(net.fcs.empty() ? 0 : static_cast<size_t>(net.fcs.back().out));
    }
};

// ---------------------------------------------------------------- conv ops

void im2col(const double* in, const Shape3& is, const LayerSpec& spec, double* col) {
    const Shape3 os = output_shape(spec);
    const int C = is.c;
    size_t m = 0;
    for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox, ++m) {
            double* row = col + m * static_cast<size_t>(spec.filter_h) * spec.filter_w * C;
            size_t k = 0;
            for (int fy = 0; fy < spec.filter_h; ++fy) {
                const double* src =
                    in + (static_cast<size_t>(oy * spec.stride + fy) * is.w +
                          static_cast<size_t>(ox * spec.stride)) * C;
                for (int fx = 0; fx < spec.filter_w; ++fx)
                    for (int ci = 0; ci < C; ++ci) row[k++] = src[static_cast<size_t>(fx) * C + ci];
            }
        }
}

void conv_forward(const ConvLayer& cl, const double* in, const std::vector<double>& W,
                  const std::vector<double>& b, Workspace& ws, size_t l) {
    im2col(in, cl.in, cl.spec, ws.col[l].data());
    const int64_t M = cl.M, K = cl.K, N = cl.N;
    double* out = ws.pre[l].data();
    const double* col = ws.col[l].data();
    for (int64_t m = 0; m < M; ++m) {
        double* orow = out + m * N;
        for (int64_t n = 0; n < N; ++n) orow[n] = b[static_cast<size_t>(n)];
        const double* crow = col + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const double a = crow[k];
            const double* wrow = W.data() + k * N;
            for (int64_t n = 0; n < N; ++n) orow[n] += a * wrow[n];
        }
    }
}

// Depthwise: weights are K x C (tap-major, channel fast), one filter per
// input channel.
void dw_forward(const ConvLayer& cl, const double* in, const std::vector<double>& W,
                const std::vector<double>& b, Workspace& ws, size_t l) {
    const LayerSpec& spec = cl.spec;
    const Shape3 os = cl.out;
    const int C = cl.in.c;
    double* out = ws.pre[l].data();
    size_t m = 0;
    for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox, ++m) {
            double* orow = out + m * static_cast<size_t>(C);
            for (int ci = 0; ci < C; ++ci) orow[ci] = b[static_cast<size_t>(ci)];
            size_t k = 0;
            for (int fy = 0; fy < spec.filter_h; ++fy)
                for (int fx = 0; fx < spec.filter_w; ++fx, ++k) {
                    const double* src =
                        in + (static_cast<size_t>(oy * spec.stride + fy) * cl.in.w +
                              static_cast<size_t>(ox * spec.stride + fx)) * C;
                    const double* wrow = W.data() + k * static_cast<size_t>(C);
                    for (int ci = 0; ci < C; ++ci) orow[ci] += src[ci] * wrow[ci];
                }
        }
}

void maxpool_forward(const ConvLayer& cl, const double* in, Workspace& ws, size_t l) {
    const LayerSpec& spec = cl.spec;
    const int C = cl.in.c;
    double* out = ws.out[l].data();
    int* arg = ws.argmax[l].data();
    size_t m = 0;
    for (int oy = 0; oy < cl.out.h; ++oy)
        for (int ox = 0; ox < cl.out.w; ++ox, ++m)
            for (int ci = 0; ci < C; ++ci) {
                double best = -1e300;
                int best_idx = -1;
                for (int fy = 0; fy < spec.filter_h; ++fy)
                    for (int fx = 0; fx < spec.filter_w; ++fx) {
                        const int idx = ((oy * spec.stride + fy) * cl.in.w +
                                         (ox * spec.stride + fx)) * C + ci;
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                out[m * static_cast<size_t>(C) + ci] = best;
                arg[m * static_cast<size_t>(C) + ci] = best_idx;
            }
}

struct Params {
    std::vector<std::vector<double>>* conv_w;
    std::vector<std::vector<double>>* conv_b;
};

// Runs the stack up to the flatten boundary; ws.flat_raw holds the raw
// boundary vector afterwards.
void conv_stack_forward(const Net& net, const Params& p, const float* image, Workspace& ws) {
    const ConvLayer& first = net.convs[0];
    for (size_t i = 0; i < elems(first.in); ++i) ws.input[i] = static_cast<double>(image[i]);
    const double* in = ws.input.data();
    for (size_t l = 0; l < net.convs.size(); ++l) {
        const ConvLayer& cl = net.convs[l];
        if (cl.spec.kind == LayerKind::Conv)
            conv_forward(cl, in, (*p.conv_w)[cl.widx], (*p.conv_b)[cl.widx], ws, l);
        else if (cl.spec.kind == LayerKind::DepthwiseConv)
            dw_forward(cl, in, (*p.conv_w)[cl.widx], (*p.conv_b)[cl.widx], ws, l);
        else
            maxpool_forward(cl, in, ws, l);
        if (cl.spec.kind != LayerKind::MaxPool) {
            const size_t n = elems(cl.out);
            if (cl.relu)
                for (size_t i = 0; i < n; ++i) ws.out[l][i] = std::max(ws.pre[l][i], 0.0);
            else
                std::copy_n(ws.pre[l].data(), n, ws.out[l].data());
        }
        in = ws.out[l].data();
    }
    std::copy_n(in, static_cast<size_t>(net.flat_dim), ws.flat_raw.data());
}

struct ConvGrads {
    std::vector<std::vector<double>> w, b;
};

// dout[last] must hold the gradient w.r.t. the boundary vector (reshaped);
// accumulates into grads and leaves intermediate dout buffers dirty.
void conv_stack_backward(const Net& net, const Params& p, Workspace& ws, ConvGrads& g) {
    for (size_t li = net.convs.size(); li-- > 0;) {
        const ConvLayer& cl = net.convs[li];
        double* dout = ws.dout[li].data();
        const size_t n_out = elems(cl.out);
        double* din = li == 0 ? nullptr : ws.dout[li - 1].data();
        if (li > 0) std::fill_n(din, elems(net.convs[li - 1].out), 0.0);

        if (cl.spec.kind == LayerKind::MaxPool) {
            if (din)
                for (size_t i = 0; i < n_out; ++i) din[ws.argmax[li][i]] += dout[i];
            continue;
        }
        if (cl.relu)
            for (size_t i = 0; i < n_out; ++i)
                if (ws.pre[li][i] <= 0.0) dout[i] = 0.0;

        const std::vector<double>& W = (*p.conv_w)[cl.widx];
        std::vector<double>& gw = g.w[cl.widx];
        std::vector<double>& gb = g.b[cl.widx];

        if (cl.spec.kind == LayerKind::Conv) {
            const int64_t M = cl.M, K = cl.K, N = cl.N;
            const double* col = ws.col[li].data();
            for (int64_t m = 0; m < M; ++m) {
                const double* drow = dout + m * N;
                for (int64_t n = 0; n < N; ++n) gb[static_cast<size_t>(n)] += drow[n];
                const double* crow = col + m * K;
                for (int64_t k = 0; k < K; ++k) {
                    const double a = crow[k];
                    double* gwrow = gw.data() + k * N;
                    for (int64_t n = 0; n < N; ++n) gwrow[n] += a * drow[n];
                }
            }
            if (din) {
                // scatter d(col) back through the im2col mapping
                const Shape3& is = cl.in;
                const int C = is.c;
                size_t m = 0;
                for (int oy = 0; oy < cl.out.h; ++oy)
                    for (int ox = 0; ox < cl.out.w; ++ox, ++m) {
                        const double* drow = dout + m * static_cast<size_t>(N);
                        size_t k = 0;
                        for (int fy = 0; fy < cl.spec.filter_h; ++fy)
                            for (int fx = 0; fx < cl.spec.filter_w; ++fx)
                                for (int ci = 0; ci < C; ++ci, ++k) {
                                    const double* wrow = W.data() + k * N;
                                    double acc = 0.0;
                                    for (int64_t n = 0; n < N; ++n) acc += drow[n] * wrow[n];
                                    const int idx = ((oy * cl.spec.stride + fy) * is.w +
                                                     (ox * cl.spec.stride + fx)) * C + ci;
                                    din[idx] += acc;
                                }
                    }
            }
        } else {  // DepthwiseConv
            const int C = cl.in.c;
            size_t m = 0;
            for (int oy = 0; oy < cl.out.h; ++oy)
                for (int ox = 0; ox < cl.out.w; ++ox, ++m) {
                    const double* drow = dout + m * static_cast<size_t>(C);
                    const double* in_base = li == 0 ? ws.input.data() : ws.out[li - 1].data();
                    for (int ci = 0; ci < C; ++ci) gb[static_cast<size_t>(ci)] += drow[ci];
                    size_t k = 0;
                    for (int fy = 0; fy < cl.spec.filter_h; ++fy)
                        for (int fx = 0; fx < cl.spec.filter_w; ++fx, ++k) {
                            const int base = ((oy * cl.spec.stride + fy) * cl.in.w +
                                              (ox * cl.spec.stride + fx)) * C;
                            const double* wrow = W.data() + k * static_cast<size_t>(C);
                            double* gwrow = gw.data() + k * static_cast<size_t>(C);
                            for (int ci = 0; ci < C; ++ci) {
                                gwrow[ci] += in_base[base + ci] * drow[ci];
                                if (din) din[base + ci] += wrow[ci] * drow[ci];
                            }
                        }
                }
        }
    }
}

double softmax_ce(const std::vector<double>& u, int label, std::vector<double>& prob) {
    double mx = u[0];
    for (double v : u) mx = std::max(mx, v);
    double sum = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        prob[i] = std::exp(u[i] - mx);
        sum += prob[i];
    }
    for (double& p : prob) p /= sum;
    return -std::log(std::max(prob[static_cast<size_t>(label)], 1e-300));
}

// ------------------------------------------------------------- optimizers

struct Momentum {
    std::vector<std::vector<double>> v;

    void match(const std::vector<std::vector<double>>& params) {
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) v[i].assign(params[i].size(), 0.0);
    }
    void step(std::vector<std::vector<double>>& params,
              const std::vector<std::vector<double>>& grads, double lr, double mu,
              double inv_batch) {
        for (size_t i = 0; i < params.size(); ++i)
            for (size_t j = 0; j < params[i].size(); ++j) {
                v[i][j] = mu * v[i][j] + grads[i][j] * inv_batch;
                params[i][j] -= lr * v[i][j];
            }
    }
};

void check_hyper(const Hyper& h, bool step2) {
    const int epochs = step2 ? h.epochs_step2 : h.epochs_step1;
    const double lr = step2 ? h.lr_step2 : h.lr_step1;
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    if (h.batch < 1) throw ConfigError("batch size must be >= 1");
    if (h.momentum < 0 || h.momentum >= 1) throw ConfigError("momentum must be in [0,1)");
}

void zero_all(std::vector<std::vector<double>>& g) {
    for (auto& v : g) std::fill(v.begin(), v.end(), 0.0);
}

}  // namespace

// ----------------------------------------------------------------- step 1

TrainState train_step1(const NetworkTopology& topo, const LabeledDataset& data,
                       const Hyper& hyper, const ProgressFn& progress) {
    check_hyper(hyper, false);
    const Net net = build_net(topo);
    check_data_shape(net, data);
    if (net.flat_dim != net.fcs.front().in)
        throw ConfigError("flatten size does not match the first Dense layer");

    TrainState state;
    state.topo = topo;
    state.phase = Phase::Step1;
    state.hyper = hyper;

    Rng rng(hyper.seed);
    for (const ConvLayer& cl : net.convs) {
        if (cl.widx < 0) continue;
        const int64_t K = cl.K;
        const int64_t N = cl.spec.kind == LayerKind::Conv ? cl.N : cl.in.c;
        std::vector<double> w(static_cast<size_t>(K * N));
        const double std_dev = std::sqrt(2.0 / static_cast<double>(K));
        for (double& x : w) x = rng.normal() * std_dev;
        state.conv_w.push_back(std::move(w));
        state.conv_b.emplace_back(static_cast<size_t>(N), 0.0);
    }
    for (const FcLayer& fc : net.fcs) {
        std::vector<double> w(static_cast<size_t>(fc.out * fc.in));
        const double std_dev = std::sqrt(2.0 / static_cast<double>(fc.in));
        for (double& x : w) x = rng.normal() * std_dev;
        state.fc_shadow.push_back(std::move(w));
    }

    Workspace ws(net);
    Params params{&state.conv_w, &state.conv_b};
    ConvGrads cg;
    cg.w.resize(state.conv_w.size());
    cg.b.resize(state.conv_b.size());
    for (size_t i = 0; i < state.conv_w.size(); ++i) {
        cg.w[i].assign(state.conv_w[i].size(), 0.0);
        cg.b[i].assign(state.conv_b[i].size(), 0.0);
    }
    std::vector<std::vector<double>> fg(net.fcs.size());
    for (size_t l = 0; l < net.fcs.size(); ++l) fg[l].assign(state.fc_shadow[l].size(), 0.0);

    Momentum m_cw, m_cb, m_fc;
    m_cw.match(state.conv_w);
    m_cb.match(state.conv_b);
    m_fc.match(state.fc_shadow);

    std::vector<double> z(static_cast<size_t>(net.flat_dim));
    std::vector<double> dz(static_cast<size_t>(net.flat_dim));
    std::vector<std::vector<double>> du(net.fcs.size());
    for (size_t l = 0; l < net.fcs.size(); ++l) du[l].resize(static_cast<size_t>(net.fcs[l].out));

    std::vector<int> order(static_cast<size_t>(data.n));
    std::iota(order.begin(), order.end(), 0);

    const size_t L = net.fcs.size();
    for (int epoch = 0; epoch < hyper.epochs_step1; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int base = 0; base < data.n; base += hyper.batch) {
            const int count = std::min(hyper.batch, data.n - base);
            for (auto& v : cg.w) std::fill(v.begin(), v.end(), 0.0);
            for (auto& v : cg.b) std::fill(v.begin(), v.end(), 0.0);
            zero_all(fg);
            double batch_loss = 0.0;
            for (int s = 0; s < count; ++s) {
                const int idx = order[static_cast<size_t>(base + s)];
                conv_stack_forward(net, params, data.image(idx), ws);
                for (int64_t i = 0; i < net.flat_dim; ++i) z[i] = std::tanh(ws.flat_raw[i]);

                const double* xin = z.data();
                for (size_t l = 0; l < L; ++l) {
                    std::copy_n(xin, static_cast<size_t>(net.fcs[l].in), ws.x[l].data());
                    const std::vector<double>& W = state.fc_shadow[l];
                    for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                        const double* wrow = W.data() + o * net.fcs[l].in;
                        double acc = 0.0;
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2)
                            acc += wrow[i2] * ws.x[l][static_cast<size_t>(i2)];
                        ws.u[l][static_cast<size_t>(o)] = acc;
                    }
                    if (l + 1 < L) {  // hidden ReLU, final layer stays linear
                        for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                            double& v = ws.u[l][static_cast<size_t>(o)];
                            du[l][static_cast<size_t>(o)] = v;  // keep preact for relu'
                            v = std::max(v, 0.0);
                        }
                    }
                    xin = ws.u[l].data();
                }
                batch_loss += softmax_ce(ws.u[L - 1], data.labels[static_cast<size_t>(idx)],
                                         ws.prob);

                // backward
                std::vector<double>& delta = du[L - 1];
                for (size_t o = 0; o < ws.prob.size(); ++o) delta[o] = ws.prob[o];
                delta[data.labels[static_cast<size_t>(idx)]] -= 1.0;
                for (size_t l = L; l-- > 0;) {
                    const std::vector<double>& W = state.fc_shadow[l];
                    std::vector<double>& gw = fg[l];
                    const std::vector<double>& xl = ws.x[l];
                    std::vector<double>& dl = du[l];
                    for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                        const double d = dl[static_cast<size_t>(o)];
                        double* grow = gw.data() + o * net.fcs[l].in;
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2)
                            grow[i2] += d * xl[static_cast<size_t>(i2)];
                    }
                    if (l > 0) {
                        std::vector<double>& dprev = du[l - 1];
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2) {
                            double acc = 0.0;
                            for (int64_t o = 0; o < net.fcs[l].out; ++o)
                                acc += W[static_cast<size_t>(o * net.fcs[l].in + i2)] *
                                       dl[static_cast<size_t>(o)];
                            // dprev currently holds the hidden pre-activation
                            dprev[static_cast<size_t>(i2)] =
                                dprev[static_cast<size_t>(i2)] > 0.0 ? acc : 0.0;
                        }
                    } else {
                        for (int64_t i2 = 0; i2 < net.fcs[0].in; ++i2) {
                            double acc = 0.0;
                            for (int64_t o = 0; o < net.fcs[0].out; ++o)
                                acc += W[static_cast<size_t>(o * net.fcs[0].in + i2)] *
                                       dl[static_cast<size_t>(o)];
                            dz[static_cast<size_t>(i2)] = acc;
                        }
                    }
                }
                double* dflat = ws.dout.back().data();
                for (int64_t i2 = 0; i2 < net.flat_dim; ++i2)
                    dflat[i2] = dz[static_cast<size_t>(i2)] *
                                (1.0 - z[static_cast<size_t>(i2)] * z[static_cast<size_t>(i2)]);
                conv_stack_backward(net, params, ws, cg);
            }
            if (!std::isfinite(batch_loss))
                throw DivergedError("training diverged (non-finite loss)");
            epoch_loss += batch_loss;
            const double inv = 1.0 / count;
            m_cw.step(state.conv_w, cg.w, hyper.lr_step1, hyper.momentum, inv);
            m_cb.step(state.conv_b, cg.b, hyper.lr_step1, hyper.momentum, inv);
            m_fc.step(state.fc_shadow, fg, hyper.lr_step1, hyper.momentum, inv);
        }
        if (progress)
            progress("step1 epoch " + std::to_string(epoch + 1) + "/" +
                     std::to_string(hyper.epochs_step1) + " mean_loss " +
                     std::to_string(epoch_loss / data.n));
    }
    return state;
}

// ----------------------------------------------------------------- step 2

TrainState train_step2(const TrainState& prev, const LabeledDataset& data, const Hyper& hyper,
                       const ProgressFn& progress) {
    if (prev.phase != Phase::Step1) throw StateError("train_step2 requires a Step1 state");
    check_hyper(hyper, true);
    const Net net = build_net(prev.topo);
    check_data_shape(net, data);

    TrainState state = prev;
    state.hyper = hyper;

    // Conv layers are frozen: run the stack once and keep only sign bits.
    Workspace ws(net);
    Params params{&state.conv_w, &state.conv_b};
    std::vector<int8_t> cache(static_cast<size_t>(data.n) * net.flat_dim);
    for (int s = 0; s < data.n; ++s) {
        conv_stack_forward(net, params, data.image(s), ws);
        int8_t* row = cache.data() + static_cast<size_t>(s) * net.flat_dim;
        for (int64_t i = 0; i < net.flat_dim; ++i)
            row[i] = ws.flat_raw[static_cast<size_t>(i)] >= 0.0 ? int8_t{1} : int8_t{-1};
    }

    state.fc_ternary.clear();
    for (size_t l = 0; l < net.fcs.size(); ++l)
        state.fc_ternary.push_back(
            ternarize(state.fc_shadow[l], net.fcs[l].out, net.fcs[l].in));

    std::vector<std::vector<double>> fg(net.fcs.size());
    for (size_t l = 0; l < net.fcs.size(); ++l) fg[l].assign(state.fc_shadow[l].size(), 0.0);
    Momentum m_fc;
    m_fc.match(state.fc_shadow);

    const size_t L = net.fcs.size();
    std::vector<std::vector<double>> act(L), du(L);
    for (size_t l = 0; l < L; ++l) {
        act[l].resize(static_cast<size_t>(net.fcs[l].out));
        du[l].resize(static_cast<size_t>(net.fcs[l].out));
    }

    std::vector<int> order(static_cast<size_t>(data.n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(hyper.seed ^ 0x9E3779B97F4A7C15ull);

    for (int epoch = 0; epoch < hyper.epochs_step2; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int base = 0; base < data.n; base += hyper.batch) {
            const int count = std::min(hyper.batch, data.n - base);
            zero_all(fg);
            double batch_loss = 0.0;
            for (int s = 0; s < count; ++s) {
                const int idx = order[static_cast<size_t>(base + s)];
                const int8_t* bits = cache.data() + static_cast<size_t>(idx) * net.flat_dim;
                for (int64_t i = 0; i < net.flat_dim; ++i)
                    ws.x[0][static_cast<size_t>(i)] = static_cast<double>(bits[i]);

                for (size_t l = 0; l < L; ++l) {
                    if (l > 0)
                        std::copy_n(act[l - 1].data(), static_cast<size_t>(net.fcs[l].in),
                                    ws.x[l].data());
                    const TernaryMatrix& T = state.fc_ternary[l];
                    for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                        const int8_t* trow = T.v.data() + o * net.fcs[l].in;
                        double acc = 0.0;
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2)
                            acc += static_cast<double>(trow[i2]) * ws.x[l][static_cast<size_t>(i2)];
                        ws.u[l][static_cast<size_t>(o)] = acc;
                    }
                    if (l + 1 < L)
                        for (int64_t o = 0; o < net.fcs[l].out; ++o)
                            act[l][static_cast<size_t>(o)] =
                                1.0 / (1.0 + std::exp(-ws.u[l][static_cast<size_t>(o)]));
                }
                batch_loss += softmax_ce(ws.u[L - 1], data.labels[static_cast<size_t>(idx)],
                                         ws.prob);

                // backward through the real-valued shadow weights; the
                // ternarizer passes gradients straight through
                std::vector<double>& delta = du[L - 1];
                for (size_t o = 0; o < ws.prob.size(); ++o) delta[o] = ws.prob[o];
                delta[data.labels[static_cast<size_t>(idx)]] -= 1.0;
                for (size_t l = L; l-- > 0;) {
                    std::vector<double>& gw = fg[l];
                    const std::vector<double>& xl = ws.x[l];
                    std::vector<double>& dl = du[l];
                    for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                        const double d = dl[static_cast<size_t>(o)];
                        double* grow = gw.data() + o * net.fcs[l].in;
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2)
                            grow[i2] += d * xl[static_cast<size_t>(i2)];
                    }
                    if (l > 0) {
                        const std::vector<double>& W = state.fc_shadow[l];
                        std::vector<double>& dprev = du[l - 1];
                        for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2) {
                            double acc = 0.0;
                            for (int64_t o = 0; o < net.fcs[l].out; ++o)
                                acc += W[static_cast<size_t>(o * net.fcs[l].in + i2)] *
                                       dl[static_cast<size_t>(o)];
                            const double a = act[l - 1][static_cast<size_t>(i2)];
                            dprev[static_cast<size_t>(i2)] = acc * a * (1.0 - a);
                        }
                    }
                }
            }
            if (!std::isfinite(batch_loss))
                throw DivergedError("training diverged (non-finite loss)");
            epoch_loss += batch_loss;
            m_fc.step(state.fc_shadow, fg, hyper.lr_step2, hyper.momentum, 1.0 / count);
            for (size_t l = 0; l < L; ++l)
                state.fc_ternary[l] =
                    ternarize(state.fc_shadow[l], net.fcs[l].out, net.fcs[l].in);
        }
        if (progress)
            progress("step2 epoch " + std::to_string(epoch + 1) + "/" +
                     std::to_string(hyper.epochs_step2) + " mean_loss " +
                     std::to_string(epoch_loss / data.n));
    }
    state.phase = Phase::Step2;
    return state;
}

// --------------------------------------------------------------- inference

std::vector<double> conv_flatten(const TrainState& state, const float* image) {
    const Net net = build_net(state.topo);
    Workspace ws(net);
    Params params{const_cast<std::vector<std::vector<double>>*>(&state.conv_w),
                  const_cast<std::vector<std::vector<double>>*>(&state.conv_b)};
    conv_stack_forward(net, params, image, ws);
    return ws.flat_raw;
}

std::vector<double> fc_forward_digital(const TrainState& state,
                                       const std::vector<double>& sign_bits,
                                       const CrossbarConfig& cfg, bool apply_adc) {
    if (state.phase != Phase::Step2) throw StateError("fc_forward_digital needs a Step2 state");
    std::vector<double> act = sign_bits;
    for (size_t l = 0; l < state.fc_ternary.size(); ++l) {
        const TernaryMatrix& T = state.fc_ternary[l];
        if (static_cast<int64_t>(act.size()) != T.cols)
            throw DimensionError("fc layer " + std::to_string(l) + " input size mismatch");
        std::vector<double> u(static_cast<size_t>(T.rows));
        for (int64_t o = 0; o < T.rows; ++o) {
            const int8_t* trow = T.v.data() + o * T.cols;
            double acc = 0.0;
            for (int64_t i = 0; i < T.cols; ++i)
                acc += act[static_cast<size_t>(i)] * static_cast<double>(trow[i]);
            u[static_cast<size_t>(o)] = acc;
        }
        for (double& v : u) v = neuron(v, cfg);
        act = std::move(u);
    }
    return apply_adc ? adc_quantize(act, cfg) : act;
}

namespace {

int argmax_of(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

}  // namespace

std::vector<int> predict(const TrainState& state, const LabeledDataset& data, Backend backend,
                         std::optional<CrossbarConfig> xbar_cfg, std::optional<uint64_t> seed) {
    if (backend == Backend::Analog && state.phase != Phase::Step2)
        throw StateError("analog evaluation requires a Step2 state");
    if (backend == Backend::Analog && !xbar_cfg)
        throw ConfigError("analog evaluation requires a crossbar config");
    const CrossbarConfig cfg = xbar_cfg.value_or(CrossbarConfig{});

    const Net net = build_net(state.topo);
    check_data_shape(net, data);
    Workspace ws(net);
    Params params{const_cast<std::vector<std::vector<double>>*>(&state.conv_w),
                  const_cast<std::vector<std::vector<double>>*>(&state.conv_b)};
    const size_t L = net.fcs.size();

    std::vector<Crossbar> xbars;
    if (backend == Backend::Analog)
        for (size_t l = 0; l < state.fc_ternary.size(); ++l)
            xbars.push_back(program_crossbar(
                state.fc_ternary[l], cfg,
                seed ? std::optional<uint64_t>(*seed + l) : std::nullopt));

    std::vector<int> out(static_cast<size_t>(data.n));
    std::vector<double> buf;
    for (int s = 0; s < data.n; ++s) {
        conv_stack_forward(net, params, data.image(s), ws);
        if (state.phase == Phase::Step1) {
            buf.assign(ws.flat_raw.begin(), ws.flat_raw.end());
            for (double& v : buf) v = std::tanh(v);
            for (size_t l = 0; l < L; ++l) {
                std::vector<double> u(static_cast<size_t>(net.fcs[l].out));
                const std::vector<double>& W = state.fc_shadow[l];
                for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                    const double* wrow = W.data() + o * net.fcs[l].in;
                    double acc = 0.0;
                    for (int64_t i = 0; i < net.fcs[l].in; ++i)
                        acc += wrow[i] * buf[static_cast<size_t>(i)];
                    u[static_cast<size_t>(o)] = acc;
                }
                if (l + 1 < L)
                    for (double& v : u) v = std::max(v, 0.0);
                buf = std::move(u);
            }
            out[static_cast<size_t>(s)] = argmax_of(buf);
        } else {
            const std::vector<double> bits = sign_binarize(ws.flat_raw);
            const std::vector<double> scores = backend == Backend::Digital
                                                   ? fc_forward_digital(state, bits, cfg, true)
                                                   : forward_fc(xbars, bits);
            out[static_cast<size_t>(s)] = argmax_of(scores);
        }
    }
    return out;
}

double evaluate(const TrainState& state, const LabeledDataset& data, Backend backend,
                std::optional<CrossbarConfig> xbar_cfg, std::optional<uint64_t> seed) {
    const std::vector<int> preds = predict(state, data, backend, xbar_cfg, seed);
    int64_t correct = 0;
    for (int s = 0; s < data.n; ++s)
        if (preds[static_cast<size_t>(s)] == data.labels[static_cast<size_t>(s)]) ++correct;
    return data.n == 0 ? 0.0 : static_cast<double>(correct) / data.n;
}

// ------------------------------------------------------------ grad checks

GradCheckResult gradient_check(const NetworkTopology& topo, const LabeledDataset& batch,
                               const Hyper& hyper, int samples_per_group, double step) {
    const Net net = build_net(topo);
    check_data_shape(net, batch);
    TrainState state;
    {
        Hyper h = hyper;
        h.epochs_step1 = 1;
        // reuse step-1 initialization, then skip training
        Rng rng(h.seed);
        for (const ConvLayer& cl : net.convs) {
            if (cl.widx < 0) continue;
            const int64_t K = cl.K;
            const int64_t N = cl.spec.kind == LayerKind::Conv ? cl.N : cl.in.c;
            std::vector<double> w(static_cast<size_t>(K * N));
            const double std_dev = std::sqrt(2.0 / static_cast<double>(K));
            for (double& x : w) x = rng.normal() * std_dev;
            state.conv_w.push_back(std::move(w));
            std::vector<double> b(static_cast<size_t>(N));
            for (double& x : b) x = rng.normal() * 0.05;  // off the ReLU kink
            state.conv_b.push_back(std::move(b));
        }
        for (const FcLayer& fc : net.fcs) {
            std::vector<double> w(static_cast<size_t>(fc.out * fc.in));
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fc.in));
            for (double& x : w) x = rng.normal() * std_dev;
            state.fc_shadow.push_back(std::move(w));
        }
        state.topo = topo;
        state.hyper = h;
    }

    Workspace ws(net);
    Params params{&state.conv_w, &state.conv_b};
    const size_t L = net.fcs.size();
    std::vector<double> z(static_cast<size_t>(net.flat_dim)), dz(static_cast<size_t>(net.flat_dim));
    std::vector<std::vector<double>> du(L);
    for (size_t l = 0; l < L; ++l) du[l].resize(static_cast<size_t>(net.fcs[l].out));

    // Loss over the batch; when fp is given, also fingerprints every
    // activation region touched (ReLU signs, pool winners) so the caller can
    // tell whether two evaluations stayed on the same affine piece.
    auto total_loss = [&](uint64_t* fp = nullptr) {
        uint64_t hash = 1469598103934665603ull;
        auto mix = [&hash](uint64_t v) { hash = (hash ^ v) * 1099511628211ull; };
        double loss = 0.0;
        for (int s = 0; s < batch.n; ++s) {
            conv_stack_forward(net, params, batch.image(s), ws);
            if (fp)
                for (size_t l = 0; l < net.convs.size(); ++l) {
                    if (net.convs[l].spec.kind == LayerKind::MaxPool)
                        for (int a : ws.argmax[l]) mix(static_cast<uint64_t>(a));
                    else if (net.convs[l].relu)
                        for (double v : ws.pre[l]) mix(v > 0.0 ? 1u : 0u);
                }
            for (int64_t i = 0; i < net.flat_dim; ++i) z[static_cast<size_t>(i)] =
                std::tanh(ws.flat_raw[static_cast<size_t>(i)]);
            const double* xin = z.data();
            for (size_t l = 0; l < L; ++l) {
                std::copy_n(xin, static_cast<size_t>(net.fcs[l].in), ws.x[l].data());
                for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                    const double* wrow = state.fc_shadow[l].data() + o * net.fcs[l].in;
                    double acc = 0.0;
                    for (int64_t i = 0; i < net.fcs[l].in; ++i)
                        acc += wrow[i] * ws.x[l][static_cast<size_t>(i)];
                    ws.u[l][static_cast<size_t>(o)] = acc;
                }
                if (l + 1 < L)
                    for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                        du[l][static_cast<size_t>(o)] = ws.u[l][static_cast<size_t>(o)];
                        if (fp) mix(du[l][static_cast<size_t>(o)] > 0.0 ? 1u : 0u);
                        ws.u[l][static_cast<size_t>(o)] =
                            std::max(ws.u[l][static_cast<size_t>(o)], 0.0);
                    }
                xin = ws.u[l].data();
            }
            loss += softmax_ce(ws.u[L - 1], batch.labels[static_cast<size_t>(s)], ws.prob);
        }
        if (fp) *fp = hash;
        return loss;
    };

    // analytic gradients over the batch
    ConvGrads cg;
    cg.w.resize(state.conv_w.size());
    cg.b.resize(state.conv_b.size());
    for (size_t i = 0; i < state.conv_w.size(); ++i) {
        cg.w[i].assign(state.conv_w[i].size(), 0.0);
        cg.b[i].assign(state.conv_b[i].size(), 0.0);
    }
    std::vector<std::vector<double>> fg(L);
    for (size_t l = 0; l < L; ++l) fg[l].assign(state.fc_shadow[l].size(), 0.0);
    for (int s = 0; s < batch.n; ++s) {
        conv_stack_forward(net, params, batch.image(s), ws);
        for (int64_t i = 0; i < net.flat_dim; ++i)
            z[static_cast<size_t>(i)] = std::tanh(ws.flat_raw[static_cast<size_t>(i)]);
        const double* xin = z.data();
        for (size_t l = 0; l < L; ++l) {
            std::copy_n(xin, static_cast<size_t>(net.fcs[l].in), ws.x[l].data());
            for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                const double* wrow = state.fc_shadow[l].data() + o * net.fcs[l].in;
                double acc = 0.0;
                for (int64_t i = 0; i < net.fcs[l].in; ++i)
                    acc += wrow[i] * ws.x[l][static_cast<size_t>(i)];
                ws.u[l][static_cast<size_t>(o)] = acc;
            }
            if (l + 1 < L)
                for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                    du[l][static_cast<size_t>(o)] = ws.u[l][static_cast<size_t>(o)];
                    ws.u[l][static_cast<size_t>(o)] =
                        std::max(ws.u[l][static_cast<size_t>(o)], 0.0);
                }
            xin = ws.u[l].data();
        }
        softmax_ce(ws.u[L - 1], batch.labels[static_cast<size_t>(s)], ws.prob);
        std::vector<double>& delta = du[L - 1];
        for (size_t o = 0; o < ws.prob.size(); ++o) delta[o] = ws.prob[o];
        delta[batch.labels[static_cast<size_t>(s)]] -= 1.0;
        for (size_t l = L; l-- > 0;) {
            const std::vector<double>& W = state.fc_shadow[l];
            for (int64_t o = 0; o < net.fcs[l].out; ++o) {
                const double d = du[l][static_cast<size_t>(o)];
                double* grow = fg[l].data() + o * net.fcs[l].in;
                for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2)
                    grow[i2] += d * ws.x[l][static_cast<size_t>(i2)];
            }
            if (l > 0) {
                for (int64_t i2 = 0; i2 < net.fcs[l].in; ++i2) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < net.fcs[l].out; ++o)
                        acc += W[static_cast<size_t>(o * net.fcs[l].in + i2)] *
                               du[l][static_cast<size_t>(o)];
                    du[l - 1][static_cast<size_t>(i2)] =
                        du[l - 1][static_cast<size_t>(i2)] > 0.0 ? acc : 0.0;
                }
            } else {
                for (int64_t i2 = 0; i2 < net.fcs[0].in; ++i2) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < net.fcs[0].out; ++o)
                        acc += W[static_cast<size_t>(o * net.fcs[0].in + i2)] *
                               du[0][static_cast<size_t>(o)];
                    dz[static_cast<size_t>(i2)] = acc;
                }
            }
        }
        double* dflat = ws.dout.back().data();
        for (int64_t i2 = 0; i2 < net.flat_dim; ++i2)
            dflat[i2] = dz[static_cast<size_t>(i2)] *
                        (1.0 - z[static_cast<size_t>(i2)] * z[static_cast<size_t>(i2)]);
        conv_stack_backward(net, params, ws, cg);
    }

    GradCheckResult res;
    uint64_t base_fp = 0;
    total_loss(&base_fp);
    Rng pick(state.hyper.seed ^ 0xA5A5A5A55A5A5A5Aull);
    auto check_group = [&](std::vector<double>& p, const std::vector<double>& g) {
        for (int t = 0; t < samples_per_group; ++t) {
            for (int attempt = 0; attempt < 64; ++attempt) {
                const size_t j = static_cast<size_t>(pick.below(p.size()));
                const double keep = p[j];
                uint64_t fp_up = 0, fp_down = 0;
                p[j] = keep + step;
                const double up = total_loss(&fp_up);
                p[j] = keep - step;
                const double down = total_loss(&fp_down);
                p[j] = keep;
                if (fp_up != base_fp || fp_down != base_fp) {
                    ++res.crossings;
                    continue;  // the interval straddles a kink; no derivative to compare
                }
                const double numeric = (up - down) / (2.0 * step);
                const double analytic = g[j];
                const double denom = std::max(std::fabs(analytic) + std::fabs(numeric), 1e-6);
                res.max_rel_err = std::max(res.max_rel_err, std::fabs(analytic - numeric) / denom);
                ++res.checked;
                break;
            }
        }
    };
    for (size_t i = 0; i < state.conv_w.size(); ++i) {
        check_group(state.conv_w[i], cg.w[i]);
        check_group(state.conv_b[i], cg.b[i]);
    }
    for (size_t l = 0; l < L; ++l) check_group(state.fc_shadow[l], fg[l]);
    return res;
}

// -------------------------------------------------------------- weight io

namespace {

void write_f32(const std::string& path, const std::vector<uint64_t>& dims,
               const std::vector<double>& data) {
    uint64_t total = 1;
    for (uint64_t d : dims) total *= d;
    if (total != data.size()) throw DimensionError("f32 export: dims/data mismatch");
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        const uint64_t nd = dims.size();
        out.write(reinterpret_cast<const char*>(&nd), 8);
        out.write(reinterpret_cast<const char*>(dims.data()),
                  static_cast<std::streamsize>(dims.size() * 8));
        std::vector<float> f(data.size());
        for (size_t i = 0; i < data.size(); ++i) f[i] = static_cast<float>(data[i]);
        out.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(f.size() * 4));
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    fs::rename(tmp, path);
}

std::vector<double> read_f32(const std::string& path, std::vector<uint64_t>& dims) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    uint64_t nd = 0;
    in.read(reinterpret_cast<char*>(&nd), 8);
    if (in.gcount() != 8 || nd > 8) throw ParseError("'" + path + "': bad dims header");
    dims.resize(nd);
    in.read(reinterpret_cast<char*>(dims.data()), static_cast<std::streamsize>(nd * 8));
    uint64_t total = 1;
    for (uint64_t d : dims) {
        if (d == 0 || d > (1ull << 32)) throw ParseError("'" + path + "': implausible dim");
        total *= d;
    }
    std::vector<float> f(total);
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(total * 4));
    if (in.gcount() != static_cast<std::streamsize>(total * 4))
        throw ParseError("'" + path + "': truncated payload");
    return {f.begin(), f.end()};
}

}  // namespace

void export_weights(const TrainState& state, const std::string& out_dir,
                    std::optional<double> step1_acc, std::optional<double> step2_acc) {
    if (state.phase != Phase::Step2) throw StateError("export requires a Step2 state");
    fs::create_directories(out_dir);
    const Net net = build_net(state.topo);

    std::ostringstream manifest;
    manifest << "# topology " << state.topo.name << "\n";
    char buf[64];
    if (step1_acc) {
        std::snprintf(buf, sizeof buf, "%.6f", *step1_acc);
        manifest << "# step1_acc " << buf << "\n";
    }
    if (step2_acc) {
        std::snprintf(buf, sizeof buf, "%.6f", *step2_acc);
        manifest << "# step2_acc " << buf << "\n";
    }

    for (const ConvLayer& cl : net.convs) {
        if (cl.widx < 0) continue;
        const LayerSpec& spec = cl.spec;
        const bool dw = spec.kind == LayerKind::DepthwiseConv;
        const std::string wfile = spec.name + "_w.f32";
        const std::string bfile = spec.name + "_b.f32";
        const uint64_t N = static_cast<uint64_t>(dw ? cl.in.c : cl.N);
        std::vector<uint64_t> wdims;
        if (dw)
            wdims = {static_cast<uint64_t>(spec.filter_h), static_cast<uint64_t>(spec.filter_w),
                     static_cast<uint64_t>(cl.in.c)};
        else
            wdims = {static_cast<uint64_t>(spec.filter_h), static_cast<uint64_t>(spec.filter_w),
                     static_cast<uint64_t>(spec.channels_in), N};
        write_f32((fs::path(out_dir) / wfile).string(), wdims, state.conv_w[cl.widx]);
        write_f32((fs::path(out_dir) / bfile).string(), {N}, state.conv_b[cl.widx]);
        const char* kind = dw ? "DepthwiseConv" : "Conv";
        manifest << spec.name << " " << kind << " " << cl.K << " " << N << " " << wfile << "\n";
        manifest << spec.name << " " << kind << "Bias 1 " << N << " " << bfile << "\n";
    }
    size_t fc_idx = 0;
    for (const LayerSpec& spec : state.topo.layers) {
        if (spec.kind != LayerKind::Dense) continue;
        const std::string tfile = spec.name + ".tern";
        const TernaryMatrix& T = state.fc_ternary[fc_idx++];
        write_ternary(T, (fs::path(out_dir) / tfile).string());
        manifest << spec.name << " Dense " << T.rows << " " << T.cols << " " << tfile << "\n";
    }
    write_text_atomic(manifest.str(), (fs::path(out_dir) / "manifest.txt").string());
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    Manifest m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hdr(line.substr(1));
            std::string key;
            hdr >> key;
            if (key == "topology")
                hdr >> m.topology;
            else if (key == "step1_acc")
                hdr >> m.step1_acc;
            else if (key == "step2_acc")
                hdr >> m.step2_acc;
            continue;
        }
        std::istringstream row(line);
        ManifestEntry e;
        if (!(row >> e.layer >> e.kind >> e.rows >> e.cols >> e.file))
            throw ParseError("manifest: malformed line '" + line + "'");
        m.entries.push_back(std::move(e));
    }
    return m;
}

TrainState import_weights(const std::string& manifest_path, const NetworkTopology& topo) {
    const Manifest m = read_manifest(manifest_path);
    if (m.topology != topo.name)
        throw ManifestError("manifest topology '" + m.topology + "' != '" + topo.name + "'");
    const fs::path dir = fs::path(manifest_path).parent_path();

    TrainState state;
    state.topo = topo;
    state.phase = Phase::Step2;
    const Net net = build_net(topo);

    auto find_entry = [&](const std::string& layer, const std::string& kind) -> const ManifestEntry& {
        for (const ManifestEntry& e : m.entries)
            if (e.layer == layer && e.kind == kind) return e;
        throw ManifestError("manifest missing " + kind + " entry for layer '" + layer + "'");
    };

    for (const ConvLayer& cl : net.convs) {
        if (cl.widx < 0) continue;
        const bool dw = cl.spec.kind == LayerKind::DepthwiseConv;
        const char* kind = dw ? "DepthwiseConv" : "Conv";
        std::vector<uint64_t> dims;
        state.conv_w.push_back(
            read_f32((dir / find_entry(cl.spec.name, kind).file).string(), dims));
        state.conv_b.push_back(
            read_f32((dir / find_entry(cl.spec.name, std::string(kind) + "Bias").file).string(),
                     dims));
        const size_t expect_w = static_cast<size_t>(cl.K) * (dw ? cl.in.c : cl.N);
        if (state.conv_w.back().size() != expect_w)
            throw ManifestError("layer '" + cl.spec.name + "': weight size mismatch");
    }
    for (const LayerSpec& spec : topo.layers) {
        if (spec.kind != LayerKind::Dense) continue;
        const ManifestEntry& e = find_entry(spec.name, "Dense");
        TernaryMatrix T = read_ternary((dir / e.file).string());
        if (T.rows != spec.num_filters || T.cols != spec.channels_in)
            throw ManifestError("layer '" + spec.name + "': ternary dims mismatch");
        state.fc_shadow.emplace_back(T.v.begin(), T.v.end());
        state.fc_ternary.push_back(std::move(T));
    }
    return state;
}

}  // namespace hsim
