#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hsim/errors.hpp"
#include "hsim/mptrain.hpp"
#include "hsim/rng.hpp"

using namespace hsim;
namespace fs = std::filesystem;

namespace {

const char* kHeader = "name, ifmap_h, ifmap_w, filter_h, filter_w, channels_in, num_filters, stride, kind\n";

NetworkTopology parse_rows(const std::string& rows, const std::string& name = "tiny") {
    return parse_topology(std::string(kHeader) + rows, name);
}

// conv 8x8x1 -> 6x6x4, flatten 144, fc 144->16->10
NetworkTopology tiny_topology() {
    return parse_rows(
        "conv1,8,8,3,3,1,4,1,Conv\n"
        "flatten,6,6,1,1,4,144,1,Flatten\n"
        "fc1,1,1,1,1,144,16,1,Dense\n"
        "fc2,1,1,1,1,16,10,1,Dense\n");
}

LabeledDataset synthetic(int n, uint64_t seed) {
    LabeledDataset ds;
    ds.n = n;
    ds.h = 8;
    ds.w = 8;
    ds.c = 1;
    ds.images.resize(static_cast<size_t>(n) * 64);
    ds.labels.resize(static_cast<size_t>(n));
    Rng rng(seed);
    for (float& p : ds.images) p = static_cast<float>(0.05 + 0.9 * rng.uniform());
    for (uint8_t& l : ds.labels) l = static_cast<uint8_t>(rng.below(10));
    return ds;
}

Hyper quick_hyper() {
    Hyper h;
    h.epochs_step1 = 2;
    h.epochs_step2 = 2;
    h.batch = 8;
    h.seed = 11;
    return h;
}

fs::path work_dir() {
    const fs::path dir = fs::path(HSIM_WORK_DIR) / "mptrain";
    fs::create_directories(dir);
    return dir;
}

void put_be32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

std::string write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(out.good());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return path.string();
}

std::string idx_images(uint32_t n, uint32_t rows, uint32_t cols,
                       const std::vector<uint8_t>& pixels, uint32_t magic = 0x803) {
    std::string bytes;
    put_be32(bytes, magic);
    put_be32(bytes, n);
    put_be32(bytes, rows);
    put_be32(bytes, cols);
    bytes.append(pixels.begin(), pixels.end());
    return bytes;
}

std::string idx_labels(uint32_t n, const std::vector<uint8_t>& labels, uint32_t magic = 0x801) {
    std::string bytes;
    put_be32(bytes, magic);
    put_be32(bytes, n);
    bytes.append(labels.begin(), labels.end());
    return bytes;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("idx loader reads a tiny dataset") {
    const fs::path dir = work_dir();
    const std::vector<uint8_t> pixels = {0, 51, 102, 153, 204, 255,
                                         10, 20, 30, 40, 50, 60};
    const auto img = write_file(dir / "ok-images", idx_images(2, 2, 3, pixels));
    const auto lab = write_file(dir / "ok-labels", idx_labels(2, {7, 0}));

    const LabeledDataset ds = load_mnist(img, lab);
    CHECK(ds.n == 2);
    CHECK(ds.h == 2);
    CHECK(ds.w == 3);
    CHECK(ds.c == 1);
    CHECK(ds.labels[0] == 7);
    CHECK(ds.labels[1] == 0);
    CHECK(ds.images[0] == 0.0f);
    CHECK(ds.images[1] == doctest::Approx(51.0 / 255.0));
    CHECK(ds.images[5] == 1.0f);
    CHECK(ds.image(1)[0] == doctest::Approx(10.0 / 255.0));
}

TEST_CASE("idx loader rejects malformed files") {
    const fs::path dir = work_dir();
    const std::vector<uint8_t> pixels(12, 1);
    const auto good_img = write_file(dir / "g-images", idx_images(2, 2, 3, pixels));
    const auto good_lab = write_file(dir / "g-labels", idx_labels(2, {1, 2}));

    CHECK_THROWS_AS(load_mnist(dir / "missing", good_lab), IoError);

    const auto bad_magic = write_file(dir / "m-images", idx_images(2, 2, 3, pixels, 0x805));
    CHECK_THROWS_AS(load_mnist(bad_magic, good_lab), ParseError);

    const auto short_img =
        write_file(dir / "s-images", idx_images(2, 2, 3, std::vector<uint8_t>(11, 1)));
    CHECK_THROWS_AS(load_mnist(short_img, good_lab), ParseError);

    const auto tiny = write_file(dir / "t-images", std::string("\x00\x00\x08", 3));
    CHECK_THROWS_AS(load_mnist(tiny, good_lab), ParseError);

    const auto three_lab = write_file(dir / "c-labels", idx_labels(3, {1, 2, 3}));
    CHECK_THROWS_AS(load_mnist(good_img, three_lab), ParseError);

    const auto big_lab = write_file(dir / "r-labels", idx_labels(2, {1, 10}));
    CHECK_THROWS_AS(load_mnist(good_img, big_lab), ParseError);

    const auto lab_magic = write_file(dir / "lm-labels", idx_labels(2, {1, 2}, 0x803));
    CHECK_THROWS_AS(load_mnist(good_img, lab_magic), ParseError);
}

TEST_CASE("bundled mnist test split loads") {
    const fs::path dir = fs::path(HSIM_MNIST_DIR);
    const LabeledDataset ds = load_mnist((dir / "t10k-images-idx3-ubyte").string(),
                                         (dir / "t10k-labels-idx1-ubyte").string());
    CHECK(ds.n == 10000);
    CHECK(ds.h == 28);
    CHECK(ds.w == 28);
    CHECK(ds.c == 1);
    for (uint8_t l : ds.labels) REQUIRE(l < 10);
    for (size_t i = 0; i < 784; ++i) {
        REQUIRE(ds.images[i] >= 0.0f);
        REQUIRE(ds.images[i] <= 1.0f);
    }
}

TEST_CASE("sign binarize maps zero up") {
    const std::vector<double> out = sign_binarize({-0.5, 0.0, 3.25, -0.0, -1e-300});
    CHECK(out == std::vector<double>{-1.0, 1.0, 1.0, 1.0, -1.0});
}

TEST_CASE("ternarize applies the strict threshold rule") {
    // mean|w| = 1.0 -> delta = 0.7
    const TernaryMatrix t = ternarize({0.5, 1.5, -2.0, 0.0}, 2, 2);
    CHECK(t.rows == 2);
    CHECK(t.cols == 2);
    CHECK(t.at(0, 0) == 0);
    CHECK(t.at(0, 1) == 1);
    CHECK(t.at(1, 0) == -1);
    CHECK(t.at(1, 1) == 0);

    const TernaryMatrix zeros = ternarize({0.0, 0.0, 0.0}, 1, 3);  // delta = 0, not strict
    for (int8_t v : zeros.v) CHECK(v == 0);

    CHECK_THROWS_AS(ternarize({1.0, 2.0}, 2, 2), DimensionError);
}

TEST_CASE("training rejects bad hyperparameters") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(8, 1);
    Hyper h = quick_hyper();

    h.epochs_step1 = 0;
    CHECK_THROWS_AS(train_step1(topo, ds, h), ConfigError);
    h = quick_hyper();
    h.lr_step1 = 0.0;
    CHECK_THROWS_AS(train_step1(topo, ds, h), ConfigError);
    h = quick_hyper();
    h.batch = 0;
    CHECK_THROWS_AS(train_step1(topo, ds, h), ConfigError);
    h = quick_hyper();
    h.momentum = 1.0;
    CHECK_THROWS_AS(train_step1(topo, ds, h), ConfigError);
}

TEST_CASE("training rejects unsupported topologies") {
    const LabeledDataset ds = synthetic(8, 1);
    const Hyper h = quick_hyper();

    const NetworkTopology avgpool = parse_rows(
        "conv1,8,8,3,3,1,4,1,Conv\n"
        "pool,6,6,2,2,4,4,2,AvgPool\n"
        "flatten,3,3,1,1,4,36,1,Flatten\n"
        "fc1,1,1,1,1,36,10,1,Dense\n");
    CHECK_THROWS_AS(train_step1(avgpool, ds, h), ConfigError);

    const NetworkTopology no_flatten = parse_rows(
        "conv1,8,8,3,3,1,4,1,Conv\n"
        "fc1,1,1,1,1,144,10,1,Dense\n");
    CHECK_THROWS_AS(train_step1(no_flatten, ds, h), ConfigError);

    const NetworkTopology conv_only = parse_rows("conv1,8,8,3,3,1,4,1,Conv\n");
    CHECK_THROWS_AS(train_step1(conv_only, ds, h), ConfigError);

    const NetworkTopology conv_after_flatten = parse_rows(
        "conv1,8,8,3,3,1,4,1,Conv\n"
        "flatten,6,6,1,1,4,144,1,Flatten\n"
        "conv2,1,1,1,1,144,8,1,Conv\n"
        "flatten2,1,1,1,1,8,8,1,Flatten\n"
        "fc1,1,1,1,1,8,10,1,Dense\n");
    CHECK_THROWS_AS(train_step1(conv_after_flatten, ds, h), ConfigError);
}

TEST_CASE("step1 is deterministic per seed") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(32, 3);
    const Hyper h = quick_hyper();

    const TrainState a = train_step1(topo, ds, h);
    const TrainState b = train_step1(topo, ds, h);
    CHECK(a.conv_w == b.conv_w);
    CHECK(a.conv_b == b.conv_b);
    CHECK(a.fc_shadow == b.fc_shadow);

    Hyper h2 = h;
    h2.seed = 12;
    const TrainState c = train_step1(topo, ds, h2);
    CHECK(a.fc_shadow[0] != c.fc_shadow[0]);
}

TEST_CASE("step1 state layout") {
    const TrainState s = train_step1(tiny_topology(), synthetic(16, 5), quick_hyper());
    CHECK(s.phase == Phase::Step1);
    REQUIRE(s.conv_w.size() == 1);
    CHECK(s.conv_w[0].size() == 36);  // 3*3*1 x 4
    CHECK(s.conv_b[0].size() == 4);
    REQUIRE(s.fc_shadow.size() == 2);
    CHECK(s.fc_shadow[0].size() == 16 * 144);
    CHECK(s.fc_shadow[1].size() == 10 * 16);
    CHECK(s.fc_ternary.empty());
}

TEST_CASE("step2 freezes conv weights and ternarizes the fc stack") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(32, 9);
    const Hyper h = quick_hyper();

    const TrainState s1 = train_step1(topo, ds, h);
    const TrainState s2 = train_step2(s1, ds, h);
    CHECK(s2.phase == Phase::Step2);
    CHECK(s2.conv_w == s1.conv_w);  // bitwise frozen
    CHECK(s2.conv_b == s1.conv_b);

    REQUIRE(s2.fc_ternary.size() == 2);
    CHECK(s2.fc_ternary[0].rows == 16);
    CHECK(s2.fc_ternary[0].cols == 144);
    CHECK(s2.fc_ternary[1].rows == 10);
    CHECK(s2.fc_ternary[1].cols == 16);
    for (const TernaryMatrix& t : s2.fc_ternary)
        for (int8_t v : t.v) CHECK((v == -1 || v == 0 || v == 1));

    // ternary matrices are re-derived from the shadows after the last update
    for (size_t l = 0; l < 2; ++l) {
        const TernaryMatrix fresh =
            ternarize(s2.fc_shadow[l], s2.fc_ternary[l].rows, s2.fc_ternary[l].cols);
        CHECK(fresh.v == s2.fc_ternary[l].v);
    }

    CHECK_THROWS_AS(train_step2(s2, ds, h), StateError);  // already in step 2
}

TEST_CASE("runaway learning rate diverges") {
    Hyper h = quick_hyper();
    h.epochs_step1 = 1;
    h.lr_step1 = 1e300;
    h.momentum = 0.0;
    CHECK_THROWS_AS(train_step1(tiny_topology(), synthetic(32, 13), h), DivergedError);
}

TEST_CASE("predict backends agree and reject bad states") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(24, 21);
    const Hyper h = quick_hyper();
    const TrainState s1 = train_step1(topo, ds, h);
    const TrainState s2 = train_step2(s1, ds, h);
    const CrossbarConfig cfg;  // zero variation

    CHECK_THROWS_AS(evaluate(s1, ds, Backend::Analog, cfg, 1), StateError);
    CHECK_THROWS_AS(evaluate(s2, ds, Backend::Analog), ConfigError);

    const std::vector<int> digital = predict(s2, ds, Backend::Digital);
    const std::vector<int> analog = predict(s2, ds, Backend::Analog, cfg, 123);
    CHECK(digital == analog);

    // digital backend is exactly sign bits -> ternary chain -> adc -> argmax
    for (int s = 0; s < ds.n; ++s) {
        const std::vector<double> bits = sign_binarize(conv_flatten(s2, ds.image(s)));
        const std::vector<double> scores = fc_forward_digital(s2, bits, cfg, true);
        int best = 0;
        for (size_t i = 1; i < scores.size(); ++i)
            if (scores[i] > scores[static_cast<size_t>(best)]) best = static_cast<int>(i);
        CHECK(digital[static_cast<size_t>(s)] == best);
    }

    const double acc = evaluate(s2, ds, Backend::Digital);
    int correct = 0;
    for (int s = 0; s < ds.n; ++s)
        if (digital[static_cast<size_t>(s)] == ds.labels[static_cast<size_t>(s)]) ++correct;
    CHECK(acc == doctest::Approx(static_cast<double>(correct) / ds.n));
}

TEST_CASE("fc_forward_digital contracts") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(8, 33);
    const Hyper h = quick_hyper();
    const TrainState s1 = train_step1(topo, ds, h);
    const TrainState s2 = train_step2(s1, ds, h);
    const CrossbarConfig cfg;

    CHECK_THROWS_AS(fc_forward_digital(s1, std::vector<double>(144, 1.0), cfg, false), StateError);
    CHECK_THROWS_AS(fc_forward_digital(s2, std::vector<double>(10, 1.0), cfg, false),
                    DimensionError);

    const std::vector<double> bits = sign_binarize(conv_flatten(s2, ds.image(0)));
    const std::vector<double> raw = fc_forward_digital(s2, bits, cfg, false);
    REQUIRE(raw.size() == 10);
    for (double v : raw) {
        CHECK(v > 0.0);  // sigmoid codomain
        CHECK(v < 1.0);
    }
    const std::vector<double> quant = fc_forward_digital(s2, bits, cfg, true);
    for (double v : quant) CHECK(adc_quantize(v, cfg) == v);  // on the adc grid
}

TEST_CASE("export import roundtrip") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset ds = synthetic(16, 41);
    const Hyper h = quick_hyper();
    const TrainState s1 = train_step1(topo, ds, h);
    const TrainState s2 = train_step2(s1, ds, h);

    const fs::path dir_a = work_dir() / "export_a";
    const fs::path dir_b = work_dir() / "export_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    CHECK_THROWS_AS(export_weights(s1, dir_a.string()), StateError);
    export_weights(s2, dir_a.string(), 0.97, 0.96);

    const Manifest m = read_manifest((dir_a / "manifest.txt").string());
    CHECK(m.topology == "tiny");
    CHECK(m.step1_acc == doctest::Approx(0.97));
    CHECK(m.step2_acc == doctest::Approx(0.96));
    REQUIRE(m.entries.size() == 4);  // conv w + bias, two dense layers
    CHECK(m.entries[0].kind == "Conv");
    CHECK(m.entries[1].kind == "ConvBias");
    CHECK(m.entries[2].kind == "Dense");
    CHECK(m.entries[2].rows == 16);
    CHECK(m.entries[2].cols == 144);

    const TrainState imp = import_weights((dir_a / "manifest.txt").string(), topo);
    CHECK(imp.phase == Phase::Step2);
    REQUIRE(imp.fc_ternary.size() == 2);
    CHECK(imp.fc_ternary[0].v == s2.fc_ternary[0].v);
    CHECK(imp.fc_ternary[1].v == s2.fc_ternary[1].v);
    // conv tensors come back through f32 storage
    REQUIRE(imp.conv_w[0].size() == s2.conv_w[0].size());
    for (size_t i = 0; i < imp.conv_w[0].size(); ++i)
        CHECK(imp.conv_w[0][i] == static_cast<double>(static_cast<float>(s2.conv_w[0][i])));
    // shadow weights degrade to the ternary values themselves
    for (size_t i = 0; i < imp.fc_shadow[0].size(); ++i)
        CHECK(imp.fc_shadow[0][i] == static_cast<double>(imp.fc_ternary[0].v[i]));

    export_weights(imp, dir_b.string(), 0.97, 0.96);
    for (const char* name :
         {"manifest.txt", "conv1_w.f32", "conv1_b.f32", "fc1.tern", "fc2.tern"})
        CHECK(slurp(dir_a / name) == slurp(dir_b / name));

    NetworkTopology renamed = topo;
    renamed.name = "other";
    CHECK_THROWS_AS(import_weights((dir_a / "manifest.txt").string(), renamed), ManifestError);
}

TEST_CASE("dataset shape must match the topology input") {
    const NetworkTopology topo = tiny_topology();  // expects 8x8x1
    LabeledDataset ds = synthetic(8, 2);
    ds.h = 6;
    ds.w = 6;
    ds.images.resize(static_cast<size_t>(ds.n) * 36);
    CHECK_THROWS_AS(train_step1(topo, ds, quick_hyper()), ConfigError);

    const TrainState s = train_step1(topo, synthetic(8, 2), quick_hyper());
    CHECK_THROWS_AS(predict(s, ds, Backend::Digital), ConfigError);
}

TEST_CASE("analytic gradients match finite differences") {
    const NetworkTopology topo = tiny_topology();
    const LabeledDataset batch = synthetic(8, 55);
    Hyper h = quick_hyper();
    h.seed = 17;

    const GradCheckResult r = gradient_check(topo, batch, h, 4);
    CHECK(r.checked == 4 * 4);  // conv w/b + two fc tensors
    CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("gradient check covers every trainable operator") {
    const NetworkTopology topo = parse_rows(
        "conv1,10,10,3,3,2,4,1,Conv\n"
        "dw1,8,8,3,3,4,4,1,DepthwiseConv\n"
        "pool1,6,6,2,2,4,4,2,MaxPool\n"
        "conv2,3,3,3,3,4,8,1,Conv\n"
        "flatten,1,1,1,1,8,8,1,Flatten\n"
        "fc1,1,1,1,1,8,16,1,Dense\n"
        "fc2,1,1,1,1,16,10,1,Dense\n");
    LabeledDataset batch;
    batch.n = 8;
    batch.h = 10;
    batch.w = 10;
    batch.c = 2;
    batch.images.resize(8 * 200);
    batch.labels.resize(8);
    Rng rng(77);
    for (float& p : batch.images) p = static_cast<float>(0.05 + 0.9 * rng.uniform());
    for (uint8_t& l : batch.labels) l = static_cast<uint8_t>(rng.below(10));

    const GradCheckResult r = gradient_check(topo, batch, Hyper{}, 3);
    CHECK(r.checked == 8 * 3);  // three conv-like w/b pairs + two fc tensors
    CHECK(r.max_rel_err <= 1e-4);
}
