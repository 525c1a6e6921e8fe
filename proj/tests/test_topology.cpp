#include <doctest.h>

#include <fstream>
#include <sstream>
#include <string>

#include "hsim/errors.hpp"
#include "hsim/topology.hpp"

using namespace hsim;

namespace {

const char* kHeader = "name, ifmap_h, ifmap_w, filter_h, filter_w, channels_in, num_filters, stride, kind\n";

NetworkTopology parse_rows(const std::string& rows) {
    return parse_topology(std::string(kHeader) + rows, "t");
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("row parses to the mapped fields") {
    const NetworkTopology t = parse_rows("conv1,28,28,5,5,1,6,1,Conv\n");
    REQUIRE(t.layers.size() == 1);
    const LayerSpec& l = t.layers[0];
    CHECK(l.name == "conv1");
    CHECK(l.kind == LayerKind::Conv);
    CHECK(l.ifmap_h == 28);
    CHECK(l.ifmap_w == 28);
    CHECK(l.filter_h == 5);
    CHECK(l.channels_in == 1);
    CHECK(l.num_filters == 6);
    CHECK(l.stride == 1);
}

TEST_CASE("dense row maps node counts") {
    const NetworkTopology t = parse_rows("fc1,1,1,1,1,1024,10,1,Dense\n");
    CHECK(t.layers[0].kind == LayerKind::Dense);
    CHECK(t.layers[0].channels_in == 1024);
    CHECK(t.layers[0].num_filters == 10);
}

TEST_CASE("malformed rows are rejected") {
    CHECK_THROWS_AS(parse_rows("conv1,28,28,5,5,1,6,1\n"), ParseError);          // column count
    CHECK_THROWS_AS(parse_rows("conv1,28,xx,5,5,1,6,1,Conv\n"), ParseError);     // non-numeric
    CHECK_THROWS_AS(parse_rows("conv1,28,28,5,5,1,6,1,Blorp\n"), ParseError);    // unknown kind
    CHECK_THROWS_AS(parse_rows("conv1,28,28,5,5,-1,6,1,Conv\n"), ValidationError);
    CHECK_THROWS_AS(parse_rows("conv1,4,4,5,5,1,6,1,Conv\n"), ValidationError);  // filter > ifmap
    CHECK_THROWS_AS(parse_rows("dw,8,8,3,3,4,5,1,DepthwiseConv\n"), ValidationError);
    CHECK_THROWS_AS(parse_rows("fc,2,2,1,1,16,10,1,Dense\n"), ValidationError);  // ifmap != 1
}

TEST_CASE("output_shape arithmetic") {
    LayerSpec conv{"c", LayerKind::Conv, 28, 28, 5, 5, 1, 6, 1};
    Shape3 s = output_shape(conv);
    CHECK(s.h == 24);
    CHECK(s.w == 24);
    CHECK(s.c == 6);

    LayerSpec pool{"p", LayerKind::MaxPool, 24, 24, 2, 2, 6, 6, 2};
    s = output_shape(pool);
    CHECK(s.h == 12);
    CHECK(s.w == 12);
    CHECK(s.c == 6);

    LayerSpec dense{"d", LayerKind::Dense, 1, 1, 1, 1, 1024, 10, 1};
    s = output_shape(dense);
    CHECK(s.h == 1);
    CHECK(s.w == 1);
    CHECK(s.c == 10);

    LayerSpec strided{"c2", LayerKind::Conv, 34, 34, 3, 3, 64, 128, 2};
    CHECK(output_shape(strided).h == 16);
}

TEST_CASE("param_count per kind") {
    CHECK(param_count(LayerSpec{"c", LayerKind::Conv, 28, 28, 5, 5, 1, 6, 1}) == 156);
    CHECK(param_count(LayerSpec{"d", LayerKind::Dense, 1, 1, 1, 1, 1024, 10, 1}) == 10240);
    CHECK(param_count(LayerSpec{"p", LayerKind::MaxPool, 24, 24, 2, 2, 6, 6, 2}) == 0);
    CHECK(param_count(LayerSpec{"f", LayerKind::Flatten, 1, 1, 1, 1, 16, 1024, 1}) == 0);
    CHECK(param_count(LayerSpec{"dw", LayerKind::DepthwiseConv, 8, 8, 3, 3, 4, 4, 1}) ==
          3 * 3 * 4 + 4);
}

TEST_CASE("param_count is additive over a topology") {
    const NetworkTopology t = parse_rows(
        "conv1,28,28,5,5,1,6,1,Conv\n"
        "fc1,1,1,1,1,1024,10,1,Dense\n");
    CHECK(param_count(t) == param_count(t.layers[0]) + param_count(t.layers[1]));
}

TEST_CASE("to_gemm lowering") {
    GemmShape g = to_gemm(LayerSpec{"c", LayerKind::Conv, 28, 28, 5, 5, 1, 6, 1});
    CHECK(g.m == 576);
    CHECK(g.k == 25);
    CHECK(g.n == 6);

    g = to_gemm(LayerSpec{"c", LayerKind::Conv, 32, 32, 3, 3, 3, 64, 1});
    CHECK(g.m == 900);
    CHECK(g.k == 27);
    CHECK(g.n == 64);

    g = to_gemm(LayerSpec{"d", LayerKind::Dense, 1, 1, 1, 1, 1024, 10, 1});
    CHECK(g.m == 1);
    CHECK(g.k == 1024);
    CHECK(g.n == 10);

    CHECK_THROWS_AS(to_gemm(LayerSpec{"p", LayerKind::MaxPool, 4, 4, 2, 2, 4, 4, 2}),
                    DomainError);
}

TEST_CASE("to_gemm preserves MAC work") {
    const LayerSpec c{"c", LayerKind::Conv, 30, 30, 3, 3, 16, 32, 1};
    const GemmShape g = to_gemm(c);
    const Shape3 o = output_shape(c);
    CHECK(g.m * g.k * g.n ==
          int64_t(o.h) * o.w * c.filter_h * c.filter_w * c.channels_in * c.num_filters);
}

TEST_CASE("validate flags chain breaks") {
    const NetworkTopology t = parse_rows(
        "conv1,28,28,5,5,1,6,1,Conv\n"
        "conv2,20,20,3,3,6,6,1,Conv\n");  // 24x24 output, 20x20 declared
    const auto f = validate(t, false);
    REQUIRE(!f.empty());
    CHECK(f[0].severity == Severity::Error);
    CHECK(f[0].layer == "conv2");
}

TEST_CASE("validate accepts pre-padded chaining") {
    const NetworkTopology t = parse_rows(
        "conv1,34,34,3,3,3,64,1,Conv\n"   // out 32x32
        "conv2,34,34,3,3,64,64,1,Conv\n"  // declared 34 = 32 + pad 1/side
    );
    CHECK(validate(t, false).empty());
}

TEST_CASE("validate channel mismatches are errors") {
    const NetworkTopology t = parse_rows(
        "conv1,28,28,5,5,1,6,1,Conv\n"
        "conv2,24,24,3,3,8,6,1,Conv\n");
    const auto f = validate(t, false);
    REQUIRE(!f.empty());
    CHECK(f[0].severity == Severity::Error);
}

TEST_CASE("hybrid mode requires trailing FC block") {
    const NetworkTopology t = parse_rows(
        "fc1,1,1,1,1,784,64,1,Dense\n"
        "conv1,8,8,3,3,1,4,1,Conv\n");
    bool saw = false;
    for (const Finding& f : validate(t, true))
        if (f.severity == Severity::Error && f.message.find("trailing") != std::string::npos)
            saw = true;
    CHECK(saw);
}

TEST_CASE("hybrid mode warns on non-1024 flatten") {
    const NetworkTopology t = parse_rows(
        "conv1,28,28,5,5,1,8,1,Conv\n"
        "flatten,24,24,1,1,8,4608,1,Flatten\n"
        "fc1,1,1,1,1,4608,10,1,Dense\n");
    bool warned = false;
    for (const Finding& f : validate(t, true))
        if (f.severity == Severity::Warning && f.message.find("1024") != std::string::npos)
            warned = true;
    CHECK(warned);
}

TEST_CASE("bundled topologies validate clean in both modes") {
    const char* names[] = {"lenet", "mobilenet_v1", "mobilenet_v2", "vgg9", "resnet18"};
    for (const char* n : names) {
        const std::string path = std::string(HSIM_SOURCE_DIR) + "/topologies/" + n + ".csv";
        const NetworkTopology t = parse_topology(slurp(path), n);
        for (const Finding& f : validate(t, true)) {
            INFO(n << ": " << f.layer << ": " << f.message);
            CHECK(f.severity == Severity::Warning);
        }
        int errors = 0;
        for (const Finding& f : validate(t, false))
            if (f.severity == Severity::Error) ++errors;
        CHECK(errors == 0);
    }
}

TEST_CASE("bundled topologies flatten to exactly 1024") {
    const char* names[] = {"lenet", "mobilenet_v1", "mobilenet_v2", "vgg9", "resnet18"};
    for (const char* n : names) {
        const std::string path = std::string(HSIM_SOURCE_DIR) + "/topologies/" + n + ".csv";
        const NetworkTopology t = parse_topology(slurp(path), n);
        bool found = false;
        for (const LayerSpec& l : t.layers)
            if (l.kind == LayerKind::Flatten) {
                CHECK(l.num_filters == 1024);
                found = true;
            }
        CHECK(found);
    }
}
