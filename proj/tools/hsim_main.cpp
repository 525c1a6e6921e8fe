// hsim: simulate CNN topologies on a systolic-array + analog-crossbar
// target, train the mixed-precision model pair, and dump DRAM traces.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hsim/errors.hpp"
#include "hsim/imac.hpp"
#include "hsim/mptrain.hpp"
#include "hsim/sched.hpp"
#include "hsim/systolic.hpp"
#include "hsim/topology.hpp"

namespace fs = std::filesystem;
using namespace hsim;

namespace {

struct RunConfig {
    SystolicConfig sys;
    CrossbarConfig xbar;
    double aux_cost_per_elem = 0.0;
    uint64_t seed = 0;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
    size_t pos = 0;
    int64_t x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("config key '" + key + "': trailing junk in '" + v + "'");
    return x;
}

double to_double(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("config key '" + key + "': trailing junk in '" + v + "'");
    return x;
}

RunConfig parse_run_config(const std::string& path) {
    const std::string text = slurp(path);
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "rows")
            cfg.sys.rows = static_cast<int>(to_int(key, val));
        else if (key == "cols")
            cfg.sys.cols = static_cast<int>(to_int(key, val));
        else if (key == "word_bytes")
            cfg.sys.word_bytes = static_cast<int>(to_int(key, val));
        else if (key == "ifmap_offset")
            cfg.sys.ifmap_offset = static_cast<uint64_t>(to_int(key, val));
        else if (key == "filter_offset")
            cfg.sys.filter_offset = static_cast<uint64_t>(to_int(key, val));
        else if (key == "ofmap_offset")
            cfg.sys.ofmap_offset = static_cast<uint64_t>(to_int(key, val));
        else if (key == "sub_rows")
            cfg.xbar.sub_rows = static_cast<int>(to_int(key, val));
        else if (key == "sub_cols")
            cfg.xbar.sub_cols = static_cast<int>(to_int(key, val));
        else if (key == "g_on")
            cfg.xbar.g_on = to_double(key, val);
        else if (key == "g_off")
            cfg.xbar.g_off = to_double(key, val);
        else if (key == "v_read")
            cfg.xbar.v_read = to_double(key, val);
        else if (key == "neuron_slope")
            cfg.xbar.neuron_slope = to_double(key, val);
        else if (key == "adc_bits")
            cfg.xbar.adc_bits = static_cast<int>(to_int(key, val));
        else if (key == "variation_sigma")
            cfg.xbar.variation_sigma = to_double(key, val);
        else if (key == "aux_cost_per_elem")
            cfg.aux_cost_per_elem = to_double(key, val);
        else if (key == "seed")
            cfg.seed = static_cast<uint64_t>(to_int(key, val));
        else
            throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (cfg.sys.rows < 1 || cfg.sys.cols < 1 || cfg.sys.word_bytes < 1)
        throw ConfigError("array dims and word_bytes must be positive");
    check_config(cfg.xbar);
    if (cfg.aux_cost_per_elem < 0) throw ConfigError("aux_cost_per_elem must be >= 0");
    return cfg;
}

NetworkTopology load_topology(const std::string& path) {
    return parse_topology(slurp(path), fs::path(path).stem().string());
}

void print_warnings(const std::vector<Finding>& findings) {
    for (const Finding& f : findings)
        if (f.severity == Severity::Warning)
            std::cerr << "warning: layer '" << f.layer << "': " << f.message << "\n";
}

int cmd_simulate(const std::string& topo_path, const std::string& cfg_path,
                 const std::string& mode_str, const std::string& out_dir) {
    const RunConfig cfg = parse_run_config(cfg_path);
    const NetworkTopology topo = load_topology(topo_path);
    const Mode mode = mode_str == "tpu" ? Mode::TpuOnly : Mode::Hybrid;
    const SimulationReport report = run(topo, cfg.sys, cfg.xbar, mode, cfg.aux_cost_per_elem);
    print_warnings(report.findings);
    fs::create_directories(out_dir);
    write_text_atomic(report_to_csv(report),
                      (fs::path(out_dir) / (topo.name + ".report.csv")).string());
    write_text_atomic(report_to_json(report, topo.name),
                      (fs::path(out_dir) / (topo.name + ".report.json")).string());
    char line[160];
    std::snprintf(line, sizeof line,
                  "%s: total_cycles %llu baseline %llu speedup %.3f reduction %.2f%%\n",
                  topo.name.c_str(), static_cast<unsigned long long>(report.total_cycles),
                  static_cast<unsigned long long>(report.baseline_total_cycles), report.speedup,
                  report.memory.reduction * 100.0);
    std::cout << line;
    return 0;
}

int cmd_compare(const std::vector<std::string>& topo_paths,
                const std::vector<std::string>& weight_paths,
                const std::optional<std::string>& cfg_path) {
    const RunConfig cfg = cfg_path ? parse_run_config(*cfg_path) : RunConfig{};
    std::vector<NetworkTopology> topos;
    for (const std::string& p : topo_paths) topos.push_back(load_topology(p));
    std::vector<Manifest> manifests;
    for (const std::string& p : weight_paths) {
        Manifest m = read_manifest(p);
        bool matched = false;
        for (const NetworkTopology& t : topos) matched = matched || t.name == m.topology;
        if (!matched)
            throw ManifestError("weights manifest '" + p + "' names topology '" + m.topology +
                                "' which is not among the --topology files");
        manifests.push_back(std::move(m));
    }

    const bool with_acc = !manifests.empty();
    std::printf("%-14s %14s %14s %8s %10s", "model", "baseline", "hybrid", "speedup", "mem_red");
    if (with_acc) std::printf(" %9s", "accuracy");
    std::printf("\n");
    for (const NetworkTopology& topo : topos) {
        const SimulationReport rep = run(topo, cfg.sys, cfg.xbar, Mode::Hybrid,
                                         cfg.aux_cost_per_elem);
        print_warnings(rep.findings);
        std::printf("%-14s %14llu %14llu %8.3f %9.2f%%", topo.name.c_str(),
                    static_cast<unsigned long long>(rep.baseline_total_cycles),
                    static_cast<unsigned long long>(rep.total_cycles), rep.speedup,
                    rep.memory.reduction * 100.0);
        if (with_acc) {
            double acc = -1.0;
            for (const Manifest& m : manifests)
                if (m.topology == topo.name) acc = m.step2_acc;
            if (acc >= 0.0)
                std::printf(" %8.2f%%", acc * 100.0);
            else
                std::printf(" %9s", "-");
        }
        std::printf("\n");
    }
    return 0;
}

int cmd_train(const std::string& images, const std::string& labels, const std::string& topo_path,
              int epochs1, int epochs2, uint64_t seed, const std::string& out_dir,
              const std::optional<std::string>& test_images,
              const std::optional<std::string>& test_labels) {
    const NetworkTopology topo = load_topology(topo_path);
    const LabeledDataset train = load_mnist(images, labels);
    std::optional<LabeledDataset> test;
    if (test_images && test_labels) test = load_mnist(*test_images, *test_labels);

    Hyper hyper;
    hyper.epochs_step1 = epochs1;
    hyper.epochs_step2 = epochs2;
    hyper.seed = seed;
    const auto progress = [](const std::string& msg) { std::cerr << msg << "\n"; };

    const TrainState s1 = train_step1(topo, train, hyper, progress);
    const double acc1 = evaluate(s1, test ? *test : train, Backend::Digital);
    const TrainState s2 = train_step2(s1, train, hyper, progress);
    const double acc2 = evaluate(s2, test ? *test : train, Backend::Digital);

    char line[96];
    std::snprintf(line, sizeof line, "step1 accuracy %.4f\nstep2 accuracy %.4f\n", acc1, acc2);
    std::cout << line;
    export_weights(s2, out_dir, acc1, acc2);
    std::cout << "weights written to " << out_dir << "\n";
    return 0;
}

int cmd_traces(const std::string& topo_path, const std::string& cfg_path,
               const std::string& out_dir) {
    const RunConfig cfg = parse_run_config(cfg_path);
    const NetworkTopology topo = load_topology(topo_path);
    const ExecutionPlan p = plan(topo, Mode::Hybrid);
    fs::create_directories(out_dir);
    size_t written = 0;
    for (const auto& [name, unit] : p.assignments) {
        if (unit != Unit::TPU) continue;
        const LayerSpec* layer = nullptr;
        for (const LayerSpec& l : topo.layers)
            if (l.name == name) layer = &l;
        if (layer->kind == LayerKind::DepthwiseConv) {
            std::cerr << "warning: layer '" << name
                      << "': depthwise traces are not modeled, skipping\n";
            continue;
        }
        const auto records = generate_traces(*layer, cfg.sys);
        write_trace_csv(records, (fs::path(out_dir) / (name + ".trace.csv")).string());
        ++written;
    }
    std::cout << written << " trace files written to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"heterogeneous systolic-array + analog-crossbar CNN simulator"};
    app.require_subcommand(1);

    std::string topo_path, cfg_path, out_dir, mode_str;
    std::vector<std::string> topo_paths, weight_paths;
    std::optional<std::string> opt_cfg, test_images, test_labels;
    std::string images, labels, dataset;
    int epochs1 = Hyper{}.epochs_step1, epochs2 = Hyper{}.epochs_step2;
    uint64_t seed = Hyper{}.seed;

    CLI::App* sim = app.add_subcommand("simulate", "per-layer cycle and memory report");
    sim->add_option("--topology", topo_path, "workload CSV")->required();
    sim->add_option("--config", cfg_path, "key = value run config")->required();
    sim->add_option("--mode", mode_str, "execution mode")
        ->required()
        ->check(CLI::IsMember({"tpu", "tpu-imac"}));
    sim->add_option("--out", out_dir, "output directory")->required();

    CLI::App* cmp = app.add_subcommand("compare", "side-by-side table for several topologies");
    cmp->add_option("--topology", topo_paths, "workload CSVs")->required()->expected(-1);
    cmp->add_option("--weights", weight_paths, "trained weight manifests")->expected(-1);
    cmp->add_option("--config", opt_cfg, "key = value run config");

    CLI::App* trn = app.add_subcommand("train", "two-step mixed-precision training");
    trn->add_option("--dataset", dataset, "dataset name")
        ->required()
        ->check(CLI::IsMember({"mnist"}));
    trn->add_option("--images", images, "IDX image file")->required();
    trn->add_option("--labels", labels, "IDX label file")->required();
    trn->add_option("--topology", topo_path, "workload CSV")->required();
    trn->add_option("--epochs-step1", epochs1, "full-precision epochs");
    trn->add_option("--epochs-step2", epochs2, "ternary fine-tuning epochs");
    trn->add_option("--seed", seed, "RNG seed");
    trn->add_option("--out", out_dir, "weight output directory")->required();
    trn->add_option("--test-images", test_images, "held-out IDX image file");
    trn->add_option("--test-labels", test_labels, "held-out IDX label file");

    CLI::App* trc = app.add_subcommand("traces", "per-layer DRAM address traces");
    trc->add_option("--topology", topo_path, "workload CSV")->required();
    trc->add_option("--config", cfg_path, "key = value run config")->required();
    trc->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sim->parsed()) return cmd_simulate(topo_path, cfg_path, mode_str, out_dir);
        if (cmp->parsed()) return cmd_compare(topo_paths, weight_paths, opt_cfg);
        if (trn->parsed())
            return cmd_train(images, labels, topo_path, epochs1, epochs2, seed, out_dir,
                             test_images, test_labels);
        if (trc->parsed()) return cmd_traces(topo_path, cfg_path, out_dir);
    } catch (const DivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const ManifestError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
