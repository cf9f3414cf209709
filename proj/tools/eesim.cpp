// eesim: trace-driven simulator for energy-aware early-exit inference with
// per-layer CPU/GPU frequency scheduling.

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eesim/devmodel.hpp"
#include "eesim/exitnet.hpp"
#include "eesim/profiler.hpp"
#include "eesim/simengine.hpp"
#include "eesim/tracegen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit code 2 for usage-level problems (unknown names, bad flags).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string default_out_dir() {
    if (const char* env = std::getenv("EESIM_OUT")) return env;
    return "eesim_out";
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir);
}

// All artifacts are written to a temporary name and renamed into place, so a
// failed run never leaves a partial report behind.
void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out << content;
    }
    fs::rename(tmp, path);
}

std::uint64_t config_hash(const json& config) {
    const std::string dump = config.dump();
    return eesim::fnv1a(dump.data(), dump.size());
}

void write_manifest(const std::string& out_dir, const std::string& command, const json& config,
                    const std::vector<std::string>& outputs) {
    json manifest;
    manifest["command"] = command;
    manifest["config"] = config;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(config)));
    manifest["config_hash"] = hex;
    // Output names are recorded relative to the manifest so identical configs
    // produce identical manifests wherever they run.
    json names = json::array();
    for (const auto& o : outputs) names.push_back(fs::path(o).filename().string());
    manifest["outputs"] = names;
    atomic_write((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

eesim::DeviceProfile resolve_device(const std::string& name_or_path) {
    if (auto p = eesim::find_device_profile(name_or_path)) return *p;
    if (fs::exists(name_or_path)) return eesim::load_device_profile(name_or_path);
    std::ostringstream os;
    os << "unknown device '" << name_or_path << "'; valid devices:";
    for (const auto& n : eesim::builtin_device_names()) os << " " << n;
    os << " (or pass a profile JSON path)";
    throw UsageError(os.str());
}

eesim::CostTable resolve_cost_table(const std::string& name_or_path) {
    if (auto t = eesim::find_cost_table(name_or_path)) return *t;
    if (fs::exists(name_or_path)) return eesim::load_cost_table(name_or_path);
    std::ostringstream os;
    os << "unknown cost table '" << name_or_path << "'; built-ins:";
    for (const auto& t : eesim::builtin_cost_tables()) os << " " << t.name;
    os << " (or pass a cost-table CSV path)";
    throw UsageError(os.str());
}

eesim::GovernorPolicy resolve_policy(const std::string& name) {
    const auto v = eesim::parse_policy(name);
    if (!v) {
        throw UsageError(
            "unknown policy '" + name +
            "'; valid: e4 dvfs_only early_exit_only baseline_max baseline_min e4_r");
    }
    return eesim::GovernorPolicy::make(*v);
}

// Calibrates a device/table to its published operating point when one exists.
std::pair<eesim::DeviceProfile, eesim::CostTable> apply_builtin_calibration(
    const eesim::DeviceProfile& profile, const eesim::CostTable& table) {
    const auto anchor = eesim::builtin_anchor(profile.name);
    if (!anchor)
        throw UsageError("no built-in calibration anchor for device '" + profile.name +
                         "'; use the calibrate subcommand with explicit --anchor");
    const auto fit = eesim::calibrate(profile, {*anchor}, table);
    return {fit.profile, fit.table};
}

struct SearchFlags {
    int rounds = 3;
    int candidates = 8;
    double latency_budget = 0.0;  // 0 = derive from objective
    bool no_budget = false;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--rounds", rounds, "CDS rounds R")->check(CLI::PositiveNumber);
        cmd->add_option("--candidates", candidates, "candidate pairs per coordinate N")
            ->check(CLI::PositiveNumber);
        cmd->add_option("--latency-budget", latency_budget,
                        "hard latency budget in ms (default: all-max latency * 1.15)");
        cmd->add_flag("--no-budget", no_budget, "minimize energy without a latency budget");
    }

    eesim::SearchConfig to_config(std::uint64_t seed) const {
        eesim::SearchConfig cfg;
        cfg.rounds = rounds;
        cfg.candidates_per_coordinate = candidates;
        cfg.seed = seed;
        if (no_budget) {
            cfg.objective = eesim::SearchObjective::Energy;
        } else if (latency_budget > 0.0) {
            cfg.latency_budget_ms = latency_budget;
        }
        return cfg;
    }

    json to_json() const {
        json j;
        j["rounds"] = rounds;
        j["candidates"] = candidates;
        j["latency_budget_ms"] = latency_budget > 0 ? json(latency_budget) : json(nullptr);
        j["no_budget"] = no_budget;
        return j;
    }
};

json report_json(const eesim::SimReport& report) {
    json j = report;
    return j;
}

// ---------------------------------------------------------------------------
// Subcommand implementations

int cmd_gen_trace(const std::string& out_dir, eesim::TraceGenConfig cfg,
                  const std::string& dist_name) {
    if (dist_name == "uniform") cfg.dist = eesim::ComplexityDist::Uniform;
    else if (dist_name == "bimodal") cfg.dist = eesim::ComplexityDist::Bimodal;
    else throw UsageError("unknown distribution '" + dist_name + "'; valid: uniform bimodal");

    ensure_dir(out_dir);
    const auto trace = eesim::generate_trace(cfg);
    const std::string trace_path = (fs::path(out_dir) / "trace.csv").string();
    {
        const std::string tmp = trace_path + ".tmp";
        eesim::save_trace(trace, tmp);
        fs::rename(tmp, trace_path);
    }

    json config{{"windows", cfg.num_windows},      {"classes", cfg.num_classes},
                {"window_length", cfg.window_length}, {"dist", dist_name},
                {"p_low", cfg.p_low},              {"lo_mean", cfg.lo_mean},
                {"hi_mean", cfg.hi_mean},          {"mode_sigma", cfg.mode_sigma},
                {"frame_jitter", cfg.frame_jitter}, {"seed", cfg.seed}};
    write_manifest(out_dir, "gen-trace", config, {trace_path});
    std::cout << "wrote " << trace_path << " (" << trace.frames.size() << " frames)\n";
    return 0;
}

int cmd_calibrate(const std::string& out_dir, const std::string& device,
                  const std::string& cost_table, std::vector<std::string> anchor_specs) {
    const auto profile = resolve_device(device);
    const auto table = resolve_cost_table(cost_table);

    std::vector<eesim::CalibrationAnchor> anchors;
    for (const auto& spec : anchor_specs) {
        eesim::CalibrationAnchor a;
        if (std::sscanf(spec.c_str(), "%lf,%lf,%lf,%lf", &a.freq.cpu_ghz, &a.freq.gpu_ghz,
                        &a.latency_ms, &a.power_w) != 4)
            throw UsageError("bad --anchor '" + spec + "'; expected cpu_ghz,gpu_ghz,latency_ms,power_w");
        anchors.push_back(a);
    }
    if (anchors.empty()) {
        const auto builtin = eesim::builtin_anchor(profile.name);
        if (!builtin)
            throw UsageError("device '" + profile.name +
                             "' has no built-in anchor; pass --anchor cpu,gpu,lat_ms,power_w");
        anchors.push_back(*builtin);
    }

    ensure_dir(out_dir);
    const auto fit = eesim::calibrate(profile, anchors, table);

    const std::string dev_path = (fs::path(out_dir) / (profile.name + "_calibrated.json")).string();
    {
        json j = fit.profile;
        atomic_write(dev_path, j.dump(2) + "\n");
    }
    const std::string table_path = (fs::path(out_dir) / "cost_table_calibrated.csv").string();
    {
        std::ostringstream os;
        os << "# exits:";
        for (std::size_t i = 0; i < fit.table.exit_layers.size(); ++i)
            os << (i ? "," : " ") << fit.table.exit_layers[i];
        os << "\n";
        char buf[96];
        for (const auto& l : fit.table.layers) {
            std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", l.layer_index, l.cpu_work,
                          l.gpu_work);
            os << buf;
        }
        atomic_write(table_path, os.str());
    }
    const std::string fit_path = (fs::path(out_dir) / "calibration.json").string();
    {
        json j;
        j["work_scale"] = fit.work_scale;
        j["max_residual"] = fit.max_residual;
        json rs = json::array();
        for (const auto& r : fit.residuals)
            rs.push_back({{"latency_rel", r.latency_rel}, {"power_rel", r.power_rel}});
        j["residuals"] = rs;
        atomic_write(fit_path, j.dump(2) + "\n");
    }

    json config{{"device", device}, {"cost_table", cost_table}};
    json ja = json::array();
    for (const auto& a : anchors)
        ja.push_back({{"cpu_ghz", a.freq.cpu_ghz},
                      {"gpu_ghz", a.freq.gpu_ghz},
                      {"latency_ms", a.latency_ms},
                      {"power_w", a.power_w}});
    config["anchors"] = ja;
    write_manifest(out_dir, "calibrate", config, {dev_path, table_path, fit_path});
    std::cout << "calibrated " << profile.name << ": work_scale=" << fit.work_scale
              << " max_residual=" << fit.max_residual << "\n";
    return 0;
}

int cmd_train(const std::string& out_dir, const std::string& trace_path,
              eesim::ExitNetConfig cfg, const std::string& gate_target) {
    if (gate_target == "exit_safe") cfg.gate_target = eesim::GateTargetMode::ExitSafe;
    else if (gate_target == "raw_label") cfg.gate_target = eesim::GateTargetMode::RawLabel;
    else throw UsageError("unknown gate target '" + gate_target + "'; valid: exit_safe raw_label");

    const auto trace = eesim::load_trace(trace_path);
    cfg.num_classes = trace.num_classes;
    cfg.window_length = trace.window_length;

    ensure_dir(out_dir);
    const auto result = eesim::train(trace, cfg);

    const std::string model_path = (fs::path(out_dir) / "model.ckpt").string();
    {
        const std::string tmp_path = model_path + ".tmp";
        eesim::save_model(result.model, tmp_path);
        fs::rename(tmp_path, model_path);
    }
    const std::string hist_path = (fs::path(out_dir) / "training.json").string();
    {
        json j;
        j["loss_history"] = result.loss_history;
        json parts = json::array();
        for (const auto& b : result.breakdown_history)
            parts.push_back({{"cls", b.cls}, {"gate", b.gate}, {"att", b.att}, {"total", b.total}});
        j["loss_breakdown"] = parts;
        atomic_write(hist_path, j.dump(2) + "\n");
    }

    json config{{"trace", trace_path},
                {"feature_dim", cfg.feature_dim},
                {"num_exits", cfg.num_exits},
                {"num_classes", cfg.num_classes},
                {"window_length", cfg.window_length},
                {"gate_threshold", cfg.gate_threshold},
                {"learning_rate", cfg.learning_rate},
                {"batch_size", cfg.batch_size},
                {"epochs", cfg.epochs},
                {"gate_target", gate_target},
                {"seed", cfg.seed},
                {"feature_seed", cfg.feature_seed},
                {"feature_noise", cfg.feature_noise},
                {"scene_noise", cfg.scene_noise},
                {"scene_length", cfg.scene_length}};
    write_manifest(out_dir, "train", config, {model_path, hist_path});
    const double final_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
    std::cout << "trained " << cfg.epochs << " epochs; final loss " << final_loss << "; wrote "
              << model_path << "\n";
    return 0;
}

int cmd_grad_check(const std::string& out_dir, const std::string& model_path,
                   eesim::ExitNetConfig cfg, double epsilon, int coords, std::uint64_t seed,
                   double tolerance) {
    eesim::ExitNetModel model;
    if (!model_path.empty()) {
        model = eesim::load_model(model_path);
    } else {
        model = eesim::init_model(cfg);
    }

    // One random window at the model's configured shape.
    eesim::Rng rng(eesim::mix64(seed, 0x77696eULL));
    eesim::WindowSample sample;
    sample.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.config.num_classes)));
    for (int t = 0; t < model.config.window_length; ++t) {
        eesim::Vec f(static_cast<std::size_t>(model.config.feature_dim));
        for (auto& v : f) v = rng.normal();
        sample.features.push_back(std::move(f));
    }

    const double err = eesim::grad_check(model, sample, epsilon, coords, seed);
    ensure_dir(out_dir);
    const std::string path = (fs::path(out_dir) / "gradcheck.json").string();
    json j{{"max_relative_error", err},
           {"epsilon", epsilon},
           {"coordinates", coords},
           {"seed", seed},
           {"tolerance", tolerance}};
    atomic_write(path, j.dump(2) + "\n");

    json config{{"model", model_path},   {"feature_dim", model.config.feature_dim},
                {"window_length", model.config.window_length},
                {"num_exits", model.config.num_exits},
                {"num_classes", model.config.num_classes},
                {"epsilon", epsilon},    {"coords", coords},
                {"seed", seed},          {"tolerance", tolerance}};
    write_manifest(out_dir, "grad-check", config, {path});
    std::cout << "max relative gradient error: " << err << "\n";
    if (tolerance > 0.0 && err > tolerance) {
        std::cerr << "gradient check failed tolerance " << tolerance << "\n";
        return 1;
    }
    return 0;
}

int cmd_profile(const std::string& out_dir, const std::string& device,
                const std::string& cost_table, bool calibrate_builtin, int exit_index,
                int layer_override, const std::string& method, const SearchFlags& flags,
                std::uint64_t seed) {
    auto profile = resolve_device(device);
    auto table = resolve_cost_table(cost_table);
    if (calibrate_builtin) std::tie(profile, table) = apply_builtin_calibration(profile, table);

    int layer_count;
    if (layer_override > 0) {
        layer_count = layer_override;
    } else {
        layer_count = table.layers_for_exit(exit_index);
    }

    const auto cfg = flags.to_config(seed);
    eesim::ProfileCache cache;
    eesim::SearchResult res;
    if (method == "cds") {
        res = eesim::cds_search(layer_count, table, profile, cfg, &cache);
    } else if (method == "random") {
        const long long budget =
            static_cast<long long>(cfg.rounds) * layer_count * cfg.candidates_per_coordinate;
        res = eesim::random_search(layer_count, table, profile, budget, cfg, &cache);
    } else if (method == "brute") {
        const auto budget = eesim::effective_latency_budget(cfg, table, profile, layer_count);
        res = eesim::brute_force(layer_count, table, profile, budget);
    } else {
        throw UsageError("unknown method '" + method + "'; valid: cds random brute");
    }

    ensure_dir(out_dir);
    const std::string sched_path = (fs::path(out_dir) / "schedule.csv").string();
    {
        std::ostringstream os;
        char buf[80];
        for (int i = 0; i < res.schedule.size(); ++i) {
            const auto& fp = res.schedule.layers[static_cast<std::size_t>(i)];
            std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", i + 1, fp.cpu_ghz, fp.gpu_ghz);
            os << buf;
        }
        atomic_write(sched_path, os.str());
    }
    const std::string search_path = (fs::path(out_dir) / "search.json").string();
    {
        json j{{"method", method},
               {"layer_count", layer_count},
               {"energy_j", res.cost.energy_j},
               {"latency_ms", res.cost.latency_ms},
               {"evaluations", res.evaluations},
               {"nominal_budget", res.nominal_budget},
               {"seed", seed}};
        j["latency_budget_ms"] =
            res.latency_budget_ms ? json(*res.latency_budget_ms) : json(nullptr);
        atomic_write(search_path, j.dump(2) + "\n");
    }
    std::vector<std::string> outputs{sched_path, search_path};
    if (method != "brute") {
        const std::string cache_path = (fs::path(out_dir) / "cache_dump.csv").string();
        const std::string tmp = cache_path + ".tmp";
        eesim::save_cache_dump(cache, tmp);
        fs::rename(tmp, cache_path);
        outputs.push_back(cache_path);
    }

    json config{{"device", device},     {"cost_table", cost_table},
                {"calibrate", calibrate_builtin}, {"exit", exit_index},
                {"layers", layer_override},       {"method", method},
                {"seed", seed},         {"search", flags.to_json()}};
    write_manifest(out_dir, "profile", config, outputs);
    std::cout << method << " search over " << layer_count << " layers: energy "
              << res.cost.energy_j << " J, latency " << res.cost.latency_ms << " ms, "
              << res.evaluations << " evaluations\n";
    return 0;
}

int cmd_simulate(const std::string& out_dir, const std::string& device,
                 const std::string& cost_table, bool calibrate_builtin,
                 const std::string& trace_path, const std::string& model_path,
                 const std::string& policy_name_arg, const SearchFlags& flags,
                 double gate_threshold, std::uint64_t seed_lo, std::uint64_t seed_hi,
                 int workers) {
    auto profile = resolve_device(device);
    auto table = resolve_cost_table(cost_table);
    if (calibrate_builtin) std::tie(profile, table) = apply_builtin_calibration(profile, table);
    const auto trace = eesim::load_trace(trace_path);

    eesim::GovernorPolicy policy = resolve_policy(policy_name_arg);
    const eesim::SearchConfig base_search = flags.to_config(0);
    policy.search.rounds = base_search.rounds;
    policy.search.candidates_per_coordinate = base_search.candidates_per_coordinate;
    if (base_search.latency_budget_ms) policy.search.latency_budget_ms = base_search.latency_budget_ms;
    if (flags.no_budget) policy.search.objective = eesim::SearchObjective::Energy;
    policy.gate_threshold = gate_threshold;

    std::optional<eesim::ExitNetModel> model;
    if (!model_path.empty()) model = eesim::load_model(model_path);
    if (policy.uses_early_exit() && !model)
        throw UsageError("policy '" + policy_name_arg + "' requires --model");

    ensure_dir(out_dir);
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = seed_lo; s <= seed_hi; ++s) seeds.push_back(s);

    std::vector<std::string> outputs(seeds.size() * 2);
    std::vector<std::string> errors;
    std::mutex err_mutex;
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= seeds.size()) return;
            try {
                const auto report =
                    eesim::simulate(trace, profile, table, model ? &*model : nullptr, policy,
                                    seeds[i]);
                const std::string base = "report_seed" + std::to_string(seeds[i]);
                const std::string jpath = (fs::path(out_dir) / (base + ".json")).string();
                const std::string cpath = (fs::path(out_dir) / (base + ".csv")).string();
                atomic_write(jpath, report_json(report).dump(2) + "\n");
                atomic_write(cpath, eesim::report_to_csv(report));
                outputs[i * 2] = jpath;
                outputs[i * 2 + 1] = cpath;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mutex);
                errors.emplace_back(e.what());
            }
        }
    };

    const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(seeds.size())));
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (!errors.empty()) throw std::runtime_error(errors.front());

    json config{{"device", device},
                {"cost_table", cost_table},
                {"calibrate", calibrate_builtin},
                {"trace", trace_path},
                {"model", model_path},
                {"policy", policy_name_arg},
                {"gate_threshold", gate_threshold},
                {"seed_lo", seed_lo},
                {"seed_hi", seed_hi},
                {"search", flags.to_json()}};
    write_manifest(out_dir, "simulate", config, outputs);
    std::cout << "simulated " << seeds.size() << " scenario(s) under policy " << policy_name_arg
              << "; reports in " << out_dir << "\n";
    return 0;
}

int cmd_ablation(const std::string& out_dir, const std::string& device,
                 const std::string& cost_table, bool calibrate_builtin,
                 const std::string& trace_path, const std::string& model_path,
                 const SearchFlags& flags, double gate_threshold, std::uint64_t seed) {
    auto profile = resolve_device(device);
    auto table = resolve_cost_table(cost_table);
    if (calibrate_builtin) std::tie(profile, table) = apply_builtin_calibration(profile, table);
    const auto trace = eesim::load_trace(trace_path);
    const auto model = eesim::load_model(model_path);

    eesim::SearchConfig search = flags.to_config(seed);
    const auto result = eesim::ablation(trace, profile, table, model, seed, search, gate_threshold);

    ensure_dir(out_dir);
    std::vector<std::string> outputs;
    for (const auto& report : result.reports) {
        const std::string path =
            (fs::path(out_dir) / ("report_" + report.policy + ".json")).string();
        atomic_write(path, report_json(report).dump(2) + "\n");
        outputs.push_back(path);
    }
    const std::string table_path = (fs::path(out_dir) / "ablation.csv").string();
    atomic_write(table_path, eesim::comparison_to_csv(result.table));
    outputs.push_back(table_path);

    json config{{"device", device},   {"cost_table", cost_table},
                {"calibrate", calibrate_builtin}, {"trace", trace_path},
                {"model", model_path}, {"gate_threshold", gate_threshold},
                {"seed", seed},        {"search", flags.to_json()}};
    write_manifest(out_dir, "ablation", config, outputs);
    std::cout << eesim::comparison_to_csv(result.table);
    return 0;
}

int cmd_compare(const std::string& out_dir, const std::vector<std::string>& report_paths) {
    std::vector<eesim::SimReport> reports;
    for (const auto& path : report_paths) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open report " + path);
        json j;
        in >> j;
        reports.push_back(j.get<eesim::SimReport>());
    }
    const auto table = eesim::compare(reports);

    ensure_dir(out_dir);
    const std::string csv_path = (fs::path(out_dir) / "comparison.csv").string();
    atomic_write(csv_path, eesim::comparison_to_csv(table));
    const std::string json_path = (fs::path(out_dir) / "comparison.json").string();
    {
        json rows = json::array();
        for (const auto& r : table.rows) rows.push_back(r);
        atomic_write(json_path, rows.dump(2) + "\n");
    }

    json config{{"reports", report_paths}};
    write_manifest(out_dir, "compare", config, {csv_path, json_path});
    std::cout << eesim::comparison_to_csv(table);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trace-driven simulator for energy-aware early-exit inference"};
    app.require_subcommand(1);
    std::string out_dir = default_out_dir();
    app.add_option("--out", out_dir, "output directory (or set EESIM_OUT)")->capture_default_str();

    // gen-trace
    auto* gen = app.add_subcommand("gen-trace", "generate a synthetic labeled frame trace");
    eesim::TraceGenConfig tg;
    std::string dist = "bimodal";
    gen->add_option("--windows", tg.num_windows, "number of windows")->required();
    gen->add_option("--classes", tg.num_classes, "number of classes")->required();
    gen->add_option("--window-len", tg.window_length, "frames per window T");
    gen->add_option("--dist", dist, "complexity distribution: uniform|bimodal");
    gen->add_option("--p-low", tg.p_low, "bimodal low-mode probability");
    gen->add_option("--lo-mean", tg.lo_mean, "bimodal low-mode mean");
    gen->add_option("--hi-mean", tg.hi_mean, "bimodal high-mode mean");
    gen->add_option("--mode-sigma", tg.mode_sigma, "per-window spread");
    gen->add_option("--jitter", tg.frame_jitter, "per-frame jitter");
    gen->add_option("--seed", tg.seed, "generator seed");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "fit the device power/latency model to anchors");
    std::string cal_device, cal_table = "effnet_b0";
    std::vector<std::string> cal_anchors;
    cal->add_option("--device", cal_device, "device name or profile path")->required();
    cal->add_option("--cost-table", cal_table, "cost table name or path");
    cal->add_option("--anchor", cal_anchors,
                    "anchor as cpu_ghz,gpu_ghz,latency_ms,power_w (repeatable)");

    // train
    auto* tr = app.add_subcommand("train", "train the early-exit model on a trace");
    std::string tr_trace, tr_gate_target = "exit_safe";
    eesim::ExitNetConfig tr_cfg;
    tr->add_option("--trace", tr_trace, "trace file")->required();
    tr->add_option("--feature-dim", tr_cfg.feature_dim, "feature dimension d");
    tr->add_option("--exits", tr_cfg.num_exits, "number of exit points E");
    tr->add_option("--threshold", tr_cfg.gate_threshold, "gate threshold");
    tr->add_option("--lr", tr_cfg.learning_rate, "learning rate");
    tr->add_option("--batch", tr_cfg.batch_size, "batch size");
    tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
    tr->add_option("--gate-target", tr_gate_target, "gate BCE target: exit_safe|raw_label");
    tr->add_option("--seed", tr_cfg.seed, "init and batch-order seed");
    tr->add_option("--feature-seed", tr_cfg.feature_seed, "synthetic backbone seed");
    tr->add_option("--feature-noise", tr_cfg.feature_noise,
                   "per-frame noise scale per unit complexity");
    tr->add_option("--scene-noise", tr_cfg.scene_noise,
                   "per-scene correlated noise scale per unit complexity");
    tr->add_option("--scene-length", tr_cfg.scene_length, "frames sharing one scene draw");

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "verify analytic gradients vs finite differences");
    std::string gc_model;
    eesim::ExitNetConfig gc_cfg;
    gc_cfg.feature_dim = 8;
    gc_cfg.num_exits = 2;
    gc_cfg.window_length = 4;
    gc_cfg.num_classes = 4;
    gc_cfg.gate_hidden = {16, 8};
    double gc_eps = 1e-5, gc_tol = 0.0;
    int gc_coords = 250;
    std::uint64_t gc_seed = 17;
    gc->add_option("--model", gc_model, "checkpoint to check (default: fresh init)");
    gc->add_option("--feature-dim", gc_cfg.feature_dim, "feature dimension (fresh init)");
    gc->add_option("--exits", gc_cfg.num_exits, "exit count (fresh init)");
    gc->add_option("--window-len", gc_cfg.window_length, "window length (fresh init)");
    gc->add_option("--classes", gc_cfg.num_classes, "class count (fresh init)");
    gc->add_option("--epsilon", gc_eps, "finite-difference step");
    gc->add_option("--coords", gc_coords, "coordinates to test");
    gc->add_option("--seed", gc_seed, "seed");
    gc->add_option("--tol", gc_tol, "fail (exit 1) when the error exceeds this");

    // profile
    auto* pr = app.add_subcommand("profile", "search a per-layer frequency schedule");
    std::string pr_device, pr_table = "effnet_b0", pr_method = "cds";
    bool pr_calibrate = false;
    int pr_exit = 0, pr_layers = 0;
    std::uint64_t pr_seed = 0;
    SearchFlags pr_flags;
    pr->add_option("--device", pr_device, "device name or profile path")->required();
    pr->add_option("--cost-table", pr_table, "cost table name or path");
    pr->add_flag("--calibrate", pr_calibrate, "apply the built-in anchor calibration first");
    pr->add_option("--exit", pr_exit, "exit point index (1-based)");
    pr->add_option("--layers", pr_layers, "layer-prefix length (overrides --exit)");
    pr->add_option("--method", pr_method, "cds|random|brute");
    pr_flags.add_to(pr);
    pr->add_option("--seed", pr_seed, "search seed");

    // simulate
    auto* sim = app.add_subcommand("simulate", "run a governor policy over a trace");
    std::string sim_device, sim_table = "effnet_b0", sim_trace, sim_model, sim_policy = "e4";
    std::string sim_seeds = "0";
    bool sim_calibrate = false;
    double sim_threshold = 0.5;
    int sim_workers = static_cast<int>(std::thread::hardware_concurrency());
    SearchFlags sim_flags;
    sim->add_option("--device", sim_device, "device name or profile path")->required();
    sim->add_option("--cost-table", sim_table, "cost table name or path");
    sim->add_flag("--calibrate", sim_calibrate, "apply the built-in anchor calibration first");
    sim->add_option("--trace", sim_trace, "trace file")->required();
    sim->add_option("--model", sim_model, "model checkpoint (required for early-exit policies)");
    sim->add_option("--policy", sim_policy,
                    "e4|dvfs_only|early_exit_only|baseline_max|baseline_min|e4_r");
    sim->add_option("--threshold", sim_threshold, "gate threshold");
    auto* sim_seeds_opt = sim->add_option("--seeds", sim_seeds, "seed or inclusive range a..b");
    sim->add_option("--seed", sim_seeds, "single scenario seed")->excludes(sim_seeds_opt);
    sim->add_option("--workers", sim_workers, "parallel scenario workers");
    sim_flags.add_to(sim);

    // ablation
    auto* ab = app.add_subcommand("ablation", "run the four DVFS/early-exit combinations");
    std::string ab_device, ab_table = "effnet_b0", ab_trace, ab_model;
    bool ab_calibrate = false;
    double ab_threshold = 0.5;
    std::uint64_t ab_seed = 0;
    SearchFlags ab_flags;
    ab->add_option("--device", ab_device, "device name or profile path")->required();
    ab->add_option("--cost-table", ab_table, "cost table name or path");
    ab->add_flag("--calibrate", ab_calibrate, "apply the built-in anchor calibration first");
    ab->add_option("--trace", ab_trace, "trace file")->required();
    ab->add_option("--model", ab_model, "model checkpoint")->required();
    ab->add_option("--threshold", ab_threshold, "gate threshold");
    ab->add_option("--seed", ab_seed, "seed");
    ab_flags.add_to(ab);

    // compare
    auto* cp = app.add_subcommand("compare", "build a comparison table from report files");
    std::vector<std::string> cp_reports;
    cp->add_option("--report", cp_reports, "report JSON file (repeatable)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_trace(out_dir, tg, dist);
        if (cal->parsed()) return cmd_calibrate(out_dir, cal_device, cal_table, cal_anchors);
        if (tr->parsed()) return cmd_train(out_dir, tr_trace, tr_cfg, tr_gate_target);
        if (gc->parsed())
            return cmd_grad_check(out_dir, gc_model, gc_cfg, gc_eps, gc_coords, gc_seed, gc_tol);
        if (pr->parsed()) {
            if (pr_exit <= 0 && pr_layers <= 0)
                throw UsageError("profile: pass --exit or --layers");
            return cmd_profile(out_dir, pr_device, pr_table, pr_calibrate, pr_exit, pr_layers,
                               pr_method, pr_flags, pr_seed);
        }
        if (sim->parsed()) {
            std::uint64_t lo = 0, hi = 0;
            const auto dots = sim_seeds.find("..");
            if (dots == std::string::npos) {
                lo = hi = std::stoull(sim_seeds);
            } else {
                lo = std::stoull(sim_seeds.substr(0, dots));
                hi = std::stoull(sim_seeds.substr(dots + 2));
                if (hi < lo) throw UsageError("simulate: bad --seeds range");
            }
            return cmd_simulate(out_dir, sim_device, sim_table, sim_calibrate, sim_trace,
                                sim_model, sim_policy, sim_flags, sim_threshold, lo, hi,
                                sim_workers);
        }
        if (ab->parsed())
            return cmd_ablation(out_dir, ab_device, ab_table, ab_calibrate, ab_trace, ab_model,
                                ab_flags, ab_threshold, ab_seed);
        if (cp->parsed()) return cmd_compare(out_dir, cp_reports);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
