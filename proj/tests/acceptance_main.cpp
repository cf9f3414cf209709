// Acceptance suite: one check per shipped guarantee, each printed as a
// PASS/FAIL line with its measured value and runtime. The process exit code
// is the number of failed checks.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "eesim/devmodel.hpp"
#include "eesim/exitnet.hpp"
#include "eesim/profiler.hpp"
#include "eesim/simengine.hpp"
#include "eesim/tracegen.hpp"

namespace fs = std::filesystem;
using namespace eesim;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail,
            double seconds, double limit_seconds) {
    const bool in_time = seconds < limit_seconds;
    const bool ok = pass && in_time;
    if (!ok) ++g_failures;
    std::printf("%s  criterion %d (%s): %s  [%.1f s%s]\n", ok ? "PASS" : "FAIL", id, name.c_str(),
                detail.c_str(), seconds,
                in_time ? "" : (", over the " + std::to_string(limit_seconds) + " s limit").c_str());
    std::fflush(stdout);
}

// --- shared toy scenario -----------------------------------------------

TraceGenConfig scenario_config(int windows, int t_len, std::uint64_t seed) {
    TraceGenConfig tg;
    tg.num_windows = windows;
    tg.num_classes = 4;
    tg.window_length = t_len;
    tg.dist = ComplexityDist::Bimodal;
    tg.p_low = 0.5;
    tg.lo_mean = 0.2;
    tg.hi_mean = 0.85;
    tg.seed = seed;
    return tg;
}

ExitNetConfig toy_train_config() {
    ExitNetConfig cfg;
    cfg.feature_dim = 16;
    cfg.num_exits = 5;
    cfg.window_length = 20;
    cfg.num_classes = 4;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 20;
    cfg.seed = 1;
    cfg.feature_noise = 1.4;
    cfg.scene_noise = 0.8;
    return cfg;
}

constexpr double kEvalThreshold = 0.95;  // required gate confidence at evaluation

struct CalibratedDevice {
    DeviceProfile profile;
    CostTable table;
};

CalibratedDevice calibrated(const std::string& name) {
    const auto profile = *find_device_profile(name);
    const auto table = *find_cost_table("effnet_b0");
    const auto fit = calibrate(profile, {*builtin_anchor(name)}, table);
    return {fit.profile, fit.table};
}

// 2000 windows keep the sampling noise of accuracy differences well under
// the one-point saturation allowance.
double accuracy_at(const ExitNetModel& model, int t_len, std::uint64_t seed) {
    const auto trace = generate_trace(scenario_config(2000, t_len, seed));
    const auto samples = make_window_samples(trace, model.config, model.config.feature_seed);
    return evaluate_model(model, samples, kEvalThreshold).accuracy;
}

// --- criteria -----------------------------------------------------------

void criterion_1_attention_normalization() {
    const auto t0 = Clock::now();
    ExitNetConfig cfg;
    cfg.feature_dim = 16;
    cfg.num_exits = 5;
    cfg.window_length = 20;
    cfg.num_classes = 4;
    cfg.seed = 11;
    const auto model = init_model(cfg);

    Rng rng(2026);
    double worst = 0.0;
    std::vector<Vec> window(20, Vec(16));
    for (int i = 0; i < 10000; ++i) {
        for (auto& z : window)
            for (auto& v : z) v = rng.normal();
        const auto scores = attention_scores(window, model);
        double sum = 0.0;
        for (double b : scores.beta) sum += b;
        worst = std::max(worst, std::abs(sum - 1.0));
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[128];
    std::snprintf(detail, sizeof(detail), "max |sum(beta)-1| = %.2e over 10000 windows", worst);
    report(1, "attention normalization", worst <= 1e-9, detail, secs, 5.0);
}

void criterion_2_gradient_verification() {
    const auto t0 = Clock::now();
    ExitNetConfig cfg;
    cfg.feature_dim = 8;
    cfg.num_exits = 2;
    cfg.window_length = 4;
    cfg.num_classes = 4;
    cfg.gate_hidden = {16, 8};
    cfg.seed = 2;
    const auto model = init_model(cfg);

    Rng rng(904);
    WindowSample sample;
    sample.label = static_cast<int>(rng.below(4));
    for (int t = 0; t < 4; ++t) {
        Vec f(8);
        for (auto& v : f) v = rng.normal();
        sample.features.push_back(std::move(f));
    }
    const double err = grad_check(model, sample, 1e-5, 250, 31);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[128];
    std::snprintf(detail, sizeof(detail), "max relative error = %.3e (tolerance 1e-4)", err);
    report(2, "gradient verification", err <= 1e-4, detail, secs, 30.0);
}

void criterion_3_cds_optimality() {
    const auto t0 = Clock::now();
    DeviceProfile p;
    p.name = "grid4x3";
    p.cpu_min_ghz = 0.1;
    p.cpu_max_ghz = 0.4;
    p.gpu_min_ghz = 0.1;
    p.gpu_max_ghz = 0.3;
    p.grid_step_ghz = 0.1;
    p.static_power_w = 1.0;
    p.cpu_power_coeff = 2.0;
    p.gpu_power_coeff = 3.0;
    p.switch_overhead_ms = 0.0;  // separable objective
    p.power_cap_w = 5.0;
    p.validate();

    int exact = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(7000 + seed);
        CostTable table;
        table.name = "instance";
        for (int i = 1; i <= 3; ++i)
            table.layers.push_back({i, rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)});
        table.exit_layers = {3};

        SearchConfig cfg;
        cfg.rounds = 2;
        cfg.candidates_per_coordinate = 12;  // covers the whole 4x3 pair grid
        cfg.objective = SearchObjective::Energy;
        cfg.seed = seed;
        const auto cds = cds_search(3, table, p, cfg);
        const auto oracle = brute_force(3, table, p);
        if (cds.cost.energy_j == oracle.cost.energy_j) ++exact;
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[128];
    std::snprintf(detail, sizeof(detail), "%d/20 instances match the brute-force optimum exactly",
                  exact);
    report(3, "CDS optimality on separable instances", exact == 20, detail, secs, 10.0);
}

void criterion_4_cds_vs_random() {
    const auto t0 = Clock::now();
    const auto dev = calibrated("jetson_xavier_nx");

    const int exits[5] = {3, 6, 9, 12, 16};
    int wins = 0, total = 0;
    for (int rep = 0; rep < 20; ++rep) {
        for (int e = 0; e < 5; ++e) {
            const int layers = exits[e];
            const auto seed = static_cast<std::uint64_t>(rep * 5 + e);
            SearchConfig cfg;
            cfg.rounds = 3;
            cfg.candidates_per_coordinate = 8;
            cfg.objective = SearchObjective::Energy;
            cfg.seed = seed;
            const auto cds = cds_search(layers, dev.table, dev.profile, cfg);
            const long long budget = cds.nominal_budget;  // R * layers * N
            const auto rnd = random_search(layers, dev.table, dev.profile, budget, cfg);
            ++total;
            if (cds.cost.energy_j <= rnd.cost.energy_j) ++wins;
        }
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[128];
    std::snprintf(detail, sizeof(detail),
                  "CDS energy <= random-search energy in %d/%d equal-budget scenarios", wins,
                  total);
    report(4, "CDS vs random search", wins >= 90 && total == 100, detail, secs, 120.0);
}

void criterion_5_calibration_fidelity() {
    const auto t0 = Clock::now();
    const auto dev = calibrated("jetson_xavier_nx");
    const FrequencyPair fp{1.9, 1.1};
    const double lat = table_latency_ms(dev.profile, dev.table, fp);
    const double pow = device_power_w(dev.profile, fp);
    const bool ok = std::abs(lat - 30.0) / 30.0 <= 0.05 && std::abs(pow - 8.6) / 8.6 <= 0.05;
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "full model at (1.9, 1.1) GHz: %.2f ms / %.2f W vs anchors 30 ms / 8.6 W", lat,
                  pow);
    report(5, "calibration fidelity", ok, detail, secs, 1.0);
}

void criterion_6_ablation_orderings(const ExitNetModel& model, double train_seconds) {
    const auto t0 = Clock::now();
    const auto dev = calibrated("jetson_agx_orin");

    int ok_seeds = 0;
    int both_latency_min_all_rows = 0;
    std::ostringstream first_fail;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto trace = generate_trace(scenario_config(120, 20, 5000 + seed));
        const auto result =
            ablation(trace, dev.profile, dev.table, model, seed, SearchConfig{}, kEvalThreshold);
        const auto& neither = result.reports[0];
        const auto& dvfs = result.reports[1];
        const auto& ee = result.reports[2];
        const auto& both = result.reports[3];

        const bool ordering = dvfs.mean_latency_ms > neither.mean_latency_ms &&
                              dvfs.total_energy_j < neither.total_energy_j &&
                              ee.mean_latency_ms < neither.mean_latency_ms &&
                              ee.total_energy_j < neither.total_energy_j &&
                              both.total_energy_j < neither.total_energy_j &&
                              both.total_energy_j < dvfs.total_energy_j &&
                              both.total_energy_j < ee.total_energy_j &&
                              both.mean_latency_ms < neither.mean_latency_ms &&
                              both.mean_latency_ms < dvfs.mean_latency_ms &&
                              both.mean_power_w < neither.mean_power_w;
        if (ordering) {
            ++ok_seeds;
        } else if (first_fail.tellp() == 0) {
            first_fail << " (first failing seed " << seed << ")";
        }
        if (both.mean_latency_ms < ee.mean_latency_ms) ++both_latency_min_all_rows;
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "orderings hold on %d/20 seeds%s; note: the combined row undercuts the "
                  "max-frequency early-exit row's latency on %d/20 seeds (max frequency is the "
                  "latency floor for a fixed exit sequence, so that row is gated on energy)",
                  ok_seeds, first_fail.str().c_str(), both_latency_min_all_rows);
    report(6, "ablation directional reproduction", ok_seeds == 20, detail,
           secs + train_seconds, 300.0);
}

void criterion_7_early_exit_learning(const ExitNetModel& model, double train_seconds) {
    const auto t0 = Clock::now();
    const auto eval_trace = generate_trace(scenario_config(500, 20, 777));
    const auto samples = make_window_samples(eval_trace, model.config, model.config.feature_seed);
    const auto stats = evaluate_model(model, samples, kEvalThreshold);

    const auto table = *find_cost_table("effnet_b0");
    long long low_total = 0, low_exit1 = 0;
    double layer_sum = 0.0;
    for (const auto& rec : stats.records) {
        layer_sum += rec.exit_index == ExitDecision::kFull ? table.total_layers()
                                                           : table.layers_for_exit(rec.exit_index);
        if (rec.mean_complexity < 0.3) {
            ++low_total;
            if (rec.exit_index == 1) ++low_exit1;
        }
    }
    const double exit1_low = low_total ? static_cast<double>(low_exit1) / low_total : 0.0;
    const double mean_layers = layer_sum / static_cast<double>(stats.records.size());
    const bool ok = exit1_low >= 0.70 && stats.accuracy >= 0.90 &&
                    mean_layers < table.total_layers();
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "exit-1 usage on easy windows %.1f%% (need >= 70%%), accuracy %.1f%% "
                  "(need >= 90%%), mean executed layers %.2f of %d",
                  100.0 * exit1_low, 100.0 * stats.accuracy, mean_layers, table.total_layers());
    report(7, "early-exit learning", ok, detail, secs + train_seconds, 600.0);
}

void criterion_8_frames_vs_accuracy(const ExitNetModel& model) {
    const auto t0 = Clock::now();
    const double acc4 = accuracy_at(model, 4, 777);
    const double acc20 = accuracy_at(model, 20, 777);
    const double acc40 = accuracy_at(model, 40, 777);
    const bool ok = acc20 >= acc4 && acc40 <= acc20 + 0.01;
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "accuracy %.1f%% @T=4, %.1f%% @T=20, %.1f%% @T=40 (saturation within +1 point)",
                  100.0 * acc4, 100.0 * acc20, 100.0 * acc40);
    report(8, "frames-vs-accuracy trend", ok, detail, secs, 120.0);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void criterion_9_cli_determinism() {
    const auto t0 = Clock::now();
    const char* cli = std::getenv("EESIM_CLI_BIN");
    if (cli == nullptr) {
        report(9, "CLI determinism", false, "EESIM_CLI_BIN is not set", 0.0, 60.0);
        return;
    }
    const fs::path base = fs::temp_directory_path() / ("eesim_accept_" + std::to_string(getpid()));
    fs::create_directories(base);

    // Each stage reruns with an identical configuration (same input paths,
    // same seeds) into a fresh directory; every artifact must match bit for
    // bit, manifests included.
    auto run = [&](const std::string& args) {
        return std::system((std::string(cli) + " " + args + " > /dev/null 2>&1").c_str()) == 0;
    };
    const std::string shared_trace = (base / "ta" / "trace.csv").string();
    bool ok = true;
    for (const char* tag : {"a", "b"}) {
        const std::string t = (base / (std::string("t") + tag)).string();
        const std::string p = (base / (std::string("p") + tag)).string();
        const std::string s = (base / (std::string("s") + tag)).string();
        ok = ok && run("--out " + t + " gen-trace --windows 12 --classes 4 --seed 7");
        ok = ok && run("--out " + p +
                       " profile --device jetson_xavier_nx --calibrate --exit 3 --seed 9");
        ok = ok && run("--out " + s +
                       " simulate --device jetson_xavier_nx --calibrate --trace " + shared_trace +
                       " --policy dvfs_only --seeds 1..2");
    }
    std::string mismatch;
    if (ok) {
        const char* files[] = {"ta/trace.csv",         "ta/manifest.json",
                               "pa/schedule.csv",      "pa/search.json",
                               "pa/cache_dump.csv",    "pa/manifest.json",
                               "sa/report_seed1.json", "sa/report_seed2.json",
                               "sa/report_seed1.csv",  "sa/report_seed2.csv",
                               "sa/manifest.json"};
        for (const char* f : files) {
            std::string other = f;
            other[1] = 'b';
            if (slurp(base / f) != slurp(base / other) || slurp(base / f).empty()) {
                ok = false;
                mismatch = f;
                break;
            }
        }
    }
    std::error_code ec;
    fs::remove_all(base, ec);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::string detail = ok ? "reruns of the gen-trace/profile/simulate pipeline are bit-identical"
                            : (mismatch.empty() ? "pipeline execution failed"
                                                : "mismatch in " + mismatch);
    report(9, "CLI determinism", ok, detail, secs, 60.0);
}

}  // namespace

int main() {
    std::printf("eesim acceptance suite\n");

    criterion_1_attention_normalization();
    criterion_2_gradient_verification();
    criterion_3_cds_optimality();
    criterion_4_cds_vs_random();
    criterion_5_calibration_fidelity();

    // Criteria 6-8 share one toy training run.
    const auto t0 = Clock::now();
    const auto train_trace = generate_trace(scenario_config(2000, 20, 42));
    const auto trained = train(train_trace, toy_train_config());
    const double train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("  -- toy model trained in %.1f s (final loss %.3f)\n", train_seconds,
                trained.loss_history.back());

    criterion_6_ablation_orderings(trained.model, train_seconds);
    criterion_7_early_exit_learning(trained.model, train_seconds);
    criterion_8_frames_vs_accuracy(trained.model);
    criterion_9_cli_determinism();

    std::printf("%d criterion(s) failed\n", g_failures);
    return g_failures;
}
