#include <catch2/catch.hpp>

#include <cmath>

#include "eesim/devmodel.hpp"
#include "eesim/exitnet.hpp"
#include "eesim/simengine.hpp"
#include "eesim/tracegen.hpp"
#include "support.hpp"

using namespace eesim;

namespace {

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

ExitNetConfig mini_config() {
    ExitNetConfig cfg;
    cfg.feature_dim = 16;
    cfg.num_exits = 5;
    cfg.window_length = 20;
    cfg.num_classes = 4;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 8;
    cfg.seed = 1;
    cfg.feature_noise = 1.4;
    cfg.scene_noise = 0.8;
    return cfg;
}

// Trained once and shared across test cases; quality only needs to be good
// enough for exits to fire on easy windows.
const ExitNetModel& mini_model() {
    static const ExitNetModel model = [] {
        const auto trace = generate_trace(scenario_config(400, 20, 42));
        return train(trace, mini_config()).model;
    }();
    return model;
}

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

}  // namespace

TEST_CASE("an empty trace simulates to a zero report") {
    const auto dev = calibrated("jetson_xavier_nx");
    FrameTrace empty;
    empty.num_classes = 4;
    empty.window_length = 20;
    const auto report = simulate(empty, dev.profile, dev.table, nullptr,
                                 GovernorPolicy::make(PolicyVariant::BaselineMax), 0);
    CHECK(report.window_count == 0);
    CHECK(report.total_energy_j == 0.0);
    CHECK(report.busy_time_ms == 0.0);
    CHECK(report.mean_power_w == 0.0);
    CHECK_FALSE(report.accuracy.has_value());
}

TEST_CASE("baseline_max reproduces the calibrated full-model latency") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(20, 20, 3));
    const auto report = simulate(trace, dev.profile, dev.table, nullptr,
                                 GovernorPolicy::make(PolicyVariant::BaselineMax), 0);
    CHECK(report.mean_latency_ms == Approx(30.0).epsilon(0.05));
    CHECK(report.mean_power_w == Approx(8.6).epsilon(0.05));
    CHECK(report.exit_histogram.back() == report.window_count);
}

TEST_CASE("early-exit policies require a model") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(5, 20, 3));
    for (auto v : {PolicyVariant::E4, PolicyVariant::EarlyExitOnly, PolicyVariant::E4Random}) {
        CHECK_THROWS_AS(simulate(trace, dev.profile, dev.table, nullptr,
                                 GovernorPolicy::make(v), 0),
                        std::invalid_argument);
    }

    SECTION("model and cost table must agree on the exit count") {
        auto table = dev.table;
        table.exit_layers = {4, 8, 12, 16};  // four exits vs the model's five
        CHECK_THROWS_AS(simulate(trace, dev.profile, table, &mini_model(),
                                 GovernorPolicy::make(PolicyVariant::E4), 0),
                        std::invalid_argument);
    }

    SECTION("model and trace must agree on the class count") {
        auto mismatched = scenario_config(5, 20, 3);
        mismatched.num_classes = 6;
        const auto bad_trace = generate_trace(mismatched);
        CHECK_THROWS_AS(simulate(bad_trace, dev.profile, dev.table, &mini_model(),
                                 GovernorPolicy::make(PolicyVariant::E4), 0),
                        std::invalid_argument);
    }
}

TEST_CASE("simulation accounting invariants hold") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(60, 20, 11));
    const auto& model = mini_model();
    auto policy = GovernorPolicy::make(PolicyVariant::E4);
    policy.gate_threshold = 0.95;
    const auto report = simulate(trace, dev.profile, dev.table, &model, policy, 5);

    SECTION("energy additivity") {
        double sum = 0.0;
        for (const auto& w : report.windows) sum += w.energy_j;
        CHECK(report.total_energy_j == Approx(sum).epsilon(1e-9));
    }

    SECTION("histogram mass equals the window count") {
        long long mass = 0;
        for (auto c : report.exit_histogram) mass += c;
        CHECK(mass == report.window_count);
    }

    SECTION("mean power is energy over busy time") {
        CHECK(report.mean_power_w ==
              Approx(report.total_energy_j / (report.busy_time_ms / 1000.0)));
    }

    SECTION("deterministic reports") {
        const auto again = simulate(trace, dev.profile, dev.table, &model, policy, 5);
        const nlohmann::json a = report, b = again;
        CHECK(a.dump() == b.dump());
    }

    SECTION("latency budget honored by every searched schedule") {
        for (const auto& w : report.windows) {
            const double prefix_max = table_latency_ms(
                dev.profile, dev.table, max_pair(dev.profile), w.executed_layers);
            CHECK(w.latency_ms <= prefix_max * 1.15 + 1e-9);
        }
    }
}

TEST_CASE("the trained gates and heads separate easy from hard windows") {
    const auto eval_trace = generate_trace(scenario_config(300, 20, 777));
    const auto& model = mini_model();
    const auto samples = make_window_samples(eval_trace, model.config, model.config.feature_seed);

    double gate_low = 0.0, gate_high = 0.0;
    long long n_low = 0, n_high = 0;
    long long hard = 0, hard_first_ok = 0, hard_deep_ok = 0;
    WindowForward fwd;
    for (const auto& s : samples) {
        forward_window(model, s, fwd, false);
        double mean_prob = 0.0;
        for (const auto& g : fwd.gates) mean_prob += g.prob;
        mean_prob /= fwd.gates.size();
        if (s.mean_complexity < 0.2) {
            gate_low += mean_prob;
            ++n_low;
        } else if (s.mean_complexity > 0.8) {
            gate_high += mean_prob;
            ++n_high;
            auto correct_at = [&](int t) {
                const auto& lg = fwd.logits[static_cast<std::size_t>(t - 1)];
                return static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin()) ==
                       s.label;
            };
            ++hard;
            if (correct_at(1)) ++hard_first_ok;   // exit-1 span
            if (correct_at(20)) ++hard_deep_ok;   // deepest head
        }
    }
    REQUIRE(n_low > 20);
    REQUIRE(n_high > 20);
    // Gates read complexity: easy windows push toward exiting.
    CHECK(gate_low / n_low > gate_high / n_high);
    // Aggregation pays off on hard windows: the deepest head beats the first.
    CHECK(hard_deep_ok >= hard_first_ok);
    CHECK(static_cast<double>(hard_deep_ok) / hard > 0.85);
}

TEST_CASE("e4 beats the max-frequency baseline on energy and latency") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(80, 20, 21));
    const auto& model = mini_model();

    auto e4 = GovernorPolicy::make(PolicyVariant::E4);
    e4.gate_threshold = 0.95;
    const auto r_e4 = simulate(trace, dev.profile, dev.table, &model, e4, 1);
    const auto r_max = simulate(trace, dev.profile, dev.table, &model,
                                GovernorPolicy::make(PolicyVariant::BaselineMax), 1);

    CHECK(r_e4.total_energy_j < r_max.total_energy_j);
    CHECK(r_e4.mean_latency_ms < r_max.mean_latency_ms);
    CHECK(r_e4.mean_executed_layers < 16.0);
}

TEST_CASE("ablation reproduces the directional orderings") {
    const auto dev = calibrated("jetson_agx_orin");
    const auto& model = mini_model();

    for (std::uint64_t seed : {1ull, 2ull}) {
        const auto trace = generate_trace(scenario_config(60, 20, 100 + seed));
        const auto result =
            ablation(trace, dev.profile, dev.table, model, seed, SearchConfig{}, 0.95);
        const auto& neither = result.reports[0];
        const auto& dvfs = result.reports[1];
        const auto& ee = result.reports[2];
        const auto& both = result.reports[3];

        // DVFS trades latency for energy on the full model.
        CHECK(dvfs.mean_latency_ms > neither.mean_latency_ms);
        CHECK(dvfs.total_energy_j < neither.total_energy_j);
        // Early exit alone reduces both.
        CHECK(ee.mean_latency_ms < neither.mean_latency_ms);
        CHECK(ee.total_energy_j < neither.total_energy_j);
        // The combination is the cheapest row and still beats the baseline's
        // latency and power.
        CHECK(both.total_energy_j < dvfs.total_energy_j);
        CHECK(both.total_energy_j < ee.total_energy_j);
        CHECK(both.total_energy_j < neither.total_energy_j);
        CHECK(both.mean_latency_ms < neither.mean_latency_ms);
        CHECK(both.mean_power_w < neither.mean_power_w);
    }
}

TEST_CASE("the random-search governor variant runs and stays deterministic") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(40, 20, 13));
    const auto& model = mini_model();

    auto policy = GovernorPolicy::make(PolicyVariant::E4Random);
    policy.gate_threshold = 0.95;
    const auto r1 = simulate(trace, dev.profile, dev.table, &model, policy, 2);
    const auto r2 = simulate(trace, dev.profile, dev.table, &model, policy, 2);
    const nlohmann::json a = r1, b = r2;
    CHECK(a.dump() == b.dump());
    CHECK(r1.profiler_evaluations > 0);
    CHECK(r1.window_count == 40);

    // Same exits as the CDS-driven governor (the decision path is shared);
    // only the schedules differ.
    auto e4 = GovernorPolicy::make(PolicyVariant::E4);
    e4.gate_threshold = 0.95;
    const auto r_e4 = simulate(trace, dev.profile, dev.table, &model, e4, 2);
    CHECK(r_e4.exit_histogram == r1.exit_histogram);
}

TEST_CASE("baseline_min trades latency for the power floor") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(15, 20, 31));
    const auto r_min = simulate(trace, dev.profile, dev.table, nullptr,
                                GovernorPolicy::make(PolicyVariant::BaselineMin), 0);
    const auto r_max = simulate(trace, dev.profile, dev.table, nullptr,
                                GovernorPolicy::make(PolicyVariant::BaselineMax), 0);
    CHECK(r_min.mean_latency_ms > r_max.mean_latency_ms);
    CHECK(r_min.mean_power_w < r_max.mean_power_w);
    CHECK(r_min.mean_power_w == Approx(device_power_w(dev.profile, min_pair(dev.profile))));
}

TEST_CASE("compare computes speedup and saving against baseline_max") {
    SECTION("single baseline row") {
        SimReport base;
        base.policy = "baseline_max";
        base.mean_latency_ms = 10.0;
        base.total_energy_j = 4.0;
        const auto table = compare({base});
        REQUIRE(table.rows.size() == 1);
        CHECK(table.rows[0].speedup_vs_baseline == Approx(1.0));
        CHECK(table.rows[0].energy_saving_vs_baseline == Approx(0.0));
    }

    SECTION("halved latency doubles the speedup") {
        SimReport base, fast;
        base.policy = "baseline_max";
        base.mean_latency_ms = 10.0;
        base.total_energy_j = 4.0;
        fast.policy = "e4";
        fast.mean_latency_ms = 5.0;
        fast.total_energy_j = 3.0;
        const auto table = compare({base, fast});
        const auto* row = table.find("e4");
        REQUIRE(row != nullptr);
        CHECK(row->speedup_vs_baseline == Approx(2.0));
        CHECK(row->energy_saving_vs_baseline == Approx(0.25));
    }

    SECTION("missing baseline row is an error") {
        SimReport r;
        r.policy = "e4";
        CHECK_THROWS_AS(compare({r}), std::invalid_argument);
        CHECK_THROWS_AS(compare({}), std::invalid_argument);
    }

    SECTION("a table assembled from the ablation reports keeps its ordering") {
        const auto dev = calibrated("jetson_agx_orin");
        const auto trace = generate_trace(scenario_config(40, 20, 9));
        const auto result =
            ablation(trace, dev.profile, dev.table, mini_model(), 3, SearchConfig{}, 0.95);
        const auto table = compare({result.reports.begin(), result.reports.end()});
        const auto* both = table.find("e4");
        const auto* neither = table.find("baseline_max");
        REQUIRE(both != nullptr);
        REQUIRE(neither != nullptr);
        CHECK(both->speedup_vs_baseline > 1.0);
        CHECK(both->energy_saving_vs_baseline > 0.0);
        CHECK(neither->speedup_vs_baseline == Approx(1.0));
    }
}

TEST_CASE("reports round-trip through JSON") {
    const auto dev = calibrated("jetson_xavier_nx");
    const auto trace = generate_trace(scenario_config(10, 20, 77));
    const auto report = simulate(trace, dev.profile, dev.table, nullptr,
                                 GovernorPolicy::make(PolicyVariant::DvfsOnly), 9);
    CHECK(report.profiler_evaluations > 0);

    const nlohmann::json j = report;
    const auto back = j.get<SimReport>();
    const nlohmann::json j2 = back;
    CHECK(j.dump() == j2.dump());

    SECTION("csv form has one row per window") {
        const auto csv = report_to_csv(report);
        CHECK(std::count(csv.begin(), csv.end(), '\n') ==
              static_cast<long>(report.windows.size()) + 1);
    }
}
