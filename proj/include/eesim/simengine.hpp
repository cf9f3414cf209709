#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "eesim/devmodel.hpp"
#include "eesim/exitnet.hpp"
#include "eesim/profiler.hpp"
#include "eesim/tracegen.hpp"

namespace eesim {

enum class PolicyVariant {
    E4,             // CDS schedules + early exit
    DvfsOnly,       // CDS schedule for the full model, no early exit
    EarlyExitOnly,  // early exit at max frequencies
    BaselineMax,    // full model at max frequencies
    BaselineMin,    // full model at min frequencies
    E4Random        // random-search schedules + early exit
};

inline std::string policy_name(PolicyVariant v) {
    switch (v) {
        case PolicyVariant::E4: return "e4";
        case PolicyVariant::DvfsOnly: return "dvfs_only";
        case PolicyVariant::EarlyExitOnly: return "early_exit_only";
        case PolicyVariant::BaselineMax: return "baseline_max";
        case PolicyVariant::BaselineMin: return "baseline_min";
        case PolicyVariant::E4Random: return "e4_r";
    }
    return "unknown";
}

inline std::optional<PolicyVariant> parse_policy(const std::string& name) {
    for (PolicyVariant v : {PolicyVariant::E4, PolicyVariant::DvfsOnly,
                            PolicyVariant::EarlyExitOnly, PolicyVariant::BaselineMax,
                            PolicyVariant::BaselineMin, PolicyVariant::E4Random})
        if (policy_name(v) == name) return v;
    return std::nullopt;
}

struct GovernorPolicy {
    PolicyVariant variant = PolicyVariant::BaselineMax;
    SearchConfig search;
    double gate_threshold = 0.5;

    bool uses_early_exit() const {
        return variant == PolicyVariant::E4 || variant == PolicyVariant::EarlyExitOnly ||
               variant == PolicyVariant::E4Random;
    }
    bool uses_search() const {
        return variant == PolicyVariant::E4 || variant == PolicyVariant::DvfsOnly ||
               variant == PolicyVariant::E4Random;
    }

    // The CDS-driven governor bounds latency (budget = all-max latency * 1.15);
    // the random-search baseline minimizes energy alone.
    static GovernorPolicy make(PolicyVariant v) {
        GovernorPolicy p;
        p.variant = v;
        p.search.objective = (v == PolicyVariant::E4Random) ? SearchObjective::Energy
                                                            : SearchObjective::EnergyWithBudget;
        return p;
    }
};

struct WindowRecord {
    int window_index = 0;
    int exit_index = ExitDecision::kFull;  // 1..E, 0 = full model
    int fired_at_frame = 0;
    int executed_layers = 0;
    double energy_j = 0.0;
    double latency_ms = 0.0;
    bool correct = false;
    bool has_label_check = false;
    double mean_complexity = 0.0;
};

struct SimReport {
    std::string policy;
    std::uint64_t seed = 0;
    long long window_count = 0;
    double total_energy_j = 0.0;
    double busy_time_ms = 0.0;
    double mean_power_w = 0.0;
    double mean_latency_ms = 0.0;  // per window
    std::optional<double> accuracy;
    double mean_executed_layers = 0.0;
    long long profiler_evaluations = 0;
    std::vector<long long> exit_histogram;  // [0..E-1] exits, [E] = FULL
    std::vector<WindowRecord> windows;
};

// ---------------------------------------------------------------------------

inline SimReport simulate(const FrameTrace& trace, const DeviceProfile& profile,
                          const CostTable& table, const ExitNetModel* model,
                          const GovernorPolicy& policy, std::uint64_t seed) {
    profile.validate();
    table.validate();
    if (policy.uses_early_exit() && model == nullptr)
        throw std::invalid_argument("simulate: policy '" + policy_name(policy.variant) +
                                    "' requires a trained model");
    if (model != nullptr && model->config.num_exits != table.num_exits())
        throw std::invalid_argument("simulate: model has " +
                                    std::to_string(model->config.num_exits) +
                                    " exits but the cost table defines " +
                                    std::to_string(table.num_exits()));
    if (model != nullptr && trace.num_classes > 0 &&
        model->config.num_classes != trace.num_classes)
        throw std::invalid_argument("simulate: model expects " +
                                    std::to_string(model->config.num_classes) +
                                    " classes but the trace declares " +
                                    std::to_string(trace.num_classes));

    const int num_exits = table.num_exits();
    SimReport report;
    report.policy = policy_name(policy.variant);
    report.seed = seed;
    report.exit_histogram.assign(static_cast<std::size_t>(num_exits) + 1, 0);

    // One schedule per distinct layer-prefix length, found once and reused
    // (the profiling happens per configuration, not per frame).
    std::map<int, SearchResult> schedules;
    auto schedule_for = [&](int layer_count) -> const SearchResult& {
        auto it = schedules.find(layer_count);
        if (it != schedules.end()) return it->second;

        SearchResult res;
        switch (policy.variant) {
            case PolicyVariant::E4:
            case PolicyVariant::DvfsOnly: {
                SearchConfig cfg = policy.search;
                cfg.seed = mix64(seed, static_cast<std::uint64_t>(layer_count));
                res = cds_search(layer_count, table, profile, cfg);
                break;
            }
            case PolicyVariant::E4Random: {
                SearchConfig cfg = policy.search;
                cfg.seed = mix64(seed, static_cast<std::uint64_t>(layer_count));
                const long long budget = static_cast<long long>(cfg.rounds) * layer_count *
                                         cfg.candidates_per_coordinate;
                res = random_search(layer_count, table, profile, budget, cfg);
                break;
            }
            case PolicyVariant::EarlyExitOnly:
            case PolicyVariant::BaselineMax: {
                res.schedule.layers.assign(static_cast<std::size_t>(layer_count),
                                           max_pair(profile));
                res.cost = evaluate_schedule(res.schedule, table, profile);
                break;
            }
            case PolicyVariant::BaselineMin: {
                res.schedule.layers.assign(static_cast<std::size_t>(layer_count),
                                           min_pair(profile));
                res.cost = evaluate_schedule(res.schedule, table, profile);
                break;
            }
        }
        report.profiler_evaluations += res.evaluations;
        return schedules.emplace(layer_count, std::move(res)).first->second;
    };

    std::vector<WindowSample> samples;
    if (model != nullptr)
        samples = make_window_samples(trace, model->config, model->config.feature_seed);

    const int num_windows = trace.num_windows();
    long long correct = 0;
    long long classified = 0;
    double layer_sum = 0.0;
    WindowForward fwd;
    for (int w = 0; w < num_windows; ++w) {
        WindowRecord rec;
        rec.window_index = w;

        ExitDecision decision;  // defaults to FULL
        if (model != nullptr) {
            forward_window(*model, samples[static_cast<std::size_t>(w)], fwd,
                           /*with_loss=*/false);
            if (policy.uses_early_exit()) decision = earliest_exit(fwd, policy.gate_threshold);

            const Vec& logits = decision.is_full()
                                    ? fwd.logits.back()
                                    : fwd.logits[static_cast<std::size_t>(decision.fired_at_frame - 1)];
            const auto best = std::max_element(logits.begin(), logits.end());
            rec.correct = static_cast<int>(best - logits.begin()) ==
                          samples[static_cast<std::size_t>(w)].label;
            rec.has_label_check = true;
            rec.mean_complexity = samples[static_cast<std::size_t>(w)].mean_complexity;
            if (rec.correct) ++correct;
            ++classified;
        }

        rec.exit_index = decision.exit_index;
        rec.fired_at_frame = decision.fired_at_frame;
        const int layer_count = decision.is_full() ? table.total_layers()
                                                   : table.layers_for_exit(decision.exit_index);
        rec.executed_layers = layer_count;
        const SearchResult& sched = schedule_for(layer_count);
        rec.energy_j = sched.cost.energy_j;
        rec.latency_ms = sched.cost.latency_ms;

        report.total_energy_j += rec.energy_j;
        report.busy_time_ms += rec.latency_ms;
        layer_sum += layer_count;
        if (decision.is_full())
            report.exit_histogram.back()++;
        else
            report.exit_histogram[static_cast<std::size_t>(decision.exit_index - 1)]++;
        report.windows.push_back(rec);
    }

    report.window_count = num_windows;
    if (num_windows > 0) {
        report.mean_latency_ms = report.busy_time_ms / num_windows;
        report.mean_executed_layers = layer_sum / num_windows;
    }
    if (report.busy_time_ms > 0)
        report.mean_power_w = report.total_energy_j / (report.busy_time_ms / 1000.0);
    if (classified > 0)
        report.accuracy = static_cast<double>(correct) / static_cast<double>(classified);
    return report;
}

// ---------------------------------------------------------------------------
// Comparison tables

struct ComparisonRow {
    std::string policy;
    double mean_latency_ms = 0.0;
    double mean_power_w = 0.0;
    double total_energy_j = 0.0;
    std::optional<double> accuracy;
    double speedup_vs_baseline = 1.0;
    double energy_saving_vs_baseline = 0.0;  // fraction
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;

    const ComparisonRow* find(const std::string& policy) const {
        for (const auto& r : rows)
            if (r.policy == policy) return &r;
        return nullptr;
    }
};

// Speedup and saving ratios against the baseline_max row, which must be
// present in the input.
inline ComparisonTable compare(const std::vector<SimReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("compare: no reports");
    const SimReport* baseline = nullptr;
    for (const auto& r : reports)
        if (r.policy == policy_name(PolicyVariant::BaselineMax)) baseline = &r;
    if (baseline == nullptr)
        throw std::invalid_argument("compare: missing baseline_max report");

    ComparisonTable table;
    for (const auto& r : reports) {
        ComparisonRow row;
        row.policy = r.policy;
        row.mean_latency_ms = r.mean_latency_ms;
        row.mean_power_w = r.mean_power_w;
        row.total_energy_j = r.total_energy_j;
        row.accuracy = r.accuracy;
        row.speedup_vs_baseline =
            r.mean_latency_ms > 0 ? baseline->mean_latency_ms / r.mean_latency_ms : 1.0;
        row.energy_saving_vs_baseline =
            baseline->total_energy_j > 0 ? 1.0 - r.total_energy_j / baseline->total_energy_j : 0.0;
        table.rows.push_back(row);
    }
    return table;
}

struct AblationResult {
    std::array<SimReport, 4> reports;  // neither, dvfs_only, early_exit_only, both
    ComparisonTable table;
};

// Runs the four DVFS/early-exit combinations on identical traces and seeds.
inline AblationResult ablation(const FrameTrace& trace, const DeviceProfile& profile,
                               const CostTable& table, const ExitNetModel& model,
                               std::uint64_t seed, const SearchConfig& search = SearchConfig{},
                               double gate_threshold = 0.5) {
    AblationResult result;
    const std::array<PolicyVariant, 4> variants{PolicyVariant::BaselineMax,
                                                PolicyVariant::DvfsOnly,
                                                PolicyVariant::EarlyExitOnly, PolicyVariant::E4};
    for (std::size_t i = 0; i < variants.size(); ++i) {
        GovernorPolicy p = GovernorPolicy::make(variants[i]);
        p.search = search;
        p.gate_threshold = gate_threshold;
        result.reports[i] = simulate(trace, profile, table, &model, p, seed);
    }
    result.table = compare({result.reports.begin(), result.reports.end()});
    return result;
}

// ---------------------------------------------------------------------------
// Report I/O

inline void to_json(nlohmann::json& j, const WindowRecord& r) {
    j = nlohmann::json{{"window", r.window_index},
                       {"exit", r.exit_index},
                       {"fired_at_frame", r.fired_at_frame},
                       {"executed_layers", r.executed_layers},
                       {"energy_j", r.energy_j},
                       {"latency_ms", r.latency_ms},
                       {"mean_complexity", r.mean_complexity}};
    if (r.has_label_check) j["correct"] = r.correct;
}

inline void from_json(const nlohmann::json& j, WindowRecord& r) {
    j.at("window").get_to(r.window_index);
    j.at("exit").get_to(r.exit_index);
    j.at("fired_at_frame").get_to(r.fired_at_frame);
    j.at("executed_layers").get_to(r.executed_layers);
    j.at("energy_j").get_to(r.energy_j);
    j.at("latency_ms").get_to(r.latency_ms);
    j.at("mean_complexity").get_to(r.mean_complexity);
    r.has_label_check = j.contains("correct");
    if (r.has_label_check) j.at("correct").get_to(r.correct);
}

inline void to_json(nlohmann::json& j, const SimReport& r) {
    j = nlohmann::json{{"policy", r.policy},
                       {"seed", r.seed},
                       {"window_count", r.window_count},
                       {"total_energy_j", r.total_energy_j},
                       {"busy_time_ms", r.busy_time_ms},
                       {"mean_power_w", r.mean_power_w},
                       {"mean_latency_ms", r.mean_latency_ms},
                       {"mean_executed_layers", r.mean_executed_layers},
                       {"profiler_evaluations", r.profiler_evaluations},
                       {"exit_histogram", r.exit_histogram},
                       {"windows", r.windows}};
    j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, SimReport& r) {
    j.at("policy").get_to(r.policy);
    j.at("seed").get_to(r.seed);
    j.at("window_count").get_to(r.window_count);
    j.at("total_energy_j").get_to(r.total_energy_j);
    j.at("busy_time_ms").get_to(r.busy_time_ms);
    j.at("mean_power_w").get_to(r.mean_power_w);
    j.at("mean_latency_ms").get_to(r.mean_latency_ms);
    j.at("mean_executed_layers").get_to(r.mean_executed_layers);
    j.at("profiler_evaluations").get_to(r.profiler_evaluations);
    j.at("exit_histogram").get_to(r.exit_histogram);
    j.at("windows").get_to(r.windows);
    if (j.contains("accuracy") && !j.at("accuracy").is_null())
        r.accuracy = j.at("accuracy").get<double>();
    else
        r.accuracy = std::nullopt;
}

// Per-window delimited form of a report.
inline std::string report_to_csv(const SimReport& r) {
    std::ostringstream os;
    os << "window,exit,fired_at_frame,executed_layers,energy_j,latency_ms,correct,mean_complexity\n";
    char buf[160];
    for (const auto& w : r.windows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.9g,%.9g,%s,%.6f\n", w.window_index,
                      w.exit_index, w.fired_at_frame, w.executed_layers, w.energy_j, w.latency_ms,
                      w.has_label_check ? (w.correct ? "1" : "0") : "", w.mean_complexity);
        os << buf;
    }
    return os.str();
}

inline std::string comparison_to_csv(const ComparisonTable& t) {
    std::ostringstream os;
    os << "policy,mean_latency_ms,mean_power_w,total_energy_j,accuracy,speedup_vs_baseline_max,"
          "energy_saving_vs_baseline_max\n";
    char buf[200];
    for (const auto& r : t.rows) {
        std::string acc = r.accuracy ? [&] {
            char b[32];
            std::snprintf(b, sizeof(b), "%.6f", *r.accuracy);
            return std::string(b);
        }() : std::string();
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%s,%.6f,%.6f\n", r.policy.c_str(),
                      r.mean_latency_ms, r.mean_power_w, r.total_energy_j, acc.c_str(),
                      r.speedup_vs_baseline, r.energy_saving_vs_baseline);
        os << buf;
    }
    return os.str();
}

inline void to_json(nlohmann::json& j, const ComparisonRow& r) {
    j = nlohmann::json{{"policy", r.policy},
                       {"mean_latency_ms", r.mean_latency_ms},
                       {"mean_power_w", r.mean_power_w},
                       {"total_energy_j", r.total_energy_j},
                       {"speedup_vs_baseline_max", r.speedup_vs_baseline},
                       {"energy_saving_vs_baseline_max", r.energy_saving_vs_baseline}};
    j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
}

}  // namespace eesim
