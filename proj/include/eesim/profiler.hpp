#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "eesim/devmodel.hpp"
#include "eesim/prng.hpp"

namespace eesim {

// Per-layer frequency assignment for the layers before one exit point.
struct Schedule {
    std::vector<FrequencyPair> layers;

    int size() const { return static_cast<int>(layers.size()); }
    friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct ScheduleCost {
    double energy_j = 0.0;
    double latency_ms = 0.0;
};

namespace detail {

struct ScheduleHash {
    std::size_t operator()(const Schedule& s) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& fp : s.layers) {
            h = fnv1a(&fp.cpu_ghz, sizeof(double), h);
            h = fnv1a(&fp.gpu_ghz, sizeof(double), h);
        }
        return static_cast<std::size_t>(h);
    }
};

}  // namespace detail

// Maps evaluated schedules to their profiled energy/latency. Entries are
// written once; repeated lookups return the stored numbers.
struct ProfileCache {
    std::unordered_map<Schedule, ScheduleCost, detail::ScheduleHash> entries;
    long long hits = 0;
    long long misses = 0;

    const ScheduleCost* find(const Schedule& s) const {
        const auto it = entries.find(s);
        return it == entries.end() ? nullptr : &it->second;
    }
};

struct SearchObjective {
    enum Kind { Energy, EnergyWithBudget };
};

struct SearchConfig {
    int rounds = 3;                     // R
    int candidates_per_coordinate = 8;  // N
    std::optional<double> latency_budget_ms;  // explicit budget; see objective
    SearchObjective::Kind objective = SearchObjective::EnergyWithBudget;
    std::uint64_t seed = 0;

    void validate() const {
        if (rounds < 1) throw std::invalid_argument("search: rounds < 1");
        if (candidates_per_coordinate < 1) throw std::invalid_argument("search: candidates < 1");
        if (latency_budget_ms && *latency_budget_ms <= 0)
            throw std::invalid_argument("search: latency budget must be positive");
    }
};

struct SearchResult {
    Schedule schedule;
    ScheduleCost cost{};
    long long evaluations = 0;      // profiler invocations (cache misses)
    long long nominal_budget = 0;   // R * layers * N for CDS; sample count for random
    std::optional<double> latency_budget_ms;
    std::vector<double> best_energy_history;  // best feasible energy after each commit
};

// ---------------------------------------------------------------------------
// Schedule evaluation: per-layer energy and latency plus one switch_overhead
// latency charge per frequency change between consecutive layers.

inline ScheduleCost evaluate_schedule(const Schedule& schedule, const CostTable& table,
                                      const DeviceProfile& profile,
                                      ProfileCache* cache = nullptr) {
    if (schedule.size() > table.total_layers())
        throw std::domain_error("evaluate_schedule: schedule longer than the cost table");
    if (cache) {
        if (const ScheduleCost* found = cache->find(schedule)) {
            ++cache->hits;
            return *found;
        }
    }
    ScheduleCost cost;
    for (int i = 0; i < schedule.size(); ++i) {
        const auto si = static_cast<std::size_t>(i);
        const auto& fp = schedule.layers[si];
        cost.energy_j += layer_energy_j(profile, table.layers[si], fp);
        cost.latency_ms += layer_latency_ms(profile, table.layers[si], fp);
        if (i > 0 && !(schedule.layers[si] == schedule.layers[si - 1]))
            cost.latency_ms += profile.switch_overhead_ms;
    }
    if (cache) {
        cache->entries.emplace(schedule, cost);
        ++cache->misses;
    }
    return cost;
}

// ---------------------------------------------------------------------------
// Helpers shared by the searches

namespace detail {

inline std::vector<FrequencyPair> pair_grid(const DeviceProfile& p) {
    const auto cg = grid_points(p.cpu_min_ghz, p.cpu_max_ghz, p.grid_step_ghz);
    const auto gg = grid_points(p.gpu_min_ghz, p.gpu_max_ghz, p.grid_step_ghz);
    std::vector<FrequencyPair> pairs;
    pairs.reserve(cg.size() * gg.size());
    for (double c : cg)
        for (double g : gg) pairs.push_back({c, g});
    return pairs;
}

inline double freq_sum(const Schedule& s) {
    double sum = 0.0;
    for (const auto& fp : s.layers) sum += fp.cpu_ghz + fp.gpu_ghz;
    return sum;
}

inline bool schedule_less_lex(const Schedule& a, const Schedule& b) {
    for (int i = 0; i < a.size() && i < b.size(); ++i) {
        const auto si = static_cast<std::size_t>(i);
        if (a.layers[si].cpu_ghz != b.layers[si].cpu_ghz)
            return a.layers[si].cpu_ghz < b.layers[si].cpu_ghz;
        if (a.layers[si].gpu_ghz != b.layers[si].gpu_ghz)
            return a.layers[si].gpu_ghz < b.layers[si].gpu_ghz;
    }
    return a.size() < b.size();
}

// Deterministic preference order for equal-energy schedules: lower total
// frequency, then lexicographic.
inline bool schedule_preferred(double energy_a, const Schedule& a, double energy_b,
                               const Schedule& b) {
    if (energy_a != energy_b) return energy_a < energy_b;
    const double fa = freq_sum(a), fb = freq_sum(b);
    if (fa != fb) return fa < fb;
    return schedule_less_lex(a, b);
}

inline int tightest_layer(const CostTable& table, const DeviceProfile& profile, int layer_count) {
    const FrequencyPair fmax = max_pair(profile);
    int worst = 1;
    double worst_lat = -1.0;
    for (int i = 0; i < layer_count; ++i) {
        const double lat = layer_latency_ms(profile, table.layers[static_cast<std::size_t>(i)], fmax);
        if (lat > worst_lat) {
            worst_lat = lat;
            worst = table.layers[static_cast<std::size_t>(i)].layer_index;
        }
    }
    return worst;
}

[[noreturn]] inline void throw_infeasible(const CostTable& table, const DeviceProfile& profile,
                                          int layer_count, double budget) {
    std::ostringstream os;
    os << "no schedule meets the latency budget of " << budget << " ms for " << layer_count
       << " layers on '" << profile.name << "'; tightest layer is "
       << tightest_layer(table, profile, layer_count);
    throw std::runtime_error(os.str());
}

}  // namespace detail

// Budget actually applied by a search: an explicit budget wins; otherwise the
// EnergyWithBudget objective derives one from the all-max schedule.
inline std::optional<double> effective_latency_budget(const SearchConfig& cfg,
                                                      const CostTable& table,
                                                      const DeviceProfile& profile,
                                                      int layer_count) {
    if (cfg.latency_budget_ms) return cfg.latency_budget_ms;
    if (cfg.objective != SearchObjective::EnergyWithBudget) return std::nullopt;
    const double max_lat = table_latency_ms(profile, table, max_pair(profile), layer_count);
    return max_lat * 1.15;
}

// ---------------------------------------------------------------------------
// Coordinate descent search (one coordinate = one layer, candidates are whole
// CPU/GPU pairs). Starts from the grid midpoint, or from the all-max schedule
// when a budget rules the midpoint out; each sweep samples N candidate pairs
// for the layer (always keeping the current pair and, when N allows, both
// grid extremes), commits the best, and the final answer is the best feasible
// schedule in the cache.

inline SearchResult cds_search(int layer_count, const CostTable& table,
                               const DeviceProfile& profile, const SearchConfig& cfg,
                               ProfileCache* external_cache = nullptr) {
    cfg.validate();
    profile.validate();
    if (layer_count < 1 || layer_count > table.total_layers())
        throw std::invalid_argument("cds_search: layer count out of range");

    const auto pairs = detail::pair_grid(profile);
    const int grid_n = static_cast<int>(pairs.size());
    const std::optional<double> budget =
        effective_latency_budget(cfg, table, profile, layer_count);
    const auto feasible = [&](const ScheduleCost& c) {
        return !budget || c.latency_ms <= *budget + 1e-9;
    };

    ProfileCache local_cache;
    ProfileCache& cache = external_cache ? *external_cache : local_cache;
    const long long misses_before = cache.misses;
    Rng rng(mix64(cfg.seed, 0xcd5ULL));

    // Current point: uniform midpoint pair. Under a latency budget an
    // infeasible midpoint start is replaced by the all-max schedule (the point
    // the default budget derives from); coordinate moves cannot pay the
    // switch overhead down from a uniformly slow start.
    const auto cg = grid_points(profile.cpu_min_ghz, profile.cpu_max_ghz, profile.grid_step_ghz);
    const auto gg = grid_points(profile.gpu_min_ghz, profile.gpu_max_ghz, profile.grid_step_ghz);
    FrequencyPair start{cg[(cg.size() - 1) / 2], gg[(gg.size() - 1) / 2]};
    if (budget && table_latency_ms(profile, table, start, layer_count) > *budget)
        start = max_pair(profile);
    Schedule current;
    current.layers.assign(static_cast<std::size_t>(layer_count), start);

    SearchResult result;
    result.latency_budget_ms = budget;
    result.nominal_budget = static_cast<long long>(cfg.rounds) * layer_count *
                            cfg.candidates_per_coordinate;

    bool have_best = false;
    Schedule best;
    ScheduleCost best_cost;
    auto consider = [&](const Schedule& s, const ScheduleCost& c) {
        if (!feasible(c)) return;
        if (!have_best || detail::schedule_preferred(c.energy_j, s, best_cost.energy_j, best)) {
            best = s;
            best_cost = c;
            have_best = true;
        }
    };

    {
        const ScheduleCost c0 = evaluate_schedule(current, table, profile, &cache);
        consider(current, c0);
        if (have_best) result.best_energy_history.push_back(best_cost.energy_j);
    }

    const int n_cand = std::min(cfg.candidates_per_coordinate, grid_n);
    std::vector<int> cand_idx;
    for (int round = 0; round < cfg.rounds; ++round) {
        for (int layer = 0; layer < layer_count; ++layer) {
            const auto sl = static_cast<std::size_t>(layer);

            // Candidate pair indices: current, extremes, then random fill.
            cand_idx.clear();
            const auto cur_it = std::find(pairs.begin(), pairs.end(), current.layers[sl]);
            const int cur_idx = static_cast<int>(cur_it - pairs.begin());
            auto push_unique = [&](int idx) {
                if (std::find(cand_idx.begin(), cand_idx.end(), idx) == cand_idx.end())
                    cand_idx.push_back(idx);
            };
            push_unique(cur_idx);
            if (n_cand >= 3) {
                push_unique(0);
                push_unique(grid_n - 1);
            }
            if (static_cast<int>(cand_idx.size()) < n_cand) {
                const auto perm = rng.sample_without_replacement(static_cast<std::size_t>(grid_n),
                                                                 static_cast<std::size_t>(grid_n));
                for (std::size_t pi = 0;
                     pi < perm.size() && static_cast<int>(cand_idx.size()) < n_cand; ++pi)
                    push_unique(static_cast<int>(perm[pi]));
            }

            // Evaluate candidates; commit the best feasible by energy. When
            // nothing is feasible yet, move toward feasibility by latency so
            // a tight budget cannot strand the search at its starting point.
            int commit = cur_idx;
            double commit_energy = std::numeric_limits<double>::infinity();
            double commit_latency = std::numeric_limits<double>::infinity();
            bool commit_feasible = false;
            for (int idx : cand_idx) {
                Schedule cand = current;
                cand.layers[sl] = pairs[static_cast<std::size_t>(idx)];
                const ScheduleCost c = evaluate_schedule(cand, table, profile, &cache);
                consider(cand, c);
                const bool f = feasible(c);
                bool better;
                if (f != commit_feasible) {
                    better = f;
                } else if (f) {
                    better = c.energy_j < commit_energy ||
                             (c.energy_j == commit_energy && c.latency_ms < commit_latency);
                } else {
                    better = c.latency_ms < commit_latency;
                }
                if (better) {
                    commit = idx;
                    commit_energy = c.energy_j;
                    commit_latency = c.latency_ms;
                    commit_feasible = f;
                }
            }
            current.layers[sl] = pairs[static_cast<std::size_t>(commit)];
            if (have_best) result.best_energy_history.push_back(best_cost.energy_j);
        }
    }

    if (!have_best) detail::throw_infeasible(table, profile, layer_count, budget.value_or(0.0));
    result.schedule = best;
    result.cost = best_cost;
    result.evaluations = cache.misses - misses_before;
    return result;
}

// ---------------------------------------------------------------------------
// Random whole-schedule search (the E4-R baseline): samples eval_budget
// schedules uniformly on the grid and returns the lowest-energy feasible one.

inline SearchResult random_search(int layer_count, const CostTable& table,
                                  const DeviceProfile& profile, long long eval_budget,
                                  const SearchConfig& cfg,
                                  ProfileCache* external_cache = nullptr) {
    cfg.validate();
    profile.validate();
    if (layer_count < 1 || layer_count > table.total_layers())
        throw std::invalid_argument("random_search: layer count out of range");
    if (eval_budget < 1) throw std::invalid_argument("random_search: evaluation budget < 1");

    const auto pairs = detail::pair_grid(profile);
    const std::optional<double> budget =
        effective_latency_budget(cfg, table, profile, layer_count);
    ProfileCache local_cache;
    ProfileCache& cache = external_cache ? *external_cache : local_cache;
    const long long misses_before = cache.misses;
    Rng rng(mix64(cfg.seed, 0xe42ULL));

    SearchResult result;
    result.latency_budget_ms = budget;
    result.nominal_budget = eval_budget;

    bool have_best = false;
    Schedule best;
    ScheduleCost best_cost;
    Schedule cand;
    cand.layers.resize(static_cast<std::size_t>(layer_count));
    for (long long i = 0; i < eval_budget; ++i) {
        for (auto& fp : cand.layers)
            fp = pairs[static_cast<std::size_t>(rng.below(pairs.size()))];
        const ScheduleCost c = evaluate_schedule(cand, table, profile, &cache);
        if (budget && c.latency_ms > *budget + 1e-9) continue;
        if (!have_best ||
            detail::schedule_preferred(c.energy_j, cand, best_cost.energy_j, best)) {
            best = cand;
            best_cost = c;
            have_best = true;
            result.best_energy_history.push_back(best_cost.energy_j);
        }
    }
    if (!have_best) detail::throw_infeasible(table, profile, layer_count, budget.value_or(0.0));
    result.schedule = best;
    result.cost = best_cost;
    result.evaluations = cache.misses - misses_before;
    return result;
}

// ---------------------------------------------------------------------------
// Exhaustive oracle. Guarded to one million schedules; ties break toward the
// lower total frequency sum, then lexicographically.

inline SearchResult brute_force(int layer_count, const CostTable& table,
                                const DeviceProfile& profile,
                                std::optional<double> latency_budget_ms = std::nullopt) {
    profile.validate();
    if (layer_count < 1 || layer_count > table.total_layers())
        throw std::invalid_argument("brute_force: layer count out of range");
    const auto pairs = detail::pair_grid(profile);
    const double space = std::pow(static_cast<double>(pairs.size()), layer_count);
    if (space > 1e6)
        throw std::runtime_error("brute_force: instance too large (" + std::to_string(space) +
                                 " schedules, guard is 1e6)");

    ProfileCache cache;
    SearchResult result;
    result.latency_budget_ms = latency_budget_ms;

    Schedule cand;
    cand.layers.assign(static_cast<std::size_t>(layer_count), pairs.front());
    std::vector<std::size_t> odo(static_cast<std::size_t>(layer_count), 0);
    bool have_best = false;
    Schedule best;
    ScheduleCost best_cost;
    while (true) {
        for (int i = 0; i < layer_count; ++i)
            cand.layers[static_cast<std::size_t>(i)] = pairs[odo[static_cast<std::size_t>(i)]];
        const ScheduleCost c = evaluate_schedule(cand, table, profile, &cache);
        if (!latency_budget_ms || c.latency_ms <= *latency_budget_ms + 1e-9) {
            if (!have_best ||
                detail::schedule_preferred(c.energy_j, cand, best_cost.energy_j, best)) {
                best = cand;
                best_cost = c;
                have_best = true;
            }
        }
        int pos = layer_count - 1;
        while (pos >= 0) {
            if (++odo[static_cast<std::size_t>(pos)] < pairs.size()) break;
            odo[static_cast<std::size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
    }
    if (!have_best)
        detail::throw_infeasible(table, profile, layer_count, latency_budget_ms.value_or(0.0));
    result.schedule = best;
    result.cost = best_cost;
    result.evaluations = cache.misses;
    result.nominal_budget = cache.misses;
    return result;
}

// ---------------------------------------------------------------------------
// File formats

// Schedule file: one "layer_index,cpu_ghz,gpu_ghz" row per layer.
inline void save_schedule(const Schedule& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write schedule: " + path);
    char buf[80];
    for (int i = 0; i < s.size(); ++i) {
        const auto& fp = s.layers[static_cast<std::size_t>(i)];
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", i + 1, fp.cpu_ghz, fp.gpu_ghz);
        out << buf;
    }
}

inline Schedule load_schedule(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schedule: " + path);
    Schedule s;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
            throw std::runtime_error("schedule parse error at line " + std::to_string(lineno));
        s.layers.push_back({std::stod(b), std::stod(c)});
    }
    return s;
}

// Cache dump for audits: schedule hash, energy, latency per entry, sorted by
// energy for stable output.
inline void save_cache_dump(const ProfileCache& cache, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write cache dump: " + path);
    std::vector<std::pair<std::uint64_t, ScheduleCost>> rows;
    rows.reserve(cache.entries.size());
    detail::ScheduleHash hasher;
    for (const auto& [sched, cost] : cache.entries)
        rows.emplace_back(static_cast<std::uint64_t>(hasher(sched)), cost);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second.energy_j != b.second.energy_j) return a.second.energy_j < b.second.energy_j;
        return a.first < b.first;
    });
    out << "schedule_hash,energy_j,latency_ms\n";
    char buf[100];
    for (const auto& [h, cost] : rows) {
        std::snprintf(buf, sizeof(buf), "%016llx,%.9g,%.9g\n",
                      static_cast<unsigned long long>(h), cost.energy_j, cost.latency_ms);
        out << buf;
    }
}

}  // namespace eesim
