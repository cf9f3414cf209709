#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace eesim {

// One CPU/GPU clock setting, both in GHz. Valid pairs lie on the owning
// device's discrete grid.
struct FrequencyPair {
    double cpu_ghz = 0.0;
    double gpu_ghz = 0.0;

    friend bool operator==(const FrequencyPair&, const FrequencyPair&) = default;
};

// Frequency ranges, grid, and power-model coefficients of one edge device.
// Power model: P(c, g) = static_power_w + cpu_power_coeff*c^3 + gpu_power_coeff*g^3,
// clamped at power_cap_w.
struct DeviceProfile {
    std::string name;
    double cpu_min_ghz = 0.1;
    double cpu_max_ghz = 0.1;
    double gpu_min_ghz = 0.1;
    double gpu_max_ghz = 0.1;
    double grid_step_ghz = 0.1;
    double static_power_w = 0.0;    // P0
    double cpu_power_coeff = 0.0;   // W / GHz^3
    double gpu_power_coeff = 0.0;   // W / GHz^3
    double switch_overhead_ms = 0.5;
    double power_cap_w = 0.0;

    void validate() const;
};

// Compute demand of one layer block, in GHz*ms: the time this block takes at
// frequency f is work/f on the respective processor.
struct LayerCost {
    int layer_index = 0;  // 1-based
    double cpu_work = 0.0;
    double gpu_work = 0.0;
};

// Per-layer cost table for one model stand-in, with the layer indices at
// which the exit points sit (cumulative layer counts).
struct CostTable {
    std::string name;
    std::vector<LayerCost> layers;
    std::vector<int> exit_layers;

    int total_layers() const { return static_cast<int>(layers.size()); }
    int num_exits() const { return static_cast<int>(exit_layers.size()); }

    // Layers executed when leaving at exit point e (1-based); 0 selects the
    // full model.
    int layers_for_exit(int exit_index) const {
        if (exit_index == 0) return total_layers();
        if (exit_index < 1 || exit_index > num_exits())
            throw std::domain_error("exit index out of range: " + std::to_string(exit_index));
        return exit_layers[static_cast<std::size_t>(exit_index - 1)];
    }

    void validate() const;
};

// One (frequency -> measured latency/power) observation used to fit the
// device model. Latency refers to a full-model inference at that setting.
struct CalibrationAnchor {
    FrequencyPair freq;
    double latency_ms = 0.0;
    double power_w = 0.0;
};

struct AnchorResidual {
    double latency_rel = 0.0;
    double power_rel = 0.0;
};

struct CalibrationResult {
    DeviceProfile profile;
    CostTable table;  // work columns multiplied by work_scale
    double work_scale = 1.0;
    std::vector<AnchorResidual> residuals;
    double max_residual = 0.0;
};

// ---------------------------------------------------------------------------
// Grid handling

namespace detail {
constexpr double kGridTol = 1e-6;

inline int grid_count(double lo, double hi, double step) {
    return static_cast<int>(std::floor((hi - lo) / step + kGridTol)) + 1;
}
}  // namespace detail

inline std::vector<double> grid_points(double lo, double hi, double step) {
    const int n = detail::grid_count(lo, hi, step);
    std::vector<double> pts(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pts[static_cast<std::size_t>(i)] = lo + i * step;
    return pts;
}

inline bool on_grid(double f, double lo, double hi, double step) {
    if (f < lo - detail::kGridTol || f > hi + detail::kGridTol) return false;
    const double k = std::round((f - lo) / step);
    return std::abs(f - (lo + k * step)) <= detail::kGridTol;
}

inline double snap_to_grid(double f, double lo, double hi, double step) {
    f = std::clamp(f, lo, hi);
    double k = std::round((f - lo) / step);
    const double kmax = static_cast<double>(detail::grid_count(lo, hi, step) - 1);
    k = std::clamp(k, 0.0, kmax);
    return lo + k * step;
}

inline bool is_valid_frequency(const DeviceProfile& p, const FrequencyPair& fp) {
    return on_grid(fp.cpu_ghz, p.cpu_min_ghz, p.cpu_max_ghz, p.grid_step_ghz) &&
           on_grid(fp.gpu_ghz, p.gpu_min_ghz, p.gpu_max_ghz, p.grid_step_ghz);
}

inline FrequencyPair snap_pair(const DeviceProfile& p, double cpu_ghz, double gpu_ghz) {
    return {snap_to_grid(cpu_ghz, p.cpu_min_ghz, p.cpu_max_ghz, p.grid_step_ghz),
            snap_to_grid(gpu_ghz, p.gpu_min_ghz, p.gpu_max_ghz, p.grid_step_ghz)};
}

inline void require_valid_frequency(const DeviceProfile& p, const FrequencyPair& fp) {
    if (!is_valid_frequency(p, fp)) {
        std::ostringstream os;
        os << "frequency pair (" << fp.cpu_ghz << ", " << fp.gpu_ghz
           << ") GHz is off-grid or out of range for device '" << p.name << "'";
        throw std::domain_error(os.str());
    }
}

inline FrequencyPair max_pair(const DeviceProfile& p) {
    return snap_pair(p, p.cpu_max_ghz, p.gpu_max_ghz);
}

inline FrequencyPair min_pair(const DeviceProfile& p) {
    return {p.cpu_min_ghz, p.gpu_min_ghz};
}

// ---------------------------------------------------------------------------
// Latency / power / energy

// Pre-clamp model power. Exposed for calibration and validation.
inline double device_power_unclamped_w(const DeviceProfile& p, const FrequencyPair& fp) {
    const double c = fp.cpu_ghz;
    const double g = fp.gpu_ghz;
    return p.static_power_w + p.cpu_power_coeff * c * c * c + p.gpu_power_coeff * g * g * g;
}

inline void DeviceProfile::validate() const {
    auto fail = [&](const std::string& what) {
        throw std::invalid_argument("device profile '" + name + "': " + what);
    };
    if (cpu_min_ghz < 0.1 - detail::kGridTol || gpu_min_ghz < 0.1 - detail::kGridTol)
        fail("minimum clock frequency below 0.1 GHz");
    if (cpu_max_ghz < cpu_min_ghz || gpu_max_ghz < gpu_min_ghz) fail("max below min");
    if (grid_step_ghz <= 0) fail("grid step must be positive");
    if (static_power_w < 0 || cpu_power_coeff < 0 || gpu_power_coeff < 0)
        fail("power coefficients must be non-negative");
    if (switch_overhead_ms < 0) fail("switch overhead must be non-negative");
    if (power_cap_w <= 0) fail("power cap must be positive");
    const FrequencyPair fmax{cpu_max_ghz, gpu_max_ghz};
    if (device_power_unclamped_w(*this, fmax) > power_cap_w + 1e-9)
        fail("modeled power at max frequencies exceeds the power cap");
}

inline void CostTable::validate() const {
    auto fail = [&](const std::string& what) {
        throw std::invalid_argument("cost table '" + name + "': " + what);
    };
    std::vector<int> seen;
    for (const auto& l : layers) {
        if (l.cpu_work < 0 || l.gpu_work < 0) fail("negative work");
        seen.push_back(l.layer_index);
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
        fail("duplicate layer index");
    int prev = 0;
    for (int e : exit_layers) {
        if (e <= prev || e > total_layers()) fail("exit layers must be increasing and within range");
        prev = e;
    }
}

inline double layer_latency_ms(const DeviceProfile& p, const LayerCost& cost,
                               const FrequencyPair& fp) {
    require_valid_frequency(p, fp);
    return cost.cpu_work / fp.cpu_ghz + cost.gpu_work / fp.gpu_ghz;
}

inline double device_power_w(const DeviceProfile& p, const FrequencyPair& fp) {
    require_valid_frequency(p, fp);
    return std::min(device_power_unclamped_w(p, fp), p.power_cap_w);
}

inline double layer_energy_j(const DeviceProfile& p, const LayerCost& cost,
                             const FrequencyPair& fp) {
    return device_power_w(p, fp) * layer_latency_ms(p, cost, fp) / 1000.0;
}

// Latency of the first layer_count layers of the table at one fixed setting,
// without governor switching overhead.
inline double table_latency_ms(const DeviceProfile& p, const CostTable& table,
                               const FrequencyPair& fp, int layer_count = -1) {
    if (layer_count < 0) layer_count = table.total_layers();
    double total = 0.0;
    for (int i = 0; i < layer_count; ++i)
        total += layer_latency_ms(p, table.layers[static_cast<std::size_t>(i)], fp);
    return total;
}

// ---------------------------------------------------------------------------
// Calibration
//
// Free parameters: P0, a_c, a_g and a single multiplicative scale on the cost
// table's work columns. The two sub-fits are linear least squares:
//   latency_i = scale * table_latency(freq_i)            -> 1-d closed form
//   power_i   = P0 + a_c*C_i^3 + a_g*G_i^3               -> 3x3 normal equations
// With fewer than three independent power anchors the template's coefficient
// proportions are kept and scaled by one factor.

namespace detail {

// Solves A x = b for a symmetric 3x3 system via Gaussian elimination with
// partial pivoting. Returns false when (numerically) singular.
inline bool solve3(std::array<std::array<double, 3>, 3> a, std::array<double, 3> b,
                   std::array<double, 3>& x) {
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < 1e-12) return false;
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (int r = col + 1; r < 3; ++r) {
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < 3; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    for (int r = 2; r >= 0; --r) {
        double s = b[r];
        for (int c = r + 1; c < 3; ++c) s -= a[r][c] * x[c];
        x[r] = s / a[r][r];
    }
    return true;
}

}  // namespace detail

inline CalibrationResult calibrate(const DeviceProfile& profile_template,
                                   const std::vector<CalibrationAnchor>& anchors,
                                   const CostTable& table) {
    if (anchors.empty())
        throw std::invalid_argument("calibrate: at least one anchor required");
    for (const auto& a : anchors) {
        if (a.latency_ms <= 0 || a.power_w <= 0)
            throw std::invalid_argument("calibrate: anchor latency and power must be positive");
        if (a.power_w > profile_template.power_cap_w)
            throw std::runtime_error("calibrate: anchor power " + std::to_string(a.power_w) +
                                     " W exceeds device power cap");
        require_valid_frequency(profile_template, a.freq);
    }

    CalibrationResult result;
    result.profile = profile_template;
    result.table = table;

    // Work scale from the latency anchors.
    double num = 0.0, den = 0.0;
    for (const auto& a : anchors) {
        const double base = table_latency_ms(profile_template, table, a.freq);
        num += base * a.latency_ms;
        den += base * base;
    }
    if (den <= 0) throw std::runtime_error("calibrate: cost table has zero total work");
    result.work_scale = num / den;
    for (auto& l : result.table.layers) {
        l.cpu_work *= result.work_scale;
        l.gpu_work *= result.work_scale;
    }

    // Power parameters.
    const auto cube = [](double f) { return f * f * f; };
    bool fitted = false;
    if (anchors.size() >= 3) {
        std::array<std::array<double, 3>, 3> ata{};
        std::array<double, 3> atb{};
        for (const auto& a : anchors) {
            const std::array<double, 3> row{1.0, cube(a.freq.cpu_ghz), cube(a.freq.gpu_ghz)};
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) ata[r][c] += row[r] * row[c];
                atb[r] += row[r] * a.power_w;
            }
        }
        std::array<double, 3> x{};
        if (detail::solve3(ata, atb, x) && x[0] >= 0 && x[1] >= 0 && x[2] >= 0) {
            result.profile.static_power_w = x[0];
            result.profile.cpu_power_coeff = x[1];
            result.profile.gpu_power_coeff = x[2];
            fitted = true;
        }
    }
    if (!fitted) {
        // Scale the template's power curve by one factor.
        double pn = 0.0, pd = 0.0;
        for (const auto& a : anchors) {
            const double q = device_power_unclamped_w(profile_template, a.freq);
            pn += q * a.power_w;
            pd += q * q;
        }
        if (pd <= 0)
            throw std::runtime_error("calibrate: template power model is identically zero");
        const double k = pn / pd;
        result.profile.static_power_w = profile_template.static_power_w * k;
        result.profile.cpu_power_coeff = profile_template.cpu_power_coeff * k;
        result.profile.gpu_power_coeff = profile_template.gpu_power_coeff * k;
    }

    const FrequencyPair fmax{result.profile.cpu_max_ghz, result.profile.gpu_max_ghz};
    if (device_power_unclamped_w(result.profile, fmax) > result.profile.power_cap_w + 1e-9)
        throw std::runtime_error(
            "calibrate: fitted power model exceeds the power cap at max frequencies");
    result.profile.validate();

    for (const auto& a : anchors) {
        AnchorResidual r;
        const double lat = table_latency_ms(result.profile, result.table, a.freq);
        const double pow = device_power_w(result.profile, a.freq);
        r.latency_rel = std::abs(lat - a.latency_ms) / a.latency_ms;
        r.power_rel = std::abs(pow - a.power_w) / a.power_w;
        result.residuals.push_back(r);
        result.max_residual = std::max({result.max_residual, r.latency_rel, r.power_rel});
    }
    return result;
}

// ---------------------------------------------------------------------------
// Built-in device profiles and cost tables.
//
// Ranges follow the published per-device maxima; every device scales down to
// 0.1 GHz. Power coefficients are template values sized so that modeled power
// at max frequencies equals the device cap (25% static, 45% CPU, 30% GPU);
// calibration replaces them with fitted values.

inline DeviceProfile make_template_profile(std::string name, double cpu_max, double gpu_max,
                                           double power_cap) {
    DeviceProfile p;
    p.name = std::move(name);
    p.cpu_min_ghz = 0.1;
    p.cpu_max_ghz = cpu_max;
    p.gpu_min_ghz = 0.1;
    p.gpu_max_ghz = gpu_max;
    p.grid_step_ghz = 0.1;
    p.power_cap_w = power_cap;
    p.static_power_w = 0.25 * power_cap;
    p.cpu_power_coeff = 0.45 * power_cap / (cpu_max * cpu_max * cpu_max);
    p.gpu_power_coeff = 0.30 * power_cap / (gpu_max * gpu_max * gpu_max);
    p.switch_overhead_ms = 0.5;
    return p;
}

inline const std::vector<DeviceProfile>& builtin_device_profiles() {
    static const std::vector<DeviceProfile> profiles = [] {
        std::vector<DeviceProfile> v;
        v.push_back(make_template_profile("jetson_nano", 1.4, 0.9, 10.0));
        v.push_back(make_template_profile("jetson_tx2", 1.4, 1.3, 15.0));
        // The Xavier NX CPU tops out at 1.9 GHz (its nominal table entry lists
        // the 1.4 GHz power mode).
        v.push_back(make_template_profile("jetson_xavier_nx", 1.9, 1.1, 20.0));
        v.push_back(make_template_profile("jetson_orin_nano", 1.5, 0.6, 15.0));
        v.push_back(make_template_profile("jetson_agx_orin", 2.2, 1.3, 60.0));
        for (const auto& p : v) p.validate();
        return v;
    }();
    return profiles;
}

inline std::optional<DeviceProfile> find_device_profile(const std::string& name) {
    for (const auto& p : builtin_device_profiles())
        if (p.name == name) return p;
    return std::nullopt;
}

inline std::vector<std::string> builtin_device_names() {
    std::vector<std::string> names;
    for (const auto& p : builtin_device_profiles()) names.push_back(p.name);
    return names;
}

// Measured full-model operating points used as default calibration anchors.
inline std::optional<CalibrationAnchor> builtin_anchor(const std::string& device_name) {
    if (device_name == "jetson_xavier_nx")
        return CalibrationAnchor{{1.9, 1.1}, 30.0, 8.6};
    if (device_name == "jetson_agx_orin")
        return CalibrationAnchor{{2.2, 1.3}, 6.3, 34.6};
    return std::nullopt;
}

inline CostTable make_uniform_cost_table(std::string name, int num_layers,
                                         std::vector<int> exit_layers,
                                         double cpu_work = 1.0, double gpu_work = 1.0) {
    CostTable t;
    t.name = std::move(name);
    for (int i = 1; i <= num_layers; ++i)
        t.layers.push_back({i, cpu_work, gpu_work});
    t.exit_layers = std::move(exit_layers);
    t.validate();
    return t;
}

inline const std::vector<CostTable>& builtin_cost_tables() {
    static const std::vector<CostTable> tables = [] {
        std::vector<CostTable> v;
        v.push_back(make_uniform_cost_table("effnet_b0", 16, {3, 6, 9, 12, 16}));
        v.push_back(make_uniform_cost_table("mobilenet_v2", 19, {4, 8, 12, 16, 19}));
        return v;
    }();
    return tables;
}

inline std::optional<CostTable> find_cost_table(const std::string& name) {
    for (const auto& t : builtin_cost_tables())
        if (t.name == name) return t;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// File formats

inline void to_json(nlohmann::json& j, const DeviceProfile& p) {
    j = nlohmann::json{{"name", p.name},
                       {"cpu_range_ghz", {p.cpu_min_ghz, p.cpu_max_ghz}},
                       {"gpu_range_ghz", {p.gpu_min_ghz, p.gpu_max_ghz}},
                       {"grid_step_ghz", p.grid_step_ghz},
                       {"static_power_w", p.static_power_w},
                       {"cpu_power_coeff", p.cpu_power_coeff},
                       {"gpu_power_coeff", p.gpu_power_coeff},
                       {"switch_overhead_ms", p.switch_overhead_ms},
                       {"power_cap_w", p.power_cap_w}};
}

inline void from_json(const nlohmann::json& j, DeviceProfile& p) {
    j.at("name").get_to(p.name);
    p.cpu_min_ghz = j.at("cpu_range_ghz").at(0).get<double>();
    p.cpu_max_ghz = j.at("cpu_range_ghz").at(1).get<double>();
    p.gpu_min_ghz = j.at("gpu_range_ghz").at(0).get<double>();
    p.gpu_max_ghz = j.at("gpu_range_ghz").at(1).get<double>();
    j.at("grid_step_ghz").get_to(p.grid_step_ghz);
    j.at("static_power_w").get_to(p.static_power_w);
    j.at("cpu_power_coeff").get_to(p.cpu_power_coeff);
    j.at("gpu_power_coeff").get_to(p.gpu_power_coeff);
    j.at("switch_overhead_ms").get_to(p.switch_overhead_ms);
    j.at("power_cap_w").get_to(p.power_cap_w);
}

inline DeviceProfile load_device_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open device profile: " + path);
    nlohmann::json j;
    in >> j;
    DeviceProfile p = j.get<DeviceProfile>();
    p.validate();
    return p;
}

inline void save_device_profile(const DeviceProfile& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write device profile: " + path);
    nlohmann::json j = p;
    out << j.dump(2) << "\n";
}

// Cost-table file: optional "# exits: a,b,c" header, then one
// "layer_index,cpu_work,gpu_work" row per layer.
inline CostTable load_cost_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open cost table: " + path);
    CostTable t;
    t.name = path;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("exits:");
            if (pos != std::string::npos) {
                std::stringstream ss(line.substr(pos + 6));
                std::string tok;
                while (std::getline(ss, tok, ','))
                    if (!tok.empty()) t.exit_layers.push_back(std::stoi(tok));
            }
            continue;
        }
        std::stringstream ss(line);
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
            throw std::runtime_error("cost table parse error at line " + std::to_string(lineno) +
                                     ": expected layer_index,cpu_work,gpu_work");
        LayerCost lc;
        try {
            lc.layer_index = std::stoi(a);
            lc.cpu_work = std::stod(b);
            lc.gpu_work = std::stod(c);
        } catch (const std::exception&) {
            throw std::runtime_error("cost table parse error at line " + std::to_string(lineno));
        }
        t.layers.push_back(lc);
    }
    if (t.exit_layers.empty() && !t.layers.empty()) {
        // Default: five evenly spaced exits ending at the last layer.
        const int n = t.total_layers();
        const int e = std::min(5, n);
        for (int i = 1; i <= e; ++i) t.exit_layers.push_back(i * n / e);
    }
    t.validate();
    return t;
}

inline void save_cost_table(const CostTable& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write cost table: " + path);
    out << "# exits:";
    for (std::size_t i = 0; i < t.exit_layers.size(); ++i)
        out << (i ? "," : " ") << t.exit_layers[i];
    out << "\n";
    char buf[96];
    for (const auto& l : t.layers) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", l.layer_index, l.cpu_work, l.gpu_work);
        out << buf;
    }
}

}  // namespace eesim
