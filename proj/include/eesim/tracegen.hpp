#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eesim/prng.hpp"

namespace eesim {

// One video frame stand-in: a scalar complexity in [0,1] and a class label.
struct Frame {
    long long frame_id = 0;
    double complexity = 0.0;
    int label = 0;

    friend bool operator==(const Frame&, const Frame&) = default;
};

// A labeled frame sequence consumed in non-overlapping windows of
// window_length frames. A trailing partial window is ignored.
struct FrameTrace {
    std::vector<Frame> frames;
    int num_classes = 0;
    int window_length = 1;

    int num_windows() const {
        return static_cast<int>(frames.size()) / window_length;
    }

    friend bool operator==(const FrameTrace&, const FrameTrace&) = default;
};

enum class ComplexityDist { Uniform, Bimodal };

struct TraceGenConfig {
    int num_windows = 0;
    int num_classes = 2;
    int window_length = 20;
    ComplexityDist dist = ComplexityDist::Bimodal;
    double p_low = 0.5;      // bimodal: probability of the low mode
    double lo_mean = 0.2;
    double hi_mean = 0.8;
    double mode_sigma = 0.05;    // spread of a window's complexity around its mode
    double frame_jitter = 0.02;  // per-frame jitter around the window complexity
    std::uint64_t seed = 0;

    void validate() const {
        if (num_windows < 0) throw std::invalid_argument("trace gen: num_windows < 0");
        if (num_classes < 1) throw std::invalid_argument("trace gen: num_classes < 1");
        if (window_length < 1) throw std::invalid_argument("trace gen: window_length < 1");
        if (p_low < 0 || p_low > 1) throw std::invalid_argument("trace gen: p_low outside [0,1]");
        for (double m : {lo_mean, hi_mean})
            if (m < 0 || m > 1) throw std::invalid_argument("trace gen: mode mean outside [0,1]");
        if (mode_sigma < 0 || frame_jitter < 0)
            throw std::invalid_argument("trace gen: negative sigma");
    }
};

namespace detail {
// Complexities are rendered with 6 fractional digits, so generation quantizes
// to that grid to make save/load an identity.
inline double quantize6(double x) { return std::round(x * 1e6) / 1e6; }
}  // namespace detail

// Deterministic per seed. Frames within a window share one label; the window
// draws a complexity level from the configured distribution and each frame
// jitters around it. Frame ids start at a seed-derived block (a multiple of
// 1000) so traces generated from different seeds never alias downstream
// per-frame or per-scene derivations.
inline FrameTrace generate_trace(const TraceGenConfig& cfg) {
    cfg.validate();
    FrameTrace trace;
    trace.num_classes = cfg.num_classes;
    trace.window_length = cfg.window_length;
    trace.frames.reserve(static_cast<std::size_t>(cfg.num_windows) *
                         static_cast<std::size_t>(cfg.window_length));

    Rng rng(mix64(cfg.seed, 0x7261636567656eULL));
    long long frame_id =
        static_cast<long long>(mix64(cfg.seed, 0x6f6666736574ULL) % (1ULL << 34)) * 1000;
    for (int w = 0; w < cfg.num_windows; ++w) {
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
        double level = 0.0;
        switch (cfg.dist) {
            case ComplexityDist::Uniform:
                level = rng.uniform();
                break;
            case ComplexityDist::Bimodal: {
                const double mean = rng.uniform() < cfg.p_low ? cfg.lo_mean : cfg.hi_mean;
                level = rng.normal(mean, cfg.mode_sigma);
                break;
            }
        }
        level = std::clamp(level, 0.0, 1.0);
        for (int t = 0; t < cfg.window_length; ++t) {
            double c = std::clamp(level + rng.normal(0.0, cfg.frame_jitter), 0.0, 1.0);
            trace.frames.push_back({frame_id++, detail::quantize6(c), label});
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace file: header "num_classes,window_length", then one
// "frame_id,complexity,label" row per frame (complexity with 6 fractional
// digits).

inline void save_trace(const FrameTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace: " + path);
    out << trace.num_classes << "," << trace.window_length << "\n";
    char buf[80];
    for (const auto& f : trace.frames) {
        std::snprintf(buf, sizeof(buf), "%lld,%.6f,%d\n", f.frame_id, f.complexity, f.label);
        out << buf;
    }
}

inline FrameTrace load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace: " + path);
    auto parse_error = [&](int lineno, const std::string& what) {
        return std::runtime_error("trace parse error at " + path + ":" +
                                  std::to_string(lineno) + ": " + what);
    };

    FrameTrace trace;
    std::string line;
    int lineno = 0;
    if (!std::getline(in, line)) throw parse_error(1, "missing header line");
    ++lineno;
    {
        std::stringstream ss(line);
        std::string k, t;
        if (!std::getline(ss, k, ',') || !std::getline(ss, t))
            throw parse_error(lineno, "header must be num_classes,window_length");
        try {
            trace.num_classes = std::stoi(k);
            trace.window_length = std::stoi(t);
        } catch (const std::exception&) {
            throw parse_error(lineno, "header must be num_classes,window_length");
        }
        if (trace.num_classes < 1 || trace.window_length < 1)
            throw parse_error(lineno, "header values must be >= 1");
    }

    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
            throw parse_error(lineno, "expected frame_id,complexity,label");
        Frame f;
        try {
            f.frame_id = std::stoll(a);
            f.complexity = std::stod(b);
            f.label = std::stoi(c);
        } catch (const std::exception&) {
            throw parse_error(lineno, "expected frame_id,complexity,label");
        }
        if (f.complexity < 0.0 || f.complexity > 1.0)
            throw parse_error(lineno, "complexity " + b + " outside [0,1]");
        if (f.label < 0 || f.label >= trace.num_classes)
            throw parse_error(lineno, "label " + c + " outside [0," +
                                          std::to_string(trace.num_classes) + ")");
        trace.frames.push_back(f);
    }
    return trace;
}

}  // namespace eesim
