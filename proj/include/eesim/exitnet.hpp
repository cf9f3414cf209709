#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eesim/prng.hpp"
#include "eesim/tracegen.hpp"

namespace eesim {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Small dense kernels (row-major matrices).

namespace lin {

inline void matvec(const double* w, int rows, int cols, const double* x, double* y) {
    for (int r = 0; r < rows; ++r) {
        const double* wr = w + static_cast<std::size_t>(r) * cols;
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += wr[c] * x[c];
        y[r] = s;
    }
}

inline void matvec_acc(const double* w, int rows, int cols, const double* x, double* y) {
    for (int r = 0; r < rows; ++r) {
        const double* wr = w + static_cast<std::size_t>(r) * cols;
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += wr[c] * x[c];
        y[r] += s;
    }
}

// y += W^T x  (x has `rows` entries, y has `cols`)
inline void matvec_t_acc(const double* w, int rows, int cols, const double* x, double* y) {
    for (int r = 0; r < rows; ++r) {
        const double* wr = w + static_cast<std::size_t>(r) * cols;
        const double xr = x[r];
        for (int c = 0; c < cols; ++c) y[c] += wr[c] * xr;
    }
}

// W += a (outer) b
inline void outer_acc(double* w, const double* a, int rows, const double* b, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* wr = w + static_cast<std::size_t>(r) * cols;
        const double ar = a[r];
        for (int c = 0; c < cols; ++c) wr[c] += ar * b[c];
    }
}

inline void add_acc(double* y, const double* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += x[i];
}

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void softmax(const double* in, double* out, int n) {
    double m = in[0];
    for (int i = 1; i < n; ++i) m = std::max(m, in[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - m);
        sum += out[i];
    }
    for (int i = 0; i < n; ++i) out[i] /= sum;
}

// Cross entropy -log p[target] from raw logits, numerically stable.
inline double cross_entropy(const double* logits, int n, int target) {
    double m = logits[0];
    for (int i = 1; i < n; ++i) m = std::max(m, logits[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(logits[i] - m);
    return std::log(sum) + m - logits[target];
}

// Binary cross entropy from the pre-sigmoid value.
inline double bce_from_logit(double pre, double target) {
    return std::max(pre, 0.0) - pre * target + std::log1p(std::exp(-std::abs(pre)));
}

}  // namespace lin

// ---------------------------------------------------------------------------
// Configuration and parameter layout

enum class GateTargetMode {
    ExitSafe,  // gate label 1 iff the exit's classifier currently predicts y
    RawLabel   // literal binary label (only meaningful for two-class traces)
};

struct ExitNetConfig {
    int feature_dim = 64;  // d, even
    int num_exits = 5;     // E
    int window_length = 20;  // T
    int num_classes = 0;     // K
    std::array<int, 2> gate_hidden{64, 32};
    std::array<int, 2> attention_hidden{64, 32};  // carried in checkpoints; the
                                                  // attention score itself is bilinear
    double gate_threshold = 0.5;
    double learning_rate = 1e-4;
    int batch_size = 32;
    int epochs = 20;
    GateTargetMode gate_target = GateTargetMode::ExitSafe;
    std::uint64_t seed = 1;               // init + batch order
    std::uint64_t feature_seed = 0x5eedf00dULL;  // identity of the synthetic backbone
    double feature_noise = 1.5;   // per-frame noise stddev per unit complexity
    double scene_noise = 0.8;     // per-scene correlated noise stddev per unit complexity
    int scene_length = 40;        // frames sharing one scene draw

    void validate() const {
        if (feature_dim < 2 || feature_dim % 2 != 0)
            throw std::invalid_argument("exitnet: feature_dim must be even and >= 2");
        if (num_exits < 1) throw std::invalid_argument("exitnet: num_exits < 1");
        if (window_length < 1) throw std::invalid_argument("exitnet: window_length < 1");
        if (num_classes < 1) throw std::invalid_argument("exitnet: num_classes < 1");
        if (gate_hidden[0] < 1 || gate_hidden[1] < 1)
            throw std::invalid_argument("exitnet: gate hidden sizes must be >= 1");
        if (gate_threshold <= 0.0 || gate_threshold > 1.0)
            throw std::invalid_argument("exitnet: gate_threshold outside (0,1]");
        if (batch_size < 1) throw std::invalid_argument("exitnet: batch_size < 1");
        if (epochs < 0) throw std::invalid_argument("exitnet: epochs < 0");
        if (feature_noise < 0) throw std::invalid_argument("exitnet: feature_noise < 0");
        if (scene_noise < 0) throw std::invalid_argument("exitnet: scene_noise < 0");
        if (scene_length < 1) throw std::invalid_argument("exitnet: scene_length < 1");
    }
};

// Offsets of every parameter block inside the flat parameter vector.
struct ParamLayout {
    struct Block {
        std::string name;
        std::size_t offset = 0;
        std::size_t count = 0;
        int fan_in = 1;
    };

    struct LstmOffsets {
        std::array<std::size_t, 4> wx{}, wh{}, b{};  // gate order: i, f, g, o
    };
    struct GateOffsets {
        std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0;
    };
    struct HeadOffsets {
        std::size_t w = 0, b = 0;
    };

    std::array<LstmOffsets, 2> lstm;
    std::size_t attn_w1 = 0, attn_w2 = 0;
    std::vector<GateOffsets> gates;
    std::vector<HeadOffsets> classifiers;
    HeadOffsets aux;

    std::vector<Block> blocks;
    std::size_t total = 0;
};

inline ParamLayout make_layout(const ExitNetConfig& cfg) {
    ParamLayout lay;
    std::size_t pos = 0;
    auto add = [&](const std::string& name, std::size_t count, int fan_in) {
        lay.blocks.push_back({name, pos, count, fan_in});
        const std::size_t at = pos;
        pos += count;
        return at;
    };

    const int d = cfg.feature_dim;
    const auto dd = static_cast<std::size_t>(d) * d;
    static const char* gate_names[4] = {"i", "f", "g", "o"};
    for (int l = 0; l < 2; ++l) {
        for (int g = 0; g < 4; ++g) {
            const std::string base = "lstm" + std::to_string(l + 1) + "_" + gate_names[g];
            lay.lstm[l].wx[g] = add(base + "_wx", dd, d);
            lay.lstm[l].wh[g] = add(base + "_wh", dd, d);
            lay.lstm[l].b[g] = add(base + "_b", static_cast<std::size_t>(d), d);
        }
    }
    lay.attn_w1 = add("attn_w1", dd, d);
    lay.attn_w2 = add("attn_w2", dd, d);

    const int gin = 2 * d + 1;
    const int h1 = cfg.gate_hidden[0];
    const int h2 = cfg.gate_hidden[1];
    lay.gates.resize(static_cast<std::size_t>(cfg.num_exits));
    for (int e = 0; e < cfg.num_exits; ++e) {
        const std::string base = "gate" + std::to_string(e + 1);
        auto& g = lay.gates[static_cast<std::size_t>(e)];
        g.w1 = add(base + "_w1", static_cast<std::size_t>(h1) * gin, gin);
        g.b1 = add(base + "_b1", static_cast<std::size_t>(h1), gin);
        g.w2 = add(base + "_w2", static_cast<std::size_t>(h2) * h1, h1);
        g.b2 = add(base + "_b2", static_cast<std::size_t>(h2), h1);
        g.w3 = add(base + "_w3", static_cast<std::size_t>(h2), h2);
        g.b3 = add(base + "_b3", 1, h2);
    }

    const int k = cfg.num_classes;
    lay.classifiers.resize(static_cast<std::size_t>(cfg.num_exits));
    for (int e = 0; e < cfg.num_exits; ++e) {
        const std::string base = "cls" + std::to_string(e + 1);
        auto& c = lay.classifiers[static_cast<std::size_t>(e)];
        c.w = add(base + "_w", static_cast<std::size_t>(k) * d, d);
        c.b = add(base + "_b", static_cast<std::size_t>(k), d);
    }
    lay.aux.w = add("aux_w", static_cast<std::size_t>(k) * d, d);
    lay.aux.b = add("aux_b", static_cast<std::size_t>(k), d);

    lay.total = pos;
    return lay;
}

struct ExitNetModel {
    ExitNetConfig config;
    ParamLayout layout;
    Vec params;

    const double* at(std::size_t offset) const { return params.data() + offset; }
    double* at(std::size_t offset) { return params.data() + offset; }
};

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded.
inline ExitNetModel init_model(const ExitNetConfig& cfg) {
    cfg.validate();
    ExitNetModel m;
    m.config = cfg;
    m.layout = make_layout(cfg);
    m.params.assign(m.layout.total, 0.0);
    Rng rng(mix64(cfg.seed, 0x65786974ULL));
    for (const auto& b : m.layout.blocks) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
        for (std::size_t i = 0; i < b.count; ++i)
            m.params[b.offset + i] = rng.uniform(-bound, bound);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Synthetic per-frame features (the backbone stand-in)
//
// First d/2 dims: class prototype plus two noise terms whose stddevs grow
// linearly with frame complexity — an independent per-frame term, and a term
// shared by all frames of the same scene (scene_length consecutive frame
// ids). Frame averaging removes the first but not the second, so a hard
// scene keeps an accuracy floor no matter how many frames are pooled. Last
// d/2 dims: a fixed positive pattern scaled by the complexity value.
// Deterministic per (frame, seed).

inline Vec synth_features(const Frame& frame, const ExitNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int d = cfg.feature_dim;
    const int half = d / 2;
    Vec out(static_cast<std::size_t>(d));

    Rng proto_rng(mix64(seed, 0x70726f746fULL + static_cast<std::uint64_t>(frame.label)));
    for (int i = 0; i < half; ++i) out[static_cast<std::size_t>(i)] = proto_rng.normal();

    const double frame_sd = cfg.feature_noise * frame.complexity;
    if (frame_sd > 0.0) {
        Rng noise_rng(
            mix64(mix64(seed, 0x6e6f697365ULL), static_cast<std::uint64_t>(frame.frame_id)));
        for (int i = 0; i < half; ++i)
            out[static_cast<std::size_t>(i)] += frame_sd * noise_rng.normal();
    }

    const double scene_sd = cfg.scene_noise * frame.complexity;
    if (scene_sd > 0.0) {
        const auto scene_id =
            static_cast<std::uint64_t>(frame.frame_id / cfg.scene_length);
        Rng scene_rng(mix64(mix64(seed, 0x7363656e65ULL), scene_id));
        for (int i = 0; i < half; ++i)
            out[static_cast<std::size_t>(i)] += scene_sd * scene_rng.normal();
    }

    Rng enc_rng(mix64(seed, 0x656e63ULL));
    for (int i = 0; i < half; ++i)
        out[static_cast<std::size_t>(half + i)] = enc_rng.uniform(0.5, 1.5) * frame.complexity;
    return out;
}

// ---------------------------------------------------------------------------
// Forward pieces

// Hidden/cell state of the two-layer recurrent aggregator.
struct AggregatorState {
    Vec h1, c1, h2, c2;

    static AggregatorState zero(int d) {
        AggregatorState s;
        s.h1.assign(static_cast<std::size_t>(d), 0.0);
        s.c1.assign(static_cast<std::size_t>(d), 0.0);
        s.h2.assign(static_cast<std::size_t>(d), 0.0);
        s.c2.assign(static_cast<std::size_t>(d), 0.0);
        return s;
    }
};

namespace detail {

struct LstmStepCache {
    Vec i, f, g, o, c, h;
};

inline void lstm_step(const ExitNetModel& m, int layer, const Vec& x, const Vec& h_prev,
                      const Vec& c_prev, LstmStepCache& out) {
    const int d = m.config.feature_dim;
    const auto& off = m.layout.lstm[static_cast<std::size_t>(layer)];
    Vec pre(static_cast<std::size_t>(d));
    auto gate_pre = [&](int g, Vec& dst) {
        lin::matvec(m.at(off.wx[static_cast<std::size_t>(g)]), d, d, x.data(), dst.data());
        lin::matvec_acc(m.at(off.wh[static_cast<std::size_t>(g)]), d, d, h_prev.data(), dst.data());
        lin::add_acc(dst.data(), m.at(off.b[static_cast<std::size_t>(g)]), d);
    };
    out.i.resize(static_cast<std::size_t>(d));
    out.f.resize(static_cast<std::size_t>(d));
    out.g.resize(static_cast<std::size_t>(d));
    out.o.resize(static_cast<std::size_t>(d));
    out.c.resize(static_cast<std::size_t>(d));
    out.h.resize(static_cast<std::size_t>(d));

    gate_pre(0, pre);
    for (int j = 0; j < d; ++j) out.i[static_cast<std::size_t>(j)] = lin::sigmoid(pre[static_cast<std::size_t>(j)]);
    gate_pre(1, pre);
    for (int j = 0; j < d; ++j) out.f[static_cast<std::size_t>(j)] = lin::sigmoid(pre[static_cast<std::size_t>(j)]);
    gate_pre(2, pre);
    for (int j = 0; j < d; ++j) out.g[static_cast<std::size_t>(j)] = std::tanh(pre[static_cast<std::size_t>(j)]);
    gate_pre(3, pre);
    for (int j = 0; j < d; ++j) out.o[static_cast<std::size_t>(j)] = lin::sigmoid(pre[static_cast<std::size_t>(j)]);

    for (int j = 0; j < d; ++j) {
        const auto sj = static_cast<std::size_t>(j);
        out.c[sj] = out.f[sj] * c_prev[sj] + out.i[sj] * out.g[sj];
        out.h[sj] = out.o[sj] * std::tanh(out.c[sj]);
    }
}

}  // namespace detail

// One aggregation step: consumes the features of one frame, advances the
// recurrent state, and returns the new accumulated feature z_t (== state.h2).
inline const Vec& accumulate(AggregatorState& state, const Vec& phi, const ExitNetModel& m) {
    const int d = m.config.feature_dim;
    if (static_cast<int>(phi.size()) != d || static_cast<int>(state.h1.size()) != d)
        throw std::domain_error("accumulate: feature/state dimension mismatch");
    detail::LstmStepCache s1, s2;
    detail::lstm_step(m, 0, phi, state.h1, state.c1, s1);
    detail::lstm_step(m, 1, s1.h, state.h2, state.c2, s2);
    state.h1 = std::move(s1.h);
    state.c1 = std::move(s1.c);
    state.h2 = std::move(s2.h);
    state.c2 = std::move(s2.c);
    return state.h2;
}

struct AttentionScores {
    Vec tau;
    Vec beta;
};

// tau_t = (W1 z_{t-1}) . tanh(W2 z_t) with z_0 = 0; beta = softmax(tau).
inline AttentionScores attention_scores(std::span<const Vec> z_window, const ExitNetModel& m) {
    if (z_window.empty()) throw std::domain_error("attention_scores: empty window");
    const int d = m.config.feature_dim;
    const int t_len = static_cast<int>(z_window.size());
    AttentionScores out;
    out.tau.resize(static_cast<std::size_t>(t_len));
    Vec a(static_cast<std::size_t>(d)), mm(static_cast<std::size_t>(d));
    const Vec zero(static_cast<std::size_t>(d), 0.0);
    for (int t = 0; t < t_len; ++t) {
        const Vec& z_prev = (t == 0) ? zero : z_window[static_cast<std::size_t>(t - 1)];
        lin::matvec(m.at(m.layout.attn_w1), d, d, z_prev.data(), a.data());
        lin::matvec(m.at(m.layout.attn_w2), d, d, z_window[static_cast<std::size_t>(t)].data(),
                    mm.data());
        for (int j = 0; j < d; ++j) mm[static_cast<std::size_t>(j)] = std::tanh(mm[static_cast<std::size_t>(j)]);
        out.tau[static_cast<std::size_t>(t)] = lin::dot(a.data(), mm.data(), d);
    }
    out.beta.resize(static_cast<std::size_t>(t_len));
    lin::softmax(out.tau.data(), out.beta.data(), t_len);
    return out;
}

// Gate MLP: concat(z_{t-1}, z_t, beta_t) -> tanh(h1) -> tanh(h2) -> sigmoid.
inline double gate_forward(const Vec& z_prev, const Vec& z_t, double beta_t,
                           const ExitNetModel& m, int exit_index) {
    if (exit_index < 1 || exit_index > m.config.num_exits)
        throw std::domain_error("gate_forward: exit index out of range");
    const int d = m.config.feature_dim;
    const int h1 = m.config.gate_hidden[0];
    const int h2 = m.config.gate_hidden[1];
    const auto& off = m.layout.gates[static_cast<std::size_t>(exit_index - 1)];

    Vec u(static_cast<std::size_t>(2 * d + 1));
    std::copy(z_prev.begin(), z_prev.end(), u.begin());
    std::copy(z_t.begin(), z_t.end(), u.begin() + d);
    u[static_cast<std::size_t>(2 * d)] = beta_t;

    Vec a1(static_cast<std::size_t>(h1)), a2(static_cast<std::size_t>(h2));
    lin::matvec(m.at(off.w1), h1, 2 * d + 1, u.data(), a1.data());
    lin::add_acc(a1.data(), m.at(off.b1), h1);
    for (auto& v : a1) v = std::tanh(v);
    lin::matvec(m.at(off.w2), h2, h1, a1.data(), a2.data());
    lin::add_acc(a2.data(), m.at(off.b2), h2);
    for (auto& v : a2) v = std::tanh(v);
    const double pre = lin::dot(m.at(off.w3), a2.data(), h2) + *m.at(off.b3);
    return lin::sigmoid(pre);
}

// Linear head of one exit point.
inline Vec classify(const Vec& z_t, const ExitNetModel& m, int exit_index) {
    if (exit_index < 1 || exit_index > m.config.num_exits)
        throw std::domain_error("classify: exit index out of range");
    const int d = m.config.feature_dim;
    const int k = m.config.num_classes;
    const auto& off = m.layout.classifiers[static_cast<std::size_t>(exit_index - 1)];
    Vec logits(static_cast<std::size_t>(k));
    lin::matvec(m.at(off.w), k, d, z_t.data(), logits.data());
    lin::add_acc(logits.data(), m.at(off.b), k);
    return logits;
}

// Frame t (1-based) of a window of length t_len is served by this exit point.
inline int exit_for_frame(int t, int t_len, int num_exits) {
    const int e = (num_exits * t + t_len - 1) / t_len;  // ceil(E*t/T)
    return std::clamp(e, 1, num_exits);
}

// ---------------------------------------------------------------------------
// Full window forward with cached intermediates (training and evaluation).

struct WindowSample {
    std::vector<Vec> features;  // one vector per frame
    int label = 0;
    double mean_complexity = 0.0;
};

inline std::vector<WindowSample> make_window_samples(const FrameTrace& trace,
                                                     const ExitNetConfig& cfg,
                                                     std::uint64_t feature_seed) {
    std::vector<WindowSample> out;
    const int t_len = trace.window_length;
    out.reserve(static_cast<std::size_t>(trace.num_windows()));
    for (int w = 0; w < trace.num_windows(); ++w) {
        WindowSample s;
        s.features.reserve(static_cast<std::size_t>(t_len));
        double csum = 0.0;
        for (int t = 0; t < t_len; ++t) {
            const Frame& f = trace.frames[static_cast<std::size_t>(w) * t_len + t];
            s.features.push_back(synth_features(f, cfg, feature_seed));
            csum += f.complexity;
        }
        s.label = trace.frames[static_cast<std::size_t>(w) * t_len].label;
        s.mean_complexity = csum / t_len;
        out.push_back(std::move(s));
    }
    return out;
}

struct GateCache {
    Vec u;       // 2d+1 input
    Vec h1, h2;  // tanh activations
    double pre = 0.0;
    double prob = 0.0;
    int exit_index = 1;
};

struct WindowForward {
    int t_len = 0;
    int label = 0;
    std::vector<detail::LstmStepCache> l1, l2;  // per t; l2[t].h is z_{t+1}
    std::vector<Vec> attn_a;                    // W1 z_{t-1}
    std::vector<Vec> attn_m;                    // tanh(W2 z_t)
    Vec tau, beta;
    std::vector<GateCache> gates;
    std::vector<Vec> logits, probs;  // per t (K)
    Vec weighted;                    // sum_t beta_t z_t
    Vec aux_logits, aux_probs;
    std::vector<double> gate_targets;
    double loss_cls = 0.0, loss_gate = 0.0, loss_att = 0.0;

    const Vec& z(int t /*1-based*/) const { return l2[static_cast<std::size_t>(t - 1)].h; }
};

struct LossBreakdown {
    double cls = 0.0;
    double gate = 0.0;
    double att = 0.0;
    double total = 0.0;
};

// Runs aggregation, attention, gates, per-exit classifiers and (optionally)
// the three loss terms for one window.
inline void forward_window(const ExitNetModel& m, const WindowSample& sample, WindowForward& fwd,
                           bool with_loss = true) {
    const int d = m.config.feature_dim;
    const int t_len = static_cast<int>(sample.features.size());
    const int k = m.config.num_classes;
    const int e_count = m.config.num_exits;
    if (t_len < 1) throw std::domain_error("forward_window: empty window");

    fwd.t_len = t_len;
    fwd.label = sample.label;
    fwd.l1.resize(static_cast<std::size_t>(t_len));
    fwd.l2.resize(static_cast<std::size_t>(t_len));

    const Vec zero(static_cast<std::size_t>(d), 0.0);
    const Vec* h1_prev = &zero;
    const Vec* c1_prev = &zero;
    const Vec* h2_prev = &zero;
    const Vec* c2_prev = &zero;
    for (int t = 0; t < t_len; ++t) {
        const auto st = static_cast<std::size_t>(t);
        if (static_cast<int>(sample.features[st].size()) != d)
            throw std::domain_error("forward_window: feature dimension mismatch");
        detail::lstm_step(m, 0, sample.features[st], *h1_prev, *c1_prev, fwd.l1[st]);
        detail::lstm_step(m, 1, fwd.l1[st].h, *h2_prev, *c2_prev, fwd.l2[st]);
        h1_prev = &fwd.l1[st].h;
        c1_prev = &fwd.l1[st].c;
        h2_prev = &fwd.l2[st].h;
        c2_prev = &fwd.l2[st].c;
    }

    // Attention over the window.
    fwd.attn_a.assign(static_cast<std::size_t>(t_len), Vec(static_cast<std::size_t>(d)));
    fwd.attn_m.assign(static_cast<std::size_t>(t_len), Vec(static_cast<std::size_t>(d)));
    fwd.tau.resize(static_cast<std::size_t>(t_len));
    for (int t = 0; t < t_len; ++t) {
        const auto st = static_cast<std::size_t>(t);
        const Vec& z_prev = (t == 0) ? zero : fwd.l2[st - 1].h;
        lin::matvec(m.at(m.layout.attn_w1), d, d, z_prev.data(), fwd.attn_a[st].data());
        lin::matvec(m.at(m.layout.attn_w2), d, d, fwd.l2[st].h.data(), fwd.attn_m[st].data());
        for (int j = 0; j < d; ++j)
            fwd.attn_m[st][static_cast<std::size_t>(j)] =
                std::tanh(fwd.attn_m[st][static_cast<std::size_t>(j)]);
        fwd.tau[st] = lin::dot(fwd.attn_a[st].data(), fwd.attn_m[st].data(), d);
    }
    fwd.beta.resize(static_cast<std::size_t>(t_len));
    lin::softmax(fwd.tau.data(), fwd.beta.data(), t_len);

    // Gates and classifiers per frame.
    const int h1n = m.config.gate_hidden[0];
    const int h2n = m.config.gate_hidden[1];
    fwd.gates.resize(static_cast<std::size_t>(t_len));
    fwd.logits.assign(static_cast<std::size_t>(t_len), Vec(static_cast<std::size_t>(k)));
    fwd.probs.assign(static_cast<std::size_t>(t_len), Vec(static_cast<std::size_t>(k)));
    for (int t = 1; t <= t_len; ++t) {
        const auto st = static_cast<std::size_t>(t - 1);
        const Vec& z_prev = (t == 1) ? zero : fwd.l2[st - 1].h;
        const Vec& z_t = fwd.l2[st].h;
        const int e = exit_for_frame(t, t_len, e_count);
        GateCache& gc = fwd.gates[st];
        gc.exit_index = e;
        const auto& off = m.layout.gates[static_cast<std::size_t>(e - 1)];
        gc.u.resize(static_cast<std::size_t>(2 * d + 1));
        std::copy(z_prev.begin(), z_prev.end(), gc.u.begin());
        std::copy(z_t.begin(), z_t.end(), gc.u.begin() + d);
        gc.u[static_cast<std::size_t>(2 * d)] = fwd.beta[st];
        gc.h1.resize(static_cast<std::size_t>(h1n));
        gc.h2.resize(static_cast<std::size_t>(h2n));
        lin::matvec(m.at(off.w1), h1n, 2 * d + 1, gc.u.data(), gc.h1.data());
        lin::add_acc(gc.h1.data(), m.at(off.b1), h1n);
        for (auto& v : gc.h1) v = std::tanh(v);
        lin::matvec(m.at(off.w2), h2n, h1n, gc.h1.data(), gc.h2.data());
        lin::add_acc(gc.h2.data(), m.at(off.b2), h2n);
        for (auto& v : gc.h2) v = std::tanh(v);
        gc.pre = lin::dot(m.at(off.w3), gc.h2.data(), h2n) + *m.at(off.b3);
        gc.prob = lin::sigmoid(gc.pre);

        const auto& coff = m.layout.classifiers[static_cast<std::size_t>(e - 1)];
        lin::matvec(m.at(coff.w), k, d, z_t.data(), fwd.logits[st].data());
        lin::add_acc(fwd.logits[st].data(), m.at(coff.b), k);
        lin::softmax(fwd.logits[st].data(), fwd.probs[st].data(), k);
    }

    // Attention-weighted window feature and auxiliary head.
    fwd.weighted.assign(static_cast<std::size_t>(d), 0.0);
    for (int t = 0; t < t_len; ++t) {
        const auto st = static_cast<std::size_t>(t);
        const double b = fwd.beta[st];
        const Vec& z_t = fwd.l2[st].h;
        for (int j = 0; j < d; ++j)
            fwd.weighted[static_cast<std::size_t>(j)] += b * z_t[static_cast<std::size_t>(j)];
    }
    fwd.aux_logits.resize(static_cast<std::size_t>(k));
    fwd.aux_probs.resize(static_cast<std::size_t>(k));
    lin::matvec(m.at(m.layout.aux.w), k, d, fwd.weighted.data(), fwd.aux_logits.data());
    lin::add_acc(fwd.aux_logits.data(), m.at(m.layout.aux.b), k);
    lin::softmax(fwd.aux_logits.data(), fwd.aux_probs.data(), k);

    if (!with_loss) return;

    fwd.gate_targets.resize(static_cast<std::size_t>(t_len));
    double ce_sum = 0.0, bce_sum = 0.0;
    for (int t = 0; t < t_len; ++t) {
        const auto st = static_cast<std::size_t>(t);
        ce_sum += lin::cross_entropy(fwd.logits[st].data(), k, sample.label);
        double target;
        if (m.config.gate_target == GateTargetMode::ExitSafe) {
            const auto best = std::max_element(fwd.logits[st].begin(), fwd.logits[st].end());
            const int pred = static_cast<int>(best - fwd.logits[st].begin());
            target = (pred == sample.label) ? 1.0 : 0.0;
        } else {
            target = sample.label > 0 ? 1.0 : 0.0;
        }
        fwd.gate_targets[st] = target;
        bce_sum += lin::bce_from_logit(fwd.gates[st].pre, target);
    }
    fwd.loss_cls = ce_sum / t_len;
    fwd.loss_gate = bce_sum / t_len;
    fwd.loss_att = lin::cross_entropy(fwd.aux_logits.data(), k, sample.label);
}

// The earliest-exit scan: fires at the first frame whose gate probability
// reaches the threshold (ties fire); FULL when no gate fires.
struct ExitDecision {
    static constexpr int kFull = 0;

    int exit_index = kFull;      // 1..E, kFull when no gate fired
    int fired_at_frame = 0;      // 1..T, 0 when no gate fired
    double gate_probability = 0.0;

    bool is_full() const { return fired_at_frame == 0; }
};

inline ExitDecision earliest_exit(const WindowForward& fwd, double threshold) {
    ExitDecision dec;
    for (int t = 1; t <= fwd.t_len; ++t) {
        const auto& gc = fwd.gates[static_cast<std::size_t>(t - 1)];
        if (gc.prob >= threshold) {
            dec.exit_index = gc.exit_index;
            dec.fired_at_frame = t;
            dec.gate_probability = gc.prob;
            return dec;
        }
    }
    dec.exit_index = ExitDecision::kFull;
    dec.fired_at_frame = 0;
    dec.gate_probability = fwd.t_len > 0 ? fwd.gates.back().prob : 0.0;
    return dec;
}

inline ExitDecision earliest_exit(const WindowSample& sample, const ExitNetModel& m,
                                  double threshold) {
    WindowForward fwd;
    forward_window(m, sample, fwd, /*with_loss=*/false);
    return earliest_exit(fwd, threshold);
}

// ---------------------------------------------------------------------------
// Loss over a batch

inline LossBreakdown loss_total(std::span<const WindowSample> batch, const ExitNetModel& m) {
    if (batch.empty()) throw std::invalid_argument("loss_total: empty batch");
    LossBreakdown out;
    WindowForward fwd;
    for (const auto& s : batch) {
        forward_window(m, s, fwd, /*with_loss=*/true);
        out.cls += fwd.loss_cls;
        out.gate += fwd.loss_gate;
        out.att += fwd.loss_att;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.cls *= inv;
    out.gate *= inv;
    out.att *= inv;
    out.total = out.cls + out.gate + out.att;
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass
//
// Accumulates scale * d(window loss)/d(params) into grad. Gate targets are
// treated as constants (they come from an argmax).

inline void backward_window(const ExitNetModel& m, const WindowSample& sample,
                            const WindowForward& fwd, double scale, Vec& grad) {
    const int d = m.config.feature_dim;
    const int k = m.config.num_classes;
    const int t_len = fwd.t_len;
    const int h1n = m.config.gate_hidden[0];
    const int h2n = m.config.gate_hidden[1];
    const double inv_t = scale / t_len;

    const Vec zero(static_cast<std::size_t>(d), 0.0);
    auto z_at = [&](int t) -> const Vec& {  // z_t with z_0 = 0, t in [0..T]
        return t == 0 ? zero : fwd.l2[static_cast<std::size_t>(t - 1)].h;
    };

    std::vector<Vec> dz(static_cast<std::size_t>(t_len) + 1, Vec(static_cast<std::size_t>(d), 0.0));
    Vec dbeta(static_cast<std::size_t>(t_len), 0.0);

    Vec dlog(static_cast<std::size_t>(k));
    Vec dp1(static_cast<std::size_t>(h1n)), dp2(static_cast<std::size_t>(h2n));
    Vec dh1(static_cast<std::size_t>(h1n)), dh2v(static_cast<std::size_t>(h2n));
    Vec du(static_cast<std::size_t>(2 * d + 1));

    // Classifier and gate branches.
    for (int t = 1; t <= t_len; ++t) {
        const auto st = static_cast<std::size_t>(t - 1);
        const int e = fwd.gates[st].exit_index;

        // CE through the exit classifier.
        for (int j = 0; j < k; ++j)
            dlog[static_cast<std::size_t>(j)] =
                inv_t * (fwd.probs[st][static_cast<std::size_t>(j)] - (j == fwd.label ? 1.0 : 0.0));
        const auto& coff = m.layout.classifiers[static_cast<std::size_t>(e - 1)];
        lin::outer_acc(grad.data() + coff.w, dlog.data(), k, z_at(t).data(), d);
        lin::add_acc(grad.data() + coff.b, dlog.data(), k);
        lin::matvec_t_acc(m.at(coff.w), k, d, dlog.data(), dz[static_cast<std::size_t>(t)].data());

        // BCE through the gate MLP.
        const GateCache& gc = fwd.gates[st];
        const double dpre = inv_t * (gc.prob - fwd.gate_targets[st]);
        const auto& goff = m.layout.gates[static_cast<std::size_t>(e - 1)];
        for (int j = 0; j < h2n; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            grad[goff.w3 + sj] += dpre * gc.h2[sj];
            dh2v[sj] = dpre * m.at(goff.w3)[j];
        }
        grad[goff.b3] += dpre;
        for (int j = 0; j < h2n; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            dp2[sj] = dh2v[sj] * (1.0 - gc.h2[sj] * gc.h2[sj]);
        }
        lin::outer_acc(grad.data() + goff.w2, dp2.data(), h2n, gc.h1.data(), h1n);
        lin::add_acc(grad.data() + goff.b2, dp2.data(), h2n);
        std::fill(dh1.begin(), dh1.end(), 0.0);
        lin::matvec_t_acc(m.at(goff.w2), h2n, h1n, dp2.data(), dh1.data());
        for (int j = 0; j < h1n; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            dp1[sj] = dh1[sj] * (1.0 - gc.h1[sj] * gc.h1[sj]);
        }
        lin::outer_acc(grad.data() + goff.w1, dp1.data(), h1n, gc.u.data(), 2 * d + 1);
        lin::add_acc(grad.data() + goff.b1, dp1.data(), h1n);
        std::fill(du.begin(), du.end(), 0.0);
        lin::matvec_t_acc(m.at(goff.w1), h1n, 2 * d + 1, dp1.data(), du.data());
        lin::add_acc(dz[static_cast<std::size_t>(t - 1)].data(), du.data(), d);
        lin::add_acc(dz[static_cast<std::size_t>(t)].data(), du.data() + d, d);
        dbeta[st] += du[static_cast<std::size_t>(2 * d)];
    }

    // Auxiliary head on the attention-weighted feature.
    {
        Vec dalog(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j)
            dalog[static_cast<std::size_t>(j)] =
                scale * (fwd.aux_probs[static_cast<std::size_t>(j)] - (j == fwd.label ? 1.0 : 0.0));
        lin::outer_acc(grad.data() + m.layout.aux.w, dalog.data(), k, fwd.weighted.data(), d);
        lin::add_acc(grad.data() + m.layout.aux.b, dalog.data(), k);
        Vec ds(static_cast<std::size_t>(d), 0.0);
        lin::matvec_t_acc(m.at(m.layout.aux.w), k, d, dalog.data(), ds.data());
        for (int t = 1; t <= t_len; ++t) {
            const auto st = static_cast<std::size_t>(t - 1);
            dbeta[st] += lin::dot(ds.data(), z_at(t).data(), d);
            const double b = fwd.beta[st];
            for (int j = 0; j < d; ++j)
                dz[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] +=
                    b * ds[static_cast<std::size_t>(j)];
        }
    }

    // Softmax over tau, then the bilinear attention score.
    {
        double mixdot = 0.0;
        for (int t = 0; t < t_len; ++t)
            mixdot += dbeta[static_cast<std::size_t>(t)] * fwd.beta[static_cast<std::size_t>(t)];
        Vec da(static_cast<std::size_t>(d)), dm(static_cast<std::size_t>(d)),
            dpm(static_cast<std::size_t>(d));
        for (int t = 1; t <= t_len; ++t) {
            const auto st = static_cast<std::size_t>(t - 1);
            const double dtau = fwd.beta[st] * (dbeta[st] - mixdot);
            if (dtau == 0.0) continue;
            for (int j = 0; j < d; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                da[sj] = dtau * fwd.attn_m[st][sj];
                dm[sj] = dtau * fwd.attn_a[st][sj];
                dpm[sj] = dm[sj] * (1.0 - fwd.attn_m[st][sj] * fwd.attn_m[st][sj]);
            }
            lin::outer_acc(grad.data() + m.layout.attn_w1, da.data(), d, z_at(t - 1).data(), d);
            lin::matvec_t_acc(m.at(m.layout.attn_w1), d, d, da.data(),
                              dz[static_cast<std::size_t>(t - 1)].data());
            lin::outer_acc(grad.data() + m.layout.attn_w2, dpm.data(), d, z_at(t).data(), d);
            lin::matvec_t_acc(m.at(m.layout.attn_w2), d, d, dpm.data(),
                              dz[static_cast<std::size_t>(t)].data());
        }
    }

    // Backprop through time over both recurrent layers.
    Vec dh1_carry(static_cast<std::size_t>(d), 0.0), dc1_carry(static_cast<std::size_t>(d), 0.0);
    Vec dh2_carry(static_cast<std::size_t>(d), 0.0), dc2_carry(static_cast<std::size_t>(d), 0.0);
    Vec dh(static_cast<std::size_t>(d)), dc(static_cast<std::size_t>(d));
    std::array<Vec, 4> dpre;
    for (auto& v : dpre) v.resize(static_cast<std::size_t>(d));
    Vec dx(static_cast<std::size_t>(d));

    auto lstm_backward_step = [&](int layer, const detail::LstmStepCache& sc, const Vec& x,
                                  const Vec& h_prev, const Vec& c_prev, Vec& dh_total,
                                  Vec& dc_carry, Vec& dh_carry_out, Vec* dx_out) {
        const auto& off = m.layout.lstm[static_cast<std::size_t>(layer)];
        for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            const double tanh_c = std::tanh(sc.c[sj]);
            const double do_ = dh_total[sj] * tanh_c;
            const double dct = dc_carry[sj] + dh_total[sj] * sc.o[sj] * (1.0 - tanh_c * tanh_c);
            const double di = dct * sc.g[sj];
            const double dg = dct * sc.i[sj];
            const double df = dct * c_prev[sj];
            dc_carry[sj] = dct * sc.f[sj];  // becomes dc_{t-1}
            dpre[0][sj] = di * sc.i[sj] * (1.0 - sc.i[sj]);
            dpre[1][sj] = df * sc.f[sj] * (1.0 - sc.f[sj]);
            dpre[2][sj] = dg * (1.0 - sc.g[sj] * sc.g[sj]);
            dpre[3][sj] = do_ * sc.o[sj] * (1.0 - sc.o[sj]);
        }
        std::fill(dh_carry_out.begin(), dh_carry_out.end(), 0.0);
        if (dx_out) std::fill(dx_out->begin(), dx_out->end(), 0.0);
        for (int g = 0; g < 4; ++g) {
            const auto sg = static_cast<std::size_t>(g);
            lin::outer_acc(grad.data() + off.wx[sg], dpre[sg].data(), d, x.data(), d);
            lin::outer_acc(grad.data() + off.wh[sg], dpre[sg].data(), d, h_prev.data(), d);
            lin::add_acc(grad.data() + off.b[sg], dpre[sg].data(), d);
            lin::matvec_t_acc(m.at(off.wh[sg]), d, d, dpre[sg].data(), dh_carry_out.data());
            if (dx_out) lin::matvec_t_acc(m.at(off.wx[sg]), d, d, dpre[sg].data(), dx_out->data());
        }
    };

    Vec dh_carry_next(static_cast<std::size_t>(d));
    for (int t = t_len; t >= 1; --t) {
        const auto st = static_cast<std::size_t>(t - 1);

        // Layer 2: external dz plus recurrent carry.
        for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            dh[sj] = dz[static_cast<std::size_t>(t)][sj] + dh2_carry[sj];
        }
        const Vec& h2_prev = (t == 1) ? zero : fwd.l2[st - 1].h;
        const Vec& c2_prev = (t == 1) ? zero : fwd.l2[st - 1].c;
        lstm_backward_step(1, fwd.l2[st], fwd.l1[st].h, h2_prev, c2_prev, dh, dc2_carry,
                           dh_carry_next, &dx);
        dh2_carry = dh_carry_next;

        // Layer 1: input gradient from layer 2 plus recurrent carry.
        for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            dh[sj] = dx[sj] + dh1_carry[sj];
        }
        const Vec& h1_prev = (t == 1) ? zero : fwd.l1[st - 1].h;
        const Vec& c1_prev = (t == 1) ? zero : fwd.l1[st - 1].c;
        lstm_backward_step(0, fwd.l1[st], sample.features[st], h1_prev, c1_prev, dh, dc1_carry,
                           dh_carry_next, nullptr);
        dh1_carry = dh_carry_next;
    }
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    ExitNetModel model;
    std::vector<double> loss_history;  // mean total loss per epoch
    std::vector<LossBreakdown> breakdown_history;
};

namespace detail {

struct Adam {
    double lr;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Vec m, v;
    long long steps = 0;

    explicit Adam(std::size_t n, double lr_) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void step(Vec& params, const Vec& grad) {
        ++steps;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};

}  // namespace detail

// Minimizes the joint loss with Adam over the trace's windows. Deterministic
// for a fixed config (seed governs init and batch order). Throws when the
// loss becomes non-finite.
inline TrainResult train(const FrameTrace& dataset, const ExitNetConfig& config) {
    config.validate();
    if (dataset.num_windows() < 1 && config.epochs > 0)
        throw std::invalid_argument("train: dataset has no complete window");

    TrainResult result;
    result.model = init_model(config);
    ExitNetModel& model = result.model;

    const auto samples = make_window_samples(dataset, config, config.feature_seed);
    const auto n = samples.size();
    if (config.epochs == 0 || n == 0) return result;

    detail::Adam adam(model.params.size(), config.learning_rate);
    Vec grad(model.params.size(), 0.0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    WindowForward fwd;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(mix64(config.seed, 0xba7c4 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        LossBreakdown epoch_loss;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            const double inv_b = 1.0 / static_cast<double>(end - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            LossBreakdown batch_loss;
            for (std::size_t i = start; i < end; ++i) {
                const WindowSample& s = samples[order[i]];
                forward_window(model, s, fwd, /*with_loss=*/true);
                backward_window(model, s, fwd, inv_b, grad);
                batch_loss.cls += fwd.loss_cls * inv_b;
                batch_loss.gate += fwd.loss_gate * inv_b;
                batch_loss.att += fwd.loss_att * inv_b;
            }
            batch_loss.total = batch_loss.cls + batch_loss.gate + batch_loss.att;
            if (!std::isfinite(batch_loss.total)) {
                std::ostringstream os;
                os << "train: loss diverged at epoch " << epoch << ", batch " << batches
                   << " (cls=" << batch_loss.cls << " gate=" << batch_loss.gate
                   << " att=" << batch_loss.att << ")";
                throw std::runtime_error(os.str());
            }
            adam.step(model.params, grad);
            epoch_loss.cls += batch_loss.cls;
            epoch_loss.gate += batch_loss.gate;
            epoch_loss.att += batch_loss.att;
            epoch_loss.total += batch_loss.total;
            ++batches;
        }
        const double inv = 1.0 / static_cast<double>(batches);
        epoch_loss.cls *= inv;
        epoch_loss.gate *= inv;
        epoch_loss.att *= inv;
        epoch_loss.total *= inv;
        result.loss_history.push_back(epoch_loss.total);
        result.breakdown_history.push_back(epoch_loss);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Gradient verification
//
// Compares the analytic gradient of the single-window loss against two-sided
// finite differences on randomly chosen coordinates. Returns the maximum
// relative error.

inline double grad_check(const ExitNetModel& model, const WindowSample& sample,
                         double epsilon = 1e-5, int num_coords = 250,
                         std::uint64_t seed = 17,
                         const std::string& block_prefix = std::string()) {
    if (epsilon <= 0.0) throw std::domain_error("grad_check: epsilon must be positive");

    Vec analytic(model.params.size(), 0.0);
    {
        WindowForward fwd;
        forward_window(model, sample, fwd, /*with_loss=*/true);
        backward_window(model, sample, fwd, 1.0, analytic);
    }

    std::vector<std::size_t> pool;
    if (block_prefix.empty()) {
        pool.resize(model.params.size());
        std::iota(pool.begin(), pool.end(), std::size_t{0});
    } else {
        for (const auto& b : model.layout.blocks) {
            if (b.name.rfind(block_prefix, 0) != 0) continue;
            for (std::size_t i = 0; i < b.count; ++i) pool.push_back(b.offset + i);
        }
        if (pool.empty()) throw std::invalid_argument("grad_check: no blocks match " + block_prefix);
    }

    Rng rng(mix64(seed, 0x67636865636bULL));
    std::vector<std::size_t> picks = rng.sample_without_replacement(
        pool.size(), std::min<std::size_t>(pool.size(), static_cast<std::size_t>(num_coords)));

    ExitNetModel probe = model;
    const std::span<const WindowSample> one(&sample, 1);
    double max_rel = 0.0;
    for (std::size_t pi : picks) {
        const std::size_t idx = pool[pi];
        const double saved = probe.params[idx];
        probe.params[idx] = saved + epsilon;
        const double lp = loss_total(one, probe).total;
        probe.params[idx] = saved - epsilon;
        const double lm = loss_total(one, probe).total;
        probe.params[idx] = saved;
        const double fd = (lp - lm) / (2.0 * epsilon);
        const double a = analytic[idx];
        const double rel = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

struct EvalRecord {
    int exit_index = ExitDecision::kFull;  // 1..E, kFull when no gate fired
    int fired_at_frame = 0;
    bool correct = false;
    double mean_complexity = 0.0;
    double gate_probability = 0.0;
};

struct EvalStats {
    double accuracy = 0.0;
    std::vector<long long> exit_counts;  // [0..E-1] exits, [E] = FULL
    std::vector<EvalRecord> records;

    long long full_count() const { return exit_counts.back(); }
};

inline EvalStats evaluate_model(const ExitNetModel& model, std::span<const WindowSample> samples,
                                double threshold) {
    EvalStats stats;
    stats.exit_counts.assign(static_cast<std::size_t>(model.config.num_exits) + 1, 0);
    if (samples.empty()) return stats;

    WindowForward fwd;
    long long correct = 0;
    for (const auto& s : samples) {
        forward_window(model, s, fwd, /*with_loss=*/false);
        const ExitDecision dec = earliest_exit(fwd, threshold);
        EvalRecord rec;
        rec.exit_index = dec.exit_index;
        rec.fired_at_frame = dec.fired_at_frame;
        rec.mean_complexity = s.mean_complexity;
        rec.gate_probability = dec.gate_probability;

        const Vec* logits;
        if (dec.is_full()) {
            stats.exit_counts.back()++;
            logits = &fwd.logits.back();  // deepest head evaluated at z_T
            // FULL classifies with the last exit's head.
        } else {
            stats.exit_counts[static_cast<std::size_t>(dec.exit_index - 1)]++;
            logits = &fwd.logits[static_cast<std::size_t>(dec.fired_at_frame - 1)];
        }
        const auto best = std::max_element(logits->begin(), logits->end());
        rec.correct = static_cast<int>(best - logits->begin()) == s.label;
        if (rec.correct) ++correct;
        stats.records.push_back(rec);
    }
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return stats;
}

// ---------------------------------------------------------------------------
// Checkpoint file: versioned text header followed by one hexfloat per
// parameter; save(load(f)) reproduces f byte for byte.

inline void save_model(const ExitNetModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    const ExitNetConfig& c = model.config;
    char buf[64];
    auto hex = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%a", v);
        return std::string(buf);
    };
    out << "eesim-checkpoint 1\n";
    out << "feature_dim " << c.feature_dim << "\n";
    out << "num_exits " << c.num_exits << "\n";
    out << "window_length " << c.window_length << "\n";
    out << "num_classes " << c.num_classes << "\n";
    out << "gate_hidden " << c.gate_hidden[0] << " " << c.gate_hidden[1] << "\n";
    out << "attention_hidden " << c.attention_hidden[0] << " " << c.attention_hidden[1] << "\n";
    out << "gate_threshold " << hex(c.gate_threshold) << "\n";
    out << "learning_rate " << hex(c.learning_rate) << "\n";
    out << "batch_size " << c.batch_size << "\n";
    out << "epochs " << c.epochs << "\n";
    out << "gate_target " << (c.gate_target == GateTargetMode::ExitSafe ? "exit_safe" : "raw_label")
        << "\n";
    out << "seed " << c.seed << "\n";
    out << "feature_seed " << c.feature_seed << "\n";
    out << "feature_noise " << hex(c.feature_noise) << "\n";
    out << "scene_noise " << hex(c.scene_noise) << "\n";
    out << "scene_length " << c.scene_length << "\n";
    out << "params " << model.params.size() << "\n";
    for (double v : model.params) out << hex(v) << "\n";
}

inline ExitNetModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    auto bad = [&](const std::string& what) {
        return std::runtime_error("checkpoint " + path + ": " + what);
    };

    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "eesim-checkpoint" || version != 1) throw bad("unsupported format");

    ExitNetConfig c;
    std::size_t param_count = 0;
    std::string key;
    // Hexfloat values are read as tokens; stream extraction of double does
    // not accept the %a format.
    auto read_double = [&](double& dst) {
        std::string tok;
        in >> tok;
        dst = std::strtod(tok.c_str(), nullptr);
    };
    while (in >> key) {
        if (key == "feature_dim") in >> c.feature_dim;
        else if (key == "num_exits") in >> c.num_exits;
        else if (key == "window_length") in >> c.window_length;
        else if (key == "num_classes") in >> c.num_classes;
        else if (key == "gate_hidden") in >> c.gate_hidden[0] >> c.gate_hidden[1];
        else if (key == "attention_hidden") in >> c.attention_hidden[0] >> c.attention_hidden[1];
        else if (key == "gate_threshold") read_double(c.gate_threshold);
        else if (key == "learning_rate") read_double(c.learning_rate);
        else if (key == "batch_size") in >> c.batch_size;
        else if (key == "epochs") in >> c.epochs;
        else if (key == "gate_target") {
            std::string v;
            in >> v;
            if (v == "exit_safe") c.gate_target = GateTargetMode::ExitSafe;
            else if (v == "raw_label") c.gate_target = GateTargetMode::RawLabel;
            else throw bad("unknown gate_target " + v);
        } else if (key == "seed") in >> c.seed;
        else if (key == "feature_seed") in >> c.feature_seed;
        else if (key == "feature_noise") read_double(c.feature_noise);
        else if (key == "scene_noise") read_double(c.scene_noise);
        else if (key == "scene_length") in >> c.scene_length;
        else if (key == "params") {
            in >> param_count;
            break;
        } else {
            throw bad("unknown header key " + key);
        }
        if (!in) throw bad("truncated header");
    }
    if (!in) throw bad("missing params section");

    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw bad(std::string("invalid config: ") + e.what());
    }
    ExitNetModel model;
    model.config = c;
    model.layout = make_layout(c);
    if (param_count != model.layout.total)
        throw bad("parameter count mismatch: file has " + std::to_string(param_count) +
                  ", layout needs " + std::to_string(model.layout.total));
    model.params.resize(param_count);
    for (std::size_t i = 0; i < param_count; ++i) {
        std::string tok;
        if (!(in >> tok)) throw bad("truncated parameters at index " + std::to_string(i));
        model.params[i] = std::strtod(tok.c_str(), nullptr);
        if (!std::isfinite(model.params[i]))
            throw bad("non-finite parameter at index " + std::to_string(i));
    }
    return model;
}

}  // namespace eesim
