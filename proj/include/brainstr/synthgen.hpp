#pragma once

// Synthetic BOLD-like recordings with planted brain-state phases and planted
// class-discriminative connectivity.
//
// Every subject of a dataset shares the same M state correlation templates
// (derived from the config seed). A subject walks through a sequence of phases,
// each drawn i.i.d. from a zero-mean Gaussian with its state's covariance.
// Class-1 subjects get raised correlation on the discriminative ROI pairs
// while they sit in a discriminative state.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "nn.hpp"

namespace brainstr {

struct RoiPair {
    int i = 0;
    int j = 0;

    RoiPair() = default;
    RoiPair(int a, int b) : i(std::min(a, b)), j(std::max(a, b)) {}
    friend bool operator==(const RoiPair&, const RoiPair&) = default;
    friend auto operator<=>(const RoiPair&, const RoiPair&) = default;
};

struct SynthConfig {
    int n_rois = 16;
    int n_timepoints = 400;
    int n_states = 3;
    int min_phase_len = 80;
    double noise_sigma = 0.1;
    std::vector<RoiPair> discriminative_block = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
    std::vector<int> discriminative_states = {0};
    double effect_size = 0.5;
    std::uint64_t seed = 7;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
        if (n_rois < 2) fail("n_rois must be >= 2");
        if (n_states < 2) fail("n_states must be >= 2");
        if (min_phase_len < 1) fail("min_phase_len must be >= 1");
        if (n_timepoints < 2) fail("n_timepoints must be >= 2");
        if (static_cast<long>(n_states) * min_phase_len > n_timepoints)
            fail("n_states * min_phase_len must not exceed n_timepoints");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be finite and >= 0");
        if (!(effect_size >= 0.0 && effect_size <= 1.0)) fail("effect_size must lie in [0, 1]");
        for (const auto& p : discriminative_block) {
            if (p.i < 0 || p.j >= n_rois) fail("discriminative_block pair outside [0, n_rois)");
            if (p.i == p.j) fail("discriminative_block contains a self-pair");
        }
        for (int s : discriminative_states)
            if (s < 0 || s >= n_states) fail("discriminative_states index outside [0, n_states)");
    }
};

struct BoldRecording {
    Matrix signal; // T x N
    int label = 0;
    std::optional<std::vector<int>> true_boundaries;
    std::optional<std::vector<RoiPair>> true_edges;
    std::vector<int> phase_states; // state index per planted phase, when known
    std::string subject_id;

    Index n_timepoints() const { return signal.rows(); }
    Index n_rois() const { return signal.cols(); }
};

namespace synth_detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

} // namespace synth_detail

// Adds 0.05*I until the smallest eigenvalue exceeds 1e-6.
inline Matrix repair_positive_definite(Matrix c) {
    c = 0.5 * (c + c.transpose()).eval();
    for (int iter = 0; iter < 100000; ++iter) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(c, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() > 1e-6) return c;
        c.diagonal().array() += 0.05;
    }
    throw InternalError("covariance repair did not converge");
}

// Block-structured correlation template per state: 2-4 random ROI blocks with
// within-block correlation 0.6 and zero across blocks. Distinct states get
// distinct partitions whenever N allows it.
inline std::vector<Matrix> state_templates(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(synth_detail::splitmix64(cfg.seed ^ 0x5EEDB10C5ULL));
    const int n = cfg.n_rois;
    std::vector<std::vector<int>> assignments;
    std::vector<Matrix> out;
    for (int s = 0; s < cfg.n_states; ++s) {
        std::vector<int> assign(static_cast<std::size_t>(n));
        for (int attempt = 0; attempt < 64; ++attempt) {
            const int blocks = std::min(n, synth_detail::uniform_int(rng, 2, 4));
            std::vector<int> perm(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            // random cut points give nonempty contiguous chunks of the permutation
            std::vector<int> cuts(static_cast<std::size_t>(n - 1));
            std::iota(cuts.begin(), cuts.end(), 1);
            std::shuffle(cuts.begin(), cuts.end(), rng);
            cuts.resize(static_cast<std::size_t>(blocks - 1));
            std::sort(cuts.begin(), cuts.end());
            int b = 0;
            std::size_t next = 0;
            for (int k = 0; k < n; ++k) {
                if (next < cuts.size() && k == cuts[next]) {
                    ++b;
                    ++next;
                }
                assign[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = b;
            }
            bool duplicate = false;
            for (const auto& prev : assignments) {
                bool same = true;
                for (int x = 0; x < n && same; ++x)
                    for (int y = x + 1; y < n && same; ++y)
                        same = (prev[x] == prev[y]) == (assign[x] == assign[y]);
                duplicate = duplicate || same;
            }
            if (!duplicate) break;
        }
        assignments.push_back(assign);
        Matrix c = Matrix::Identity(n, n);
        for (int x = 0; x < n; ++x)
            for (int y = 0; y < n; ++y)
                if (x != y && assign[x] == assign[y]) c(x, y) = 0.6;
        out.push_back(repair_positive_definite(std::move(c)));
    }
    return out;
}

// Raises the discriminative-pair correlations by effect_size (capped at 1):
// the template moves all the way to the raised target, then PD is repaired.
inline Matrix inject_effect(const Matrix& tmpl, const std::vector<RoiPair>& block, double effect_size) {
    Matrix target = tmpl;
    for (const auto& p : block) {
        const double r = std::min(1.0, tmpl(p.i, p.j) + effect_size);
        target(p.i, p.j) = r;
        target(p.j, p.i) = r;
    }
    return repair_positive_definite(std::move(target));
}

struct PhasePlan {
    std::vector<int> boundaries; // 0 = c_0 < ... < c_W = T
    std::vector<int> states;
};

// At least n_states phases, each in [L, 2L] except the last, which absorbs the
// remainder. The first n_states phases visit every state once; later phases
// pick any state other than the previous one.
inline PhasePlan sample_phase_plan(const SynthConfig& cfg, Rng& rng) {
    const int t_total = cfg.n_timepoints, len = cfg.min_phase_len, m = cfg.n_states;
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    PhasePlan plan;
    plan.boundaries.push_back(0);
    int pos = 0;
    while (pos < t_total) {
        const int count = static_cast<int>(plan.states.size());
        const int remaining = t_total - pos;
        const int still_needed = std::max(0, m - count - 1);
        const int max_len = std::min(2 * len, remaining - still_needed * len);
        int phase_len = synth_detail::uniform_int(rng, std::min(len, max_len), max_len);
        if (remaining - phase_len < len) phase_len = remaining;
        int state;
        if (count < m) {
            state = perm[static_cast<std::size_t>(count)];
        } else {
            state = synth_detail::uniform_int(rng, 0, m - 2);
            if (state >= plan.states.back()) ++state;
        }
        plan.states.push_back(state);
        pos += phase_len;
        plan.boundaries.push_back(pos);
    }
    return plan;
}

inline BoldRecording generate_subject(const SynthConfig& cfg, int label, Rng& rng,
                                      const std::vector<Matrix>& templates) {
    cfg.validate();
    if (label != 0 && label != 1) throw ConfigError("label must be 0 or 1");
    if (static_cast<int>(templates.size()) != cfg.n_states) throw DimensionError("template count != n_states");

    const int n = cfg.n_rois;
    std::vector<Eigen::LLT<Matrix>> factors;
    for (int s = 0; s < cfg.n_states; ++s) {
        const bool raised = label == 1 && std::find(cfg.discriminative_states.begin(), cfg.discriminative_states.end(),
                                                     s) != cfg.discriminative_states.end();
        Matrix cov = raised ? inject_effect(templates[static_cast<std::size_t>(s)], cfg.discriminative_block,
                                            cfg.effect_size)
                            : templates[static_cast<std::size_t>(s)];
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success) throw InternalError("state covariance is not positive definite");
        factors.push_back(std::move(llt));
    }

    PhasePlan plan = sample_phase_plan(cfg, rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix x(cfg.n_timepoints, n);
    Vector z(n);
    for (std::size_t p = 0; p < plan.states.size(); ++p) {
        const Matrix& l = factors[static_cast<std::size_t>(plan.states[p])].matrixL().toDenseMatrix();
        for (int t = plan.boundaries[p]; t < plan.boundaries[p + 1]; ++t) {
            for (int k = 0; k < n; ++k) z(k) = normal(rng);
            x.row(t) = (l * z).transpose();
        }
    }
    if (cfg.noise_sigma > 0.0)
        for (int t = 0; t < cfg.n_timepoints; ++t)
            for (int k = 0; k < n; ++k) x(t, k) += cfg.noise_sigma * normal(rng);

    for (int k = 0; k < n; ++k) {
        const double mu = x.col(k).mean();
        x.col(k).array() -= mu;
        const double sd = std::sqrt(x.col(k).squaredNorm() / static_cast<double>(cfg.n_timepoints));
        if (sd > 0.0) x.col(k) /= sd;
    }
    if (!x.allFinite()) throw InternalError("generated signal contains non-finite values");

    BoldRecording rec;
    rec.signal = std::move(x);
    rec.label = label;
    rec.true_boundaries = plan.boundaries;
    rec.phase_states = plan.states;
    if (label == 1) {
        std::set<RoiPair> uniq(cfg.discriminative_block.begin(), cfg.discriminative_block.end());
        rec.true_edges = std::vector<RoiPair>(uniq.begin(), uniq.end());
    } else {
        rec.true_edges = std::vector<RoiPair>{};
    }
    return rec;
}

inline BoldRecording generate_subject(const SynthConfig& cfg, int label, Rng& rng) {
    return generate_subject(cfg, label, rng, state_templates(cfg));
}

// 2*n_per_class subjects: the first half label 0, the second half label 1,
// each with its own sub-seed derived from cfg.seed.
inline std::vector<BoldRecording> generate_dataset(const SynthConfig& cfg, int n_per_class) {
    cfg.validate();
    if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
    const auto templates = state_templates(cfg);
    std::vector<BoldRecording> out;
    const int total = 2 * n_per_class;
    for (int i = 0; i < total; ++i) {
        Rng rng(synth_detail::splitmix64(cfg.seed * 0x100000001B3ULL + static_cast<std::uint64_t>(i) + 1));
        BoldRecording rec = generate_subject(cfg, i < n_per_class ? 0 : 1, rng, templates);
        char id[32];
        std::snprintf(id, sizeof id, "sub-%03d", i);
        rec.subject_id = id;
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace brainstr
