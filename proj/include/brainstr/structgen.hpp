#pragma once

// Incremental graph structure generator. A shared base structure S_0 evolves
// phase by phase through small MLP-predicted increments conditioned on a
// 3-value phase descriptor; a hard 0.5 threshold with a straight-through
// gradient splits each phase FC into retained and complementary parts.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "nn.hpp"
#include "segfc.hpp"

namespace brainstr {

struct StructRegWeights {
    double delta_margin = 0.1;
    double lambda_bin = 1.0;
    double lambda_ms = 1.0;
    double lambda_sp = 0.27;

    void validate() const {
        for (double v : {delta_margin, lambda_bin, lambda_ms, lambda_sp})
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("structure regularizer weights must be finite and >= 0");
    }
};

struct StructGenConfig {
    int n_rois = 16;
    int hidden = 64;
    double alpha_delta = 0.01;
    double init_const = 0.05;

    void validate() const {
        if (n_rois < 1 || hidden < 1) throw ConfigError("structgen: sizes must be positive");
        if (!(alpha_delta >= 0.0) || !std::isfinite(alpha_delta)) throw ConfigError("structgen: alpha_delta must be >= 0");
        if (!std::isfinite(init_const)) throw ConfigError("structgen: init_const must be finite");
    }
};

// z_t = [(c_prev + c_cur) / 2T, (c_cur - c_prev) / T, ||A_cur - A_prev||_F]; the
// third entry is 0 when there is no previous phase.
inline RowVector phase_descriptor(int c_prev, int c_cur, const Matrix& a_cur, const Matrix* a_prev, int t_total) {
    if (!(0 <= c_prev && c_prev < c_cur && c_cur <= t_total))
        throw DimensionError("phase_descriptor: need 0 <= c_prev < c_cur <= T");
    RowVector z(3);
    const double t = static_cast<double>(t_total);
    z(0) = (static_cast<double>(c_prev) + static_cast<double>(c_cur)) / (2.0 * t);
    z(1) = static_cast<double>(c_cur - c_prev) / t;
    z(2) = 0.0;
    if (a_prev) {
        if (a_prev->rows() != a_cur.rows() || a_prev->cols() != a_cur.cols())
            throw DimensionError("phase_descriptor: FC shapes differ");
        z(2) = (a_cur - *a_prev).norm();
    }
    return z;
}

inline Matrix phase_descriptors(const PhasePartition& part) {
    const int w = part.phase_count();
    Matrix z(w, 3);
    for (int p = 0; p < w; ++p)
        z.row(p) = phase_descriptor(part.boundaries[p], part.boundaries[p + 1], part.fc_matrices[p],
                                    p == 0 ? nullptr : &part.fc_matrices[p - 1], part.length());
    return z;
}

class StructGenModel {
public:
    StructGenModel() = default;

    StructGenModel(StructGenConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const Index n = cfg_.n_rois;
        base_ = Parameter("structgen.base", Matrix::Constant(n, n, cfg_.init_const));
        fc1_ = Linear("structgen.fc1", 3, cfg_.hidden, rng);
        fc2_ = Linear("structgen.fc2", cfg_.hidden, n * n, rng);
        // zero final layer: the initial structure is exactly S_0
        fc2_.weight.value.setZero();
        fc2_.bias.value.setZero();
    }

    const StructGenConfig& config() const { return cfg_; }
    Index n_rois() const { return cfg_.n_rois; }

    Parameter& base() { return base_; }
    const Parameter& base() const { return base_; }
    Linear& fc1() { return fc1_; }
    Linear& fc2() { return fc2_; }
    const Linear& fc1() const { return fc1_; }
    const Linear& fc2() const { return fc2_; }

    std::vector<Parameter*> parameters() { return {&base_, &fc1_.weight, &fc1_.bias, &fc2_.weight, &fc2_.bias}; }

    // Keeps S_0 inside [0, 1] after an optimizer step.
    void project_base() { base_.value = base_.value.cwiseMax(0.0).cwiseMin(1.0); }

    template <class Self>
    static ad::Var base_var(Self& self, ad::Tape& t) {
        if constexpr (std::is_const_v<Self>)
            return t.frozen(self.base_);
        else
            return t.parameter(self.base_);
    }

    // Delta S for one descriptor row (1 x 3) -> N x N.
    template <class Self>
    static ad::Var increment_impl(Self& self, ad::Tape& t, const ad::Var& z) {
        ad::Var h = ad::tanh(self.fc1_.forward(t, z));
        ad::Var out = self.fc2_.forward(t, h);
        return ad::reshape(out, self.cfg_.n_rois, self.cfg_.n_rois);
    }

    ad::Var base_var(ad::Tape& t) { return base_var(*this, t); }
    ad::Var base_var(ad::Tape& t) const { return base_var(*this, t); }
    ad::Var increment(ad::Tape& t, const ad::Var& z) { return increment_impl(*this, t, z); }
    ad::Var increment(ad::Tape& t, const ad::Var& z) const { return increment_impl(*this, t, z); }

private:
    StructGenConfig cfg_;
    Parameter base_;
    Linear fc1_;
    Linear fc2_;
};

// Tape-level view of an evolved sequence; every list has W entries.
struct StructureVars {
    std::vector<ad::Var> continuous; // S_t in [0, 1]
    std::vector<ad::Var> binary;     // 1(S_t > 0.5), straight-through
    std::vector<ad::Var> positive;   // binary .* A_t
    std::vector<ad::Var> negative;   // (1 - binary) .* A_t
    std::vector<ad::Var> original;   // A_t as constants
    Matrix descriptors;              // W x 3

    int phase_count() const { return static_cast<int>(continuous.size()); }
};

// Plain-value snapshot of an evolved sequence.
struct StructureSequence {
    std::vector<Matrix> continuous;
    std::vector<Matrix> binary;
    std::vector<Matrix> positive_fc;
    std::vector<Matrix> negative_fc;
    Matrix descriptors;

    int phase_count() const { return static_cast<int>(continuous.size()); }
};

namespace structgen_detail {

inline ad::Var symmetrize(const ad::Var& s) { return ad::scale(ad::add(s, ad::transpose(s)), 0.5); }

template <class Model>
StructureVars evolve(Model& model, ad::Tape& t, const PhasePartition& part) {
    const int w = part.phase_count();
    if (w < 1) throw DimensionError("evolve_structures: partition has no phases");
    if (part.n_rois() != model.n_rois())
        throw DimensionError("evolve_structures: partition has N=" + std::to_string(part.n_rois()) +
                             " but the structure model has N=" + std::to_string(model.n_rois()));
    StructureVars out;
    out.descriptors = phase_descriptors(part);
    const double alpha = model.config().alpha_delta;
    ad::Var s = model.base_var(t);
    for (int p = 0; p < w; ++p) {
        ad::Var delta = model.increment(t, t.constant(out.descriptors.row(p)));
        s = ad::clamp_ste(symmetrize(ad::add(s, ad::scale(delta, alpha))), 0.0, 1.0);
        ad::Var mask = ad::threshold_ste(s, 0.5);
        ad::Var a = t.constant(part.fc_matrices[static_cast<std::size_t>(p)]);
        out.continuous.push_back(s);
        out.binary.push_back(mask);
        out.positive.push_back(ad::hadamard(mask, a));
        out.negative.push_back(ad::hadamard(ad::one_minus(mask), a));
        out.original.push_back(a);
    }
    return out;
}

} // namespace structgen_detail

// S_t = clamp01(sym(S_{t-1} + alpha * f(z_t))), S~_t = 1(S_t > 0.5),
// A+_t = S~_t .* A_t, A-_t = (1 - S~_t) .* A_t.
inline StructureVars evolve_structures(ad::Tape& t, StructGenModel& model, const PhasePartition& part) {
    return structgen_detail::evolve(model, t, part);
}
inline StructureVars evolve_structures(ad::Tape& t, const StructGenModel& model, const PhasePartition& part) {
    return structgen_detail::evolve(model, t, part);
}

inline StructureSequence snapshot(const StructureVars& v) {
    StructureSequence out;
    for (int p = 0; p < v.phase_count(); ++p) {
        out.continuous.push_back(v.continuous[p].value());
        out.binary.push_back(v.binary[p].value());
        out.positive_fc.push_back(v.positive[p].value());
        out.negative_fc.push_back(v.negative[p].value());
    }
    out.descriptors = v.descriptors;
    return out;
}

inline StructureSequence evolve_structures(const StructGenModel& model, const PhasePartition& part) {
    ad::Tape t;
    return snapshot(evolve_structures(t, model, part));
}

struct StructRegTerms {
    ad::Var bin; // sum_t ||S_t .* (1 - S_t)||_F^2
    ad::Var ms;  // sum_{t>=2} softplus(||S_t - S_{t-1}||_F^2 - delta)
    ad::Var sp;  // sum_t ||S_t||_1 / N^2
    ad::Var weighted;
};

inline StructRegTerms structure_regularizers(ad::Tape& t, const std::vector<ad::Var>& s,
                                             const StructRegWeights& wts) {
    wts.validate();
    if (s.empty()) throw DimensionError("structure_regularizers: no phases");
    const double n2 = static_cast<double>(s.front().rows() * s.front().cols());
    ad::Var zero = t.constant(Matrix::Zero(1, 1));
    ad::Var bin = zero, ms = zero, sp = zero;
    for (std::size_t p = 0; p < s.size(); ++p) {
        bin = ad::add(bin, ad::frobenius_sq(ad::hadamard(s[p], ad::one_minus(s[p]))));
        // S_t lies in [0, 1], so the L1 norm is the plain entry sum
        sp = ad::add(sp, ad::scale(ad::sum(s[p]), 1.0 / n2));
        if (p > 0) ms = ad::add(ms, ad::softplus(ad::add_scalar(ad::frobenius_sq(ad::sub(s[p], s[p - 1])), -wts.delta_margin)));
    }
    ad::Var weighted =
        ad::add(ad::scale(bin, wts.lambda_bin), ad::add(ad::scale(ms, wts.lambda_ms), ad::scale(sp, wts.lambda_sp)));
    return {bin, ms, sp, weighted};
}

// Fraction of upper-triangle entries equal to 1.
inline double retained_ratio(const Matrix& mask) {
    const Index n = mask.rows();
    if (n < 2) return 0.0;
    long kept = 0;
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) kept += mask(i, j) > 0.5 ? 1 : 0;
    return static_cast<double>(kept) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

} // namespace brainstr
