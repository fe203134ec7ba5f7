#pragma once

// Phase attention, important-phase selection, aggregation, the linear
// classifier, and the contrastive and composite training objectives.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "log.hpp"
#include "nn.hpp"
#include "structgen.hpp"

namespace brainstr {

struct ContrastConfig {
    double w_ref = 1.0;
    double w_usl = 1.0;
    double tau = 0.1;
    double beta = 0.65;
    double lambda_str = 1.0;

    void validate() const {
        if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("contrast: tau must be > 0");
        if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("contrast: beta must lie in [0, 1]");
        for (double v : {w_ref, w_usl, lambda_str})
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("contrast: weights must be finite and >= 0");
    }
};

struct AttentionConfig {
    int embed_dim = 32;
    int hidden = 32;
    int n_classes = 2;

    void validate() const {
        if (embed_dim < 1 || hidden < 1) throw ConfigError("attention: sizes must be positive");
        if (n_classes < 2) throw ConfigError("attention: need at least 2 classes");
    }
};

class AttentionModel {
public:
    AttentionModel() = default;

    AttentionModel(AttentionConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        score1_ = Linear("attention.score1", cfg_.embed_dim, cfg_.hidden, rng);
        score2_ = Linear("attention.score2", cfg_.hidden, 1, rng);
        classifier_ = Linear("classifier", cfg_.embed_dim, cfg_.n_classes, rng);
    }

    const AttentionConfig& config() const { return cfg_; }
    Linear& scorer_in() { return score1_; }
    Linear& scorer_out() { return score2_; }
    Linear& classifier() { return classifier_; }
    const Linear& classifier() const { return classifier_; }

    std::vector<Parameter*> parameters() {
        return {&score1_.weight, &score1_.bias, &score2_.weight, &score2_.bias, &classifier_.weight, &classifier_.bias};
    }

    template <class Self>
    static ad::Var scores_impl(Self& self, ad::Tape& t, const ad::Var& h) {
        return self.score2_.forward(t, ad::tanh(self.score1_.forward(t, h)));
    }
    template <class Self>
    static ad::Var logits_impl(Self& self, ad::Tape& t, const ad::Var& h) {
        return self.classifier_.forward(t, h);
    }

    // W x d -> W x 1 scores (Linear-Tanh-Linear).
    ad::Var scores(ad::Tape& t, const ad::Var& h) { return scores_impl(*this, t, h); }
    ad::Var scores(ad::Tape& t, const ad::Var& h) const { return scores_impl(*this, t, h); }
    // B x d -> B x classes logits W_c h + b_c.
    ad::Var logits(ad::Tape& t, const ad::Var& h) { return logits_impl(*this, t, h); }
    ad::Var logits(ad::Tape& t, const ad::Var& h) const { return logits_impl(*this, t, h); }

private:
    AttentionConfig cfg_;
    Linear score1_;
    Linear score2_;
    Linear classifier_;
};

// I = {t : alpha_t > 1/W}; when empty, the first index of the maximum.
inline std::vector<Index> important_set(const Matrix& alpha) {
    const Index w = alpha.size();
    if (w < 1) throw DimensionError("important_set: no phases");
    const double uniform = 1.0 / static_cast<double>(w);
    std::vector<Index> out;
    for (Index k = 0; k < w; ++k)
        if (alpha(k) > uniform) out.push_back(k);
    if (out.empty()) {
        Index best = 0;
        for (Index k = 1; k < w; ++k)
            if (alpha(k) > alpha(best)) best = k;
        out.push_back(best);
    }
    return out;
}

struct BundleVars {
    ad::Var alpha_plus;  // W x 1
    ad::Var alpha_minus; // W x 1
    ad::Var alpha_zero;  // W x 1
    std::vector<Index> important;
    ad::Var alpha_tilde; // |I| x 1
    ad::Var h_pp;        // 1 x d
    ad::Var h_zero;      // 1 x d
    ad::Var h_minus;     // 1 x d
};

struct EmbeddingBundle {
    Matrix h_plus, h_minus, h_zero; // W x d
    Vector alpha_plus, alpha_minus, alpha_zero;
    std::vector<Index> important_set;
    Vector alpha_tilde;
    RowVector H_pp, H_zero, H_minus;
};

// alpha~ over I is the softmax of the scores restricted to I, which equals
// alpha_t / sum_{k in I} alpha_k.
template <class Attn>
BundleVars attend_and_aggregate(ad::Tape& t, Attn& attn, const PhaseEmbeddings& emb) {
    if (emb.plus.rows() < 1) throw DimensionError("attend_and_aggregate: W must be >= 1");
    if (emb.minus.rows() != emb.plus.rows() || emb.zero.rows() != emb.plus.rows())
        throw DimensionError("attend_and_aggregate: stream lengths differ");
    BundleVars b;
    ad::Var sp = attn.scores(t, emb.plus);
    b.alpha_plus = ad::softmax_col(sp);
    b.alpha_minus = ad::softmax_col(attn.scores(t, emb.minus));
    b.alpha_zero = ad::softmax_col(attn.scores(t, emb.zero));
    b.important = important_set(b.alpha_plus.value());
    b.alpha_tilde = ad::softmax_col(ad::select_rows(sp, b.important));
    b.h_pp = ad::matmul(ad::transpose(b.alpha_tilde), ad::select_rows(emb.plus, b.important));
    b.h_zero = ad::matmul(ad::transpose(b.alpha_zero), emb.zero);
    b.h_minus = ad::matmul(ad::transpose(b.alpha_minus), emb.minus);
    return b;
}

inline EmbeddingBundle snapshot(const PhaseEmbeddings& emb, const BundleVars& b) {
    EmbeddingBundle out;
    out.h_plus = emb.plus.value();
    out.h_minus = emb.minus.value();
    out.h_zero = emb.zero.value();
    out.alpha_plus = b.alpha_plus.value().col(0);
    out.alpha_minus = b.alpha_minus.value().col(0);
    out.alpha_zero = b.alpha_zero.value().col(0);
    out.important_set = b.important;
    out.alpha_tilde = b.alpha_tilde.value().col(0);
    out.H_pp = b.h_pp.value().row(0);
    out.H_zero = b.h_zero.value().row(0);
    out.H_minus = b.h_minus.value().row(0);
    return out;
}

// Row-wise softmax of B x classes logits.
inline Matrix class_probabilities(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        RowVector e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

inline RowVector classify(const AttentionModel& attn, const RowVector& h_pp) {
    if (!h_pp.allFinite()) throw DimensionError("classify: H++ must be finite");
    ad::Tape t;
    return class_probabilities(attn.logits(t, t.constant(h_pp)).value()).row(0);
}

namespace ad {

// Supervised InfoNCE over a B x B logit matrix. Row i contributes
//   log sum_{j != i} exp(l_ij) - mean_{p in P(i)} l_ip,
// P(i) = {p != i : y_p = y_i}; rows with empty P(i) are skipped and the
// result is the mean over contributing rows (0 when none contribute).
inline Var supervised_infonce(const Var& logits, const std::vector<int>& labels) {
    const Index b = logits.rows();
    if (logits.cols() != b) throw DimensionError("supervised_infonce: logits must be B x B");
    if (static_cast<Index>(labels.size()) != b) throw DimensionError("supervised_infonce: label count mismatch");
    const Matrix& l = logits.value();
    Matrix grad = Matrix::Zero(b, b);
    double loss = 0.0;
    int contributing = 0;
    for (Index i = 0; i < b; ++i) {
        std::vector<Index> pos;
        for (Index j = 0; j < b; ++j)
            if (j != i && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) pos.push_back(j);
        if (pos.empty()) continue;
        ++contributing;
        double mx = -INFINITY;
        for (Index j = 0; j < b; ++j)
            if (j != i) mx = std::max(mx, l(i, j));
        double z = 0.0;
        for (Index j = 0; j < b; ++j)
            if (j != i) z += std::exp(l(i, j) - mx);
        const double lse = mx + std::log(z);
        double pos_mean = 0.0;
        for (Index p : pos) pos_mean += l(i, p);
        pos_mean /= static_cast<double>(pos.size());
        loss += lse - pos_mean;
        for (Index j = 0; j < b; ++j)
            if (j != i) grad(i, j) = std::exp(l(i, j) - lse);
        for (Index p : pos) grad(i, p) -= 1.0 / static_cast<double>(pos.size());
    }
    Matrix out(1, 1);
    out(0, 0) = contributing > 0 ? loss / contributing : 0.0;
    if (contributing > 0) grad /= static_cast<double>(contributing);
    return logits.tape().record(std::move(out), {logits},
                                [logits, grad](Tape& t, const Matrix& g) { t.accumulate(logits, grad * g(0, 0)); });
}

// Diagonal InfoNCE: mean over rows of log sum_j exp(l_ij) - l_ii.
inline Var diagonal_infonce(const Var& logits) {
    const Index b = logits.rows();
    if (logits.cols() != b || b < 1) throw DimensionError("diagonal_infonce: logits must be B x B with B >= 1");
    const Matrix& l = logits.value();
    Matrix grad(b, b);
    double loss = 0.0;
    for (Index i = 0; i < b; ++i) {
        const double mx = l.row(i).maxCoeff();
        const double lse = mx + std::log((l.row(i).array() - mx).exp().sum());
        loss += lse - l(i, i);
        grad.row(i) = (l.row(i).array() - lse).exp();
        grad(i, i) -= 1.0;
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(b);
    grad /= static_cast<double>(b);
    return logits.tape().record(std::move(out), {logits},
                                [logits, grad](Tape& t, const Matrix& g) { t.accumulate(logits, grad * g(0, 0)); });
}

} // namespace ad

struct ContrastTerms {
    ad::Var ref;
    ad::Var usl;
    ad::Var str; // w_ref * ref + w_usl * usl
};

namespace objective_detail {

inline void warn_zero_rows(const Matrix& m, const char* what) {
    for (Index i = 0; i < m.rows(); ++i)
        if (!(m.row(i).norm() > 0.0)) {
            log::warn(std::string("contrastive_loss: zero-norm ") + what + " embedding; cosine taken as 0");
            return;
        }
}

} // namespace objective_detail

// h_pp, h_zero, h_minus: B x d (one row per subject).
//   l_ref_ij = (cos(H++_i, H++_j) - beta cos(H0_i, H0_j)) / tau
//   l_usl_ij = cos(H0_i, H-_j) / tau
inline ContrastTerms contrastive_loss(const ad::Var& h_pp, const ad::Var& h_zero, const ad::Var& h_minus,
                                      const std::vector<int>& labels, const ContrastConfig& cfg) {
    cfg.validate();
    const Index b = h_pp.rows();
    if (b < 1) throw DimensionError("contrastive_loss: empty batch");
    if (h_zero.rows() != b || h_minus.rows() != b || static_cast<Index>(labels.size()) != b)
        throw DimensionError("contrastive_loss: batch sizes differ");
    objective_detail::warn_zero_rows(h_pp.value(), "H++");
    objective_detail::warn_zero_rows(h_zero.value(), "H0");
    objective_detail::warn_zero_rows(h_minus.value(), "H-");

    bool any_positive = false;
    for (Index i = 0; i < b && !any_positive; ++i)
        for (Index j = 0; j < b; ++j)
            if (j != i && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) any_positive = true;
    if (!any_positive) log::warn("contrastive_loss: no subject has a same-label peer; reference term is 0");

    ad::Var ref_logits =
        ad::scale(ad::sub(ad::cosine_matrix(h_pp, h_pp), ad::scale(ad::cosine_matrix(h_zero, h_zero), cfg.beta)),
                  1.0 / cfg.tau);
    ad::Var ref = ad::supervised_infonce(ref_logits, labels);
    ad::Var usl = ad::diagonal_infonce(ad::scale(ad::cosine_matrix(h_zero, h_minus), 1.0 / cfg.tau));
    ad::Var str = ad::add(ad::scale(ref, cfg.w_ref), ad::scale(usl, cfg.w_usl));
    return {ref, usl, str};
}

struct LossTerms {
    ad::Var total;
    ad::Var ce;
    ad::Var ref;
    ad::Var usl;
    ad::Var str;
    ad::Var bin; // batch means of the per-subject structure terms
    ad::Var ms;
    ad::Var sp;
};

// L = CE + lambda_str L_str + lambda_bin L_bin + lambda_ms L_ms + lambda_sp L_sp.
// CE and the contrastive terms are batch means; each structure term is the
// per-subject sum over phases averaged over the batch.
inline LossTerms total_loss(ad::Tape& t, const ad::Var& logits, const ad::Var& h_pp, const ad::Var& h_zero,
                            const ad::Var& h_minus, const std::vector<int>& labels,
                            const std::vector<std::vector<ad::Var>>& structures, const ContrastConfig& contrast,
                            const StructRegWeights& reg) {
    contrast.validate();
    reg.validate();
    const Index b = logits.rows();
    if (static_cast<Index>(structures.size()) != b) throw DimensionError("total_loss: one structure list per subject");
    LossTerms out;
    out.ce = ad::cross_entropy(logits, labels);
    ContrastTerms c = contrastive_loss(h_pp, h_zero, h_minus, labels, contrast);
    out.ref = c.ref;
    out.usl = c.usl;
    out.str = c.str;

    std::vector<ad::Var> bins, mss, sps;
    for (const auto& s : structures) {
        StructRegTerms r = structure_regularizers(t, s, reg);
        bins.push_back(r.bin);
        mss.push_back(r.ms);
        sps.push_back(r.sp);
    }
    out.bin = ad::mean(ad::vcat(bins));
    out.ms = ad::mean(ad::vcat(mss));
    out.sp = ad::mean(ad::vcat(sps));

    ad::Var total = out.ce;
    if (contrast.lambda_str != 0.0) total = ad::add(total, ad::scale(out.str, contrast.lambda_str));
    if (reg.lambda_bin != 0.0) total = ad::add(total, ad::scale(out.bin, reg.lambda_bin));
    if (reg.lambda_ms != 0.0) total = ad::add(total, ad::scale(out.ms, reg.lambda_ms));
    if (reg.lambda_sp != 0.0) total = ad::add(total, ad::scale(out.sp, reg.lambda_sp));
    out.total = total;
    return out;
}

} // namespace brainstr
