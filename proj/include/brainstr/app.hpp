#pragma once

// Adaptive phase partition: a dilated causal temporal-convolution autoencoder
// whose pooled latent is split into a slowly varying state code and a residual
// code, followed by changepoint detection on consecutive state-code distances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "log.hpp"
#include "nn.hpp"
#include "segfc.hpp"

namespace brainstr {

struct AppArchitecture {
    int n_rois = 16;
    int window = 40;
    int hidden_channels = 64;
    int kernel = 3;
    std::vector<int> dilations = {1, 2, 4};
    int latent_dim = 32;
    int state_dim = 16;

    int resid_dim() const { return latent_dim - state_dim; }

    void validate() const {
        if (n_rois < 1 || window < 1 || hidden_channels < 1 || kernel < 1)
            throw ConfigError("app architecture: sizes must be positive");
        if (dilations.empty()) throw ConfigError("app architecture: need at least one dilation");
        for (int d : dilations)
            if (d < 1) throw ConfigError("app architecture: dilations must be >= 1");
        if (state_dim < 1 || state_dim >= latent_dim)
            throw ConfigError("app architecture: need 1 <= state_dim < latent_dim");
    }
};

struct AppLossWeights {
    double lambda_smooth = 0.1;
    double lambda_orth = 1.0;

    void validate() const {
        if (!(lambda_smooth >= 0.0) || !std::isfinite(lambda_smooth) || !(lambda_orth >= 0.0) ||
            !std::isfinite(lambda_orth))
            throw ConfigError("app loss weights must be finite and >= 0");
    }
};

struct ChangepointConfig {
    double tau_c = 0.1;
    int min_fc_len = kDefaultMinFcLen;

    void validate() const {
        if (!(tau_c > 0.0)) throw ConfigError("tau_c must be > 0");
        if (min_fc_len < 1) throw ConfigError("min_fc_len must be >= 1");
    }
};

// Per-segment latent codes, one row per segment.
struct SegmentLatents {
    Matrix state;    // K x state_dim
    Matrix residual; // K x resid_dim

    Index count() const { return state.rows(); }
};

class AppModel {
public:
    AppModel() = default;

    AppModel(AppArchitecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
        arch_.validate();
        Rng rng(seed);
        const int layers = static_cast<int>(arch_.dilations.size());
        for (int l = 0; l < layers; ++l) {
            const int in = l == 0 ? arch_.n_rois : arch_.hidden_channels;
            const int out = l + 1 == layers ? arch_.latent_dim : arch_.hidden_channels;
            encoder_.emplace_back("enc" + std::to_string(l), in, out, arch_.kernel, arch_.dilations[l], rng);
        }
        for (int l = 0; l < layers; ++l) {
            const int in = l == 0 ? arch_.latent_dim : arch_.hidden_channels;
            const int out = l + 1 == layers ? arch_.n_rois : arch_.hidden_channels;
            // decoder mirrors the dilation schedule
            const int dil = arch_.dilations[static_cast<std::size_t>(layers - 1 - l)];
            decoder_.emplace_back("dec" + std::to_string(l), in, out, arch_.kernel, dil, rng);
        }
        state_mean_ = RowVector::Zero(arch_.state_dim);
        state_var_ = RowVector::Ones(arch_.state_dim);
    }

    const AppArchitecture& architecture() const { return arch_; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& c : encoder_)
            for (auto* p : c.parameters()) out.push_back(p);
        for (auto& c : decoder_)
            for (auto* p : c.parameters()) out.push_back(p);
        return out;
    }
    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (auto* p : const_cast<AppModel*>(this)->parameters()) out.push_back(p);
        return out;
    }

    enum class Mode {
        kTrain,     // state code standardized with the statistics of the current batch
        kInference, // state code standardized with stored population statistics
    };

    // x: (batch*window) x N  ->  pooled latent, batch x latent_dim, before standardization.
    template <class Self>
    static ad::Var encode_raw_impl(Self& self, ad::Tape& t, const ad::Var& x, Index batch) {
        const Index w = self.arch_.window;
        if (x.cols() != self.arch_.n_rois || x.rows() != batch * w)
            throw DimensionError("app encoder: expected (" + std::to_string(batch) + "*" + std::to_string(w) +
                                 ") x " + std::to_string(self.arch_.n_rois) + " input, got " +
                                 std::to_string(x.rows()) + " x " + std::to_string(x.cols()));
        ad::Var y = x;
        for (std::size_t l = 0; l < self.encoder_.size(); ++l) {
            y = self.encoder_[l].forward(t, y, batch, w);
            if (l + 1 < self.encoder_.size()) y = ad::relu(y);
        }
        return ad::mean_pool_time(y, batch, w);
    }

    // h = [s, u] with s standardized per dimension.
    template <class Self>
    static ad::Var encode_impl(Self& self, ad::Tape& t, const ad::Var& x, Index batch, Mode mode) {
        ad::Var raw = encode_raw_impl(self, t, x, batch);
        ad::Var s = ad::slice_cols(raw, 0, self.arch_.state_dim);
        ad::Var u = ad::slice_cols(raw, self.arch_.state_dim, self.arch_.resid_dim());
        if (mode == Mode::kTrain) {
            s = ad::batch_standardize(s, kStandardizeEps);
        } else {
            RowVector inv = (self.state_var_.array() + kStandardizeEps).rsqrt();
            s = ad::matmul(ad::add_row_broadcast(s, t.constant(-self.state_mean_)),
                           t.constant(Matrix(inv.asDiagonal())));
        }
        return ad::hcat({s, u});
    }

    template <class Self>
    static ad::Var decode_impl(Self& self, ad::Tape& t, const ad::Var& h) {
        const Index w = self.arch_.window;
        const Index batch = h.rows();
        ad::Var y = ad::repeat_time(h, w);
        for (std::size_t l = 0; l < self.decoder_.size(); ++l) {
            y = self.decoder_[l].forward(t, y, batch, w);
            if (l + 1 < self.decoder_.size()) y = ad::relu(y);
        }
        return y;
    }

    ad::Var encode(ad::Tape& t, const ad::Var& x, Index batch, Mode mode = Mode::kTrain) {
        return encode_impl(*this, t, x, batch, mode);
    }
    ad::Var encode(ad::Tape& t, const ad::Var& x, Index batch, Mode mode = Mode::kInference) const {
        return encode_impl(*this, t, x, batch, mode);
    }
    ad::Var decode(ad::Tape& t, const ad::Var& h) { return decode_impl(*this, t, h); }
    ad::Var decode(ad::Tape& t, const ad::Var& h) const { return decode_impl(*this, t, h); }

    ad::Var state_part(const ad::Var& h) const { return ad::slice_cols(h, 0, arch_.state_dim); }
    ad::Var residual_part(const ad::Var& h) const {
        return ad::slice_cols(h, arch_.state_dim, arch_.resid_dim());
    }

    const RowVector& state_mean() const { return state_mean_; }
    const RowVector& state_var() const { return state_var_; }
    void set_state_statistics(RowVector mean, RowVector var) {
        if (mean.size() != arch_.state_dim || var.size() != arch_.state_dim)
            throw DimensionError("state statistics must have state_dim entries");
        if ((var.array() < 0.0).any()) throw DimensionError("state variance must be >= 0");
        state_mean_ = std::move(mean);
        state_var_ = std::move(var);
    }

    // Population mean/variance of the raw state code over every segment given.
    void update_state_statistics(const std::vector<SegmentSequence>& seqs, Index chunk = 256) {
        RowVector sum = RowVector::Zero(arch_.state_dim), sq = RowVector::Zero(arch_.state_dim);
        Index n = 0;
        for (const auto& seq : seqs) {
            check_segments(seq);
            for (Index begin = 0; begin < seq.count(); begin += chunk) {
                const Index m = std::min(chunk, seq.count() - begin);
                ad::Tape t;
                const AppModel& self = *this;
                ad::Var raw = encode_raw_impl(self, t, t.constant(stack_segments(seq, begin, m)), m);
                Matrix s = raw.value().leftCols(arch_.state_dim);
                sum += s.colwise().sum();
                n += m;
            }
        }
        if (n == 0) return;
        RowVector mean = sum / static_cast<double>(n);
        for (const auto& seq : seqs)
            for (Index begin = 0; begin < seq.count(); begin += chunk) {
                const Index m = std::min(chunk, seq.count() - begin);
                ad::Tape t;
                const AppModel& self = *this;
                ad::Var raw = encode_raw_impl(self, t, t.constant(stack_segments(seq, begin, m)), m);
                Matrix s = raw.value().leftCols(arch_.state_dim);
                sq += (s.rowwise() - mean).colwise().squaredNorm();
            }
        set_state_statistics(mean, sq / static_cast<double>(n));
    }

    static constexpr double kStandardizeEps = 1e-5;

    // Forward pass over every segment (no gradients).
    SegmentLatents encode_segments(const SegmentSequence& segs, Index chunk = 256) const {
        check_segments(segs);
        const Index k = segs.count();
        SegmentLatents out{Matrix(k, arch_.state_dim), Matrix(k, arch_.resid_dim())};
        for (Index begin = 0; begin < k; begin += chunk) {
            const Index n = std::min(chunk, k - begin);
            ad::Tape t;
            ad::Var h = encode(t, t.constant(stack_segments(segs, begin, n)), n, Mode::kInference);
            out.state.middleRows(begin, n) = h.value().leftCols(arch_.state_dim);
            out.residual.middleRows(begin, n) = h.value().rightCols(arch_.resid_dim());
        }
        return out;
    }

    void check_segments(const SegmentSequence& segs) const {
        if (segs.window != arch_.window)
            throw DimensionError("segment window " + std::to_string(segs.window) + " != model window " +
                                 std::to_string(arch_.window));
        for (const auto& s : segs.segments)
            if (s.rows() != arch_.window || s.cols() != arch_.n_rois)
                throw DimensionError("segment shape does not match model input shape");
    }

    static Matrix stack_segments(const SegmentSequence& segs, Index begin, Index count) {
        const Index w = segs.window;
        const Index n = segs.segments.empty() ? 0 : segs.segments.front().cols();
        Matrix x(count * w, n);
        for (Index i = 0; i < count; ++i) x.middleRows(i * w, w) = segs.segments[static_cast<std::size_t>(begin + i)];
        return x;
    }

private:
    AppArchitecture arch_;
    std::vector<CausalConv1d> encoder_;
    std::vector<CausalConv1d> decoder_;
    RowVector state_mean_;
    RowVector state_var_;
};

struct AppLossTerms {
    ad::Var total;
    ad::Var recon;
    ad::Var smooth;
    ad::Var orth;
};

// Loss over a stack of segments made of one or more runs of consecutive
// segments (one run per subject). x is (sum(runs)*window) x N.
//   recon  = mean squared reconstruction error over segments and entries
//   smooth = mean over consecutive pairs within a run of ||s_k - s_{k-1}||^2
//   orth   = mean over segments of cos^2(s_k, u_k)
inline AppLossTerms app_loss(ad::Tape& t, AppModel& model, const Matrix& x, const std::vector<Index>& runs,
                             const AppLossWeights& weights) {
    weights.validate();
    const Index total = std::accumulate(runs.begin(), runs.end(), Index{0});
    for (Index r : runs)
        if (r < 2) throw DimensionError("app_loss: every run needs K >= 2 segments for the smoothness term");
    if (runs.empty()) throw DimensionError("app_loss: no segments");

    ad::Var xin = t.constant(x);
    ad::Var h = model.encode(t, xin, total);
    ad::Var recon = ad::mean(ad::square(ad::sub(model.decode(t, h), xin)));

    ad::Var s = model.state_part(h);
    ad::Var u = model.residual_part(h);
    std::vector<ad::Var> diffs;
    Index offset = 0, pairs = 0;
    for (Index r : runs) {
        diffs.push_back(ad::sub(ad::slice_rows(s, offset + 1, r - 1), ad::slice_rows(s, offset, r - 1)));
        offset += r;
        pairs += r - 1;
    }
    ad::Var smooth = ad::scale(ad::frobenius_sq(ad::vcat(diffs)), 1.0 / static_cast<double>(pairs));
    ad::Var orth = ad::mean(ad::square(ad::row_cosine(s, u)));

    ad::Var tot = ad::add(recon, ad::add(ad::scale(smooth, weights.lambda_smooth), ad::scale(orth, weights.lambda_orth)));
    return {tot, recon, smooth, orth};
}

// Single-subject convenience form over a whole segment sequence.
inline AppLossTerms app_loss(ad::Tape& t, AppModel& model, const SegmentSequence& segs, const AppLossWeights& weights) {
    model.check_segments(segs);
    if (segs.count() < 2) throw DimensionError("app_loss: K < 2, smoothness term undefined");
    return app_loss(t, model, AppModel::stack_segments(segs, 0, segs.count()), {segs.count()}, weights);
}

// d_k = ||s_k - s_{k-1}||^2 for k = 1..K-1 (0-based), returned as a length K-1 vector.
inline Vector latent_distances(const Matrix& state) {
    if (state.rows() < 2) throw DimensionError("latent_distances: need K >= 2");
    Vector d(state.rows() - 1);
    for (Index k = 1; k < state.rows(); ++k) d(k - 1) = (state.row(k) - state.row(k - 1)).squaredNorm();
    return d;
}

// Segment k (0-based) whose distance to its predecessor exceeds tau_c marks a
// boundary at the centre of its window, round(k*s + w/2). Runs of consecutive
// exceedances collapse to their largest distance; candidates closer than
// min_fc_len to a kept boundary (or to 0/T) keep the larger distance.
inline std::vector<int> detect_changepoints(const Matrix& state, const ChangepointConfig& cfg, Index w, Index s,
                                            Index t_total) {
    cfg.validate();
    if (t_total < cfg.min_fc_len) throw DimensionError("detect_changepoints: series shorter than min_fc_len");
    const Vector d = latent_distances(state);

    struct Candidate {
        int time;
        double score;
    };
    std::vector<Candidate> cands;
    Index k = 0;
    while (k < d.size()) {
        if (!(d(k) > cfg.tau_c)) {
            ++k;
            continue;
        }
        Index best = k;
        while (k < d.size() && d(k) > cfg.tau_c) {
            if (d(k) > d(best)) best = k;
            ++k;
        }
        const Index seg = best + 1; // distance index -> segment index
        const double centre = static_cast<double>(seg * s) + static_cast<double>(w) / 2.0;
        cands.push_back({static_cast<int>(std::lround(centre)), d(best)});
    }

    const int t_end = static_cast<int>(t_total);
    std::vector<Candidate> kept;
    for (const auto& c : cands) {
        if (c.time < cfg.min_fc_len || t_end - c.time < cfg.min_fc_len) continue;
        if (!kept.empty() && c.time - kept.back().time < cfg.min_fc_len) {
            if (c.score > kept.back().score) kept.back() = c;
            continue;
        }
        kept.push_back(c);
    }
    std::vector<int> out{0};
    for (const auto& c : kept) out.push_back(c.time);
    out.push_back(t_end);
    return out;
}

struct PretrainConfig {
    int epochs = 100;
    int batch_size = 8;          // subjects per step
    int segments_per_subject = 64; // contiguous run sampled per subject per step; 0 = all
    int step = 1;
    AppLossWeights weights;
    AdamConfig adam;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("app epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("app batch_size must be >= 1");
        if (segments_per_subject < 0 || segments_per_subject == 1)
            throw ConfigError("segments_per_subject must be 0 (all) or >= 2");
        if (step < 1) throw ConfigError("segment step must be >= 1");
        weights.validate();
    }
};

struct PretrainResult {
    std::vector<double> loss_curve;   // per-epoch mean total loss
    std::vector<double> recon_curve;
    std::vector<double> smooth_curve;
    std::vector<double> orth_curve;
};

// Mini-batch training over subjects. Deterministic given cfg.seed.
inline PretrainResult pretrain_app(AppModel& model, const std::vector<const Matrix*>& signals,
                                   const PretrainConfig& cfg) {
    cfg.validate();
    if (signals.empty()) throw ConfigError("pretrain_app: dataset is empty");
    const Index w = model.architecture().window;
    std::vector<SegmentSequence> seqs;
    seqs.reserve(signals.size());
    for (const Matrix* sig : signals) {
        seqs.push_back(segment(*sig, w, cfg.step, false));
        if (seqs.back().count() < 2) throw DimensionError("pretrain_app: subject yields fewer than 2 segments");
        model.check_segments(seqs.back());
    }
    if (cfg.step != 1) log::warn("pretrain_app: segment step " + std::to_string(cfg.step) + " != 1");

    PretrainResult result;
    Adam opt(model.parameters(), cfg.adam);
    Rng rng(cfg.seed ^ 0xA99ULL);
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double tot = 0, rec = 0, smo = 0, ort = 0;
        int batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Index> runs;
            std::vector<std::pair<std::size_t, Index>> picks;
            Index rows = 0;
            for (std::size_t i = b0; i < b1; ++i) {
                const SegmentSequence& sq = seqs[order[i]];
                const Index len = cfg.segments_per_subject == 0 ? sq.count()
                                                                : std::min<Index>(cfg.segments_per_subject, sq.count());
                const Index start =
                    std::uniform_int_distribution<Index>(0, sq.count() - len)(rng);
                picks.emplace_back(order[i], start);
                runs.push_back(len);
                rows += len * w;
            }
            Matrix x(rows, model.architecture().n_rois);
            Index off = 0;
            for (std::size_t i = 0; i < picks.size(); ++i) {
                x.middleRows(off, runs[i] * w) = AppModel::stack_segments(seqs[picks[i].first], picks[i].second, runs[i]);
                off += runs[i] * w;
            }
            ad::Tape t;
            AppLossTerms terms = app_loss(t, model, x, runs, cfg.weights);
            const double lv = terms.total.scalar();
            if (!std::isfinite(lv))
                throw TrainingError("APP pretraining diverged at epoch " + std::to_string(epoch + 1) +
                                    " (non-finite loss)");
            opt.zero_grad();
            t.backward(terms.total);
            opt.step();
            tot += lv;
            rec += terms.recon.scalar();
            smo += terms.smooth.scalar();
            ort += terms.orth.scalar();
            ++batches;
        }
        result.loss_curve.push_back(tot / batches);
        result.recon_curve.push_back(rec / batches);
        result.smooth_curve.push_back(smo / batches);
        result.orth_curve.push_back(ort / batches);
    }
    if (cfg.epochs > 0) model.update_state_statistics(seqs);
    return result;
}

// Segments a signal, encodes every window and returns the state-code latents.
inline SegmentLatents encode_signal(const AppModel& model, const Matrix& signal, Index step = 1) {
    return model.encode_segments(segment(signal, model.architecture().window, step, false));
}

} // namespace brainstr
