#pragma once

// Structure-aware encoder shared by the retained, complementary and original
// phase graphs: edge-to-edge cross filters, an edge-to-node filter and an MLP
// head producing one d-dimensional embedding per N x N matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "nn.hpp"

namespace brainstr {

struct EncoderConfig {
    int n_rois = 16;
    int e2e_channels = 8;
    int e2n_channels = 8;
    int hidden = 64;
    int embed_dim = 32;
    double leaky_slope = 0.01;

    void validate() const {
        if (n_rois < 1 || e2e_channels < 1 || e2n_channels < 1 || hidden < 1 || embed_dim < 1)
            throw ConfigError("encoder: sizes must be positive");
        if (!(leaky_slope >= 0.0)) throw ConfigError("encoder: leaky_slope must be >= 0");
    }
};

namespace ad {

// Edge-to-edge cross filter over a stack of M square matrices.
// x: (M*N) x N, matrix m occupying rows [m*N, (m+1)*N).
// row_w, col_w: N x C. bias: 1 x C.
// Output: (M*N) x (C*N) with out[(m,i), c*N + j] =
//     sum_k A_m[i,k] row_w[k,c] + sum_k A_m[k,j] col_w[k,c] + bias[c].
inline Var edge_to_edge(const Var& x, const Var& row_w, const Var& col_w, const Var& bias) {
    const Index n = x.cols();
    if (n == 0 || x.rows() % n != 0) throw DimensionError("edge_to_edge: input must stack N x N matrices");
    if (row_w.rows() != n || col_w.rows() != n)
        throw DimensionError("edge_to_edge: filter length " + std::to_string(row_w.rows()) + " != N=" +
                             std::to_string(n));
    const Index c = row_w.cols();
    if (col_w.cols() != c || bias.rows() != 1 || bias.cols() != c) throw DimensionError("edge_to_edge: channel mismatch");
    const Index m = x.rows() / n;
    const Matrix& xv = x.value();

    Matrix r = xv * row_w.value(); // (M*N) x C, row responses
    Matrix colr(m * n, c);         // (M*N) x C, column responses indexed by (m, j)
    for (Index b = 0; b < m; ++b) colr.middleRows(b * n, n).noalias() = xv.middleRows(b * n, n).transpose() * col_w.value();

    Matrix out(m * n, c * n);
    for (Index b = 0; b < m; ++b)
        for (Index ch = 0; ch < c; ++ch) {
            const RowVector cols = colr.col(ch).segment(b * n, n).transpose();
            for (Index i = 0; i < n; ++i)
                out.row(b * n + i).segment(ch * n, n) = cols.array() + (r(b * n + i, ch) + bias.value()(0, ch));
        }

    return x.tape().record(std::move(out), {x, row_w, col_w, bias}, [x, row_w, col_w, bias, m, n, c](Tape& t, const Matrix& g) {
        Matrix gr(m * n, c), gc(m * n, c);
        for (Index b = 0; b < m; ++b)
            for (Index ch = 0; ch < c; ++ch) {
                const auto blk = g.block(b * n, ch * n, n, n);
                gr.col(ch).segment(b * n, n) = blk.rowwise().sum();
                gc.col(ch).segment(b * n, n) = blk.colwise().sum().transpose();
            }
        const Matrix& xv = x.value();
        if (t.requires_grad(bias)) t.accumulate(bias, gr.colwise().sum());
        if (t.requires_grad(row_w)) t.accumulate(row_w, xv.transpose() * gr);
        if (t.requires_grad(col_w)) {
            Matrix gw = Matrix::Zero(n, c);
            for (Index b = 0; b < m; ++b) gw.noalias() += xv.middleRows(b * n, n) * gc.middleRows(b * n, n);
            t.accumulate(col_w, gw);
        }
        if (t.requires_grad(x)) {
            Matrix gx = gr * row_w.value().transpose();
            for (Index b = 0; b < m; ++b)
                gx.middleRows(b * n, n).noalias() += col_w.value() * gc.middleRows(b * n, n).transpose();
            t.accumulate(x, gx);
        }
    });
}

} // namespace ad

class EncoderModel {
public:
    EncoderModel() = default;

    EncoderModel(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const Index n = cfg_.n_rois, c1 = cfg_.e2e_channels, c2 = cfg_.e2n_channels;
        // fan-in of one E2E response is 2N (row filter plus column filter)
        const double b1 = 1.0 / std::sqrt(2.0 * static_cast<double>(n));
        e2e_row_ = Parameter("encoder.e2e_row", uniform_matrix(n, c1, b1, rng));
        e2e_col_ = Parameter("encoder.e2e_col", uniform_matrix(n, c1, b1, rng));
        e2e_bias_ = Parameter("encoder.e2e_bias", uniform_matrix(1, c1, b1, rng));
        e2n_ = Linear("encoder.e2n", c1 * n, c2, rng);
        head1_ = Linear("encoder.head1", n * c2, cfg_.hidden, rng);
        head2_ = Linear("encoder.head2", cfg_.hidden, cfg_.embed_dim, rng);
    }

    const EncoderConfig& config() const { return cfg_; }
    Index n_rois() const { return cfg_.n_rois; }
    Index embed_dim() const { return cfg_.embed_dim; }

    std::vector<Parameter*> parameters() {
        return {&e2e_row_, &e2e_col_, &e2e_bias_, &e2n_.weight, &e2n_.bias, &head1_.weight, &head1_.bias,
                &head2_.weight, &head2_.bias};
    }

    // Sets the E2E and E2N biases to zero (used by the linearity property).
    void zero_stack_biases() {
        e2e_bias_.value.setZero();
        e2n_.bias.value.setZero();
    }

    // x stacks M matrices, (M*N) x N. Returns M x (N*C2) node features.
    // With activations=false the E2E/E2N stack is affine in x.
    template <class Self>
    static ad::Var features_impl(Self& self, ad::Tape& t, const ad::Var& x, bool activations) {
        const Index n = self.cfg_.n_rois;
        if (x.cols() != n || x.rows() % n != 0)
            throw DimensionError("encoder: expected stacked " + std::to_string(n) + "x" + std::to_string(n) +
                                 " matrices, got " + std::to_string(x.rows()) + " x " + std::to_string(x.cols()));
        const Index m = x.rows() / n;
        ad::Var e = ad::edge_to_edge(x, param(self, t, self.e2e_row_), param(self, t, self.e2e_col_),
                                     param(self, t, self.e2e_bias_));
        if (activations) e = ad::leaky_relu(e, self.cfg_.leaky_slope);
        ad::Var f = self.e2n_.forward(t, e); // (M*N) x C2
        if (activations) f = ad::leaky_relu(f, self.cfg_.leaky_slope);
        return ad::reshape(f, m, n * self.cfg_.e2n_channels);
    }

    template <class Self>
    static ad::Var encode_impl(Self& self, ad::Tape& t, const ad::Var& x) {
        ad::Var f = features_impl(self, t, x, true);
        ad::Var h = ad::leaky_relu(self.head1_.forward(t, f), self.cfg_.leaky_slope);
        return self.head2_.forward(t, h);
    }

    // M stacked matrices -> M x d embeddings.
    ad::Var encode(ad::Tape& t, const ad::Var& x) { return encode_impl(*this, t, x); }
    ad::Var encode(ad::Tape& t, const ad::Var& x) const { return encode_impl(*this, t, x); }

    ad::Var linear_features(ad::Tape& t, const ad::Var& x) const { return features_impl(*this, t, x, false); }

    // Single matrix convenience form -> 1 x d.
    RowVector encode_phase(const Matrix& a) const {
        if (a.rows() != cfg_.n_rois || a.cols() != cfg_.n_rois)
            throw DimensionError("encode_phase: expected " + std::to_string(cfg_.n_rois) + "x" +
                                 std::to_string(cfg_.n_rois) + " matrix");
        ad::Tape t;
        return encode(t, t.constant(a)).value().row(0);
    }

private:
    static ad::Var param(EncoderModel& self, ad::Tape& t, Parameter& p) {
        (void)self;
        return t.parameter(p);
    }
    static ad::Var param(const EncoderModel& self, ad::Tape& t, const Parameter& p) {
        (void)self;
        return t.frozen(p);
    }

    EncoderConfig cfg_;
    Parameter e2e_row_;
    Parameter e2e_col_;
    Parameter e2e_bias_;
    Linear e2n_;
    Linear head1_;
    Linear head2_;
};

struct PhaseEmbeddings {
    ad::Var plus;  // W x d
    ad::Var minus; // W x d
    ad::Var zero;  // W x d
};

// One shared encoder pass over [A+_1..A+_W, A-_1..A-_W, A_1..A_W].
template <class Enc>
PhaseEmbeddings encode_sequence(ad::Tape& t, Enc& enc, const std::vector<ad::Var>& positive,
                                const std::vector<ad::Var>& negative, const std::vector<ad::Var>& original) {
    const std::size_t w = positive.size();
    if (w == 0) throw DimensionError("encode_sequence: no phases");
    if (negative.size() != w || original.size() != w)
        throw DimensionError("encode_sequence: stream lengths differ");
    std::vector<ad::Var> all;
    all.reserve(3 * w);
    all.insert(all.end(), positive.begin(), positive.end());
    all.insert(all.end(), negative.begin(), negative.end());
    all.insert(all.end(), original.begin(), original.end());
    ad::Var h = enc.encode(t, ad::vcat(all));
    const Index wi = static_cast<Index>(w);
    return {ad::slice_rows(h, 0, wi), ad::slice_rows(h, wi, wi), ad::slice_rows(h, 2 * wi, wi)};
}

} // namespace brainstr
