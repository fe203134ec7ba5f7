#include <gtest/gtest.h>

#include "brainstr/encoder.hpp"
#include "test_util.hpp"

using namespace brainstr;
using brainstr::testing::numeric_gradient;
using brainstr::testing::random_matrix;
using brainstr::testing::rel_error;

namespace {

EncoderConfig small(int n = 4, int d = 3) {
    EncoderConfig c;
    c.n_rois = n;
    c.e2e_channels = 3;
    c.e2n_channels = 2;
    c.hidden = 6;
    c.embed_dim = d;
    return c;
}

Matrix bounded(Index n, std::uint64_t seed) { return random_matrix(n, n, seed, 0.5).cwiseMax(-1.0).cwiseMin(1.0); }

} // namespace

TEST(EdgeToEdge, MatchesTheDirectCrossFilterSum) {
    const Index n = 3, c = 2;
    const Matrix a = bounded(n, 1), rw = random_matrix(n, c, 2), cw = random_matrix(n, c, 3), b = random_matrix(1, c, 4);
    ad::Tape t;
    const Matrix out = ad::edge_to_edge(t.constant(a), t.constant(rw), t.constant(cw), t.constant(b)).value();
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            for (Index ch = 0; ch < c; ++ch) {
                double want = b(0, ch);
                for (Index k = 0; k < n; ++k) want += a(i, k) * rw(k, ch) + a(k, j) * cw(k, ch);
                EXPECT_NEAR(out(i, ch * n + j), want, 1e-14);
            }
}

TEST(Encoder, ZeroInputWithZeroStackBiasesIsTheHeadOfZero) {
    EncoderModel e(small(), 5);
    e.zero_stack_biases();
    const RowVector h = e.encode_phase(Matrix::Zero(4, 4));
    // features are exactly zero, so h = head2(leaky(head1.bias))
    const auto ps = e.parameters();
    const Parameter &h1b = *ps[6], &h2w = *ps[7], &h2b = *ps[8];
    const RowVector pre = h1b.value.row(0);
    const RowVector act = pre.unaryExpr([](double v) { return v > 0 ? v : 0.01 * v; });
    const RowVector want = act * h2w.value + h2b.value.row(0);
    EXPECT_TRUE(h.isApprox(want, 1e-14));
}

TEST(Encoder, IsAPureFunction) {
    EncoderModel e(small(), 6);
    const Matrix a = bounded(4, 7);
    EXPECT_EQ(e.encode_phase(a), e.encode_phase(a));
}

TEST(Encoder, ProbeGradientMatchesFiniteDifferences) {
    EncoderModel e(small(4, 3), 8);
    const Matrix a = bounded(4, 9);
    const Matrix u = random_matrix(1, 3, 10);
    ad::Tape t;
    ad::Var x = t.variable(a);
    t.backward(ad::sum(ad::hadamard(e.encode(t, x), t.constant(u))));
    const Matrix analytic = t.grad(x);
    const EncoderModel& frozen = e;
    const Matrix numeric = numeric_gradient([&](const Matrix& m) { return frozen.encode_phase(m).dot(u.row(0)); }, a);
    EXPECT_LT(rel_error(analytic, numeric), 1e-4);
}

TEST(Encoder, SequenceDegenerateMasks) {
    EncoderModel e(small(), 11);
    const RowVector zero = e.encode_phase(Matrix::Zero(4, 4));
    std::vector<Matrix> fcs{bounded(4, 12), bounded(4, 13), bounded(4, 14)};
    for (bool all_ones : {false, true}) {
        ad::Tape t;
        std::vector<ad::Var> pos, neg, orig;
        for (const auto& a : fcs) {
            pos.push_back(t.constant(all_ones ? a : Matrix::Zero(4, 4)));
            neg.push_back(t.constant(all_ones ? Matrix::Zero(4, 4) : a));
            orig.push_back(t.constant(a));
        }
        const PhaseEmbeddings emb = encode_sequence(t, e, pos, neg, orig);
        ASSERT_EQ(emb.plus.rows(), 3);
        ASSERT_EQ(emb.minus.rows(), 3);
        ASSERT_EQ(emb.zero.rows(), 3);
        for (Index k = 0; k < 3; ++k) {
            const Matrix& same = all_ones ? emb.plus.value() : emb.minus.value();
            const Matrix& empty = all_ones ? emb.minus.value() : emb.plus.value();
            EXPECT_TRUE(same.row(k).isApprox(emb.zero.value().row(k), 1e-14));
            EXPECT_TRUE(empty.row(k).isApprox(zero, 1e-14));
        }
    }
}

TEST(Encoder, StreamsShareOneParameterSet) {
    EncoderModel e(small(), 15);
    const auto params = e.parameters();
    const Matrix a = bounded(4, 16);
    // the gradient of each stream alone lands in the very same Parameter objects
    for (int stream = 0; stream < 3; ++stream) {
        for (auto* p : params) p->zero_grad();
        ad::Tape t;
        std::vector<ad::Var> s{t.constant(a)};
        const PhaseEmbeddings emb = encode_sequence(t, e, s, s, s);
        const ad::Var& h = stream == 0 ? emb.plus : stream == 1 ? emb.minus : emb.zero;
        t.backward(ad::sum(h));
        for (auto* p : params) EXPECT_GT(p->grad.norm(), 0.0) << p->name;
        EXPECT_EQ(emb.plus.value(), emb.minus.value());
        EXPECT_EQ(emb.plus.value(), emb.zero.value());
    }
    // one mutation moves every stream the same way
    params[0]->value(0, 0) += 0.3;
    ad::Tape t;
    std::vector<ad::Var> s{t.constant(a)};
    const PhaseEmbeddings emb = encode_sequence(t, e, s, s, s);
    EXPECT_EQ(emb.plus.value(), emb.zero.value());
    EXPECT_TRUE(emb.plus.value().row(0).isApprox(e.encode_phase(a)));
}

TEST(Encoder, StackIsLinearWithoutBiases) {
    EncoderModel e(small(), 17);
    e.zero_stack_biases();
    const Matrix a1 = bounded(4, 18), a2 = bounded(4, 19);
    ad::Tape t;
    const Matrix f12 = e.linear_features(t, t.constant(a1 + a2)).value();
    const Matrix f1 = e.linear_features(t, t.constant(a1)).value();
    const Matrix f2 = e.linear_features(t, t.constant(a2)).value();
    EXPECT_TRUE(f12.isApprox(f1 + f2, 1e-13));
}

TEST(Encoder, OutputsAreFiniteForBoundedInputs) {
    EncoderModel e(EncoderConfig{}, 20); // default sizes, N=16
    for (std::uint64_t s = 0; s < 20; ++s) {
        Matrix a(16, 16);
        for (Index k = 0; k < a.size(); ++k) a.data()[k] = static_cast<double>((s * 31 + k) % 3) - 1.0;
        EXPECT_TRUE(e.encode_phase(a).allFinite());
    }
    EXPECT_TRUE(e.encode_phase(Matrix::Ones(16, 16)).allFinite());
}

TEST(Encoder, WrongSizeIsADimensionError) {
    EncoderModel e(small(4), 21);
    EXPECT_THROW(e.encode_phase(Matrix::Zero(5, 5)), DimensionError);
    ad::Tape t;
    std::vector<ad::Var> a{t.constant(Matrix::Zero(4, 4))}, none;
    EXPECT_THROW(encode_sequence(t, e, a, none, a), DimensionError);
}
