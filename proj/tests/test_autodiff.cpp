#include <gtest/gtest.h>

#include "brainstr/autodiff.hpp"
#include "brainstr/nn.hpp"
#include "test_util.hpp"

using namespace brainstr;
using brainstr::testing::numeric_gradient;
using brainstr::testing::random_matrix;
using brainstr::testing::rel_error;

namespace {

// Gradient of scalar(f(tape, x)) w.r.t. x, via the tape.
Matrix tape_gradient(const std::function<ad::Var(ad::Tape&, const ad::Var&)>& f, const Matrix& x) {
    ad::Tape t;
    ad::Var v = t.variable(x);
    ad::Var y = f(t, v);
    t.backward(y);
    return t.grad(v);
}

void expect_matches_fd(const std::function<ad::Var(ad::Tape&, const ad::Var&)>& f, const Matrix& x,
                       double tol = 1e-7) {
    const Matrix a = tape_gradient(f, x);
    const Matrix n = numeric_gradient(
        [&](const Matrix& m) {
            ad::Tape t;
            return f(t, t.constant(m)).scalar();
        },
        x);
    EXPECT_LT(rel_error(a, n), tol);
}

} // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
    const Matrix x = random_matrix(3, 4, 1);
    const Matrix w = random_matrix(4, 2, 2);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) { return ad::sum(ad::tanh(ad::matmul(v, t.constant(w)))); }, x);
    expect_matches_fd([](ad::Tape&, const ad::Var& v) { return ad::sum(ad::softplus(v)); }, x);
    expect_matches_fd([](ad::Tape&, const ad::Var& v) { return ad::mean(ad::exp(ad::scale(v, 0.3))); }, x);
    expect_matches_fd([](ad::Tape&, const ad::Var& v) { return ad::frobenius_sq(ad::hadamard(v, ad::one_minus(v))); }, x);
    expect_matches_fd([](ad::Tape&, const ad::Var& v) { return ad::sum(ad::log(ad::add_scalar(ad::square(v), 1.0))); }, x);
}

TEST(Autodiff, ShapeOpsMatchFiniteDifferences) {
    const Matrix x = random_matrix(4, 3, 3);
    const Matrix probe = random_matrix(6, 2, 4);
    expect_matches_fd(
        [&](ad::Tape& t, const ad::Var& v) { return ad::sum(ad::hadamard(ad::reshape(v, 6, 2), t.constant(probe))); }, x);
    expect_matches_fd(
        [&](ad::Tape& t, const ad::Var& v) {
            ad::Var s = ad::vcat({ad::slice_rows(v, 1, 2), ad::select_rows(v, {3, 0})});
            return ad::sum(ad::hadamard(ad::transpose(ad::hcat({s, ad::slice_cols(s, 0, 1)})),
                                        t.constant(random_matrix(4, 4, 5))));
        },
        x);
}

TEST(Autodiff, SoftmaxCrossEntropyAndCosineMatchFiniteDifferences) {
    const Matrix x = random_matrix(3, 4, 6);
    const Matrix y = random_matrix(3, 4, 7);
    const Matrix c = random_matrix(3, 3, 8);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) {
        return ad::sum(ad::hadamard(ad::softmax_rows(v), t.constant(random_matrix(3, 4, 9))));
    }, x);
    expect_matches_fd([](ad::Tape&, const ad::Var& v) { return ad::cross_entropy(v, {0, 3, 1}); }, x);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) {
        return ad::sum(ad::hadamard(ad::cosine_matrix(v, t.constant(y)), t.constant(c)));
    }, x);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) { return ad::sum(ad::row_cosine(v, t.constant(y))); }, x);
}

TEST(Autodiff, StraightThroughOpsPassGradientUnchanged) {
    ad::Tape t;
    Matrix x(1, 4);
    x << -0.5, 0.3, 0.5, 1.7;
    ad::Var v = t.variable(x);
    ad::Var c = ad::clamp_ste(v, 0.0, 1.0);
    ad::Var m = ad::threshold_ste(c, 0.5);
    Matrix expect_c(1, 4), expect_m(1, 4);
    expect_c << 0.0, 0.3, 0.5, 1.0;
    expect_m << 0.0, 0.0, 0.0, 1.0; // 0.5 is not > 0.5
    EXPECT_EQ(c.value(), expect_c);
    EXPECT_EQ(m.value(), expect_m);
    Matrix seed(1, 4);
    seed << 1.0, 2.0, 3.0, 4.0;
    t.backward(m, seed);
    EXPECT_EQ(t.grad(v), seed);
}

TEST(Autodiff, ParameterLeafIsSharedAndAccumulates) {
    Parameter p("p", Matrix::Constant(2, 2, 1.5));
    ad::Tape t;
    ad::Var a = t.parameter(p);
    ad::Var b = t.parameter(p);
    EXPECT_EQ(a.id(), b.id());
    t.backward(ad::sum(ad::add(ad::square(a), b)));
    EXPECT_TRUE(p.grad.isApprox(Matrix::Constant(2, 2, 4.0)));
    ad::Tape t2;
    ad::Var c = t2.frozen(p);
    EXPECT_FALSE(t2.requires_grad(c));
}

TEST(Autodiff, BackwardRejectsNonScalarRootAndForeignVariables) {
    ad::Tape t, other;
    ad::Var v = t.variable(Matrix::Ones(2, 2));
    EXPECT_THROW(t.backward(v), DimensionError);
    EXPECT_THROW(other.value(v), InternalError);
}

TEST(NeuralOps, ConvPoolRepeatAndStandardizeMatchFiniteDifferences) {
    Rng rng(3);
    CausalConv1d conv("c", 3, 2, 3, 2, rng);
    const Matrix x = random_matrix(2 * 6, 3, 11);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) {
        ad::Var y = conv.forward(t, v, 2, 6);
        return ad::sum(ad::hadamard(y, t.constant(random_matrix(12, 2, 12))));
    }, x);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) {
        return ad::sum(ad::hadamard(ad::repeat_time(ad::mean_pool_time(v, 2, 6), 6), t.constant(random_matrix(12, 3, 13))));
    }, x);
    const Matrix s = random_matrix(5, 3, 14);
    expect_matches_fd([&](ad::Tape& t, const ad::Var& v) {
        return ad::sum(ad::hadamard(ad::batch_standardize(v), t.constant(random_matrix(5, 3, 15))));
    }, s, 1e-6);
}

TEST(NeuralOps, CausalConvolutionDoesNotSeeTheFuture) {
    Rng rng(4);
    CausalConv1d conv("c", 2, 3, 3, 2, rng);
    Matrix x = random_matrix(8, 2, 16);
    ad::Tape t1;
    const Matrix y1 = conv.forward(t1, t1.constant(x), 1, 8).value();
    x.row(7).setConstant(100.0);
    ad::Tape t2;
    const Matrix y2 = conv.forward(t2, t2.constant(x), 1, 8).value();
    EXPECT_EQ(y1.topRows(7), y2.topRows(7));
    EXPECT_NE(y1.row(7), y2.row(7));
}

TEST(NeuralOps, AdamClipsTheGlobalGradientNorm) {
    Parameter p("p", Matrix::Zero(1, 2));
    AdamConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.clip_norm = 5.0;
    Adam opt({&p}, cfg);
    p.grad << 300.0, 400.0;
    EXPECT_DOUBLE_EQ(opt.grad_norm(), 500.0);
    opt.step();
    // first Adam step moves each entry by lr * sign(g) regardless of scale
    EXPECT_NEAR(p.value(0, 0), -0.1, 1e-6);
    EXPECT_NEAR(p.value(0, 1), -0.1, 1e-6);
    EXPECT_EQ(opt.steps(), 1);
}
