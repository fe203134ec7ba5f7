#pragma once

// Layers and optimizer shared by the temporal autoencoder and the main model.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"

namespace brainstr {

using Rng = std::mt19937_64;

inline Matrix uniform_matrix(Index rows, Index cols, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

struct Linear {
    Parameter weight; // in x out
    Parameter bias;   // 1 x out

    Linear() = default;
    Linear(std::string name, Index in, Index out, Rng& rng)
        : weight(name + ".weight", uniform_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
          bias(name + ".bias", uniform_matrix(1, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)) {}

    Index in_features() const { return weight.value.rows(); }
    Index out_features() const { return weight.value.cols(); }

    // Non-const: weights are trainable leaves. Const: weights enter as constants.
    ad::Var forward(ad::Tape& t, const ad::Var& x) {
        return ad::add_row_broadcast(ad::matmul(x, t.parameter(weight)), t.parameter(bias));
    }
    ad::Var forward(ad::Tape& t, const ad::Var& x) const {
        return ad::add_row_broadcast(ad::matmul(x, t.frozen(weight)), t.frozen(bias));
    }

    std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

namespace ad {

// Causal dilated 1-D convolution over a batch of equal-length sequences.
// x is (batch*length) x in_channels with rows ordered batch-major; weight is
// (kernel*in_channels) x out_channels where tap j looks j*dilation steps back.
inline Var conv1d_causal(const Var& x, const Var& weight, const Var& bias, Index batch, Index length,
                         Index dilation) {
    const Index cin = x.cols();
    if (x.rows() != batch * length) throw DimensionError("conv1d: rows != batch*length");
    if (weight.rows() % cin != 0) throw DimensionError("conv1d: weight rows not a multiple of in_channels");
    if (bias.rows() != 1 || bias.cols() != weight.cols()) throw DimensionError("conv1d: bias shape");
    const Index kernel = weight.rows() / cin;

    auto im2col = [=](const Matrix& in) {
        Matrix col = Matrix::Zero(batch * length, kernel * cin);
        for (Index b = 0; b < batch; ++b)
            for (Index j = 0; j < kernel; ++j) {
                const Index shift = j * dilation;
                if (shift >= length) continue;
                col.block(b * length + shift, j * cin, length - shift, cin) =
                    in.block(b * length, 0, length - shift, cin);
            }
        return col;
    };

    Matrix col = im2col(x.value());
    Matrix out;
    out.noalias() = col * weight.value();
    out.rowwise() += bias.value().row(0);

    return x.tape().record(std::move(out), {x, weight, bias},
                           [=, col = std::move(col)](Tape& t, const Matrix& g) {
                               if (t.requires_grad(weight)) {
                                   Matrix gw;
                                   gw.noalias() = col.transpose() * g;
                                   t.accumulate(weight, gw);
                               }
                               if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                               if (t.requires_grad(x)) {
                                   Matrix gcol;
                                   gcol.noalias() = g * weight.value().transpose();
                                   Matrix gx = Matrix::Zero(batch * length, cin);
                                   for (Index b = 0; b < batch; ++b)
                                       for (Index j = 0; j < kernel; ++j) {
                                           const Index shift = j * dilation;
                                           if (shift >= length) continue;
                                           gx.block(b * length, 0, length - shift, cin) +=
                                               gcol.block(b * length + shift, j * cin, length - shift, cin);
                                       }
                                   t.accumulate(x, gx);
                               }
                           });
}

// Mean over the time axis: (batch*length) x C -> batch x C.
inline Var mean_pool_time(const Var& x, Index batch, Index length) {
    if (x.rows() != batch * length) throw DimensionError("mean_pool_time: rows != batch*length");
    const Index c = x.cols();
    Matrix out(batch, c);
    for (Index b = 0; b < batch; ++b) out.row(b) = x.value().middleRows(b * length, length).colwise().mean();
    return x.tape().record(std::move(out), {x}, [x, batch, length, c](Tape& t, const Matrix& g) {
        Matrix gx(batch * length, c);
        for (Index b = 0; b < batch; ++b)
            gx.middleRows(b * length, length) = (g.row(b) / static_cast<double>(length)).replicate(length, 1);
        t.accumulate(x, gx);
    });
}

// Nearest-neighbour upsampling of one vector per sequence: batch x C -> (batch*length) x C.
inline Var repeat_time(const Var& h, Index length) {
    const Index batch = h.rows(), c = h.cols();
    Matrix out(batch * length, c);
    for (Index b = 0; b < batch; ++b) out.middleRows(b * length, length) = h.value().row(b).replicate(length, 1);
    return h.tape().record(std::move(out), {h}, [h, batch, length, c](Tape& t, const Matrix& g) {
        Matrix gh(batch, c);
        for (Index b = 0; b < batch; ++b) gh.row(b) = g.middleRows(b * length, length).colwise().sum();
        t.accumulate(h, gh);
    });
}

// Column-wise standardization with batch statistics:
// y = (x - mean) / sqrt(var + eps), statistics over the rows of x.
inline Var batch_standardize(const Var& x, double eps = 1e-5) {
    const Index r = x.rows();
    if (r < 2) throw DimensionError("batch_standardize: need at least 2 rows");
    RowVector mu = x.value().colwise().mean();
    Matrix centered = x.value().rowwise() - mu;
    RowVector var = centered.colwise().squaredNorm() / static_cast<double>(r);
    RowVector inv = (var.array() + eps).rsqrt();
    Matrix y = centered.array().rowwise() * inv.array();
    return x.tape().record(y, {x}, [x, y, inv, r](Tape& t, const Matrix& g) {
        RowVector gmean = g.colwise().mean();
        RowVector gymean = g.cwiseProduct(y).colwise().mean();
        Matrix gx = ((g.rowwise() - gmean) - (y.array().rowwise() * gymean.array()).matrix()).array().rowwise() *
                    inv.array();
        t.accumulate(x, gx);
    });
}

} // namespace ad

struct CausalConv1d {
    Parameter weight; // (kernel*in) x out
    Parameter bias;   // 1 x out
    Index dilation = 1;

    CausalConv1d() = default;
    CausalConv1d(std::string name, Index in, Index out, Index kernel, Index dil, Rng& rng)
        : weight(name + ".weight",
                 uniform_matrix(kernel * in, out, 1.0 / std::sqrt(static_cast<double>(kernel * in)), rng)),
          bias(name + ".bias", uniform_matrix(1, out, 1.0 / std::sqrt(static_cast<double>(kernel * in)), rng)),
          dilation(dil) {}

    ad::Var forward(ad::Tape& t, const ad::Var& x, Index batch, Index length) {
        return ad::conv1d_causal(x, t.parameter(weight), t.parameter(bias), batch, length, dilation);
    }
    ad::Var forward(ad::Tape& t, const ad::Var& x, Index batch, Index length) const {
        return ad::conv1d_causal(x, t.frozen(weight), t.frozen(bias), batch, length, dilation);
    }

    std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0; // global gradient-norm clip; <= 0 disables
};

class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    double grad_norm() const {
        double s = 0.0;
        for (auto* p : params_) s += p->grad.squaredNorm();
        return std::sqrt(s);
    }

    void step() {
        ++t_;
        double factor = 1.0;
        if (cfg_.clip_norm > 0.0) {
            const double n = grad_norm();
            if (n > cfg_.clip_norm) factor = cfg_.clip_norm / n;
        }
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            const Matrix g = p.grad * factor;
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
            p.value.array() -=
                cfg_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

} // namespace brainstr
