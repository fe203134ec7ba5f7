#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation as a node holding its forward value and a
// closure that propagates the node's adjoint to its parents. Nodes are
// appended in topological order, so backward() walks the tape in reverse.
// Parameters are leaves whose adjoints are added into Parameter::grad.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace brainstr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Index size() const { return value.size(); }
};

namespace ad {

class Tape;

class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const;
    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix v) { return push(std::move(v), false, nullptr, nullptr); }
    Var variable(Matrix v) { return push(std::move(v), true, nullptr, nullptr); }

    // Repeated calls with the same Parameter return the same leaf.
    Var parameter(Parameter& p) {
        auto it = param_ids_.find(&p);
        if (it != param_ids_.end()) return Var(this, it->second);
        Var v = push(p.value, true, nullptr, &p);
        param_ids_.emplace(&p, v.id());
        return v;
    }

    // Treat a parameter as a constant (inference; no adjoint bookkeeping).
    Var frozen(const Parameter& p) { return constant(p.value); }

    Var record(Matrix value, std::initializer_list<Var> parents, Backward fn) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || requires_grad(p);
        return push(std::move(value), rg, rg ? std::move(fn) : Backward{}, nullptr);
    }
    Var record(Matrix value, const std::vector<Var>& parents, Backward fn) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || requires_grad(p);
        return push(std::move(value), rg, rg ? std::move(fn) : Backward{}, nullptr);
    }

    const Matrix& value(const Var& v) const { return nodes_[check(v)].value; }
    bool requires_grad(const Var& v) const { return nodes_[check(v)].requires_grad; }

    // Adjoint of v after backward(); zeros if nothing flowed into it.
    Matrix grad(const Var& v) const {
        const Node& n = nodes_[check(v)];
        if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    template <class Derived>
    void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[check(v)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    void backward(const Var& root) {
        if (value(root).size() != 1) throw DimensionError("backward: root must be a scalar");
        backward(root, Matrix::Ones(1, 1));
    }

    void backward(const Var& root, const Matrix& seed) {
        const int rid = check(root);
        if (seed.rows() != nodes_[rid].value.rows() || seed.cols() != nodes_[rid].value.cols())
            throw DimensionError("backward: seed shape mismatch");
        accumulate(root, seed);
        for (int i = rid; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param) n.param->grad += n.grad;
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
        Parameter* param = nullptr;
    };

    Var push(Matrix v, bool rg, Backward fn, Parameter* p) {
        nodes_.push_back(Node{std::move(v), Matrix(), rg, std::move(fn), p});
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    int check(const Var& v) const {
        if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size())
            throw InternalError("variable does not belong to this tape");
        return v.id_;
    }

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_ids_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }
inline double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) throw DimensionError("scalar(): variable is not 1x1");
    return v(0, 0);
}

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
}
inline void same_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw InternalError("operands live on different tapes");
}
} // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "add");
    return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "sub");
    return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

inline Var hadamard(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "hadamard");
    return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(b.value()));
        t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

inline Var scale(const Var& a, double s) {
    return a.tape().record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var add_scalar(const Var& a, double s) {
    return a.tape().record(a.value().array() + s, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

// 1 - a, elementwise.
inline Var one_minus(const Var& a) {
    return a.tape().record(1.0 - a.value().array(), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, -g); });
}

// a (R x C) + b (1 x C) broadcast over rows.
inline Var add_row_broadcast(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    if (b.rows() != 1 || b.cols() != a.cols()) throw DimensionError("add_row_broadcast: bias must be 1 x cols");
    Matrix out = a.value().rowwise() + b.value().row(0);
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g.colwise().sum());
    });
}

inline Var matmul(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                             std::to_string(b.rows()));
    Matrix out;
    out.noalias() = a.value() * b.value();
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) {
            Matrix ga;
            ga.noalias() = g * b.value().transpose();
            t.accumulate(a, ga);
        }
        if (t.requires_grad(b)) {
            Matrix gb;
            gb.noalias() = a.value().transpose() * g;
            t.accumulate(b, gb);
        }
    });
}

inline Var transpose(const Var& a) {
    return a.tape().record(a.value().transpose(), {a},
                           [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

inline Var relu(const Var& a) {
    Matrix out = a.value().cwiseMax(0.0);
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
    });
}

inline Var leaky_relu(const Var& a, double slope = 0.01) {
    Matrix out = (a.value().array() > 0.0).select(a.value(), a.value() * slope);
    return a.tape().record(std::move(out), {a}, [a, slope](Tape& t, const Matrix& g) {
        t.accumulate(a, (a.value().array() > 0.0).select(g, g * slope));
    });
}

inline Var tanh(const Var& a) {
    Matrix out = a.value().array().tanh();
    Var r = a.tape().record(out, {a}, [a, out](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct((1.0 - out.array().square()).matrix()));
    });
    return r;
}

inline Var exp(const Var& a) {
    Matrix out = a.value().array().exp();
    return a.tape().record(out, {a}, [a, out](Tape& t, const Matrix& g) { t.accumulate(a, g.cwiseProduct(out)); });
}

inline Var log(const Var& a) {
    return a.tape().record(a.value().array().log(), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseQuotient(a.value()));
    });
}

inline Var square(const Var& a) {
    return a.tape().record(a.value().cwiseAbs2(), {a},
                           [a](Tape& t, const Matrix& g) { t.accumulate(a, 2.0 * g.cwiseProduct(a.value())); });
}

// log(1 + exp(x)), evaluated stably.
inline Var softplus(const Var& a) {
    Matrix out = a.value().unaryExpr([](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        Matrix sig = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
        t.accumulate(a, g.cwiseProduct(sig));
    });
}

inline Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    const Index r = a.rows(), c = a.cols();
    return a.tape().record(std::move(out), {a},
                           [a, r, c](Tape& t, const Matrix& g) { t.accumulate(a, Matrix::Constant(r, c, g(0, 0))); });
}

inline Var mean(const Var& a) {
    if (a.value().size() == 0) throw DimensionError("mean of empty matrix");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// Column sums as a 1 x C row.
inline Var col_sum(const Var& a) {
    const Index r = a.rows();
    return a.tape().record(a.value().colwise().sum(), {a}, [a, r](Tape& t, const Matrix& g) {
        t.accumulate(a, g.replicate(r, 1));
    });
}

// Row sums as an R x 1 column.
inline Var row_sum(const Var& a) {
    const Index c = a.cols();
    return a.tape().record(a.value().rowwise().sum(), {a}, [a, c](Tape& t, const Matrix& g) {
        t.accumulate(a, g.replicate(1, c));
    });
}

inline Var frobenius_sq(const Var& a) { return sum(square(a)); }

inline Var slice_cols(const Var& a, Index start, Index n) {
    if (start < 0 || n < 0 || start + n > a.cols()) throw DimensionError("slice_cols: out of range");
    const Index r = a.rows(), c = a.cols();
    return a.tape().record(a.value().middleCols(start, n), {a}, [a, start, n, r, c](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(r, c);
        full.middleCols(start, n) = g;
        t.accumulate(a, full);
    });
}

inline Var slice_rows(const Var& a, Index start, Index n) {
    if (start < 0 || n < 0 || start + n > a.rows()) throw DimensionError("slice_rows: out of range");
    const Index r = a.rows(), c = a.cols();
    return a.tape().record(a.value().middleRows(start, n), {a}, [a, start, n, r, c](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(r, c);
        full.middleRows(start, n) = g;
        t.accumulate(a, full);
    });
}

inline Var select_rows(const Var& a, const std::vector<Index>& idx) {
    Matrix out(static_cast<Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) throw DimensionError("select_rows: index out of range");
        out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
    }
    const Index r = a.rows(), c = a.cols();
    return a.tape().record(std::move(out), {a}, [a, idx, r, c](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(r, c);
        for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Index>(i));
        t.accumulate(a, full);
    });
}

// Stack matrices with equal column counts on top of each other.
inline Var vcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("vcat: no operands");
    const Index c = parts.front().cols();
    Index r = 0;
    for (const auto& p : parts) {
        detail::same_tape(parts.front(), p);
        if (p.cols() != c) throw DimensionError("vcat: column mismatch");
        r += p.rows();
    }
    Matrix out(r, c);
    Index off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        off += p.rows();
    }
    return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
        Index o = 0;
        for (const auto& p : parts) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleRows(o, p.rows()));
            o += p.rows();
        }
    });
}

// Place matrices with equal row counts side by side.
inline Var hcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("hcat: no operands");
    const Index r = parts.front().rows();
    Index c = 0;
    for (const auto& p : parts) {
        detail::same_tape(parts.front(), p);
        if (p.rows() != r) throw DimensionError("hcat: row mismatch");
        c += p.cols();
    }
    Matrix out(r, c);
    Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
        Index o = 0;
        for (const auto& p : parts) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleCols(o, p.cols()));
            o += p.cols();
        }
    });
}

// Row-major reshape: element (i, j) of the input lands at flat position i*cols + j.
inline Var reshape(const Var& a, Index rows, Index cols) {
    if (rows * cols != a.value().size()) throw DimensionError("reshape: size mismatch");
    const Index ar = a.rows(), ac = a.cols();
    auto to_rm = [](const Matrix& m, Index r, Index c) {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
        Matrix out = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            rm.data(), r, c);
        return out;
    };
    return a.tape().record(to_rm(a.value(), rows, cols), {a}, [a, ar, ac, to_rm](Tape& t, const Matrix& g) {
        t.accumulate(a, to_rm(g, ar, ac));
    });
}

// Softmax down a column vector.
inline Var softmax_col(const Var& a) {
    if (a.cols() != 1) throw DimensionError("softmax_col expects a column vector");
    const double mx = a.value().maxCoeff();
    Matrix e = (a.value().array() - mx).exp();
    Matrix p = e / e.sum();
    return a.tape().record(p, {a}, [a, p](Tape& t, const Matrix& g) {
        const double dot = g.cwiseProduct(p).sum();
        t.accumulate(a, p.cwiseProduct((g.array() - dot).matrix()));
    });
}

// Row-wise softmax (each row a distribution).
inline Var softmax_rows(const Var& a) {
    Matrix p(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        RowVector e = (a.value().row(i).array() - a.value().row(i).maxCoeff()).exp();
        p.row(i) = e / e.sum();
    }
    return a.tape().record(p, {a}, [a, p](Tape& t, const Matrix& g) {
        Matrix ga(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
            const double dot = g.row(i).dot(p.row(i));
            ga.row(i) = p.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
        }
        t.accumulate(a, ga);
    });
}

// Mean cross-entropy of row-wise logits against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Index b = logits.rows(), c = logits.cols();
    if (static_cast<Index>(labels.size()) != b) throw DimensionError("cross_entropy: label count mismatch");
    Matrix p(b, c);
    double loss = 0.0;
    for (Index i = 0; i < b; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c) throw DimensionError("cross_entropy: label out of range");
        const double mx = logits.value().row(i).maxCoeff();
        RowVector e = (logits.value().row(i).array() - mx).exp();
        const double z = e.sum();
        p.row(i) = e / z;
        loss += -(logits.value()(i, y) - mx - std::log(z));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(b);
    return logits.tape().record(std::move(out), {logits}, [logits, labels, p](Tape& t, const Matrix& g) {
        Matrix gl = p;
        for (Index i = 0; i < gl.rows(); ++i) gl(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
        t.accumulate(logits, gl * (g(0, 0) / static_cast<double>(gl.rows())));
    });
}

// Forward: clamp to [lo, hi]. Backward: identity.
inline Var clamp_ste(const Var& a, double lo, double hi) {
    return a.tape().record(a.value().cwiseMax(lo).cwiseMin(hi), {a},
                           [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

// Forward: 1(a > threshold). Backward: identity (straight-through).
inline Var threshold_ste(const Var& a, double threshold) {
    Matrix out = (a.value().array() > threshold).cast<double>();
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

// Cosine similarity between matching rows of a and b: R x C, R x C -> R x 1.
// A zero-norm row has cosine 0 and passes no gradient.
inline Var row_cosine(const Var& a, const Var& b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "row_cosine");
    const Index r = a.rows();
    Vector na = a.value().rowwise().norm(), nb = b.value().rowwise().norm();
    Matrix out(r, 1);
    for (Index i = 0; i < r; ++i)
        out(i, 0) = (na(i) > 0.0 && nb(i) > 0.0) ? a.value().row(i).dot(b.value().row(i)) / (na(i) * nb(i)) : 0.0;
    return a.tape().record(out, {a, b}, [a, b, na, nb, out](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols()), gb = Matrix::Zero(b.rows(), b.cols());
        for (Index i = 0; i < out.rows(); ++i) {
            if (!(na(i) > 0.0 && nb(i) > 0.0)) continue;
            const double c = out(i, 0);
            ga.row(i) = g(i, 0) * (b.value().row(i) / (na(i) * nb(i)) - c * a.value().row(i) / (na(i) * na(i)));
            gb.row(i) = g(i, 0) * (a.value().row(i) / (na(i) * nb(i)) - c * b.value().row(i) / (nb(i) * nb(i)));
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
    });
}

// All-pairs cosine similarity: rows of x (B x d) against rows of y (B' x d) -> B x B'.
// Zero-norm rows are treated as the zero direction (similarity 0, no gradient).
inline Var cosine_matrix(const Var& x, const Var& y) {
    detail::same_tape(x, y);
    if (x.cols() != y.cols()) throw DimensionError("cosine_matrix: embedding widths differ");
    auto unit_rows = [](const Matrix& m, Vector& norms) {
        norms = m.rowwise().norm();
        Matrix u = Matrix::Zero(m.rows(), m.cols());
        for (Index i = 0; i < m.rows(); ++i)
            if (norms(i) > 0.0) u.row(i) = m.row(i) / norms(i);
        return u;
    };
    Vector nx, ny;
    Matrix ux = unit_rows(x.value(), nx), uy = unit_rows(y.value(), ny);
    Matrix s = ux * uy.transpose();
    return x.tape().record(s, {x, y}, [x, y, nx, ny, ux, uy, s](Tape& t, const Matrix& g) {
        if (t.requires_grad(x)) {
            Matrix gx = g * uy;
            Vector coef = g.cwiseProduct(s).rowwise().sum();
            for (Index i = 0; i < gx.rows(); ++i)
                gx.row(i) = nx(i) > 0.0 ? ((gx.row(i) - coef(i) * ux.row(i)) / nx(i)).eval() : RowVector::Zero(gx.cols());
            t.accumulate(x, gx);
        }
        if (t.requires_grad(y)) {
            Matrix gy = g.transpose() * ux;
            Vector coef = g.cwiseProduct(s).colwise().sum().transpose();
            for (Index j = 0; j < gy.rows(); ++j)
                gy.row(j) = ny(j) > 0.0 ? ((gy.row(j) - coef(j) * uy.row(j)) / ny(j)).eval() : RowVector::Zero(gy.cols());
            t.accumulate(y, gy);
        }
    });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

} // namespace ad
} // namespace brainstr
