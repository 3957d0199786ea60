// Copyright 2026 The dfshield Authors.
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dfshield {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Raised when a computed quantity stops being finite (synthesis step,
// attack iteration, training step). Carries the step context in what().
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One node of the recorded computation graph. Parents keep their
// producers alive; backprop() scatters this node's grad into the
// parents' grads using the local rule captured at construction.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantics handle over a graph node. Tensors are immutable after
// creation; all arithmetic creates new nodes.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw std::invalid_argument(
                "tensor: shape " + shape_str(shape) + " needs " +
                std::to_string(numel(shape)) + " values, got " +
                std::to_string(data.size()));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape) {
        return full(std::move(shape), 0.0);
    }

    static Tensor full(Shape shape, double v) {
        std::vector<double> d(numel(shape), v);
        return from_data(std::move(shape), std::move(d));
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const { return node_->grad; }

    double item() const {
        if (size() != 1)
            throw std::invalid_argument("item: tensor " +
                                        shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    // Copy of the values with no graph attached.
    Tensor detach() const {
        return from_data(node_->shape, node_->value, false);
    }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Tensor& t) { return all_finite(t.data()); }

namespace detail {

// Broadcast plan for elementwise binary ops. Shapes are right-aligned;
// a dimension may differ only if one side has extent 1 there, in which
// case that side is read with stride 0 (and its gradient summed).
struct Bcast {
    Shape out;
    std::vector<std::size_t> index_a; // per output element
    std::vector<std::size_t> index_b;
};

inline Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1), out(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
    for (std::size_t i = 0; i < rank; ++i) {
        if (pa[i] == pb[i]) out[i] = pa[i];
        else if (pa[i] == 1) out[i] = pb[i];
        else if (pb[i] == 1) out[i] = pa[i];
        else
            throw std::invalid_argument(std::string(op) +
                ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    }
    // element strides, 0 on broadcast dims
    std::vector<std::size_t> sa(rank), sb(rank);
    std::size_t acca = 1, accb = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sa[i] = (pa[i] == 1) ? 0 : acca;
        sb[i] = (pb[i] == 1) ? 0 : accb;
        acca *= pa[i];
        accb *= pb[i];
    }
    Bcast bc;
    bc.out = out;
    std::size_t n = numel(out);
    bc.index_a.resize(n);
    bc.index_b.resize(n);
    std::vector<std::size_t> coord(rank, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t ia = 0, ib = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            ia += coord[i] * sa[i];
            ib += coord[i] * sb[i];
        }
        bc.index_a[o] = ia;
        bc.index_b[o] = ib;
        for (std::size_t i = rank; i-- > 0;) {
            if (++coord[i] < out[i]) break;
            coord[i] = 0;
        }
    }
    return bc;
}

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> rule) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (auto& p : parents) {
        n->parents.push_back(p.node());
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad && rule) {
        TensorNode* self = n.get();
        n->backprop = [self, rule]() { rule(*self); };
    }
    return Tensor(n);
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

inline Tensor binary_elementwise(
    const Tensor& a, const Tensor& b, const char* name,
    double (*f)(double, double),
    double (*dfa)(double, double),
    double (*dfb)(double, double)) {
    auto bc = detail::make_bcast(a.shape(), b.shape(), name);
    std::size_t n = numel(bc.out);
    std::vector<double> out(n);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t o = 0; o < n; ++o)
        out[o] = f(av[bc.index_a[o]], bv[bc.index_b[o]]);
    auto an = a.node();
    auto bn = b.node();
    auto shared_bc = std::make_shared<detail::Bcast>(std::move(bc));
    return detail::make_op(
        shared_bc->out, std::move(out), {a, b},
        [shared_bc, dfa, dfb, an, bn](TensorNode& self) {
            std::size_t n = self.value.size();
            const auto& bcr = *shared_bc;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t o = 0; o < n; ++o)
                    an->grad[bcr.index_a[o]] +=
                        self.grad[o] * dfa(an->value[bcr.index_a[o]],
                                           bn->value[bcr.index_b[o]]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t o = 0; o < n; ++o)
                    bn->grad[bcr.index_b[o]] +=
                        self.grad[o] * dfb(an->value[bcr.index_a[o]],
                                           bn->value[bcr.index_b[o]]);
            }
        });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, "add",
        [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, "sub",
        [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, "mul",
        [](double x, double y) { return x * y; },
        [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elementwise(a, b, "div",
        [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

// ---------------------------------------------------------------------------
// elementwise unary ops

inline Tensor unary_elementwise(const Tensor& a, const char* /*name*/,
                                double (*f)(double),
                                double (*df)(double)) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a},
        [an, df](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < self.value.size(); ++i)
                an->grad[i] += self.grad[i] * df(an->value[i]);
        });
}

inline Tensor relu(const Tensor& a) {
    return unary_elementwise(a, "relu",
        [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp_t(const Tensor& a) {
    return unary_elementwise(a, "exp",
        [](double x) { return std::exp(x); },
        [](double x) { return std::exp(x); });
}

inline Tensor log_t(const Tensor& a) {
    return unary_elementwise(a, "log",
        [](double x) { return std::log(x); },
        [](double x) { return 1.0 / x; });
}

inline Tensor sqrt_t(const Tensor& a) {
    return unary_elementwise(a, "sqrt",
        [](double x) { return std::sqrt(x); },
        [](double x) { return 0.5 / std::sqrt(x); });
}

// sign(0) := 0; gradient is zero everywhere.
inline Tensor sign(const Tensor& a) {
    return unary_elementwise(a, "sign",
        [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
        [](double) { return 0.0; });
}

// Gradient passes strictly inside (lo, hi).
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = std::min(hi, std::max(lo, av[i]));
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a},
        [an, lo, hi](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < self.value.size(); ++i)
                if (an->value[i] > lo && an->value[i] < hi)
                    an->grad[i] += self.grad[i];
        });
}

// ---------------------------------------------------------------------------
// structural ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape) +
                                    " changes element count");
    auto an = a.node();
    return detail::make_op(std::move(shape), a.data(), {a},
        [an](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < self.value.size(); ++i)
                an->grad[i] += self.grad[i];
        });
}

// ---------------------------------------------------------------------------
// matmul ([m,k] x [k,n] -> [m,n])

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 ||
        a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double x = av[i * k + p];
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
                out[i * n + j] += x * bv[p * n + j];
        }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op({m, n}, std::move(out), {a, b},
        [an, bn, m, k, n](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            s += self.grad[i * n + j] * bn->value[p * n + j];
                        an->grad[i * k + p] += s;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            s += an->value[i * k + p] * self.grad[i * n + j];
                        bn->grad[p * n + j] += s;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    auto an = a.node();
    return detail::make_op({1}, {s}, {a},
        [an](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (auto& g : an->grad) g += self.grad[0];
        });
}

inline Tensor reduce_mean(const Tensor& a) {
    return reduce_sum(a) / static_cast<double>(a.size());
}

// Sum over the dimensions listed in `axes`, keeping them as size 1.
inline Tensor sum_axes(const Tensor& a, const std::vector<std::size_t>& axes) {
    const Shape& in = a.shape();
    Shape out_shape = in;
    std::vector<bool> reduced(in.size(), false);
    for (auto ax : axes) {
        if (ax >= in.size())
            throw std::invalid_argument("sum_axes: axis out of range for " +
                                        shape_str(in));
        reduced[ax] = true;
        out_shape[ax] = 1;
    }
    std::size_t rank = in.size();
    std::size_t n_in = a.size();
    // map each input element to its output slot
    std::vector<std::size_t> out_stride(rank);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        out_stride[i] = (out_shape[i] == 1) ? 0 : acc;
        acc *= out_shape[i];
    }
    auto map = std::make_shared<std::vector<std::size_t>>(n_in);
    std::vector<std::size_t> coord(rank, 0);
    for (std::size_t e = 0; e < n_in; ++e) {
        std::size_t o = 0;
        for (std::size_t i = 0; i < rank; ++i) o += coord[i] * out_stride[i];
        (*map)[e] = o;
        for (std::size_t i = rank; i-- > 0;) {
            if (++coord[i] < in[i]) break;
            coord[i] = 0;
        }
    }
    std::vector<double> out(numel(out_shape), 0.0);
    const auto& av = a.data();
    for (std::size_t e = 0; e < n_in; ++e) out[(*map)[e]] += av[e];
    auto an = a.node();
    return detail::make_op(out_shape, std::move(out), {a},
        [an, map](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t e = 0; e < an->value.size(); ++e)
                an->grad[e] += self.grad[(*map)[e]];
        });
}

inline Tensor mean_axes(const Tensor& a, const std::vector<std::size_t>& axes) {
    std::size_t count = 1;
    for (auto ax : axes) count *= a.shape()[ax];
    return sum_axes(a, axes) / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// row ops for classifier losses

// Numerically stable log-softmax over the last dimension of [batch, C].
inline Tensor log_softmax(const Tensor& logits) {
    if (logits.shape().size() != 2)
        throw std::invalid_argument("log_softmax: expected [batch,C], got " +
                                    shape_str(logits.shape()));
    std::size_t b = logits.shape()[0], c = logits.shape()[1];
    if (b == 0) throw std::invalid_argument("log_softmax: empty batch");
    if (c < 2) throw std::invalid_argument("log_softmax: need C >= 2, got " +
                                           shape_str(logits.shape()));
    const auto& lv = logits.data();
    std::vector<double> out(b * c);
    for (std::size_t i = 0; i < b; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(lv[i * c + j] - mx);
        double lz = std::log(z) + mx;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = lv[i * c + j] - lz;
    }
    auto an = logits.node();
    return detail::make_op({b, c}, std::move(out), {logits},
        [an, b, c](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < b; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
                for (std::size_t j = 0; j < c; ++j) {
                    double p = std::exp(self.value[i * c + j]);
                    an->grad[i * c + j] += self.grad[i * c + j] - p * gsum;
                }
            }
        });
}

// out[i] = a[i, idx[i]] with shape [batch, 1].
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    if (a.shape().size() != 2)
        throw std::invalid_argument("gather_rows: expected [batch,C], got " +
                                    shape_str(a.shape()));
    std::size_t b = a.shape()[0], c = a.shape()[1];
    if (idx.size() != b)
        throw std::invalid_argument("gather_rows: " + std::to_string(idx.size()) +
                                    " indices for batch " + std::to_string(b));
    std::vector<double> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= c)
            throw std::invalid_argument("gather_rows: label " +
                                        std::to_string(idx[i]) +
                                        " out of range [0," +
                                        std::to_string(c) + ")");
        out[i] = a.data()[i * c + idx[i]];
    }
    auto an = a.node();
    auto ids = std::make_shared<std::vector<int>>(idx);
    return detail::make_op({b, 1}, std::move(out), {a},
        [an, ids, c](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < self.value.size(); ++i)
                an->grad[i * c + (*ids)[i]] += self.grad[i];
        });
}

// Mean negative log-likelihood of integer class labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    Tensor lsm = log_softmax(logits);
    return -reduce_mean(gather_rows(lsm, labels));
}

// KL(softmax(p) || softmax(q)) averaged over the batch dimension.
// 0*ln 0 := 0 holds by construction (p factors multiply the log difference).
inline Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
    if (p_logits.shape() != q_logits.shape())
        throw std::invalid_argument("kl_divergence: shape mismatch " +
                                    shape_str(p_logits.shape()) + " vs " +
                                    shape_str(q_logits.shape()));
    Tensor lp = log_softmax(p_logits);
    Tensor lq = log_softmax(q_logits);
    Tensor p = exp_t(lp);
    Tensor per_elem = p * (lp - lq);
    double batch = static_cast<double>(p_logits.shape()[0]);
    return reduce_sum(per_elem) / batch;
}

// ---------------------------------------------------------------------------
// 2-D convolution, stride 1, symmetric zero padding

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     std::size_t pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4 ||
        x.shape()[1] != w.shape()[1])
        throw std::invalid_argument("conv2d: incompatible shapes " +
                                    shape_str(x.shape()) + " vs " +
                                    shape_str(w.shape()));
    std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
                W = x.shape()[3];
    std::size_t O = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
    if (bias.shape() != Shape{O})
        throw std::invalid_argument("conv2d: bias shape " +
                                    shape_str(bias.shape()) + " vs filters " +
                                    shape_str(w.shape()));
    std::size_t OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
    std::vector<double> out(B * O * OH * OW, 0.0);
    const auto& xv = x.data();
    const auto& wv = w.data();
    const auto& bv = bias.data();
    auto xat = [&](std::size_t b, std::size_t c, std::ptrdiff_t i,
                   std::ptrdiff_t j) -> double {
        if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(H) ||
            j >= static_cast<std::ptrdiff_t>(W))
            return 0.0;
        return xv[((b * C + c) * H + i) * W + j];
    };
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < OH; ++i)
                for (std::size_t j = 0; j < OW; ++j) {
                    double s = bv[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ki = 0; ki < KH; ++ki)
                            for (std::size_t kj = 0; kj < KW; ++kj)
                                s += wv[((o * C + c) * KH + ki) * KW + kj] *
                                     xat(b, c,
                                         static_cast<std::ptrdiff_t>(i + ki) -
                                             static_cast<std::ptrdiff_t>(pad),
                                         static_cast<std::ptrdiff_t>(j + kj) -
                                             static_cast<std::ptrdiff_t>(pad));
                    out[((b * O + o) * OH + i) * OW + j] = s;
                }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return detail::make_op({B, O, OH, OW}, std::move(out), {x, w, bias},
        [xn, wn, bn, B, C, H, W, O, KH, KW, OH, OW, pad](TensorNode& self) {
            auto in_bounds = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
                return i >= 0 && j >= 0 && i < static_cast<std::ptrdiff_t>(H) &&
                       j < static_cast<std::ptrdiff_t>(W);
            };
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t i = 0; i < OH; ++i)
                        for (std::size_t j = 0; j < OW; ++j) {
                            double g = self.grad[((b * O + o) * OH + i) * OW + j];
                            if (g == 0.0) continue;
                            if (bn->requires_grad) bn->grad[o] += g;
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t ki = 0; ki < KH; ++ki)
                                    for (std::size_t kj = 0; kj < KW; ++kj) {
                                        std::ptrdiff_t xi =
                                            static_cast<std::ptrdiff_t>(i + ki) -
                                            static_cast<std::ptrdiff_t>(pad);
                                        std::ptrdiff_t xj =
                                            static_cast<std::ptrdiff_t>(j + kj) -
                                            static_cast<std::ptrdiff_t>(pad);
                                        if (!in_bounds(xi, xj)) continue;
                                        std::size_t xidx =
                                            ((b * C + c) * H + xi) * W + xj;
                                        std::size_t widx =
                                            ((o * C + c) * KH + ki) * KW + kj;
                                        if (wn->requires_grad)
                                            wn->grad[widx] += g * xn->value[xidx];
                                        if (xn->requires_grad)
                                            xn->grad[xidx] += g * wn->value[widx];
                                    }
                        }
        });
}

// ---------------------------------------------------------------------------
// reverse pass

// Populates .grad on every requires_grad node reachable from `loss`,
// seeding d loss/d loss = 1. Visits each node exactly once in reverse
// topological order; deterministic for identical graphs.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    // iterative post-order DFS
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (TensorNode* n : order)
        if (n->requires_grad) n->grad.assign(n->value.size(), 0.0);
    if (!loss.node()->requires_grad) return; // all-constant graph
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop && (*it)->requires_grad) (*it)->backprop();
}

} // namespace dfshield
