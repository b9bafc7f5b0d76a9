#ifndef SESA_TENSOR_HPP
#define SESA_TENSOR_HPP

// Minimal dense-tensor engine with reverse-mode autodiff. 64-bit floats,
// row-major, no broadcasting beyond scalar-tensor. A computation graph is
// confined to one thread; separate graphs may run in parallel.

#include "sesa/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace sesa {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeMismatch("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), std::vector<double>(0), requires_grad, FillTag{}, 0.0);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        return Tensor(std::move(shape), std::vector<double>(0), requires_grad, FillTag{}, v);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stdev = 1.0, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = rng.normal() * stdev;
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = rng.uniform(lo, hi);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    double item() const {
        if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    double at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }

    // Detached copy: same values, fresh leaf.
    Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

    NodePtr node() const { return node_; }

    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

private:
    struct FillTag {};
    Tensor(Shape shape, std::vector<double>, bool requires_grad, FillTag, double v) {
        node_ = std::make_shared<TensorNode>();
        node_->data.assign(static_cast<size_t>(shape_numel(shape)), v);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    NodePtr node_;
};

namespace detail {

inline NodePtr make_result(Shape shape, std::vector<double> data,
                           std::vector<NodePtr> parents,
                           std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents)
        if (p->requires_grad || p->backward_fn) rg = true;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); i++) out[i] += b.at(static_cast<int64_t>(i));
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node(), b.node()},
        [](TensorNode& self) {
            for (int p = 0; p < 2; p++) {
                auto& par = self.parents[p];
                if (!par->requires_grad && !par->backward_fn) continue;
                par->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++) par->grad[i] += self.grad[i];
            }
        }));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); i++) out[i] -= b.at(static_cast<int64_t>(i));
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node(), b.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad || pa->backward_fn) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad || pb->backward_fn) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++) pb->grad[i] -= self.grad[i];
            }
        }));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); i++)
        out[i] = a.at(static_cast<int64_t>(i)) * b.at(static_cast<int64_t>(i));
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node(), b.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad || pa->backward_fn) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++)
                    pa->grad[i] += self.grad[i] * pb->data[i];
            }
            if (pb->requires_grad || pb->backward_fn) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++)
                    pb->grad[i] += self.grad[i] * pa->data[i];
            }
        }));
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= s;
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node()},
        [s](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) pa->grad[i] += self.grad[i] * s;
        }));
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& v : out) v += s;
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) pa->grad[i] += self.grad[i];
        }));
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor silu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); i++) {
        double x = a.at(static_cast<int64_t>(i));
        out[i] = x / (1.0 + std::exp(-x));
    }
    return Tensor(detail::make_result(a.shape(), std::move(out), {a.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) {
                double x = pa->data[i];
                double sg = 1.0 / (1.0 + std::exp(-x));
                pa->grad[i] += self.grad[i] * sg * (1.0 + x * (1.0 - sg));
            }
        }));
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return Tensor(detail::make_result(Shape{1}, {acc}, {a.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < pa->grad.size(); i++) pa->grad[i] += self.grad[0];
        }));
}

inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

// sum of squares, the L2^2 building block of the training objective
inline Tensor sum_squares(const Tensor& a) { return sum(mul(a, a)); }

// ---- shape ops ----

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return Tensor(detail::make_result(std::move(shape), a.data(), {a.node()},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) pa->grad[i] += self.grad[i];
        }));
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}
// index map for permute: out[i] = in[perm_index[i]]
inline std::vector<int64_t> permute_index(const Shape& in_shape, const std::vector<size_t>& axes) {
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); i++) out_shape[i] = in_shape[axes[i]];
    auto in_st = strides_of(in_shape);
    auto out_st = strides_of(out_shape);
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::vector<int64_t> coord(axes.size());
    for (int64_t o = 0; o < n; o++) {
        int64_t rem = o;
        int64_t src = 0;
        for (size_t d = 0; d < axes.size(); d++) {
            int64_t c = rem / out_st[d];
            rem %= out_st[d];
            src += c * in_st[axes[d]];
        }
        idx[static_cast<size_t>(o)] = src;
    }
    return idx;
}
}  // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
    if (axes.size() != a.rank()) throw ShapeMismatch("permute: axes count != rank");
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); i++) out_shape[i] = a.dim(axes[i]);
    auto idx = detail::permute_index(a.shape(), axes);
    std::vector<double> out(idx.size());
    for (size_t i = 0; i < idx.size(); i++) out[i] = a.at(idx[i]);
    return Tensor(detail::make_result(std::move(out_shape), std::move(out), {a.node()},
        [idx](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < idx.size(); i++)
                pa->grad[static_cast<size_t>(idx[i])] += self.grad[i];
        }));
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeMismatch("transpose expects rank 2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

inline Tensor concat_axis0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_axis0: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int64_t total0 = 0;
    std::vector<double> out;
    std::vector<NodePtr> parents;
    std::vector<size_t> sizes;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) throw ShapeMismatch("concat_axis0: trailing dims differ");
        total0 += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.node());
        sizes.push_back(p.data().size());
    }
    Shape out_shape = parts[0].shape();
    out_shape[0] = total0;
    return Tensor(detail::make_result(std::move(out_shape), std::move(out), std::move(parents),
        [sizes](TensorNode& self) {
            size_t off = 0;
            for (size_t p = 0; p < self.parents.size(); p++) {
                auto& par = self.parents[p];
                if (par->requires_grad || par->backward_fn) {
                    par->ensure_grad();
                    for (size_t i = 0; i < sizes[p]; i++) par->grad[i] += self.grad[off + i];
                }
                off += sizes[p];
            }
        }));
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeMismatch("matmul expects rank-2 operands");
    if (a.dim(1) != b.dim(0))
        throw ShapeMismatch("matmul inner dims: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int64_t i = 0; i < m; i++)
        for (int64_t p = 0; p < k; p++) {
            double av = ad[static_cast<size_t>(i * k + p)];
            if (av == 0.0) continue;
            const double* brow = &bd[static_cast<size_t>(p * n)];
            double* orow = &out[static_cast<size_t>(i * n)];
            for (int64_t j = 0; j < n; j++) orow[j] += av * brow[j];
        }
    return Tensor(detail::make_result(Shape{m, n}, std::move(out), {a.node(), b.node()},
        [m, k, n](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad || pa->backward_fn) {
                pa->ensure_grad();  // dA = dC * B^T
                for (int64_t i = 0; i < m; i++)
                    for (int64_t j = 0; j < n; j++) {
                        double g = self.grad[static_cast<size_t>(i * n + j)];
                        if (g == 0.0) continue;
                        for (int64_t p = 0; p < k; p++)
                            pa->grad[static_cast<size_t>(i * k + p)] +=
                                g * pb->data[static_cast<size_t>(p * n + j)];
                    }
            }
            if (pb->requires_grad || pb->backward_fn) {
                pb->ensure_grad();  // dB = A^T * dC
                for (int64_t i = 0; i < m; i++)
                    for (int64_t p = 0; p < k; p++) {
                        double av = pa->data[static_cast<size_t>(i * k + p)];
                        if (av == 0.0) continue;
                        for (int64_t j = 0; j < n; j++)
                            pb->grad[static_cast<size_t>(p * n + j)] +=
                                av * self.grad[static_cast<size_t>(i * n + j)];
                    }
            }
        }));
}

// softmax over rows of a [q x k] matrix, with optional additive bias
inline Tensor softmax_rows(const Tensor& logits, const std::optional<Tensor>& bias = std::nullopt) {
    if (logits.rank() != 2) throw ShapeMismatch("softmax_rows expects rank 2");
    if (bias && bias->shape() != logits.shape())
        throw ShapeMismatch("softmax_rows bias " + shape_str(bias->shape()) + " vs logits " +
                            shape_str(logits.shape()));
    for (double v : logits.data())
        if (!std::isfinite(v)) throw NonFiniteInput("softmax_rows logit");
    if (bias)
        for (double v : bias->data())
            if (!std::isfinite(v)) throw NonFiniteInput("softmax_rows bias");

    const int64_t q = logits.dim(0), k = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(q * k));
    for (int64_t r = 0; r < q; r++) {
        // the per-row constant component of the bias is dropped before
        // exponentiation (softmax shift invariance), so a constant bias row
        // reproduces the unbiased result bit-exactly
        double bmin = 0.0;
        if (bias) {
            bmin = bias->at(r * k);
            for (int64_t c = 1; c < k; c++) bmin = std::min(bmin, bias->at(r * k + c));
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t c = 0; c < k; c++) {
            double b = bias ? (bias->at(r * k + c) - bmin) : 0.0;
            double z = (b == 0.0) ? logits.at(r * k + c) : logits.at(r * k + c) + b;
            out[static_cast<size_t>(r * k + c)] = z;
            mx = std::max(mx, z);
        }
        double denom = 0.0;
        for (int64_t c = 0; c < k; c++) {
            double e = std::exp(out[static_cast<size_t>(r * k + c)] - mx);
            out[static_cast<size_t>(r * k + c)] = e;
            denom += e;
        }
        for (int64_t c = 0; c < k; c++) out[static_cast<size_t>(r * k + c)] /= denom;
    }
    std::vector<NodePtr> parents{logits.node()};
    if (bias) parents.push_back(bias->node());
    return Tensor(detail::make_result(logits.shape(), std::move(out), std::move(parents),
        [q, k](TensorNode& self) {
            // dz = y * (dy - sum(dy * y)) per row; bias grad equals logit grad
            std::vector<double> dz(static_cast<size_t>(q * k));
            for (int64_t r = 0; r < q; r++) {
                double dot = 0.0;
                for (int64_t c = 0; c < k; c++) {
                    size_t i = static_cast<size_t>(r * k + c);
                    dot += self.grad[i] * self.data[i];
                }
                for (int64_t c = 0; c < k; c++) {
                    size_t i = static_cast<size_t>(r * k + c);
                    dz[i] = self.data[i] * (self.grad[i] - dot);
                }
            }
            for (auto& par : self.parents) {
                if (!par->requires_grad && !par->backward_fn) continue;
                par->ensure_grad();
                for (size_t i = 0; i < dz.size(); i++) par->grad[i] += dz[i];
            }
        }));
}

// divide each row of [q x k] by its row sum
inline Tensor normalize_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeMismatch("normalize_rows expects rank 2");
    const int64_t q = x.dim(0), k = x.dim(1);
    std::vector<double> out(static_cast<size_t>(q * k));
    std::vector<double> sums(static_cast<size_t>(q));
    for (int64_t r = 0; r < q; r++) {
        double s = 0.0;
        for (int64_t c = 0; c < k; c++) s += x.at(r * k + c);
        if (s == 0.0) throw NumericalInstability("normalize_rows: zero row sum");
        sums[static_cast<size_t>(r)] = s;
        for (int64_t c = 0; c < k; c++) out[static_cast<size_t>(r * k + c)] = x.at(r * k + c) / s;
    }
    return Tensor(detail::make_result(x.shape(), std::move(out), {x.node()},
        [q, k, sums](TensorNode& self) {
            auto& px = self.parents[0];
            px->ensure_grad();
            for (int64_t r = 0; r < q; r++) {
                double dot = 0.0;
                for (int64_t c = 0; c < k; c++) {
                    size_t i = static_cast<size_t>(r * k + c);
                    dot += self.grad[i] * self.data[i];
                }
                for (int64_t c = 0; c < k; c++) {
                    size_t i = static_cast<size_t>(r * k + c);
                    px->grad[i] += (self.grad[i] - dot) / sums[static_cast<size_t>(r)];
                }
            }
        }));
}

// ---- conv / pool ----

// input [C_in x H x W], kernel [C_out x C_in x kh x kw], optional bias [C_out].
// Cross-correlation semantics.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const std::optional<Tensor>& bias = std::nullopt,
                     int64_t stride = 1, int64_t padding = 0) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw ShapeMismatch("conv2d expects input [C,H,W], kernel [Co,Ci,kh,kw]");
    const int64_t ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int64_t co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != ci)
        throw ShapeMismatch("conv2d channels: input " + std::to_string(ci) + " vs kernel " +
                            std::to_string(kernel.dim(1)));
    if (bias && (bias->rank() != 1 || bias->dim(0) != co))
        throw ShapeMismatch("conv2d bias shape");
    if ((h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0)
        throw ShapeMismatch("conv2d: non-integral output extent");
    const int64_t ho = (h + 2 * padding - kh) / stride + 1;
    const int64_t wo = (w + 2 * padding - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeMismatch("conv2d: kernel does not fit padded input");

    std::vector<double> out(static_cast<size_t>(co * ho * wo), 0.0);
    const auto& in = input.data();
    const auto& kd = kernel.data();
    for (int64_t oc = 0; oc < co; oc++) {
        double bv = bias ? bias->at(oc) : 0.0;
        for (int64_t oy = 0; oy < ho; oy++)
            for (int64_t ox = 0; ox < wo; ox++) {
                double acc = bv;
                for (int64_t ic = 0; ic < ci; ic++)
                    for (int64_t ky = 0; ky < kh; ky++) {
                        int64_t iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; kx++) {
                            int64_t ix = ox * stride + kx - padding;
                            if (ix < 0 || ix >= w) continue;
                            acc += in[static_cast<size_t>((ic * h + iy) * w + ix)] *
                                   kd[static_cast<size_t>(((oc * ci + ic) * kh + ky) * kw + kx)];
                        }
                    }
                out[static_cast<size_t>((oc * ho + oy) * wo + ox)] = acc;
            }
    }
    std::vector<NodePtr> parents{input.node(), kernel.node()};
    if (bias) parents.push_back(bias->node());
    bool has_bias = bias.has_value();
    return Tensor(detail::make_result(Shape{co, ho, wo}, std::move(out), std::move(parents),
        [ci, h, w, co, kh, kw, ho, wo, stride, padding, has_bias](TensorNode& self) {
            auto& pin = self.parents[0];
            auto& pk = self.parents[1];
            bool gin = pin->requires_grad || pin->backward_fn;
            bool gk = pk->requires_grad || pk->backward_fn;
            if (gin) pin->ensure_grad();
            if (gk) pk->ensure_grad();
            for (int64_t oc = 0; oc < co; oc++)
                for (int64_t oy = 0; oy < ho; oy++)
                    for (int64_t ox = 0; ox < wo; ox++) {
                        double g = self.grad[static_cast<size_t>((oc * ho + oy) * wo + ox)];
                        if (g == 0.0) continue;
                        for (int64_t ic = 0; ic < ci; ic++)
                            for (int64_t ky = 0; ky < kh; ky++) {
                                int64_t iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= h) continue;
                                for (int64_t kx = 0; kx < kw; kx++) {
                                    int64_t ix = ox * stride + kx - padding;
                                    if (ix < 0 || ix >= w) continue;
                                    size_t ii = static_cast<size_t>((ic * h + iy) * w + ix);
                                    size_t ki = static_cast<size_t>(
                                        ((oc * ci + ic) * kh + ky) * kw + kx);
                                    if (gin) pin->grad[ii] += g * pk->data[ki];
                                    if (gk) pk->grad[ki] += g * pin->data[ii];
                                }
                            }
                    }
            if (has_bias) {
                auto& pb = self.parents[2];
                if (pb->requires_grad || pb->backward_fn) {
                    pb->ensure_grad();
                    for (int64_t oc = 0; oc < co; oc++) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < ho * wo; i++)
                            acc += self.grad[static_cast<size_t>(oc * ho * wo + i)];
                        pb->grad[static_cast<size_t>(oc)] += acc;
                    }
                }
            }
        }));
}

// max pooling over the last two dims; leading dims are batch. Gradient routes
// to the first (row-major) maximal element of each window.
inline Tensor maxpool2d(const Tensor& input, int64_t window, int64_t stride = -1) {
    if (input.rank() < 2) throw ShapeMismatch("maxpool2d expects rank >= 2");
    if (stride <= 0) stride = window;
    const int64_t w = input.dim(input.rank() - 1);
    const int64_t h = input.dim(input.rank() - 2);
    if ((h - window) % stride != 0 || (w - window) % stride != 0 || window > h || window > w)
        throw ShapeMismatch("maxpool2d: window/stride does not tile input " + shape_str(input.shape()));
    const int64_t ho = (h - window) / stride + 1;
    const int64_t wo = (w - window) / stride + 1;
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < input.rank(); i++) batch *= input.dim(i);

    std::vector<double> out(static_cast<size_t>(batch * ho * wo));
    std::vector<int64_t> argmax(out.size());
    const auto& in = input.data();
    for (int64_t b = 0; b < batch; b++)
        for (int64_t oy = 0; oy < ho; oy++)
            for (int64_t ox = 0; ox < wo; ox++) {
                double best = -std::numeric_limits<double>::infinity();
                int64_t best_i = -1;
                for (int64_t dy = 0; dy < window; dy++)
                    for (int64_t dx = 0; dx < window; dx++) {
                        int64_t iy = oy * stride + dy, ix = ox * stride + dx;
                        int64_t i = (b * h + iy) * w + ix;
                        if (in[static_cast<size_t>(i)] > best) {
                            best = in[static_cast<size_t>(i)];
                            best_i = i;
                        }
                    }
                size_t o = static_cast<size_t>((b * ho + oy) * wo + ox);
                out[o] = best;
                argmax[o] = best_i;
            }
    Shape out_shape = input.shape();
    out_shape[out_shape.size() - 2] = ho;
    out_shape[out_shape.size() - 1] = wo;
    return Tensor(detail::make_result(std::move(out_shape), std::move(out), {input.node()},
        [argmax](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (size_t i = 0; i < argmax.size(); i++)
                pa->grad[static_cast<size_t>(argmax[i])] += self.grad[i];
        }));
}

// nearest-neighbor 2x upsample of [C x H x W]
inline Tensor upsample_nearest2x(const Tensor& input) {
    if (input.rank() != 3) throw ShapeMismatch("upsample_nearest2x expects [C,H,W]");
    const int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    std::vector<double> out(static_cast<size_t>(c * 4 * h * w));
    for (int64_t ch = 0; ch < c; ch++)
        for (int64_t y = 0; y < 2 * h; y++)
            for (int64_t x = 0; x < 2 * w; x++)
                out[static_cast<size_t>((ch * 2 * h + y) * 2 * w + x)] =
                    input.at((ch * h + y / 2) * w + x / 2);
    return Tensor(detail::make_result(Shape{c, 2 * h, 2 * w}, std::move(out), {input.node()},
        [c, h, w](TensorNode& self) {
            auto& pa = self.parents[0];
            pa->ensure_grad();
            for (int64_t ch = 0; ch < c; ch++)
                for (int64_t y = 0; y < 2 * h; y++)
                    for (int64_t x = 0; x < 2 * w; x++)
                        pa->grad[static_cast<size_t>((ch * h + y / 2) * w + x / 2)] +=
                            self.grad[static_cast<size_t>((ch * 2 * h + y) * 2 * w + x)];
        }));
}

// ---- explicit shape-adapted adds (no general broadcasting) ----

// x [n x d] + b [d] on every row
inline Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw ShapeMismatch("add_bias_rows: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int64_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(x.data());
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < d; j++) out[static_cast<size_t>(i * d + j)] += b.at(j);
    return Tensor(detail::make_result(x.shape(), std::move(out), {x.node(), b.node()},
        [n, d](TensorNode& self) {
            auto& px = self.parents[0];
            auto& pb = self.parents[1];
            if (px->requires_grad || px->backward_fn) {
                px->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++) px->grad[i] += self.grad[i];
            }
            if (pb->requires_grad || pb->backward_fn) {
                pb->ensure_grad();
                for (int64_t i = 0; i < n; i++)
                    for (int64_t j = 0; j < d; j++)
                        pb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * d + j)];
            }
        }));
}

// x [C x H x W] + b [C] on every spatial location
inline Tensor add_bias_channels(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0))
        throw ShapeMismatch("add_bias_channels: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(x.data());
    for (int64_t ch = 0; ch < c; ch++)
        for (int64_t i = 0; i < hw; i++) out[static_cast<size_t>(ch * hw + i)] += b.at(ch);
    return Tensor(detail::make_result(x.shape(), std::move(out), {x.node(), b.node()},
        [c, hw](TensorNode& self) {
            auto& px = self.parents[0];
            auto& pb = self.parents[1];
            if (px->requires_grad || px->backward_fn) {
                px->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); i++) px->grad[i] += self.grad[i];
            }
            if (pb->requires_grad || pb->backward_fn) {
                pb->ensure_grad();
                for (int64_t ch = 0; ch < c; ch++) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; i++)
                        acc += self.grad[static_cast<size_t>(ch * hw + i)];
                    pb->grad[static_cast<size_t>(ch)] += acc;
                }
            }
        }));
}

// embedding lookup: rows of table [V x d] at the given indices -> [n x d]
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices) {
    if (table.rank() != 2) throw ShapeMismatch("gather_rows expects [V,d]");
    const int64_t v = table.dim(0), d = table.dim(1);
    for (int64_t i : indices)
        if (i < 0 || i >= v) throw IndexOutOfRange("gather_rows index " + std::to_string(i));
    std::vector<double> out(indices.size() * static_cast<size_t>(d));
    for (size_t r = 0; r < indices.size(); r++)
        for (int64_t j = 0; j < d; j++)
            out[r * static_cast<size_t>(d) + static_cast<size_t>(j)] = table.at(indices[r] * d + j);
    return Tensor(detail::make_result(Shape{static_cast<int64_t>(indices.size()), d},
                                      std::move(out), {table.node()},
        [indices, d](TensorNode& self) {
            auto& pt = self.parents[0];
            pt->ensure_grad();
            for (size_t r = 0; r < indices.size(); r++)
                for (int64_t j = 0; j < d; j++)
                    pt->grad[static_cast<size_t>(indices[r] * d + j)] +=
                        self.grad[r * static_cast<size_t>(d) + static_cast<size_t>(j)];
        }));
}

// ---- backward ----

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NotScalar("backward on " + shape_str(loss.shape()));
    // topological order by DFS
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (!visited.count(p) && (p->backward_fn || !p->parents.empty())) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace sesa

#endif  // SESA_TENSOR_HPP
