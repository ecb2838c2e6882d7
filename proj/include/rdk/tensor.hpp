#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation and an
// Adam optimizer. Templated on the scalar type: float for training and
// inference, double for finite-difference gradient verification.
//
// Ops build a DAG of nodes; backward() linearizes the graph reachable from a
// scalar loss into a GradientTape (reverse topological order) and replays it,
// accumulating into the .grad buffers of grad-tracked tensors. Tensors are
// immutable once produced by an op; only optimizer steps mutate leaf values.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rdk/common.hpp"

namespace rdk {

namespace detail {

// C = A[m x k] * B[k x n]; i-p-j order keeps the inner loop contiguous.
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n, bool accumulate) {
    for (size_t i = 0; i < m; ++i) {
        Real* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, Real(0));
        const Real* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = A[m x n] * B^T where B is [k x n]; C is [m x k]. Row-row dot products
// with a fixed-width accumulator bank so the reduction vectorizes without
// relaxed floating-point semantics (summation order stays deterministic).
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, size_t m, size_t n, size_t k, bool accumulate) {
    constexpr size_t kLanes = 16;
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * n;
        Real* crow = c + i * k;
        for (size_t p = 0; p < k; ++p) {
            const Real* brow = b + p * n;
            Real lanes[kLanes] = {};
            size_t j = 0;
            for (; j + kLanes <= n; j += kLanes) {
                for (size_t u = 0; u < kLanes; ++u) lanes[u] += arow[j + u] * brow[j + u];
            }
            Real acc = Real(0);
            for (; j < n; ++j) acc += arow[j] * brow[j];
            for (size_t u = 0; u < kLanes; ++u) acc += lanes[u];
            if (accumulate) {
                crow[p] += acc;
            } else {
                crow[p] = acc;
            }
        }
    }
}

// C = A^T * B where A is [m x k], B is [m x n]; C is [k x n].
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, Real(0));
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            Real* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <class Real>
struct TensorNode {
    std::vector<size_t> shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;  // pulls this->grad into parents' grads

    size_t size() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    }
    void accumulate(const Real* g, size_t n) {
        ensure_grad();
        for (size_t i = 0; i < n; ++i) grad[i] += g[i];
    }
};

template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor from(std::vector<size_t> shape, std::vector<Real> data, bool requires_grad = false) {
        size_t expect = 1;
        for (size_t d : shape) expect *= d;
        if (expect != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_to_string(shape));
        }
        auto n = std::make_shared<TensorNode<Real>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        size_t total = 1;
        for (size_t d : shape) total *= d;
        return from(std::move(shape), std::vector<Real>(total, Real(0)), requires_grad);
    }

    static Tensor full(std::vector<size_t> shape, Real v, bool requires_grad = false) {
        size_t total = 1;
        for (size_t d : shape) total *= d;
        return from(std::move(shape), std::vector<Real>(total, v), requires_grad);
    }

    static Tensor randn(std::vector<size_t> shape, Rng& rng, Real stddev, bool requires_grad = false) {
        size_t total = 1;
        for (size_t d : shape) total *= d;
        std::vector<Real> data(total);
        for (auto& x : data) x = static_cast<Real>(rng.normal()) * stddev;
        return from(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t size() const { return node_->value.size(); }
    size_t rows() const { return node_->shape.size() >= 1 ? node_->shape[0] : 1; }
    size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

    const Real* data() const { return node_->value.data(); }
    const std::vector<Real>& values() const { return node_->value; }
    Real item() const {
        if (size() != 1) throw DimensionError("item() requires a scalar tensor");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<Real>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    // Leaf mutation, for optimizers and initialization only.
    Real* leaf_data() { return node_->value.data(); }

    std::shared_ptr<TensorNode<Real>> node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<Real>> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode<Real>> node_;
};

namespace detail {

template <class Real>
Tensor<Real> make_result(std::vector<size_t> shape, std::vector<Real> value,
                         std::vector<std::shared_ptr<TensorNode<Real>>> parents,
                         std::function<void(TensorNode<Real>*)> backward) {
    auto n = std::make_shared<TensorNode<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool track = false;
    for (const auto& p : parents) track = track || p->requires_grad;
    n->requires_grad = track;
    if (track) {
        n->parents = std::move(parents);
        TensorNode<Real>* self = n.get();
        n->backward_fn = [self, backward = std::move(backward)]() { backward(self); };
    }
    return Tensor<Real>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitive ops

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()));
    }
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<Real> out(m * n);
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    auto pa = a.node(), pb = b.node();
    return detail::make_result<Real>(
        {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](TensorNode<Real>* self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::gemm_nt(self->grad.data(), pb->value.data(), pa->grad.data(), m, n, k, true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                detail::gemm_tn(pa->value.data(), self->grad.data(), pb->grad.data(), m, k, n, true);
            }
        });
}

// logits-style product against a row-major table: a[m x d] * b[v x d]^T -> [m x v]
template <class Real>
Tensor<Real> matmul_transposed_b(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
        throw DimensionError("matmul_transposed_b: incompatible shapes " + shape_to_string(a.shape()) +
                             " and " + shape_to_string(b.shape()));
    }
    const size_t m = a.shape()[0], d = a.shape()[1], v = b.shape()[0];
    std::vector<Real> out(m * v);
    detail::gemm_nt(a.data(), b.data(), out.data(), m, d, v, false);
    auto pa = a.node(), pb = b.node();
    return detail::make_result<Real>(
        {m, v}, std::move(out), {pa, pb}, [pa, pb, m, d, v](TensorNode<Real>* self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::gemm_nn(self->grad.data(), pb->value.data(), pa->grad.data(), m, v, d, true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                detail::gemm_tn(self->grad.data(), pa->value.data(), pb->grad.data(), m, v, d, true);
            }
        });
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    std::vector<Real> out(a.size());
    const Real* pa_ = a.data();
    const Real* pb_ = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa_[i] + pb_[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<Real>* self) {
        if (pa->requires_grad) pa->accumulate(self->grad.data(), self->grad.size());
        if (pb->requires_grad) pb->accumulate(self->grad.data(), self->grad.size());
    });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    std::vector<Real> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorNode<Real>* self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] += self->grad[i] * pa->value[i];
        }
    });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
    std::vector<Real> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto pa = a.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa}, [pa, s](TensorNode<Real>* self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i] * s;
    });
}

// c = a * s where s is a [1] or [1x1] tensor; gradient flows into both.
template <class Real>
Tensor<Real> scale_by_scalar(const Tensor<Real>& a, const Tensor<Real>& s) {
    if (s.size() != 1) throw DimensionError("scale_by_scalar: scalar operand must have size 1");
    const Real sv = s.data()[0];
    std::vector<Real> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    auto pa = a.node(), ps = s.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa, ps}, [pa, ps, sv](TensorNode<Real>* self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i] * sv;
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            Real acc = Real(0);
            for (size_t i = 0; i < self->grad.size(); ++i) acc += self->grad[i] * pa->value[i];
            ps->grad[0] += acc;
        }
    });
}

template <class Real>
Tensor<Real> select_scalar(const Tensor<Real>& a, size_t flat_index) {
    if (flat_index >= a.size()) throw DimensionError("select_scalar: index out of range");
    auto pa = a.node();
    return detail::make_result<Real>({1}, {a.data()[flat_index]}, {pa},
                                     [pa, flat_index](TensorNode<Real>* self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         pa->grad[flat_index] += self->grad[0];
                                     });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    Real acc = Real(0);
    for (size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    auto pa = a.node();
    return detail::make_result<Real>({1}, {acc}, {pa}, [pa](TensorNode<Real>* self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self->grad[0];
    });
}

// mean over rows [row_begin, row_end) of a [T x d] tensor -> [1 x d]
template <class Real>
Tensor<Real> mean_rows(const Tensor<Real>& a, size_t row_begin, size_t row_end) {
    if (a.shape().size() != 2) throw DimensionError("mean_rows: expects a 2-D tensor");
    const size_t t = a.shape()[0], d = a.shape()[1];
    if (row_begin >= row_end || row_end > t) {
        throw DimensionError("mean_rows: invalid row range [" + std::to_string(row_begin) + "," +
                             std::to_string(row_end) + ") for " + shape_to_string(a.shape()));
    }
    const size_t cnt = row_end - row_begin;
    std::vector<Real> out(d, Real(0));
    for (size_t i = row_begin; i < row_end; ++i) {
        const Real* row = a.data() + i * d;
        for (size_t j = 0; j < d; ++j) out[j] += row[j];
    }
    const Real inv = Real(1) / static_cast<Real>(cnt);
    for (size_t j = 0; j < d; ++j) out[j] *= inv;
    auto pa = a.node();
    return detail::make_result<Real>({1, d}, std::move(out), {pa},
                                     [pa, row_begin, row_end, d, inv](TensorNode<Real>* self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         for (size_t i = row_begin; i < row_end; ++i) {
                                             Real* grow = pa->grad.data() + i * d;
                                             for (size_t j = 0; j < d; ++j) grow[j] += self->grad[j] * inv;
                                         }
                                     });
}

// Row-wise RMS normalization with a learned gain: y = x * gain / rms(x).
template <class Real>
Tensor<Real> rmsnorm_rows(const Tensor<Real>& a, const Tensor<Real>& gain, Real eps = Real(1e-6)) {
    if (a.shape().size() != 2) throw DimensionError("rmsnorm_rows: expects a 2-D tensor");
    const size_t t = a.shape()[0], d = a.shape()[1];
    if (gain.size() != d) {
        throw DimensionError("rmsnorm_rows: gain size " + std::to_string(gain.size()) +
                             " does not match width " + std::to_string(d));
    }
    std::vector<Real> out(t * d);
    std::vector<Real> inv_rms(t);
    for (size_t i = 0; i < t; ++i) {
        const Real* row = a.data() + i * d;
        Real ss = Real(0);
        for (size_t j = 0; j < d; ++j) ss += row[j] * row[j];
        const Real inv = Real(1) / std::sqrt(ss / static_cast<Real>(d) + eps);
        inv_rms[i] = inv;
        Real* orow = out.data() + i * d;
        for (size_t j = 0; j < d; ++j) orow[j] = row[j] * gain.data()[j] * inv;
    }
    auto pa = a.node(), pg = gain.node();
    return detail::make_result<Real>(
        a.shape(), std::move(out), {pa, pg},
        [pa, pg, t, d, inv_rms = std::move(inv_rms)](TensorNode<Real>* self) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            for (size_t i = 0; i < t; ++i) {
                const Real* x = pa->value.data() + i * d;
                const Real* dy = self->grad.data() + i * d;
                const Real inv = inv_rms[i];
                if (pa->requires_grad) {
                    Real s = Real(0);
                    for (size_t j = 0; j < d; ++j) s += dy[j] * pg->value[j] * x[j];
                    const Real coef = s * inv * inv * inv / static_cast<Real>(d);
                    Real* dx = pa->grad.data() + i * d;
                    for (size_t j = 0; j < d; ++j) dx[j] += dy[j] * pg->value[j] * inv - x[j] * coef;
                }
                if (pg->requires_grad) {
                    for (size_t j = 0; j < d; ++j) pg->grad[j] += dy[j] * x[j] * inv;
                }
            }
        });
}

// tanh-form GELU; smooth everywhere, which keeps finite-difference checks clean
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
    constexpr Real kC = Real(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    constexpr Real kCube = Real(0.044715);
    std::vector<Real> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const Real x = a.data()[i];
        const Real u = kC * (x + kCube * x * x * x);
        out[i] = Real(0.5) * x * (Real(1) + std::tanh(u));
    }
    auto pa = a.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa}, [pa](TensorNode<Real>* self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        constexpr Real kC = Real(0.7978845608028653558798921198687637);
        constexpr Real kCube = Real(0.044715);
        for (size_t i = 0; i < self->grad.size(); ++i) {
            const Real x = pa->value[i];
            const Real u = kC * (x + kCube * x * x * x);
            const Real th = std::tanh(u);
            const Real du = kC * (Real(1) + Real(3) * kCube * x * x);
            const Real dydx = Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
            pa->grad[i] += self->grad[i] * dydx;
        }
    });
}

// Row softmax over the last dimension with max-subtraction.
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& a) {
    if (a.shape().empty() || a.shape().back() == 0) {
        throw DimensionError("softmax_rows: empty last dimension in " + shape_to_string(a.shape()));
    }
    const size_t n = a.shape().back();
    const size_t rows = a.size() / n;
    std::vector<Real> out(a.size());
    for (size_t r = 0; r < rows; ++r) {
        const Real* x = a.data() + r * n;
        Real* y = out.data() + r * n;
        Real mx = x[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        Real z = Real(0);
        for (size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const Real inv = Real(1) / z;
        for (size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    auto pa = a.node();
    return detail::make_result<Real>(a.shape(), std::move(out), {pa}, [pa, rows, n](TensorNode<Real>* self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const Real* p = self->value.data() + r * n;
            const Real* dy = self->grad.data() + r * n;
            Real dot = Real(0);
            for (size_t j = 0; j < n; ++j) dot += dy[j] * p[j];
            Real* dx = pa->grad.data() + r * n;
            for (size_t j = 0; j < n; ++j) dx[j] += p[j] * (dy[j] - dot);
        }
    });
}

// Causal multi-head self-attention over already-projected q, k, v of shape
// [T x d]. Position i attends to positions <= i. Attention probabilities are
// cached for the backward pass.
template <class Real>
Tensor<Real> causal_self_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                                   size_t heads) {
    if (q.shape() != k.shape() || q.shape() != v.shape() || q.shape().size() != 2) {
        throw DimensionError("causal_self_attention: q/k/v must share a 2-D shape");
    }
    const size_t t = q.shape()[0], d = q.shape()[1];
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("causal_self_attention: width " + std::to_string(d) +
                             " not divisible by heads " + std::to_string(heads));
    }
    const size_t hd = d / heads;
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(hd));

    std::vector<Real> out(t * d, Real(0));
    // probs[h][i*t + j] for j <= i
    auto probs = std::make_shared<std::vector<Real>>(heads * t * t, Real(0));
    for (size_t h = 0; h < heads; ++h) {
        const size_t off = h * hd;
        Real* ph = probs->data() + h * t * t;
        for (size_t i = 0; i < t; ++i) {
            const Real* qi = q.data() + i * d + off;
            Real* prow = ph + i * t;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (size_t j = 0; j <= i; ++j) {
                const Real* kj = k.data() + j * d + off;
                Real s = Real(0);
                for (size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                s *= inv_sqrt;
                prow[j] = s;
                mx = std::max(mx, s);
            }
            Real z = Real(0);
            for (size_t j = 0; j <= i; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                z += prow[j];
            }
            const Real inv = Real(1) / z;
            Real* orow = out.data() + i * d + off;
            for (size_t j = 0; j <= i; ++j) {
                prow[j] *= inv;
                const Real* vj = v.data() + j * d + off;
                for (size_t c = 0; c < hd; ++c) orow[c] += prow[j] * vj[c];
            }
        }
    }
    auto pq = q.node(), pk = k.node(), pv = v.node();
    return detail::make_result<Real>(
        q.shape(), std::move(out), {pq, pk, pv},
        [pq, pk, pv, probs, t, d, hd, heads, inv_sqrt](TensorNode<Real>* self) {
            if (pq->requires_grad) pq->ensure_grad();
            if (pk->requires_grad) pk->ensure_grad();
            if (pv->requires_grad) pv->ensure_grad();
            std::vector<Real> dprow(t), dsrow(t);
            for (size_t h = 0; h < heads; ++h) {
                const size_t off = h * hd;
                const Real* ph = probs->data() + h * t * t;
                for (size_t i = 0; i < t; ++i) {
                    const Real* dout = self->grad.data() + i * d + off;
                    const Real* prow = ph + i * t;
                    // dP[i,j] = dout . v_j ; dS = P o (dP - sum(dP o P))
                    Real dot = Real(0);
                    for (size_t j = 0; j <= i; ++j) {
                        const Real* vj = pv->value.data() + j * d + off;
                        Real acc = Real(0);
                        for (size_t c = 0; c < hd; ++c) acc += dout[c] * vj[c];
                        dprow[j] = acc;
                        dot += acc * prow[j];
                    }
                    for (size_t j = 0; j <= i; ++j) dsrow[j] = prow[j] * (dprow[j] - dot);
                    if (pv->requires_grad) {
                        for (size_t j = 0; j <= i; ++j) {
                            Real* dvj = pv->grad.data() + j * d + off;
                            for (size_t c = 0; c < hd; ++c) dvj[c] += prow[j] * dout[c];
                        }
                    }
                    if (pq->requires_grad) {
                        Real* dqi = pq->grad.data() + i * d + off;
                        for (size_t j = 0; j <= i; ++j) {
                            const Real* kj = pk->value.data() + j * d + off;
                            const Real w = dsrow[j] * inv_sqrt;
                            for (size_t c = 0; c < hd; ++c) dqi[c] += w * kj[c];
                        }
                    }
                    if (pk->requires_grad) {
                        const Real* qi = pq->value.data() + i * d + off;
                        for (size_t j = 0; j <= i; ++j) {
                            Real* dkj = pk->grad.data() + j * d + off;
                            const Real w = dsrow[j] * inv_sqrt;
                            for (size_t c = 0; c < hd; ++c) dkj[c] += w * qi[c];
                        }
                    }
                }
            }
        });
}

// Contiguous row slice [row_begin, row_end) of a 2-D tensor.
template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& a, size_t row_begin, size_t row_end) {
    if (a.shape().size() != 2) throw DimensionError("slice_rows: expects a 2-D tensor");
    const size_t t = a.shape()[0], d = a.shape()[1];
    if (row_begin >= row_end || row_end > t) {
        throw DimensionError("slice_rows: invalid range [" + std::to_string(row_begin) + "," +
                             std::to_string(row_end) + ") for " + shape_to_string(a.shape()));
    }
    const size_t rows = row_end - row_begin;
    std::vector<Real> out(a.data() + row_begin * d, a.data() + row_end * d);
    auto pa = a.node();
    return detail::make_result<Real>({rows, d}, std::move(out), {pa},
                                     [pa, row_begin, rows, d](TensorNode<Real>* self) {
                                         if (!pa->requires_grad) return;
                                         pa->ensure_grad();
                                         Real* dst = pa->grad.data() + row_begin * d;
                                         for (size_t i = 0; i < rows * d; ++i) {
                                             dst[i] += self->grad[i];
                                         }
                                     });
}

// Embedding lookup: rows of table gathered by token id.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw DimensionError("gather_rows: table must be 2-D");
    const size_t v = table.shape()[0], d = table.shape()[1];
    std::vector<Real> out(ids.size() * d);
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<size_t>(id) >= v) {
            throw DimensionError("gather_rows: id " + std::to_string(id) + " out of range for vocab " +
                                 std::to_string(v));
        }
        std::memcpy(out.data() + i * d, table.data() + static_cast<size_t>(id) * d, d * sizeof(Real));
    }
    auto pt = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return detail::make_result<Real>({ids.size(), d}, std::move(out), {pt},
                                     [pt, ids_copy, d](TensorNode<Real>* self) {
                                         if (!pt->requires_grad) return;
                                         pt->ensure_grad();
                                         for (size_t i = 0; i < ids_copy->size(); ++i) {
                                             Real* dst = pt->grad.data() +
                                                         static_cast<size_t>((*ids_copy)[i]) * d;
                                             const Real* src = self->grad.data() + i * d;
                                             for (size_t j = 0; j < d; ++j) dst[j] += src[j];
                                         }
                                     });
}

// Mean negative log-likelihood of targets over masked rows. Row tau of logits
// scores the token stored in targets[tau]; mask selects the rows that carry
// loss (target-sequence positions only).
template <class Real>
Tensor<Real> masked_next_token_nll(const Tensor<Real>& logits, const std::vector<int>& targets,
                                   const std::vector<char>& mask) {
    if (logits.shape().size() != 2) throw DimensionError("masked_next_token_nll: logits must be 2-D");
    const size_t t = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != t || mask.size() != t) {
        throw DimensionError("masked_next_token_nll: targets/mask length must equal row count " +
                             std::to_string(t));
    }
    size_t n_masked = 0;
    for (char m : mask) n_masked += (m != 0);
    if (n_masked == 0) throw ValidationError("masked_next_token_nll: empty loss support");

    Real loss = Real(0);
    for (size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        const int tgt = targets[i];
        if (tgt < 0 || static_cast<size_t>(tgt) >= v) {
            throw DimensionError("masked_next_token_nll: target id out of range");
        }
        const Real* row = logits.data() + i * v;
        Real mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        Real z = Real(0);
        for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        loss += (mx + std::log(z)) - row[static_cast<size_t>(tgt)];
    }
    loss /= static_cast<Real>(n_masked);

    auto pl = logits.node();
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    auto mask_copy = std::make_shared<std::vector<char>>(mask);
    return detail::make_result<Real>(
        {1}, {loss}, {pl}, [pl, targets_copy, mask_copy, t, v, n_masked](TensorNode<Real>* self) {
            if (!pl->requires_grad) return;
            pl->ensure_grad();
            const Real gscale = self->grad[0] / static_cast<Real>(n_masked);
            for (size_t i = 0; i < t; ++i) {
                if (!(*mask_copy)[i]) continue;
                const Real* row = pl->value.data() + i * v;
                Real* drow = pl->grad.data() + i * v;
                Real mx = row[0];
                for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                Real z = Real(0);
                for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                const Real inv = Real(1) / z;
                for (size_t j = 0; j < v; ++j) drow[j] += gscale * std::exp(row[j] - mx) * inv;
                drow[static_cast<size_t>((*targets_copy)[i])] -= gscale;
            }
        });
}

// ---------------------------------------------------------------------------
// backward

// The tape: every node reachable from the root, in topological order (parents
// before children). Replaying it in reverse visits each node exactly once.
template <class Real>
struct GradientTape {
    std::vector<TensorNode<Real>*> order;

    static GradientTape record_from(const Tensor<Real>& root) {
        GradientTape tape;
        std::unordered_set<TensorNode<Real>*> seen;
        // iterative post-order DFS
        std::vector<std::pair<TensorNode<Real>*, size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                TensorNode<Real>* next = node->parents[idx].get();
                ++idx;
                if (next->requires_grad && !seen.count(next)) {
                    seen.insert(next);
                    stack.emplace_back(next, 0);
                }
            } else {
                tape.order.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }
};

template <class Real>
void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1) throw DimensionError("backward: loss must be a scalar");
    if (!loss.requires_grad()) {
        throw ValidationError("backward: loss does not depend on any grad-tracked tensor");
    }
    auto tape = GradientTape<Real>::record_from(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] = Real(1);
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        TensorNode<Real>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// Adam

template <class Real>
struct AdamState {
    Real lr = Real(2e-4);
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real eps = Real(1e-8);
    long step = 0;
    std::vector<std::vector<Real>> m, v;

    void init(const std::vector<Tensor<Real>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.size(), Real(0));
            v.emplace_back(p.size(), Real(0));
        }
        step = 0;
    }
};

// Standard bias-corrected Adam update; reads and clears each parameter's
// accumulated gradient.
template <class Real>
void adam_step(std::vector<Tensor<Real>>& params, AdamState<Real>& st) {
    if (st.m.size() != params.size()) {
        throw DimensionError("adam_step: state tracks " + std::to_string(st.m.size()) +
                             " parameters, got " + std::to_string(params.size()));
    }
    st.step += 1;
    const Real bc1 = Real(1) - std::pow(st.beta1, static_cast<Real>(st.step));
    const Real bc2 = Real(1) - std::pow(st.beta2, static_cast<Real>(st.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        if (st.m[pi].size() != p.size()) {
            throw DimensionError("adam_step: moment/parameter shape mismatch at index " +
                                 std::to_string(pi));
        }
        auto node = p.node();
        node->ensure_grad();
        Real* w = node->value.data();
        Real* g = node->grad.data();
        Real* m = st.m[pi].data();
        Real* v = st.v[pi].data();
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = st.beta1 * m[i] + (Real(1) - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (Real(1) - st.beta2) * g[i] * g[i];
            const Real mhat = m[i] / bc1;
            const Real vhat = v[i] / bc2;
            w[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
            g[i] = Real(0);
        }
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace rdk
