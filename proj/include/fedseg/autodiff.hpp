#pragma once

// Reverse-mode autodiff on a recorded tape. Templated on the scalar type:
// float is the training precision, double drives the finite-difference
// gradient checks. Ops validate shapes eagerly and throw DimensionError /
// DomainError before touching data.
//
// Gradients flow only where they are needed: each node knows whether any
// requires-grad leaf feeds it, and backward closures skip inputs that do
// not. Freezing a weight therefore removes its d-weight matmul entirely,
// which is where the adapter-mode compute saving comes from.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace fedseg {

namespace detail {

// C(m,n) += A(m,k) * B(k,n). ikj order so the inner loop streams rows of B
// and C; gcc vectorizes it at -O3.
template <typename T>
inline void mm_acc(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = A + static_cast<size_t>(i) * k;
        T* crow = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T a = arow[p];
            if (a == T(0)) continue;
            const T* brow = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C(m,k) += G(m,n) * B(k,n)^T  (d-activation of a matmul).
template <typename T>
inline void mm_abt_acc(const T* G, const T* B, T* C, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* grow = G + static_cast<size_t>(i) * n;
        T* crow = C + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T* brow = B + static_cast<size_t>(p) * n;
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C(k,n) += A(m,k)^T * G(m,n)  (d-weight of a matmul).
template <typename T>
inline void mm_atb_acc(const T* A, const T* G, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = A + static_cast<size_t>(i) * k;
        const T* grow = G + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T a = arow[p];
            if (a == T(0)) continue;
            T* crow = C + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += a * grow[j];
        }
    }
}

} // namespace detail

template <typename T>
class GradTape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    // ---- leaves and introspection -------------------------------------

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.needs = requires_grad;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(Var v) const { return node(v).value; }
    bool needs_grad(Var v) const { return node(v).needs; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise / structural ops ----------------------------------

    Var add(Var a, Var b) {
        const Tensor<T>& x = node(a).value;
        const Tensor<T>& y = node(b).value;
        if (!x.same_shape(y))
            throw DimensionError("add: shape mismatch " + shape_str(x.shape) + " vs " +
                                 shape_str(y.shape));
        Tensor<T> out = x;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += y[i];
        return record(std::move(out), "add", {a, b}, [this, a, b](int oid) {
            const Tensor<T>& g = grads_[oid];
            if (wants(a)) axpy(a, g);
            if (wants(b)) axpy(b, g);
        });
    }

    // x:[R,d] + bias:[d], broadcast over rows.
    Var add_bias(Var a, Var bias) {
        const Tensor<T>& x = node(a).value;
        const Tensor<T>& b = node(bias).value;
        if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
            throw DimensionError("add_bias: need [R,d] + [d], got " + shape_str(x.shape) +
                                 " + " + shape_str(b.shape));
        Tensor<T> out = x;
        int R = x.shape[0], d = x.shape[1];
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < d; ++j) out.at(i, j) += b[j];
        return record(std::move(out), "add_bias", {a, bias}, [this, a, bias, R, d](int oid) {
            const Tensor<T>& g = grads_[oid];
            if (wants(a)) axpy(a, g);
            if (wants(bias)) {
                Tensor<T>& gb = grad_buf(bias);
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < d; ++j) gb[j] += g.at(i, j);
            }
        });
    }

    Var mul(Var a, Var b) {
        const Tensor<T>& x = node(a).value;
        const Tensor<T>& y = node(b).value;
        if (!x.same_shape(y))
            throw DimensionError("mul: shape mismatch " + shape_str(x.shape) + " vs " +
                                 shape_str(y.shape));
        Tensor<T> out = x;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
        return record(std::move(out), "mul", {a, b}, [this, a, b](int oid) {
            const Tensor<T>& g = grads_[oid];
            if (wants(a)) {
                const Tensor<T>& y = nodes_[b.id].value;
                Tensor<T>& ga = grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
            }
            if (wants(b)) {
                const Tensor<T>& x = nodes_[a.id].value;
                Tensor<T>& gb = grad_buf(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x[i];
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = node(a).value;
        for (auto& v : out.data) v *= s;
        return record(std::move(out), "scale", {a}, [this, a, s](int oid) {
            if (!wants(a)) return;
            const Tensor<T>& g = grads_[oid];
            Tensor<T>& ga = grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
        });
    }

    Var reshape(Var a, std::vector<int> shape) {
        const Tensor<T>& x = node(a).value;
        if (shape_numel(shape) != x.numel())
            throw DimensionError("reshape: cannot view " + shape_str(x.shape) + " as " +
                                 shape_str(shape));
        Tensor<T> out;
        out.shape = std::move(shape);
        out.data = x.data;
        return record(std::move(out), "reshape", {a}, [this, a](int oid) {
            if (wants(a)) axpy(a, grads_[oid]);
        });
    }

    Var sum(Var a) {
        const Tensor<T>& x = node(a).value;
        T s = T(0);
        for (T v : x.data) s += v;
        return record(Tensor<T>::scalar(s), "sum", {a}, [this, a](int oid) {
            if (!wants(a)) return;
            T g = grads_[oid][0];
            Tensor<T>& ga = grad_buf(a);
            for (auto& v : ga.data) v += g;
        });
    }

    Var relu(Var a) {
        Tensor<T> out = node(a).value;
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return record(std::move(out), "relu", {a}, [this, a](int oid) {
            if (!wants(a)) return;
            const Tensor<T>& g = grads_[oid];
            const Tensor<T>& x = nodes_[a.id].value;
            Tensor<T>& ga = grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (x[i] > T(0)) ga[i] += g[i];
        });
    }

    // Exact (erf-based) GELU.
    Var gelu(Var a) {
        const Tensor<T>& x = node(a).value;
        Tensor<T> out = x;
        for (auto& v : out.data) v = gelu_fwd(v);
        return record(std::move(out), "gelu", {a}, [this, a](int oid) {
            if (!wants(a)) return;
            const Tensor<T>& g = grads_[oid];
            const Tensor<T>& x = nodes_[a.id].value;
            Tensor<T>& ga = grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
        });
    }

    // ---- linear algebra -------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor<T>& A = node(a).value;
        const Tensor<T>& B = node(b).value;
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw DimensionError("matmul: incompatible " + shape_str(A.shape) + " x " +
                                 shape_str(B.shape));
        int m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor<T> out({m, n});
        detail::mm_acc(A.data.data(), B.data.data(), out.data.data(), m, k, n);
        return record(std::move(out), "matmul", {a, b}, [this, a, b, m, k, n](int oid) {
            const Tensor<T>& g = grads_[oid];
            if (wants(a)) {
                detail::mm_abt_acc(g.data.data(), nodes_[b.id].value.data.data(),
                                   grad_buf(a).data.data(), m, n, k);
            }
            if (wants(b)) {
                detail::mm_atb_acc(nodes_[a.id].value.data.data(), g.data.data(),
                                   grad_buf(b).data.data(), m, k, n);
            }
        });
    }

    // Layer norm over the trailing dimension with learned affine.
    Var layer_norm(Var a, Var gamma, Var beta, T eps = T(1e-5)) {
        const Tensor<T>& x = node(a).value;
        const Tensor<T>& gm = node(gamma).value;
        const Tensor<T>& bt = node(beta).value;
        if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
        int d = x.shape.back();
        if (gm.rank() != 1 || bt.rank() != 1 || gm.shape[0] != d || bt.shape[0] != d)
            throw DimensionError("layer_norm: affine params must be [d] with d=" +
                                 std::to_string(d));
        int64_t rows = x.numel() / d;
        Tensor<T> out = x;
        Tensor<T> xhat = x;                  // saved for backward
        Tensor<T> istd({static_cast<int>(rows)});
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = x.data.data() + r * d;
            T* or_ = out.data.data() + r * d;
            T* hr = xhat.data.data() + r * d;
            T mean = T(0);
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<T>(d);
            T var = T(0);
            for (int j = 0; j < d; ++j) {
                T c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            T is = T(1) / std::sqrt(var + eps);
            istd[r] = is;
            for (int j = 0; j < d; ++j) {
                T h = (xr[j] - mean) * is;
                hr[j] = h;
                or_[j] = gm[j] * h + bt[j];
            }
        }
        return record(std::move(out), "layer_norm", {a, gamma, beta},
                      [this, a, gamma, beta, d, rows, xhat = std::move(xhat),
                       istd = std::move(istd)](int oid) {
            const Tensor<T>& g = grads_[oid];
            const Tensor<T>& gm = nodes_[gamma.id].value;
            if (wants(gamma)) {
                Tensor<T>& gg = grad_buf(gamma);
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (wants(beta)) {
                Tensor<T>& gb = grad_buf(beta);
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
            if (wants(a)) {
                Tensor<T>& ga = grad_buf(a);
                for (int64_t r = 0; r < rows; ++r) {
                    T sum_dh = T(0), sum_dh_h = T(0);
                    for (int j = 0; j < d; ++j) {
                        T dh = g[r * d + j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * d + j];
                    }
                    T inv_d = T(1) / static_cast<T>(d);
                    for (int j = 0; j < d; ++j) {
                        T dh = g[r * d + j] * gm[j];
                        ga[r * d + j] += istd[r] * (dh - inv_d * sum_dh -
                                                    xhat[r * d + j] * inv_d * sum_dh_h);
                    }
                }
            }
        });
    }

    // Multi-head scaled dot-product self-attention over already-projected
    // q,k,v of shape [N,D]. Softmax uses the max-subtraction trick; the
    // attention matrices are saved for backward.
    Var softmax_attention(Var q, Var k, Var v, int heads) {
        const Tensor<T>& Q = node(q).value;
        const Tensor<T>& K = node(k).value;
        const Tensor<T>& V = node(v).value;
        if (Q.rank() != 2 || !Q.same_shape(K) || !Q.same_shape(V))
            throw DimensionError("attention: q,k,v must share shape [N,D]");
        int N = Q.shape[0], D = Q.shape[1];
        if (heads <= 0 || D % heads != 0)
            throw DimensionError("attention: embedding dim " + std::to_string(D) +
                                 " not divisible by " + std::to_string(heads) + " heads");
        int dh = D / heads;
        T sc = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T> out({N, D});
        Tensor<T> attn({heads, N, N});
        for (int h = 0; h < heads; ++h) {
            int off = h * dh;
            for (int i = 0; i < N; ++i) {
                T* arow = &attn.at(h, i, 0);
                const T* qi = &Q.at(i, off);
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < N; ++j) {
                    const T* kj = &K.at(j, off);
                    T s = T(0);
                    for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= sc;
                    arow[j] = s;
                    if (s > mx) mx = s;
                }
                T z = T(0);
                for (int j = 0; j < N; ++j) {
                    T e = std::exp(arow[j] - mx);
                    arow[j] = e;
                    z += e;
                }
                T iz = T(1) / z;
                T* orow = &out.at(i, off);
                for (int j = 0; j < N; ++j) {
                    arow[j] *= iz;
                    const T* vj = &V.at(j, off);
                    T a = arow[j];
                    for (int c = 0; c < dh; ++c) orow[c] += a * vj[c];
                }
            }
        }
        return record(std::move(out), "attention", {q, k, v},
                      [this, q, k, v, heads, N, dh, sc, attn = std::move(attn)](int oid) {
            const Tensor<T>& g = grads_[oid];
            const Tensor<T>& Q = nodes_[q.id].value;
            const Tensor<T>& K = nodes_[k.id].value;
            const Tensor<T>& V = nodes_[v.id].value;
            bool wq = wants(q), wk = wants(k), wv = wants(v);
            Tensor<T>* gq = wq ? &grad_buf(q) : nullptr;
            Tensor<T>* gk = wk ? &grad_buf(k) : nullptr;
            Tensor<T>* gv = wv ? &grad_buf(v) : nullptr;
            std::vector<T> ga(static_cast<size_t>(N)), ds(static_cast<size_t>(N));
            for (int h = 0; h < heads; ++h) {
                int off = h * dh;
                for (int i = 0; i < N; ++i) {
                    const T* arow = &attn.at(h, i, 0);
                    const T* grow = &g.at(i, off);
                    // dA[i][j] = sum_c g[i,c] * V[j,c]; also push dV.
                    T dot = T(0);
                    for (int j = 0; j < N; ++j) {
                        const T* vj = &V.at(j, off);
                        T s = T(0);
                        for (int c = 0; c < dh; ++c) s += grow[c] * vj[c];
                        ga[j] = s;
                        dot += s * arow[j];
                    }
                    if (wv) {
                        for (int j = 0; j < N; ++j) {
                            T a = arow[j];
                            T* gvj = &gv->at(j, off);
                            for (int c = 0; c < dh; ++c) gvj[c] += a * grow[c];
                        }
                    }
                    if (!wq && !wk) continue;
                    for (int j = 0; j < N; ++j) ds[j] = arow[j] * (ga[j] - dot) * sc;
                    if (wq) {
                        T* gqi = &gq->at(i, off);
                        for (int j = 0; j < N; ++j) {
                            T d_ = ds[j];
                            const T* kj = &K.at(j, off);
                            for (int c = 0; c < dh; ++c) gqi[c] += d_ * kj[c];
                        }
                    }
                    if (wk) {
                        const T* qi = &Q.at(i, off);
                        for (int j = 0; j < N; ++j) {
                            T d_ = ds[j];
                            T* gkj = &gk->at(j, off);
                            for (int c = 0; c < dh; ++c) gkj[c] += d_ * qi[c];
                        }
                    }
                }
            }
        });
    }

    // 1x1 convolution: x [h,w,cin] * w [cin,cout] + b [cout].
    Var conv1x1(Var a, Var w, Var bias) {
        const Tensor<T>& x = node(a).value;
        const Tensor<T>& W = node(w).value;
        const Tensor<T>& b = node(bias).value;
        if (x.rank() != 3 || W.rank() != 2 || b.rank() != 1 || x.shape[2] != W.shape[0] ||
            W.shape[1] != b.shape[0])
            throw DimensionError("conv1x1: need [h,w,cin] * [cin,cout] + [cout], got " +
                                 shape_str(x.shape) + " * " + shape_str(W.shape) + " + " +
                                 shape_str(b.shape));
        int R = x.shape[0] * x.shape[1], cin = x.shape[2], cout = W.shape[1];
        Tensor<T> out({x.shape[0], x.shape[1], cout});
        for (int r = 0; r < R; ++r)
            for (int j = 0; j < cout; ++j) out.data[static_cast<size_t>(r) * cout + j] = b[j];
        detail::mm_acc(x.data.data(), W.data.data(), out.data.data(), R, cin, cout);
        return record(std::move(out), "conv1x1", {a, w, bias},
                      [this, a, w, bias, R, cin, cout](int oid) {
            const Tensor<T>& g = grads_[oid];
            if (wants(a))
                detail::mm_abt_acc(g.data.data(), nodes_[w.id].value.data.data(),
                                   grad_buf(a).data.data(), R, cout, cin);
            if (wants(w))
                detail::mm_atb_acc(nodes_[a.id].value.data.data(), g.data.data(),
                                   grad_buf(w).data.data(), R, cin, cout);
            if (wants(bias)) {
                Tensor<T>& gb = grad_buf(bias);
                for (int r = 0; r < R; ++r)
                    for (int j = 0; j < cout; ++j) gb[j] += g.data[static_cast<size_t>(r) * cout + j];
            }
        });
    }

    // [H,W,C] -> [N, p*p*C] non-overlapping patches in row-major token
    // order; within a token the layout is (pi, pj, c).
    Var patchify(Var a, int p) {
        const Tensor<T>& x = node(a).value;
        if (x.rank() != 3) throw DimensionError("patchify: need [H,W,C]");
        int H = x.shape[0], W = x.shape[1], C = x.shape[2];
        if (p <= 0 || H % p != 0 || W % p != 0)
            throw DimensionError("patchify: patch " + std::to_string(p) +
                                 " does not tile " + shape_str(x.shape));
        int gh = H / p, gw = W / p;
        Tensor<T> out({gh * gw, p * p * C});
        for (int ti = 0; ti < gh; ++ti)
            for (int tj = 0; tj < gw; ++tj) {
                T* dst = &out.at(ti * gw + tj, 0);
                for (int pi = 0; pi < p; ++pi)
                    for (int pj = 0; pj < p; ++pj) {
                        const T* src = &x.at(ti * p + pi, tj * p + pj, 0);
                        for (int c = 0; c < C; ++c) dst[(pi * p + pj) * C + c] = src[c];
                    }
            }
        return record(std::move(out), "patchify", {a}, [this, a, p, gh, gw, C](int oid) {
            if (!wants(a)) return;
            const Tensor<T>& g = grads_[oid];
            Tensor<T>& ga = grad_buf(a);
            for (int ti = 0; ti < gh; ++ti)
                for (int tj = 0; tj < gw; ++tj) {
                    const T* src = &g.at(ti * gw + tj, 0);
                    for (int pi = 0; pi < p; ++pi)
                        for (int pj = 0; pj < p; ++pj) {
                            T* dst = &ga.at(ti * p + pi, tj * p + pj, 0);
                            for (int c = 0; c < C; ++c) dst[c] += src[(pi * p + pj) * C + c];
                        }
                }
        });
    }

    // [h,w,4c] -> [2h,2w,c]: channel group (di*2+dj) fills sub-pixel (di,dj).
    Var pixel_shuffle2(Var a) {
        const Tensor<T>& x = node(a).value;
        if (x.rank() != 3 || x.shape[2] % 4 != 0)
            throw DimensionError("pixel_shuffle2: need [h,w,4c], got " + shape_str(x.shape));
        int h = x.shape[0], w = x.shape[1], c = x.shape[2] / 4;
        Tensor<T> out({2 * h, 2 * w, c});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj) {
                        const T* src = &x.at(i, j, (di * 2 + dj) * c);
                        T* dst = &out.at(2 * i + di, 2 * j + dj, 0);
                        for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                    }
        return record(std::move(out), "pixel_shuffle2", {a}, [this, a, h, w, c](int oid) {
            if (!wants(a)) return;
            const Tensor<T>& g = grads_[oid];
            Tensor<T>& ga = grad_buf(a);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj) {
                            const T* src = &g.at(2 * i + di, 2 * j + dj, 0);
                            T* dst = &ga.at(i, j, (di * 2 + dj) * c);
                            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                        }
        });
    }

    // Mean binary cross-entropy on logits, numerically stable form:
    //   max(z,0) - z*t + log(1 + exp(-|z|)).
    Var bce_with_logits(Var logits, Var targets) {
        const Tensor<T>& z = node(logits).value;
        const Tensor<T>& t = node(targets).value;
        if (!z.same_shape(t))
            throw DimensionError("bce_with_logits: logits " + shape_str(z.shape) +
                                 " vs targets " + shape_str(t.shape));
        for (T v : t.data)
            if (!(v >= T(0) && v <= T(1)))
                throw DomainError("bce_with_logits: target outside [0,1]");
        int64_t n = z.numel();
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) {
            T zi = z[i];
            acc += std::max(zi, T(0)) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
        }
        T inv_n = T(1) / static_cast<T>(n);
        return record(Tensor<T>::scalar(acc * inv_n), "bce_with_logits", {logits, targets},
                      [this, logits, targets, n, inv_n](int oid) {
            T g = grads_[oid][0];
            const Tensor<T>& z = nodes_[logits.id].value;
            const Tensor<T>& t = nodes_[targets.id].value;
            if (wants(logits)) {
                Tensor<T>& gz = grad_buf(logits);
                for (int64_t i = 0; i < n; ++i) {
                    T sig = T(1) / (T(1) + std::exp(-z[i]));
                    gz[i] += g * inv_n * (sig - t[i]);
                }
            }
            if (wants(targets)) {
                Tensor<T>& gt = grad_buf(targets);
                for (int64_t i = 0; i < n; ++i) gt[i] += g * inv_n * (-z[i]);
            }
        });
    }

    // ---- backward -------------------------------------------------------

    // Runs reverse accumulation from a scalar loss. Afterwards grad(v)
    // returns the accumulated gradient for any reachable requires-grad node.
    void backward(Var loss) {
        const Node& ln = node(loss);
        if (ln.value.numel() != 1)
            throw DimensionError("backward: loss must be scalar, got " +
                                 shape_str(ln.value.shape));
        grads_.assign(static_cast<size_t>(loss.id) + 1, Tensor<T>{});
        has_grad_.assign(static_cast<size_t>(loss.id) + 1, 0);
        grads_[loss.id] = Tensor<T>::scalar(T(1));
        has_grad_[loss.id] = 1;
        for (int i = loss.id; i >= 0; --i) {
            if (has_grad_[i] && nodes_[i].back) nodes_[i].back(i);
        }
    }

    // Gradient of the last backward() pass; nullptr when none reached v.
    const Tensor<T>* grad(Var v) const {
        check(v);
        if (static_cast<size_t>(v.id) >= has_grad_.size() || !has_grad_[v.id]) return nullptr;
        return &grads_[v.id];
    }

private:
    struct Node {
        Tensor<T> value;
        bool needs = false;
        bool is_leaf = false;
        std::function<void(int)> back; // argument: own node id
    };

    std::deque<Node> nodes_; // deque: value() references stay valid as ops are recorded
    std::vector<Tensor<T>> grads_;
    std::vector<uint8_t> has_grad_;

    void check(Var v) const {
        if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
            throw StateError("autodiff var does not belong to this tape");
    }

    const Node& node(Var v) const {
        check(v);
        return nodes_[v.id];
    }

    bool wants(Var v) const { return nodes_[v.id].needs; }

    Tensor<T>& grad_buf(Var v) {
        if (!has_grad_[v.id]) {
            grads_[v.id] = Tensor<T>(nodes_[v.id].value.shape);
            has_grad_[v.id] = 1;
        }
        return grads_[v.id];
    }

    void axpy(Var v, const Tensor<T>& g) {
        Tensor<T>& dst = grad_buf(v);
        for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    template <typename F>
    Var record(Tensor<T> out, const char* opname, std::initializer_list<Var> inputs, F&& back) {
        check_finite(out, opname);
        bool needs = false;
        for (Var in : inputs) needs = needs || nodes_[in.id].needs;
        Node n;
        n.value = std::move(out);
        n.needs = needs;
        if (needs) n.back = std::forward<F>(back); // unreachable nodes never run backward
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    static T gelu_fwd(T x) {
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }

    static T gelu_grad(T x) {
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
    }
};

} // namespace fedseg
