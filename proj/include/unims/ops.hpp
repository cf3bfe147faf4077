#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "unims/tensor.hpp"

namespace unims {

// ---------------------------------------------------------------------------
// Raw matmul kernels on flat row-major buffers. C is accumulated into.
// ---------------------------------------------------------------------------

inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.rank() > 2) throw ShapeError(std::string(op) + ": rank > 2 unsupported, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            const size_t n = on->grad.size();
            if (an->requires_grad)
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// Broadcast a length-n vector over the rows of an [m x n] matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.numel() != a.cols()) {
        throw ShapeError("add_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const int m = a.rows(), n = a.cols();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[i * n + j] = a.data()[i * n + j] + b.data()[j];
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, m, n] {
            if (an->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            if (bn->requires_grad)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) bn->grad[j] += on->grad[static_cast<size_t>(i) * n + j];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, s] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += s * on->grad[i];
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            const size_t n = on->grad.size();
            if (an->requires_grad)
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
        });
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    mm_nn(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, m, k, n] {
            // dA = dC * B^T, dB = A^T * dC
            if (an->requires_grad) mm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            if (bn->requires_grad) mm_tn(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, m, n] {
            if (!an->requires_grad) return;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    an->grad[static_cast<size_t>(i) * n + j] += on->grad[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    Tensor out = Tensor::from(std::move(shape), a.values());
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.rank() != 2 || r0 < 0 || r1 > a.rows() || r0 > r1) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") on " + shape_str(a.shape()));
    }
    const int n = a.cols(), m = r1 - r0;
    if (m == 0) throw ShapeError("slice_rows: empty range");
    Tensor out = Tensor::zeros({m, n});
    std::copy(a.data() + static_cast<size_t>(r0) * n, a.data() + static_cast<size_t>(r1) * n, out.data());
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, r0, n, m] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i)
                an->grad[static_cast<size_t>(r0) * n + i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.rank() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") on " + shape_str(a.shape()));
    }
    const int m = a.rows(), n = a.cols(), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (int i = 0; i < m; ++i)
        std::copy(a.data() + static_cast<size_t>(i) * n + c0, a.data() + static_cast<size_t>(i) * n + c1,
                  out.data() + static_cast<size_t>(i) * w);
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, m, n, c0, w] {
            if (!an->requires_grad) return;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    an->grad[static_cast<size_t>(i) * n + c0 + j] += on->grad[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int n = parts[0].cols();
    int m = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != n) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        }
        m += p.rows();
    }
    Tensor out = Tensor::zeros({m, n});
    int r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + static_cast<size_t>(r) * n);
        r += p.rows();
    }
    bool trace = false;
    for (const Tensor& p : parts) {
        if (Tape::active() && p.requires_grad()) trace = true;
    }
    if (trace) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode>> nodes;
        nodes.reserve(parts.size());
        for (const Tensor& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        Tape::active()->record([nodes, on, n] {
            size_t off = 0;
            for (const auto& pn : nodes) {
                const size_t cnt = pn->value.size();
                if (pn->requires_grad)
                    for (size_t i = 0; i < cnt; ++i) pn->grad[i] += on->grad[off + i];
                off += cnt;
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int m = parts[0].rows();
    int n = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != m) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        }
        n += p.cols();
    }
    Tensor out = Tensor::zeros({m, n});
    int c = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i)
            std::copy(p.data() + static_cast<size_t>(i) * w, p.data() + static_cast<size_t>(i + 1) * w,
                      out.data() + static_cast<size_t>(i) * n + c);
        c += w;
    }
    bool trace = false;
    for (const Tensor& p : parts) {
        if (Tape::active() && p.requires_grad()) trace = true;
    }
    if (trace) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode>> nodes;
        std::vector<int> widths;
        for (const Tensor& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.cols());
        }
        auto on = out.node();
        Tape::active()->record([nodes, widths, on, m, n] {
            int c = 0;
            for (size_t k = 0; k < nodes.size(); ++k) {
                const int w = widths[k];
                if (nodes[k]->requires_grad) {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            nodes[k]->grad[static_cast<size_t>(i) * w + j] +=
                                on->grad[static_cast<size_t>(i) * n + c + j];
                }
                c += w;
            }
        });
    }
    return out;
}

// Row gather with scatter-add backward; doubles as the embedding lookup.
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: need rank 2, got " + shape_str(a.shape()));
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    const int n = a.cols();
    for (int i : idx) {
        if (i < 0 || i >= a.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                             shape_str(a.shape()));
        }
    }
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), n});
    for (size_t k = 0; k < idx.size(); ++k)
        std::copy(a.data() + static_cast<size_t>(idx[k]) * n, a.data() + static_cast<size_t>(idx[k] + 1) * n,
                  out.data() + k * n);
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, idx, n] {
            if (!an->requires_grad) return;
            for (size_t k = 0; k < idx.size(); ++k)
                for (int j = 0; j < n; ++j)
                    an->grad[static_cast<size_t>(idx[k]) * n + j] += on->grad[k * n + j];
        });
    }
    return out;
}

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& a) {
    constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kBeta = 0.044715;
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) {
        double x = a.data()[i];
        double t = std::tanh(kAlpha * (x + kBeta * x * x * x));
        out.data()[i] = 0.5 * x * (1.0 + t);
    }
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < on->grad.size(); ++i) {
                double x = an->value[i];
                double u = kAlpha * (x + kBeta * x * x * x);
                double t = std::tanh(u);
                double du = kAlpha * (1.0 + 3.0 * kBeta * x * x);
                double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                an->grad[i] += d * on->grad[i];
            }
        });
    }
    return out;
}

// Softmax along `axis` of a rank-1 or rank-2 tensor, max-subtracted.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    detail::require_2d(a, "softmax");
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) throw ShapeError("softmax: bad axis");
    for (int i = 0; i < a.numel(); ++i) {
        if (!std::isfinite(a.data()[i])) throw NumericError("softmax: non-finite input");
    }
    if (a.rank() == 2 && axis == 0) return transpose(softmax(transpose(a), 1));

    const int rows = a.rank() == 2 ? a.rows() : 1;
    const int n = a.cols();
    Tensor out = Tensor::zeros(a.shape());
    for (int r = 0; r < rows; ++r) {
        const double* x = a.data() + static_cast<size_t>(r) * n;
        double* y = out.data() + static_cast<size_t>(r) * n;
        double mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        for (int j = 0; j < n; ++j) y[j] /= denom;
    }
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, rows, n] {
            if (!an->requires_grad) return;
            for (int r = 0; r < rows; ++r) {
                const double* y = on->value.data() + static_cast<size_t>(r) * n;
                const double* dy = on->grad.data() + static_cast<size_t>(r) * n;
                double* dx = an->grad.data() + static_cast<size_t>(r) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    detail::require_2d(a, "layer_norm");
    const int rows = a.rank() == 2 ? a.rows() : 1;
    const int d = a.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias length must be " + std::to_string(d));
    }
    Tensor out = Tensor::zeros(a.shape());
    std::vector<double> mu(rows), inv_sigma(rows);
    for (int r = 0; r < rows; ++r) {
        const double* x = a.data() + static_cast<size_t>(r) * d;
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += x[j];
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - m) * (x[j] - m);
        var /= d;
        mu[r] = m;
        inv_sigma[r] = 1.0 / std::sqrt(var + eps);
        double* y = out.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) y[j] = (x[j] - m) * inv_sigma[r] * gain.data()[j] + bias.data()[j];
    }
    if (detail::tracing({&a, &gain, &bias})) {
        out.set_requires_grad(true);
        auto an = a.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape::active()->record([an, gn, bn, on, rows, d, mu, inv_sigma] {
            for (int r = 0; r < rows; ++r) {
                const double* x = an->value.data() + static_cast<size_t>(r) * d;
                const double* dy = on->grad.data() + static_cast<size_t>(r) * d;
                const double is = inv_sigma[r], m = mu[r];
                if (gn->requires_grad || bn->requires_grad) {
                    for (int j = 0; j < d; ++j) {
                        if (gn->requires_grad) gn->grad[j] += dy[j] * (x[j] - m) * is;
                        if (bn->requires_grad) bn->grad[j] += dy[j];
                    }
                }
                if (an->requires_grad) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double dxh = dy[j] * gn->value[j];
                        double xh = (x[j] - m) * is;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    double* dx = an->grad.data() + static_cast<size_t>(r) * d;
                    for (int j = 0; j < d; ++j) {
                        double dxh = dy[j] * gn->value[j];
                        double xh = (x[j] - m) * is;
                        dx[j] += is * (dxh - sum_dxh / d - xh * sum_dxh_xh / d);
                    }
                }
            }
        });
    }
    return out;
}

// Inverted dropout; p == 0 is the identity (the default everywhere).
inline Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw InputError("dropout: p must be in [0,1)");
    if (p == 0.0) return a;
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<double> mask(static_cast<size_t>(a.numel()));
    const double inv = 1.0 / (1.0 - p);
    for (auto& m : mask) m = keep(rng) ? inv : 0.0;
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * mask[i];
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, mask] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += mask[i] * on->grad[i];
        });
    }
    return out;
}

inline Tensor elem_log(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < a.numel(); ++i) {
        if (a.data()[i] <= 0.0) throw NumericError("elem_log: non-positive input");
        out.data()[i] = std::log(a.data()[i]);
    }
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (!an->requires_grad) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] / an->value[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (int i = 0; i < a.numel(); ++i) acc += a.data()[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::tracing({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (!an->requires_grad) return;
            for (auto& g : an->grad) g += on->grad[0];
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    Tensor s = sum(a);
    return scale(s, 1.0 / a.numel());
}

// Mean negative log-likelihood over rows whose target is not `ignore_id`.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_id = -1) {
    if (logits.rank() != 2 || targets.size() != static_cast<size_t>(logits.rows())) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const int rows = logits.rows(), v = logits.cols();
    int counted = 0;
    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        int y = targets[r];
        if (y == ignore_id) continue;
        if (y < 0 || y >= v) throw InputError("cross_entropy: target id " + std::to_string(y) + " out of range");
        const double* z = logits.data() + static_cast<size_t>(r) * v;
        double mx = z[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, z[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(z[j] - mx);
        loss += std::log(denom) + mx - z[y];
        ++counted;
    }
    if (counted == 0) throw InputError("cross_entropy: no target position (all padding)");
    Tensor out = Tensor::scalar(loss / counted);
    if (detail::tracing({&logits})) {
        out.set_requires_grad(true);
        auto ln = logits.node(), on = out.node();
        Tape::active()->record([ln, on, targets, rows, v, counted, ignore_id] {
            if (!ln->requires_grad) return;
            const double g = on->grad[0] / counted;
            for (int r = 0; r < rows; ++r) {
                int y = targets[r];
                if (y == ignore_id) continue;
                const double* z = ln->value.data() + static_cast<size_t>(r) * v;
                double mx = z[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, z[j]);
                double denom = 0.0;
                for (int j = 0; j < v; ++j) denom += std::exp(z[j] - mx);
                double* dz = ln->grad.data() + static_cast<size_t>(r) * v;
                for (int j = 0; j < v; ++j) dz[j] += g * (std::exp(z[j] - mx) / denom - (j == y ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

// Mean sigmoid binary cross-entropy against {0,1} labels, stable form.
inline Tensor bce_with_logits(const Tensor& scores, const std::vector<double>& labels) {
    if (static_cast<size_t>(scores.numel()) != labels.size()) {
        throw ShapeError("bce_with_logits: " + std::to_string(scores.numel()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    }
    for (double y : labels) {
        if (y != 0.0 && y != 1.0) throw InputError("bce_with_logits: labels must be 0 or 1");
    }
    const int n = scores.numel();
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double s = scores.data()[i], y = labels[i];
        loss += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
    }
    Tensor out = Tensor::scalar(loss / n);
    if (detail::tracing({&scores})) {
        out.set_requires_grad(true);
        auto sn = scores.node(), on = out.node();
        Tape::active()->record([sn, on, labels, n] {
            if (!sn->requires_grad) return;
            const double g = on->grad[0] / n;
            for (int i = 0; i < n; ++i) {
                double s = sn->value[i];
                double sig = 1.0 / (1.0 + std::exp(-s));
                sn->grad[i] += g * (sig - labels[i]);
            }
        });
    }
    return out;
}

// KL(p || q) = sum p ln(p/q), both probability vectors. Values below 1e-12
// are clamped before the log; an exact zero in q against nonzero p is the
// caller's bug and raises.
inline constexpr double kKlClamp = 1e-12;

inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    if (p.numel() != q.numel()) {
        throw ShapeError("kl_divergence: length mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
    }
    const int n = p.numel();
    double ps = 0.0, qs = 0.0;
    for (int i = 0; i < n; ++i) {
        if (p.data()[i] < 0.0 || q.data()[i] < 0.0) throw InputError("kl_divergence: negative probability");
        ps += p.data()[i];
        qs += q.data()[i];
    }
    if (std::abs(ps - 1.0) > 1e-6 || std::abs(qs - 1.0) > 1e-6) {
        throw InputError("kl_divergence: inputs must sum to 1 within 1e-6");
    }
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double pi = p.data()[i], qi = q.data()[i];
        if (pi == 0.0) continue;
        if (qi == 0.0 && pi > kKlClamp) throw NumericError("kl_divergence: zero mass in q at nonzero p");
        loss += pi * (std::log(std::max(pi, kKlClamp)) - std::log(std::max(qi, kKlClamp)));
    }
    Tensor out = Tensor::scalar(loss);
    if (detail::tracing({&p, &q})) {
        out.set_requires_grad(true);
        auto pn = p.node(), qn = q.node(), on = out.node();
        Tape::active()->record([pn, qn, on, n] {
            const double g = on->grad[0];
            for (int i = 0; i < n; ++i) {
                double pi = std::max(pn->value[i], kKlClamp), qi = std::max(qn->value[i], kKlClamp);
                if (pn->requires_grad) pn->grad[i] += g * (std::log(pi) - std::log(qi) + 1.0);
                if (qn->requires_grad) qn->grad[i] += g * (-pn->value[i] / qi);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

inline double rel_error(double a, double b) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-5);
}

// Compares the reverse-mode gradient of a scalar-valued closure against
// central finite differences on the coordinates in `coords` (all when empty).
inline double grad_check(const std::function<Tensor()>& f, Tensor& x,
                         const std::vector<int>& coords = {}, double step = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor y = f();
        tape.backward(y);
    }
    std::vector<double> analytic = x.grads();
    std::vector<int> cs = coords;
    if (cs.empty()) {
        cs.resize(static_cast<size_t>(x.numel()));
        for (int i = 0; i < x.numel(); ++i) cs[static_cast<size_t>(i)] = i;
    }
    double max_rel = 0.0;
    for (int i : cs) {
        const double orig = x.data()[i];
        x.data()[i] = orig + step;
        double fp = f().item();
        x.data()[i] = orig - step;
        double fm = f().item();
        x.data()[i] = orig;
        double fd = (fp - fm) / (2.0 * step);
        max_rel = std::max(max_rel, rel_error(analytic[static_cast<size_t>(i)], fd));
    }
    return max_rel;
}

// Deterministic coordinate sample for large tensors.
inline std::vector<int> sample_coords(int numel, int max_coords, uint64_t seed) {
    std::vector<int> cs;
    if (numel <= max_coords) {
        cs.resize(static_cast<size_t>(numel));
        for (int i = 0; i < numel; ++i) cs[static_cast<size_t>(i)] = i;
        return cs;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, numel - 1);
    std::vector<char> taken(static_cast<size_t>(numel), 0);
    while (static_cast<int>(cs.size()) < max_coords) {
        int i = pick(rng);
        if (!taken[static_cast<size_t>(i)]) {
            taken[static_cast<size_t>(i)] = 1;
            cs.push_back(i);
        }
    }
    std::sort(cs.begin(), cs.end());
    return cs;
}

}  // namespace unims
