#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "chybrid/rng.hpp"
#include "chybrid/tensor.hpp"

namespace chybrid {

/// Valid-frame prefix lengths of a padded batch [B x T].
struct FrameMask {
    std::size_t time = 0;
    std::vector<std::size_t> lengths;

    static FrameMask full(std::size_t batch, std::size_t time) {
        return FrameMask{time, std::vector<std::size_t>(batch, time)};
    }

    std::size_t batch() const { return lengths.size(); }
    bool valid(std::size_t b, std::size_t t) const { return t < lengths[b]; }

    std::size_t valid_frames() const {
        return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
    }

    /// Mask after a stride-`factor` reduction with ceil semantics.
    FrameMask downsampled(std::size_t factor) const {
        FrameMask out{(time + factor - 1) / factor, {}};
        for (auto len : lengths) out.lengths.push_back((len + factor - 1) / factor);
        return out;
    }

    /// Row flags for a tensor viewed as [B*T, ...].
    std::vector<std::uint8_t> rows() const {
        std::vector<std::uint8_t> r(batch() * time, 0);
        for (std::size_t b = 0; b < batch(); ++b)
            for (std::size_t t = 0; t < lengths[b]; ++t) r[b * time + t] = 1;
        return r;
    }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
}

template <class F, class DF>
Tensor unary(const Tensor& x, const char* op, F f, DF df) {
    const auto xd = x.data();
    std::vector<double> y(xd.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xd[i]);
    auto xn = x.node();
    return make_result(op, x.shape(), std::move(y), {x}, [xn, df](const Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += out.grad[i] * df(xn->data[i], out.data[i]);
    });
}

inline double sigmoid_scalar(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace detail

// ─── Elementwise ────────────────────────────────────────────────────────────

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("add", a.shape(), std::move(y), {a, b}, [an, bn](const Node& out) {
        for (auto* n : {an.get(), bn.get()}) {
            if (!n->requires_grad) continue;
            auto& g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("sub", a.shape(), std::move(y), {a, b}, [an, bn](const Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result("mul", a.shape(), std::move(y), {a, b}, [an, bn](const Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * an->data[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, "scale", [s](double v) { return s * v; },
                         [s](double, double) { return s; });
}

/// x[..., n] + bias[n]
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require(bias.rank() == 1 && x.rank() >= 1 && x.shape().back() == bias.dim(0),
                    "add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    const std::size_t n = bias.dim(0);
    std::vector<double> y(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias.data()[i % n];
    auto xn = x.node(), bn = bias.node();
    return detail::make_result("add_bias", x.shape(), std::move(y), {x, bias}, [xn, bn, n](const Node& out) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i];
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(x, "sigmoid", detail::sigmoid_scalar,
                         [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(x, "tanh", [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

/// x * sigmoid(x)
inline Tensor swish(const Tensor& x) {
    return detail::unary(
        x, "swish", [](double v) { return v * detail::sigmoid_scalar(v); },
        [](double v, double) {
            const double s = detail::sigmoid_scalar(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](double v) { return std::exp(v); },
                         [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(x, "log", [](double v) { return std::log(v); },
                         [](double v, double) { return 1.0 / v; });
}

// ─── Reductions ─────────────────────────────────────────────────────────────

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto xn = x.node();
    return detail::make_result("sum", Shape{}, {s}, {x}, [xn](const Node& out) {
        auto& g = xn->grad_buffer();
        for (auto& v : g) v += out.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ─── Shape manipulation ─────────────────────────────────────────────────────

inline Tensor reshape(const Tensor& x, Shape shape) {
    detail::require(shape_numel(shape) == x.size(),
                    "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto xn = x.node();
    return detail::make_result("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                               {x}, [xn](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                               });
}

/// Output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    detail::require(perm.size() == r, "permute: rank mismatch");
    Shape out_shape(r);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
    const std::size_t n = x.size();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t s = 0;
        for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_strides[perm[i]];
        src[o] = s;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> y(n);
    for (std::size_t o = 0; o < n; ++o) y[o] = x.data()[src[o]];
    auto xn = x.node();
    return detail::make_result("permute", out_shape, std::move(y), {x},
                               [xn, src = std::move(src)](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += out.grad[o];
                               });
}

/// Swap the last two axes.
inline Tensor transpose(const Tensor& x) {
    detail::require(x.rank() >= 2, "transpose: rank < 2");
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
    return permute(x, perm);
}

/// Columns [start, start+len) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t n = x.shape().back();
    detail::require(start + len <= n && len > 0, "slice_last: range out of bounds");
    const std::size_t rows = x.size() / n;
    Shape shape = x.shape();
    shape.back() = len;
    std::vector<double> y(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) y[r * len + j] = x.data()[r * n + start + j];
    auto xn = x.node();
    return detail::make_result("slice_last", std::move(shape), std::move(y), {x},
                               [xn, rows, n, start, len](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < len; ++j)
                                           g[r * n + start + j] += out.grad[r * len + j];
                               });
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        detail::require(a.dim(i) == b.dim(i), "concat_last: leading dims differ");
    const std::size_t na = a.shape().back(), nb = b.shape().back(), rows = a.size() / na;
    Shape shape = a.shape();
    shape.back() = na + nb;
    std::vector<double> y(rows * (na + nb));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().begin() + r * na, na, y.begin() + r * (na + nb));
        std::copy_n(b.data().begin() + r * nb, nb, y.begin() + r * (na + nb) + na);
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result("concat_last", std::move(shape), std::move(y), {a, b},
                               [an, bn, rows, na, nb](const Node& out) {
                                   const std::size_t w = na + nb;
                                   if (an->requires_grad) {
                                       auto& g = an->grad_buffer();
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t j = 0; j < na; ++j) g[r * na + j] += out.grad[r * w + j];
                                   }
                                   if (bn->requires_grad) {
                                       auto& g = bn->grad_buffer();
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t j = 0; j < nb; ++j)
                                               g[r * nb + j] += out.grad[r * w + na + j];
                                   }
                               });
}

/// Frame t of x[B x T x C] as [B x C].
inline Tensor select_time(const Tensor& x, std::size_t t) {
    detail::require(x.rank() == 3 && t < x.dim(1), "select_time: bad index or rank");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    std::vector<double> y(B * C);
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.data().begin() + (b * T + t) * C, C, y.begin() + b * C);
    auto xn = x.node();
    return detail::make_result("select_time", Shape{B, C}, std::move(y), {x}, [xn, B, T, C, t](const Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) g[(b * T + t) * C + c] += out.grad[b * C + c];
    });
}

/// Stacks T tensors of [B x C] into [B x T x C].
inline Tensor stack_time(const std::vector<Tensor>& frames) {
    detail::require(!frames.empty(), "stack_time: empty input");
    const std::size_t B = frames[0].dim(0), C = frames[0].dim(1), T = frames.size();
    std::vector<double> y(B * T * C);
    for (std::size_t t = 0; t < T; ++t) {
        detail::require(frames[t].shape() == frames[0].shape(), "stack_time: shape mismatch");
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(frames[t].data().begin() + b * C, C, y.begin() + (b * T + t) * C);
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& f : frames) nodes.push_back(f.node());
    return detail::make_result("stack_time", Shape{B, T, C}, std::move(y), frames,
                               [nodes, B, T, C](const Node& out) {
                                   for (std::size_t t = 0; t < T; ++t) {
                                       if (!nodes[t]->requires_grad) continue;
                                       auto& g = nodes[t]->grad_buffer();
                                       for (std::size_t b = 0; b < B; ++b)
                                           for (std::size_t c = 0; c < C; ++c)
                                               g[b * C + c] += out.grad[(b * T + t) * C + c];
                                   }
                               });
}

/// First `length` frames of x[B x T x ...]. Excess frames are trimmed on the right.
inline Tensor crop_time(const Tensor& x, std::size_t length) {
    detail::require(x.rank() >= 2, "crop_time: rank < 2");
    const std::size_t B = x.dim(0), T = x.dim(1);
    if (length > T)
        throw DimensionError("crop_time: cannot crop " + std::to_string(T) + " frames up to " +
                             std::to_string(length));
    if (length == T) return x;
    const std::size_t inner = x.size() / (B * T);
    Shape shape = x.shape();
    shape[1] = length;
    std::vector<double> y(B * length * inner);
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.data().begin() + b * T * inner, length * inner, y.begin() + b * length * inner);
    auto xn = x.node();
    return detail::make_result("crop_time", std::move(shape), std::move(y), {x},
                               [xn, B, T, length, inner](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t i = 0; i < length * inner; ++i)
                                           g[b * T * inner + i] += out.grad[b * length * inner + i];
                               });
}

/// Zeroes rows whose flag is 0; x is viewed as [rows.size() x inner].
inline Tensor mask_rows(const Tensor& x, const std::vector<std::uint8_t>& rows) {
    detail::require(!rows.empty() && x.size() % rows.size() == 0, "mask_rows: row count mismatch");
    const std::size_t inner = x.size() / rows.size();
    std::vector<double> y(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (!rows[r]) std::fill_n(y.begin() + r * inner, inner, 0.0);
    auto xn = x.node();
    return detail::make_result("mask_rows", x.shape(), std::move(y), {x}, [xn, rows, inner](const Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows.size(); ++r)
            if (rows[r])
                for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += out.grad[r * inner + i];
    });
}

/// Zeroes padded frames of x[B x T x ...].
inline Tensor apply_time_mask(const Tensor& x, const FrameMask& mask) {
    detail::require(x.rank() >= 2 && x.dim(0) == mask.batch() && x.dim(1) == mask.time,
                    "apply_time_mask: tensor " + shape_str(x.shape()) + " does not match mask");
    return mask_rows(x, mask.rows());
}

// ─── Linear algebra ─────────────────────────────────────────────────────────

/// a[..., m, k] x b[k, n] (shared right operand) or a[..., m, k] x b[..., k, n]
/// (matching leading dims).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands need rank >= 2");
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    detail::require(k == kb, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const bool shared = b.rank() == 2;
    if (!shared) {
        detail::require(b.rank() == a.rank(), "matmul: batched operands need equal rank");
        for (std::size_t i = 0; i + 2 < a.rank(); ++i)
            detail::require(a.dim(i) == b.dim(i), "matmul: batch dimensions differ");
    }
    const std::size_t batch = a.size() / (m * k);
    Shape shape = a.shape();
    shape.back() = n;
    std::vector<double> y(batch * m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* A = ad + bi * m * k;
        const double* Bm = bd + (shared ? 0 : bi * k * n);
        double* C = y.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                if (av == 0.0) continue;
                const double* brow = Bm + p * n;
                double* crow = C + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result("matmul", std::move(shape), std::move(y), {a, b},
                               [an, bn, batch, m, k, n, shared](const Node& out) {
                                   const double* G = out.grad.data();
                                   if (an->requires_grad) {
                                       auto& ga = an->grad_buffer();
                                       for (std::size_t bi = 0; bi < batch; ++bi) {
                                           const double* Bm = bn->data.data() + (shared ? 0 : bi * k * n);
                                           for (std::size_t i = 0; i < m; ++i) {
                                               const double* grow = G + (bi * m + i) * n;
                                               for (std::size_t p = 0; p < k; ++p) {
                                                   const double* brow = Bm + p * n;
                                                   double s = 0.0;
                                                   for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                                   ga[(bi * m + i) * k + p] += s;
                                               }
                                           }
                                       }
                                   }
                                   if (bn->requires_grad) {
                                       auto& gb = bn->grad_buffer();
                                       for (std::size_t bi = 0; bi < batch; ++bi) {
                                           const double* A = an->data.data() + bi * m * k;
                                           double* GB = gb.data() + (shared ? 0 : bi * k * n);
                                           for (std::size_t i = 0; i < m; ++i) {
                                               const double* grow = G + (bi * m + i) * n;
                                               for (std::size_t p = 0; p < k; ++p) {
                                                   const double av = A[i * k + p];
                                                   if (av == 0.0) continue;
                                                   double* gbrow = GB + p * n;
                                                   for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                                               }
                                           }
                                       }
                                   }
                               });
}

/// x W + b over the last axis.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

// ─── Normalisation and activations over the last axis ───────────────────────

inline Tensor softmax(const Tensor& x) {
    const std::size_t n = x.shape().back(), rows = x.size() / n;
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double* o = y.data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    auto xn = x.node();
    return detail::make_result("softmax", x.shape(), std::move(y), {x}, [xn, rows, n](const Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = out.data.data() + r * n;
            const double* gr = out.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (gr[j] - dot);
        }
    });
}

/// Softmax over the last axis of scores[B x ... x Tk] restricted to valid keys.
/// Rows with no valid key produce all zeros.
inline Tensor masked_softmax(const Tensor& scores, const FrameMask& key_mask) {
    const std::size_t n = scores.shape().back();
    detail::require(scores.dim(0) == key_mask.batch() && n == key_mask.time,
                    "masked_softmax: scores " + shape_str(scores.shape()) + " do not match key mask");
    const std::size_t rows = scores.size() / n, rows_per_batch = rows / key_mask.batch();
    std::vector<double> y(scores.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t valid = key_mask.lengths[r / rows_per_batch];
        if (valid == 0) continue;
        const double* in = scores.data().data() + r * n;
        double* o = y.data() + r * n;
        const double mx = *std::max_element(in, in + valid);
        double z = 0.0;
        for (std::size_t j = 0; j < valid; ++j) z += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < valid; ++j) o[j] /= z;
    }
    auto xn = scores.node();
    return detail::make_result("masked_softmax", scores.shape(), std::move(y), {scores},
                               [xn, rows, n](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double* yr = out.data.data() + r * n;
                                       const double* gr = out.grad.data() + r * n;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                                       for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (gr[j] - dot);
                                   }
                               });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t n = x.shape().back(), rows = x.size() / n;
    detail::require(gamma.size() == n && beta.size() == n, "layer_norm: affine size mismatch");
    std::vector<double> y(x.size()), xhat(x.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += in[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(n);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (in[j] - mu) * rstd[r];
            y[r * n + j] = xhat[r * n + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_result(
        "layer_norm", x.shape(), std::move(y), {x, gamma, beta},
        [xn, gn, bn, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& out) {
            if (gn->requires_grad) {
                auto& g = gn->grad_buffer();
                for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i] * xhat[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % n] += out.grad[i];
            }
            if (xn->requires_grad) {
                auto& g = xn->grad_buffer();
                std::vector<double> gx(n);
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        gx[j] = out.grad[r * n + j] * gn->data[j];
                        m1 += gx[j];
                        m2 += gx[j] * xhat[r * n + j];
                    }
                    m1 /= static_cast<double>(n);
                    m2 /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        g[r * n + j] += rstd[r] * (gx[j] - m1 - xhat[r * n + j] * m2);
                }
            }
        });
}

/// Gated linear unit: first half * sigmoid(second half) of the last axis.
inline Tensor glu(const Tensor& x) {
    const std::size_t n2 = x.shape().back();
    detail::require(n2 % 2 == 0, "glu: last dimension must be even");
    return mul(slice_last(x, 0, n2 / 2), sigmoid(slice_last(x, n2 / 2, n2 / 2)));
}

/// Inverted dropout; identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * mask[i];
    auto xn = x.node();
    return detail::make_result("dropout", x.shape(), std::move(y), {x}, [xn, mask = std::move(mask)](const Node& out) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * mask[i];
    });
}

// ─── Convolutions and pooling ───────────────────────────────────────────────

/// Left padding of the "same" convention: floor((k-1)/2) before, ceil((k-1)/2) after.
inline std::size_t same_pad_left(std::size_t k) { return (k - 1) / 2; }

/// 2-D convolution over (time, feature) with same padding on both axes and
/// stride only along time. x[B x T x F x Cin] (or [T x F x Cin]),
/// kernel[kh x kw x Cin x Cout] -> [B x ceil(T/stride) x F x Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride_t) {
    if (stride_t < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (x.rank() == 3) {
        auto y = conv2d(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}), kernel, stride_t);
        return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
    }
    detail::require(x.rank() == 4 && kernel.rank() == 4, "conv2d: expected x[B,T,F,Cin] and kernel[kh,kw,Cin,Cout]");
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2), Cin = x.dim(3);
    const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), Cout = kernel.dim(3);
    detail::require(kernel.dim(2) == Cin, "conv2d: kernel input channels " + std::to_string(kernel.dim(2)) +
                                              " != " + std::to_string(Cin));
    const std::size_t To = (T + stride_t - 1) / stride_t;
    const auto pt = static_cast<std::ptrdiff_t>(same_pad_left(KH));
    const auto pf = static_cast<std::ptrdiff_t>(same_pad_left(KW));
    std::vector<double> y(B * To * F * Cout, 0.0);
    const double* xd = x.data().data();
    const double* kd = kernel.data().data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t to = 0; to < To; ++to)
            for (std::size_t kt = 0; kt < KH; ++kt) {
                const auto ti = static_cast<std::ptrdiff_t>(to * stride_t + kt) - pt;
                if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                for (std::size_t f = 0; f < F; ++f) {
                    double* yo = y.data() + ((b * To + to) * F + f) * Cout;
                    for (std::size_t kf = 0; kf < KW; ++kf) {
                        const auto fi = static_cast<std::ptrdiff_t>(f + kf) - pf;
                        if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(F)) continue;
                        const double* xi = xd + ((b * T + static_cast<std::size_t>(ti)) * F + static_cast<std::size_t>(fi)) * Cin;
                        const double* kk = kd + (kt * KW + kf) * Cin * Cout;
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            const double xv = xi[ci];
                            const double* krow = kk + ci * Cout;
                            for (std::size_t co = 0; co < Cout; ++co) yo[co] += xv * krow[co];
                        }
                    }
                }
            }
    auto xn = x.node(), kn = kernel.node();
    return detail::make_result(
        "conv2d", Shape{B, To, F, Cout}, std::move(y), {x, kernel},
        [=](const Node& out) {
            const double* G = out.grad.data();
            double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t to = 0; to < To; ++to)
                    for (std::size_t kt = 0; kt < KH; ++kt) {
                        const auto ti = static_cast<std::ptrdiff_t>(to * stride_t + kt) - pt;
                        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                        for (std::size_t f = 0; f < F; ++f) {
                            const double* go = G + ((b * To + to) * F + f) * Cout;
                            for (std::size_t kf = 0; kf < KW; ++kf) {
                                const auto fi = static_cast<std::ptrdiff_t>(f + kf) - pf;
                                if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(F)) continue;
                                const std::size_t xoff =
                                    ((b * T + static_cast<std::size_t>(ti)) * F + static_cast<std::size_t>(fi)) * Cin;
                                const std::size_t koff = (kt * KW + kf) * Cin * Cout;
                                for (std::size_t ci = 0; ci < Cin; ++ci) {
                                    const double* krow = kn->data.data() + koff + ci * Cout;
                                    if (gx) {
                                        double s = 0.0;
                                        for (std::size_t co = 0; co < Cout; ++co) s += go[co] * krow[co];
                                        gx[xoff + ci] += s;
                                    }
                                    if (gk) {
                                        const double xv = xn->data[xoff + ci];
                                        double* gkrow = gk + koff + ci * Cout;
                                        for (std::size_t co = 0; co < Cout; ++co) gkrow[co] += xv * go[co];
                                    }
                                }
                            }
                        }
                    }
        });
}

/// Transposed 1-D convolution whose filter size equals its stride, so the
/// output has exactly T'·stride frames. x[B x T' x C] (or [T' x C]),
/// kernel[k x C x Cout] with k == stride.
inline Tensor transposed_conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride) {
    if (kernel.rank() != 3) throw DimensionError("transposed_conv1d: kernel must be [k, C, Cout]");
    if (kernel.dim(0) != stride)
        throw ConfigError("transposed_conv1d: filter size " + std::to_string(kernel.dim(0)) +
                          " must equal stride " + std::to_string(stride));
    if (x.rank() == 2) {
        auto y = transposed_conv1d(reshape(x, {1, x.dim(0), x.dim(1)}), kernel, stride);
        return reshape(y, {y.dim(1), y.dim(2)});
    }
    detail::require(x.rank() == 3 && x.dim(2) == kernel.dim(1), "transposed_conv1d: input channels mismatch");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), K = stride, Cout = kernel.dim(2);
    std::vector<double> y(B * T * K * Cout, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            const double* xi = x.data().data() + (b * T + t) * C;
            for (std::size_t r = 0; r < K; ++r) {
                double* yo = y.data() + ((b * T + t) * K + r) * Cout;
                for (std::size_t c = 0; c < C; ++c) {
                    const double xv = xi[c];
                    const double* krow = kernel.data().data() + (r * C + c) * Cout;
                    for (std::size_t o = 0; o < Cout; ++o) yo[o] += xv * krow[o];
                }
            }
        }
    auto xn = x.node(), kn = kernel.node();
    return detail::make_result("transposed_conv1d", Shape{B, T * K, Cout}, std::move(y), {x, kernel},
                               [=](const Node& out) {
                                   double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
                                   double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t t = 0; t < T; ++t)
                                           for (std::size_t r = 0; r < K; ++r) {
                                               const double* go = out.grad.data() + ((b * T + t) * K + r) * Cout;
                                               for (std::size_t c = 0; c < C; ++c) {
                                                   const double* krow = kn->data.data() + (r * C + c) * Cout;
                                                   if (gx) {
                                                       double s = 0.0;
                                                       for (std::size_t o = 0; o < Cout; ++o) s += go[o] * krow[o];
                                                       gx[(b * T + t) * C + c] += s;
                                                   }
                                                   if (gk) {
                                                       const double xv = xn->data[(b * T + t) * C + c];
                                                       double* gkrow = gk + (r * C + c) * Cout;
                                                       for (std::size_t o = 0; o < Cout; ++o) gkrow[o] += xv * go[o];
                                                   }
                                               }
                                           }
                               });
}

/// Per-channel convolution along time with same padding.
/// x[B x T x C] (or [T x C]), kernel[k x C].
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel) {
    if (x.rank() == 2) {
        auto y = depthwise_conv1d(reshape(x, {1, x.dim(0), x.dim(1)}), kernel);
        return reshape(y, {y.dim(1), y.dim(2)});
    }
    detail::require(x.rank() == 3 && kernel.rank() == 2 && kernel.dim(1) == x.dim(2),
                    "depthwise_conv1d: expected x[B,T,C] and kernel[k,C]");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), K = kernel.dim(0);
    const auto pad = static_cast<std::ptrdiff_t>(same_pad_left(K));
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < K; ++j) {
                const auto ti = static_cast<std::ptrdiff_t>(t + j) - pad;
                if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                const double* xi = x.data().data() + (b * T + static_cast<std::size_t>(ti)) * C;
                const double* kr = kernel.data().data() + j * C;
                double* yo = y.data() + (b * T + t) * C;
                for (std::size_t c = 0; c < C; ++c) yo[c] += xi[c] * kr[c];
            }
    auto xn = x.node(), kn = kernel.node();
    return detail::make_result("depthwise_conv1d", x.shape(), std::move(y), {x, kernel}, [=](const Node& out) {
        double* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
        double* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < K; ++j) {
                    const auto ti = static_cast<std::ptrdiff_t>(t + j) - pad;
                    if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                    const std::size_t xoff = (b * T + static_cast<std::size_t>(ti)) * C;
                    const double* go = out.grad.data() + (b * T + t) * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        if (gx) gx[xoff + c] += go[c] * kn->data[j * C + c];
                        if (gk) gk[j * C + c] += go[c] * xn->data[xoff + c];
                    }
                }
    });
}

/// Max-pool over the feature axis of x[B x T x F x C] with window == stride,
/// keeping a trailing partial window (output ceil(F/stride)).
inline Tensor max_pool_feature(const Tensor& x, std::size_t stride = 2) {
    detail::require(x.rank() == 4, "max_pool_feature: expected [B,T,F,C]");
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2), C = x.dim(3);
    const std::size_t Fo = (F + stride - 1) / stride;
    std::vector<double> y(B * T * Fo * C);
    std::vector<std::size_t> arg(y.size());
    for (std::size_t bt = 0; bt < B * T; ++bt)
        for (std::size_t fo = 0; fo < Fo; ++fo)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t best = (bt * F + fo * stride) * C + c;
                for (std::size_t f = fo * stride + 1; f < std::min(F, fo * stride + stride); ++f) {
                    const std::size_t i = (bt * F + f) * C + c;
                    if (x.data()[i] > x.data()[best]) best = i;
                }
                const std::size_t o = (bt * Fo + fo) * C + c;
                y[o] = x.data()[best];
                arg[o] = best;
            }
    auto xn = x.node();
    return detail::make_result("max_pool_feature", Shape{B, T, Fo, C}, std::move(y), {x},
                               [xn, arg = std::move(arg)](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += out.grad[o];
                               });
}

/// Max-pool over time of x[B x T x C] with window == stride == factor, only
/// over valid frames. Windows without a valid frame produce zeros.
inline Tensor time_max_pool(const Tensor& x, const FrameMask& mask, std::size_t factor) {
    detail::require(x.rank() == 3 && x.dim(0) == mask.batch() && x.dim(1) == mask.time,
                    "time_max_pool: tensor does not match mask");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), To = (T + factor - 1) / factor;
    constexpr auto none = std::numeric_limits<std::size_t>::max();
    std::vector<double> y(B * To * C, 0.0);
    std::vector<std::size_t> arg(y.size(), none);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t to = 0; to < To; ++to)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t o = (b * To + to) * C + c;
                for (std::size_t t = to * factor; t < std::min(mask.lengths[b], to * factor + factor); ++t) {
                    const std::size_t i = (b * T + t) * C + c;
                    if (arg[o] == none || x.data()[i] > x.data()[arg[o]]) arg[o] = i;
                }
                if (arg[o] != none) y[o] = x.data()[arg[o]];
            }
    auto xn = x.node();
    return detail::make_result("time_max_pool", Shape{B, To, C}, std::move(y), {x},
                               [xn, arg = std::move(arg)](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t o = 0; o < arg.size(); ++o)
                                       if (arg[o] != none) g[arg[o]] += out.grad[o];
                               });
}

/// Expands relative-position logits rel[..., T, 2c+1] (column d holds offset
/// d - c) into absolute form out[..., i, j] = rel[..., i, clamp(j - i, -c, c) + c].
inline Tensor gather_relative(const Tensor& rel, std::size_t clamp) {
    detail::require(rel.rank() >= 2 && rel.shape().back() == 2 * clamp + 1, "gather_relative: last dim must be 2c+1");
    const std::size_t W = 2 * clamp + 1, T = rel.dim(rel.rank() - 2), rows = rel.size() / (T * W);
    Shape shape = rel.shape();
    shape.back() = T;
    std::vector<std::size_t> col(T * T);
    const auto c = static_cast<std::ptrdiff_t>(clamp);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
            const auto d = std::clamp(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i), -c, c);
            col[i * T + j] = i * W + static_cast<std::size_t>(d + c);
        }
    std::vector<double> y(rows * T * T);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ij = 0; ij < T * T; ++ij) y[r * T * T + ij] = rel.data()[r * T * W + col[ij]];
    auto xn = rel.node();
    return detail::make_result("gather_relative", std::move(shape), std::move(y), {rel},
                               [xn, rows, T, W, col = std::move(col)](const Node& out) {
                                   auto& g = xn->grad_buffer();
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t ij = 0; ij < T * T; ++ij)
                                           g[r * T * W + col[ij]] += out.grad[r * T * T + ij];
                               });
}

// ─── Frame-level classification losses ──────────────────────────────────────

namespace detail {

inline void check_loss_inputs(const Tensor& logits, const std::vector<std::int32_t>& targets, const FrameMask& mask) {
    require(logits.rank() == 3 && logits.dim(0) == mask.batch() && logits.dim(1) == mask.time,
            "loss: logits " + shape_str(logits.shape()) + " do not match frame mask");
    require(targets.size() == mask.batch() * mask.time, "loss: target count mismatch");
    if (mask.valid_frames() == 0) throw DimensionError("loss: batch has no valid frames");
}

/// Shared kernel of CE and focal loss: mean over valid frames of
/// -(1 - p_t)^gamma log p_t, or plain -log p_t when gamma == 0.
inline Tensor frame_loss(const char* op, const Tensor& logits, const std::vector<std::int32_t>& targets,
                         const FrameMask& mask, double gamma) {
    check_loss_inputs(logits, targets, mask);
    const std::size_t V = logits.dim(2), T = mask.time;
    const auto valid = static_cast<double>(mask.valid_frames());
    const bool focal = gamma != 0.0;
    // dL/dz = coef * (onehot - softmax) per frame, stored alongside softmax.
    std::vector<double> probs(logits.size(), 0.0), coef(mask.batch() * T, 0.0);
    double total = 0.0;
    for (std::size_t b = 0; b < mask.batch(); ++b)
        for (std::size_t t = 0; t < mask.lengths[b]; ++t) {
            const std::size_t row = b * T + t;
            const auto y = targets[row];
            if (y < 0 || static_cast<std::size_t>(y) >= V)
                throw DimensionError("loss: target label " + std::to_string(y) + " out of range");
            const double* z = logits.data().data() + row * V;
            double* p = probs.data() + row * V;
            const double mx = *std::max_element(z, z + V);
            double s = 0.0;
            for (std::size_t v = 0; v < V; ++v) s += (p[v] = std::exp(z[v] - mx));
            for (std::size_t v = 0; v < V; ++v) p[v] /= s;
            const double logp = z[y] - mx - std::log(s);
            if (!focal) {
                total += -logp;
                coef[row] = -1.0;
            } else {
                const double pt = std::exp(logp);
                const double one_minus = -std::expm1(logp);
                const double w = std::pow(one_minus, gamma);
                total += -w * logp;
                // d/du of -(1-e^u)^g u with u = log p_t
                const double dw = one_minus > 0.0 ? gamma * std::pow(one_minus, gamma - 1.0) * pt * logp : 0.0;
                coef[row] = dw - w;
            }
        }
    auto zn = logits.node();
    return make_result(op, Shape{}, {total / valid}, {logits},
                       [zn, targets, probs = std::move(probs), coef = std::move(coef), V, valid](const Node& out) {
                           auto& g = zn->grad_buffer();
                           const double scale = out.grad[0] / valid;
                           for (std::size_t row = 0; row < coef.size(); ++row) {
                               if (coef[row] == 0.0) continue;
                               const double c = coef[row] * scale;
                               for (std::size_t v = 0; v < V; ++v) g[row * V + v] -= c * probs[row * V + v];
                               g[row * V + static_cast<std::size_t>(targets[row])] += c;
                           }
                       });
}

}  // namespace detail

/// Mean negative log-probability of the target label over valid frames.
/// logits[B x T x V], targets flattened [B*T].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets, const FrameMask& mask) {
    return detail::frame_loss("cross_entropy", logits, targets, mask, 0.0);
}

/// Mean of -(1 - p_t)^gamma log p_t over valid frames. gamma == 0 is
/// exactly cross_entropy.
inline Tensor focal_loss(const Tensor& logits, const std::vector<std::int32_t>& targets, const FrameMask& mask,
                         double gamma) {
    if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be >= 0");
    if (gamma == 0.0) return cross_entropy(logits, targets, mask);
    return detail::frame_loss("focal_loss", logits, targets, mask, gamma);
}

}  // namespace chybrid
