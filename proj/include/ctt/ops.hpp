#pragma once

// Dense-array forward ops with reverse-mode gradients. Shapes are checked and
// reported in errors; index inputs are not differentiable. All loops use fixed
// accumulation order so streaming and offline paths agree bitwise.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/tensor.hpp"
#include "ctt/util.hpp"

namespace ctt {

namespace detail {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

#ifdef CTT_DEBUG_CHECK_FINITE
inline void debug_check_finite(const char* op, const Tensor& t) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": non-finite input value");
        }
    }
}
#else
inline void debug_check_finite(const char*, const Tensor&) {}
#endif

// Right-aligned numpy-style broadcast: per output element, offsets into both
// operands. Index maps are materialized once and shared with the backward.
struct BcastPlan {
    Shape out_shape;
    std::shared_ptr<std::vector<long>> off_a;
    std::shared_ptr<std::vector<long>> off_b;
};

inline BcastPlan bcast_plan(const char* op, const Shape& a, const Shape& b) {
    const int ra = int(a.size()), rb = int(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const long da = i < r - ra ? 1 : a[size_t(i - (r - ra))];
        const long db = i < r - rb ? 1 : b[size_t(i - (r - rb))];
        check(da == db || da == 1 || db == 1,
              std::string(op) + ": shapes not broadcastable: " + shape_str(a) + " vs " +
                  shape_str(b));
        out[size_t(i)] = std::max(da, db);
    }
    BcastPlan plan;
    plan.out_shape = out;
    const long n = shape_numel(out);
    plan.off_a = std::make_shared<std::vector<long>>(size_t(n));
    plan.off_b = std::make_shared<std::vector<long>>(size_t(n));
    std::vector<long> idx(size_t(r), 0);
    for (long lin = 0; lin < n; ++lin) {
        long oa = 0, ob = 0;
        for (int i = 0; i < r; ++i) {
            const long da = i < r - ra ? 1 : a[size_t(i - (r - ra))];
            const long db = i < r - rb ? 1 : b[size_t(i - (r - rb))];
            oa = oa * da + (da == 1 ? 0 : idx[size_t(i)]);
            ob = ob * db + (db == 1 ? 0 : idx[size_t(i)]);
        }
        (*plan.off_a)[size_t(lin)] = oa;
        (*plan.off_b)[size_t(lin)] = ob;
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[size_t(i)] < out[size_t(i)]) break;
            idx[size_t(i)] = 0;
        }
    }
    return plan;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::debug_check_finite("add", a);
    detail::debug_check_finite("add", b);
    auto plan = detail::bcast_plan("add", a.shape(), b.shape());
    const long n = shape_numel(plan.out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        out[size_t(i)] = a.data()[size_t((*plan.off_a)[size_t(i)])] +
                         b.data()[size_t((*plan.off_b)[size_t(i)])];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(
        plan.out_shape, std::move(out), {a, b},
        [plan, an, bn](Tensor::Node& self) {
            const long n2 = self.numel();
            if (an->requires_grad) {
                an->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    an->grad[size_t((*plan.off_a)[size_t(i)])] += self.grad[size_t(i)];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    bn->grad[size_t((*plan.off_b)[size_t(i)])] += self.grad[size_t(i)];
                }
            }
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto plan = detail::bcast_plan("sub", a.shape(), b.shape());
    const long n = shape_numel(plan.out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        out[size_t(i)] = a.data()[size_t((*plan.off_a)[size_t(i)])] -
                         b.data()[size_t((*plan.off_b)[size_t(i)])];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(
        plan.out_shape, std::move(out), {a, b},
        [plan, an, bn](Tensor::Node& self) {
            const long n2 = self.numel();
            if (an->requires_grad) {
                an->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    an->grad[size_t((*plan.off_a)[size_t(i)])] += self.grad[size_t(i)];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    bn->grad[size_t((*plan.off_b)[size_t(i)])] -= self.grad[size_t(i)];
                }
            }
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto plan = detail::bcast_plan("mul", a.shape(), b.shape());
    const long n = shape_numel(plan.out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        out[size_t(i)] = a.data()[size_t((*plan.off_a)[size_t(i)])] *
                         b.data()[size_t((*plan.off_b)[size_t(i)])];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(
        plan.out_shape, std::move(out), {a, b},
        [plan, an, bn](Tensor::Node& self) {
            const long n2 = self.numel();
            if (an->requires_grad) {
                an->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    an->grad[size_t((*plan.off_a)[size_t(i)])] +=
                        self.grad[size_t(i)] * bn->value[size_t((*plan.off_b)[size_t(i)])];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long i = 0; i < n2; ++i) {
                    bn->grad[size_t((*plan.off_b)[size_t(i)])] +=
                        self.grad[size_t(i)] * an->value[size_t((*plan.off_a)[size_t(i)])];
                }
            }
        });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
                               [an, c](Tensor::Node& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (long i = 0; i < self.numel(); ++i) {
                                       an->grad[size_t(i)] += c * self.grad[size_t(i)];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check(a.rank() == 2 && b.rank() == 2,
                  "matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
    const long m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    detail::check(k == k2, "matmul: inner dimensions differ: " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (long i = 0; i < m; ++i) {
        for (long p = 0; p < k; ++p) {
            const double x = av[size_t(i * k + p)];
            if (x == 0.0) {
                // keep fixed accumulation: skipping a zero is exact
                continue;
            }
            for (long j = 0; j < n; ++j) {
                out[size_t(i * n + j)] += x * bv[size_t(p * n + j)];
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result(
        {m, n}, std::move(out), {a, b},
        [an, bn, m, k, n](Tensor::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (long i = 0; i < m; ++i) {
                    for (long p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (long j = 0; j < n; ++j) {
                            acc += self.grad[size_t(i * n + j)] * bn->value[size_t(p * n + j)];
                        }
                        an->grad[size_t(i * k + p)] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long p = 0; p < k; ++p) {
                    for (long i = 0; i < m; ++i) {
                        const double x = an->value[size_t(i * k + p)];
                        if (x == 0.0) continue;
                        for (long j = 0; j < n; ++j) {
                            bn->grad[size_t(p * n + j)] += x * self.grad[size_t(i * n + j)];
                        }
                    }
                }
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::check(a.rank() == 2, "transpose: expects 2-D, got " + shape_str(a.shape()));
    const long m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    for (long i = 0; i < m; ++i) {
        for (long j = 0; j < n; ++j) out[size_t(j * m + i)] = a.data()[size_t(i * n + j)];
    }
    auto an = a.node();
    return detail::make_result({n, m}, std::move(out), {a},
                               [an, m, n](Tensor::Node& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (long i = 0; i < m; ++i) {
                                       for (long j = 0; j < n; ++j) {
                                           an->grad[size_t(i * n + j)] +=
                                               self.grad[size_t(j * m + i)];
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    detail::check(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    return detail::make_result(shape, std::vector<double>(a.data()), {a},
                               [an](Tensor::Node& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (long i = 0; i < self.numel(); ++i) {
                                       an->grad[size_t(i)] += self.grad[size_t(i)];
                                   }
                               });
}

inline Tensor slice(const Tensor& a, int axis, long start, long len) {
    detail::check(axis >= 0 && axis < a.rank(),
                  "slice: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(a.shape()));
    const long d = a.dim(axis);
    detail::check(start >= 0 && len >= 0 && start + len <= d,
                  "slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of bounds for axis " +
                      std::to_string(axis) + " of " + shape_str(a.shape()));
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    Shape out_shape = a.shape();
    out_shape[size_t(axis)] = len;
    std::vector<double> out(static_cast<size_t>(outer * len * inner));
    for (long o = 0; o < outer; ++o) {
        const double* src = a.data().data() + (o * d + start) * inner;
        double* dst = out.data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    auto an = a.node();
    return detail::make_result(
        out_shape, std::move(out), {a},
        [an, outer, inner, d, start, len](Tensor::Node& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (long o = 0; o < outer; ++o) {
                const double* g = self.grad.data() + o * len * inner;
                double* dst = an->grad.data() + (o * d + start) * inner;
                for (long i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    detail::check(!parts.empty(), "concat: no inputs");
    const int r = parts[0].rank();
    detail::check(axis >= 0 && axis < r, "concat: axis out of range");
    long cat_dim = 0;
    for (const auto& p : parts) {
        detail::check(p.rank() == r, "concat: rank mismatch: " + shape_str(p.shape()) +
                                         " vs " + shape_str(parts[0].shape()));
        for (int i = 0; i < r; ++i) {
            detail::check(i == axis || p.dim(i) == parts[0].dim(i),
                          "concat: shape mismatch on axis " + std::to_string(i) + ": " +
                              shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        }
        cat_dim += p.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[size_t(axis)] = cat_dim;
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[size_t(i)];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[size_t(i)];
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    long off = 0;
    for (const auto& p : parts) {
        const long len = p.dim(axis);
        for (long o = 0; o < outer; ++o) {
            const double* src = p.data().data() + o * len * inner;
            double* dst = out.data() + (o * cat_dim + off) * inner;
            std::copy(src, src + len * inner, dst);
        }
        off += len;
    }
    std::vector<std::shared_ptr<Tensor::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result(
        out_shape, std::move(out), parts,
        [nodes, outer, inner, cat_dim](Tensor::Node& self) {
            long off2 = 0;
            for (auto& pn : nodes) {
                const long axis_len = pn->numel() / (outer * inner);
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (long o = 0; o < outer; ++o) {
                        const double* g = self.grad.data() + (o * cat_dim + off2) * inner;
                        double* dst = pn->grad.data() + o * axis_len * inner;
                        for (long i = 0; i < axis_len * inner; ++i) dst[i] += g[i];
                    }
                }
                off2 += axis_len;
            }
        });
}

// ---------------------------------------------------------------------------
// Lookup
// ---------------------------------------------------------------------------

inline Tensor embedding(const Tensor& table, const std::vector<long>& indices) {
    detail::check(table.rank() == 2,
                  "embedding: table must be 2-D, got " + shape_str(table.shape()));
    const long rows = table.dim(0), d = table.dim(1);
    for (long ix : indices) {
        detail::check(ix >= 0 && ix < rows, "embedding: index " + std::to_string(ix) +
                                                " out of range for table " +
                                                shape_str(table.shape()));
    }
    const long n = long(indices.size());
    std::vector<double> out(static_cast<size_t>(n * d));
    for (long i = 0; i < n; ++i) {
        const double* src = table.data().data() + indices[size_t(i)] * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    auto tn = table.node();
    auto idx = std::make_shared<std::vector<long>>(indices);
    return detail::make_result({n, d}, std::move(out), {table},
                               [tn, idx, d](Tensor::Node& self) {
                                   if (!tn->requires_grad) return;
                                   tn->ensure_grad();
                                   const long n2 = long(idx->size());
                                   for (long i = 0; i < n2; ++i) {
                                       double* dst = tn->grad.data() + (*idx)[size_t(i)] * d;
                                       const double* g = self.grad.data() + i * d;
                                       for (long j = 0; j < d; ++j) dst[j] += g[j];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
                               [an](Tensor::Node& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (long i = 0; i < self.numel(); ++i) {
                                       if (an->value[size_t(i)] > 0.0) {
                                           an->grad[size_t(i)] += self.grad[size_t(i)];
                                       }
                                   }
                               });
}

namespace detail {
inline void softmax_row(const double* x, double* y, long d, bool log_form) {
    double mx = x[0];
    for (long i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (long i = 0; i < d; ++i) z += std::exp(x[i] - mx);
    if (log_form) {
        const double lz = std::log(z);
        for (long i = 0; i < d; ++i) y[i] = x[i] - mx - lz;
    } else {
        for (long i = 0; i < d; ++i) y[i] = std::exp(x[i] - mx) / z;
    }
}
}  // namespace detail

// softmax over the last axis
inline Tensor softmax(const Tensor& a) {
    detail::check(a.rank() >= 1, "softmax: needs rank >= 1");
    const long d = a.dim(a.rank() - 1);
    const long rows = a.numel() / d;
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (long r = 0; r < rows; ++r) {
        detail::softmax_row(a.data().data() + r * d, out.data() + r * d, d, false);
    }
    auto an = a.node();
    return detail::make_result(
        a.shape(), std::move(out), {a},
        [an, rows, d](Tensor::Node& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (long r = 0; r < rows; ++r) {
                const double* y = self.value.data() + r * d;
                const double* g = self.grad.data() + r * d;
                double dot = 0.0;
                for (long i = 0; i < d; ++i) dot += g[i] * y[i];
                double* dst = an->grad.data() + r * d;
                for (long i = 0; i < d; ++i) dst[i] += y[i] * (g[i] - dot);
            }
        });
}

// log(softmax) over the last axis
inline Tensor log_softmax(const Tensor& a) {
    detail::check(a.rank() >= 1, "log_softmax: needs rank >= 1");
    const long d = a.dim(a.rank() - 1);
    const long rows = a.numel() / d;
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (long r = 0; r < rows; ++r) {
        detail::softmax_row(a.data().data() + r * d, out.data() + r * d, d, true);
    }
    auto an = a.node();
    return detail::make_result(
        a.shape(), std::move(out), {a},
        [an, rows, d](Tensor::Node& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (long r = 0; r < rows; ++r) {
                const double* ls = self.value.data() + r * d;
                const double* g = self.grad.data() + r * d;
                double gsum = 0.0;
                for (long i = 0; i < d; ++i) gsum += g[i];
                double* dst = an->grad.data() + r * d;
                for (long i = 0; i < d; ++i) dst[i] += g[i] - std::exp(ls[i]) * gsum;
            }
        });
}

// Normalizes over the last axis; gain/bias are vectors of that length.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    const long d = x.dim(x.rank() - 1);
    detail::check(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                  "layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                      shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const long rows = x.numel() / d;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    auto mu = std::make_shared<std::vector<double>>(size_t(rows));
    auto inv_sigma = std::make_shared<std::vector<double>>(size_t(rows));
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double m = 0.0;
        for (long i = 0; i < d; ++i) m += xr[i];
        m /= double(d);
        double var = 0.0;
        for (long i = 0; i < d; ++i) var += (xr[i] - m) * (xr[i] - m);
        var /= double(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*mu)[size_t(r)] = m;
        (*inv_sigma)[size_t(r)] = is;
        double* yr = out.data() + r * d;
        for (long i = 0; i < d; ++i) {
            yr[i] = (xr[i] - m) * is * gain.data()[size_t(i)] + bias.data()[size_t(i)];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return detail::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, mu, inv_sigma, rows, d](Tensor::Node& self) {
            for (long r = 0; r < rows; ++r) {
                const double* xr = xn->value.data() + r * d;
                const double* g = self.grad.data() + r * d;
                const double m = (*mu)[size_t(r)];
                const double is = (*inv_sigma)[size_t(r)];
                if (gn->requires_grad || bn->requires_grad) {
                    if (gn->requires_grad) gn->ensure_grad();
                    if (bn->requires_grad) bn->ensure_grad();
                    for (long i = 0; i < d; ++i) {
                        if (gn->requires_grad) {
                            gn->grad[size_t(i)] += g[i] * (xr[i] - m) * is;
                        }
                        if (bn->requires_grad) bn->grad[size_t(i)] += g[i];
                    }
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (long i = 0; i < d; ++i) {
                        const double dxhat = g[i] * gn->value[size_t(i)];
                        const double xhat = (xr[i] - m) * is;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    double* dst = xn->grad.data() + r * d;
                    for (long i = 0; i < d; ++i) {
                        const double dxhat = g[i] * gn->value[size_t(i)];
                        const double xhat = (xr[i] - m) * is;
                        dst[i] += is * (dxhat - sum_dxhat / double(d) -
                                        xhat * sum_dxhat_xhat / double(d));
                    }
                }
            }
        });
}

// Per-channel (last axis) batch statistics over all other axes; gradient flows
// through the statistics. Batch mean/var are exposed for running-stat updates.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& scale, const Tensor& shift,
                               double eps, std::vector<double>* batch_mean = nullptr,
                               std::vector<double>* batch_var = nullptr) {
    const long c = x.dim(x.rank() - 1);
    detail::check(scale.rank() == 1 && scale.dim(0) == c && shift.rank() == 1 &&
                      shift.dim(0) == c,
                  "batch_norm_train: scale/shift must be [" + std::to_string(c) + "], got " +
                      shape_str(scale.shape()) + " and " + shape_str(shift.shape()));
    const long rows = x.numel() / c;
    detail::check(rows >= 1, "batch_norm_train: empty input");
    auto mu = std::make_shared<std::vector<double>>(size_t(c), 0.0);
    auto inv_sigma = std::make_shared<std::vector<double>>(size_t(c), 0.0);
    std::vector<double> var(size_t(c), 0.0);
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * c;
        for (long i = 0; i < c; ++i) (*mu)[size_t(i)] += xr[i];
    }
    for (long i = 0; i < c; ++i) (*mu)[size_t(i)] /= double(rows);
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * c;
        for (long i = 0; i < c; ++i) {
            const double t = xr[i] - (*mu)[size_t(i)];
            var[size_t(i)] += t * t;
        }
    }
    for (long i = 0; i < c; ++i) {
        var[size_t(i)] /= double(rows);
        (*inv_sigma)[size_t(i)] = 1.0 / std::sqrt(var[size_t(i)] + eps);
    }
    if (batch_mean) *batch_mean = *mu;
    if (batch_var) *batch_var = var;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * c;
        double* yr = out.data() + r * c;
        for (long i = 0; i < c; ++i) {
            yr[i] = (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)] *
                        scale.data()[size_t(i)] +
                    shift.data()[size_t(i)];
        }
    }
    auto xn = x.node();
    auto sn = scale.node();
    auto bn = shift.node();
    return detail::make_result(
        x.shape(), std::move(out), {x, scale, shift},
        [xn, sn, bn, mu, inv_sigma, rows, c](Tensor::Node& self) {
            std::vector<double> sum_dxhat(size_t(c), 0.0), sum_dxhat_xhat(size_t(c), 0.0);
            for (long r = 0; r < rows; ++r) {
                const double* xr = xn->value.data() + r * c;
                const double* g = self.grad.data() + r * c;
                for (long i = 0; i < c; ++i) {
                    const double dxhat = g[i] * sn->value[size_t(i)];
                    const double xhat = (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)];
                    sum_dxhat[size_t(i)] += dxhat;
                    sum_dxhat_xhat[size_t(i)] += dxhat * xhat;
                }
            }
            if (sn->requires_grad || bn->requires_grad) {
                if (sn->requires_grad) sn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (long r = 0; r < rows; ++r) {
                    const double* xr = xn->value.data() + r * c;
                    const double* g = self.grad.data() + r * c;
                    for (long i = 0; i < c; ++i) {
                        if (sn->requires_grad) {
                            sn->grad[size_t(i)] +=
                                g[i] * (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)];
                        }
                        if (bn->requires_grad) bn->grad[size_t(i)] += g[i];
                    }
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (long r = 0; r < rows; ++r) {
                    const double* xr = xn->value.data() + r * c;
                    const double* g = self.grad.data() + r * c;
                    double* dst = xn->grad.data() + r * c;
                    for (long i = 0; i < c; ++i) {
                        const double dxhat = g[i] * sn->value[size_t(i)];
                        const double xhat =
                            (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)];
                        dst[i] += (*inv_sigma)[size_t(i)] *
                                  (dxhat - sum_dxhat[size_t(i)] / double(rows) -
                                   xhat * sum_dxhat_xhat[size_t(i)] / double(rows));
                    }
                }
            }
        });
}

// Frozen-statistics form: a per-channel affine map. mean/var are constants.
inline Tensor batch_norm_inference(const Tensor& x, const std::vector<double>& mean,
                                   const std::vector<double>& var, const Tensor& scale,
                                   const Tensor& shift, double eps) {
    const long c = x.dim(x.rank() - 1);
    detail::check(long(mean.size()) == c && long(var.size()) == c,
                  "batch_norm_inference: running stats must have length " +
                      std::to_string(c));
    detail::check(scale.rank() == 1 && scale.dim(0) == c && shift.rank() == 1 &&
                      shift.dim(0) == c,
                  "batch_norm_inference: scale/shift must be [" + std::to_string(c) + "]");
    const long rows = x.numel() / c;
    auto inv_sigma = std::make_shared<std::vector<double>>(size_t(c));
    for (long i = 0; i < c; ++i) {
        (*inv_sigma)[size_t(i)] = 1.0 / std::sqrt(var[size_t(i)] + eps);
    }
    auto mu = std::make_shared<std::vector<double>>(mean);
    std::vector<double> out(static_cast<size_t>(x.numel()));
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * c;
        double* yr = out.data() + r * c;
        for (long i = 0; i < c; ++i) {
            yr[i] = (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)] *
                        scale.data()[size_t(i)] +
                    shift.data()[size_t(i)];
        }
    }
    auto xn = x.node();
    auto sn = scale.node();
    auto bn = shift.node();
    return detail::make_result(
        x.shape(), std::move(out), {x, scale, shift},
        [xn, sn, bn, mu, inv_sigma, rows, c](Tensor::Node& self) {
            for (long r = 0; r < rows; ++r) {
                const double* xr = xn->value.data() + r * c;
                const double* g = self.grad.data() + r * c;
                for (long i = 0; i < c; ++i) {
                    const double xhat = (xr[i] - (*mu)[size_t(i)]) * (*inv_sigma)[size_t(i)];
                    if (xn->requires_grad) {
                        xn->ensure_grad();
                        xn->grad[r * c + i] +=
                            g[i] * sn->value[size_t(i)] * (*inv_sigma)[size_t(i)];
                    }
                    if (sn->requires_grad) {
                        sn->ensure_grad();
                        sn->grad[size_t(i)] += g[i] * xhat;
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[size_t(i)] += g[i];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolutions (explicit asymmetric time padding, zeros)
// ---------------------------------------------------------------------------

inline long conv_out_len(long t, long kernel, long stride, long pad_l, long pad_r) {
    return (t + pad_l + pad_r - kernel) / stride + 1;
}

// x: [T, Cin], w: [Cout, K, Cin], b: [Cout] -> [To, Cout]
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, long stride,
                     long pad_l, long pad_r) {
    detail::check(x.rank() == 2 && w.rank() == 3,
                  "conv1d: expects x [T, Cin] and w [Cout, K, Cin], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const long t = x.dim(0), cin = x.dim(1);
    const long cout = w.dim(0), k = w.dim(1);
    detail::check(w.dim(2) == cin, "conv1d: channel mismatch: x " + shape_str(x.shape()) +
                                       ", w " + shape_str(w.shape()));
    detail::check(b.rank() == 1 && b.dim(0) == cout,
                  "conv1d: bias must be [" + std::to_string(cout) + "]");
    detail::check(stride >= 1 && pad_l >= 0 && pad_r >= 0, "conv1d: bad stride/padding");
    const long to = conv_out_len(t, k, stride, pad_l, pad_r);
    detail::check(to >= 1, "conv1d: input too short: T=" + std::to_string(t) +
                               " kernel=" + std::to_string(k));
    std::vector<double> out(static_cast<size_t>(to * cout));
    for (long ot = 0; ot < to; ++ot) {
        for (long co = 0; co < cout; ++co) {
            double acc = b.data()[size_t(co)];
            for (long kk = 0; kk < k; ++kk) {
                const long it = ot * stride - pad_l + kk;
                if (it < 0 || it >= t) continue;
                const double* xr = x.data().data() + it * cin;
                const double* wr = w.data().data() + (co * k + kk) * cin;
                for (long ci = 0; ci < cin; ++ci) acc += xr[ci] * wr[ci];
            }
            out[size_t(ot * cout + co)] = acc;
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result(
        {to, cout}, std::move(out), {x, w, b},
        [xn, wn, bn, t, cin, cout, k, stride, pad_l, to](Tensor::Node& self) {
            for (long ot = 0; ot < to; ++ot) {
                for (long co = 0; co < cout; ++co) {
                    const double g = self.grad[size_t(ot * cout + co)];
                    if (g == 0.0) continue;
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[size_t(co)] += g;
                    }
                    for (long kk = 0; kk < k; ++kk) {
                        const long it = ot * stride - pad_l + kk;
                        if (it < 0 || it >= t) continue;
                        for (long ci = 0; ci < cin; ++ci) {
                            if (wn->requires_grad) {
                                wn->ensure_grad();
                                wn->grad[size_t((co * k + kk) * cin + ci)] +=
                                    g * xn->value[size_t(it * cin + ci)];
                            }
                            if (xn->requires_grad) {
                                xn->ensure_grad();
                                xn->grad[size_t(it * cin + ci)] +=
                                    g * wn->value[size_t((co * k + kk) * cin + ci)];
                            }
                        }
                    }
                }
            }
        });
}

// x: [T, F, Cin], w: [Cout, Kt, Kf, Cin], b: [Cout] -> [To, Fo, Cout]
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, long stride_t,
                     long stride_f, long pad_t_l, long pad_t_r, long pad_f_lo,
                     long pad_f_hi) {
    detail::check(x.rank() == 3 && w.rank() == 4,
                  "conv2d: expects x [T, F, Cin] and w [Cout, Kt, Kf, Cin], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const long t = x.dim(0), f = x.dim(1), cin = x.dim(2);
    const long cout = w.dim(0), kt = w.dim(1), kf = w.dim(2);
    detail::check(w.dim(3) == cin, "conv2d: channel mismatch: x " + shape_str(x.shape()) +
                                       ", w " + shape_str(w.shape()));
    detail::check(b.rank() == 1 && b.dim(0) == cout,
                  "conv2d: bias must be [" + std::to_string(cout) + "]");
    const long to = conv_out_len(t, kt, stride_t, pad_t_l, pad_t_r);
    const long fo = conv_out_len(f, kf, stride_f, pad_f_lo, pad_f_hi);
    detail::check(to >= 1 && fo >= 1, "conv2d: input too small for kernel");
    std::vector<double> out(static_cast<size_t>(to * fo * cout));
    for (long ot = 0; ot < to; ++ot) {
        for (long of = 0; of < fo; ++of) {
            for (long co = 0; co < cout; ++co) {
                double acc = b.data()[size_t(co)];
                for (long ktt = 0; ktt < kt; ++ktt) {
                    const long it = ot * stride_t - pad_t_l + ktt;
                    if (it < 0 || it >= t) continue;
                    for (long kff = 0; kff < kf; ++kff) {
                        const long jf = of * stride_f - pad_f_lo + kff;
                        if (jf < 0 || jf >= f) continue;
                        const double* xr = x.data().data() + (it * f + jf) * cin;
                        const double* wr =
                            w.data().data() + ((co * kt + ktt) * kf + kff) * cin;
                        for (long ci = 0; ci < cin; ++ci) acc += xr[ci] * wr[ci];
                    }
                }
                out[size_t((ot * fo + of) * cout + co)] = acc;
            }
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result(
        {to, fo, cout}, std::move(out), {x, w, b},
        [xn, wn, bn, t, f, cin, cout, kt, kf, stride_t, stride_f, pad_t_l, pad_f_lo, to,
         fo](Tensor::Node& self) {
            for (long ot = 0; ot < to; ++ot) {
                for (long of = 0; of < fo; ++of) {
                    for (long co = 0; co < cout; ++co) {
                        const double g = self.grad[size_t((ot * fo + of) * cout + co)];
                        if (g == 0.0) continue;
                        if (bn->requires_grad) {
                            bn->ensure_grad();
                            bn->grad[size_t(co)] += g;
                        }
                        for (long ktt = 0; ktt < kt; ++ktt) {
                            const long it = ot * stride_t - pad_t_l + ktt;
                            if (it < 0 || it >= t) continue;
                            for (long kff = 0; kff < kf; ++kff) {
                                const long jf = of * stride_f - pad_f_lo + kff;
                                if (jf < 0 || jf >= f) continue;
                                for (long ci = 0; ci < cin; ++ci) {
                                    const size_t xi = size_t((it * f + jf) * cin + ci);
                                    const size_t wi =
                                        size_t(((co * kt + ktt) * kf + kff) * cin + ci);
                                    if (wn->requires_grad) {
                                        wn->ensure_grad();
                                        wn->grad[wi] += g * xn->value[xi];
                                    }
                                    if (xn->requires_grad) {
                                        xn->ensure_grad();
                                        xn->grad[xi] += g * wn->value[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and misc
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_result({}, {acc}, {a}, [an](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (auto& gv : an->grad) gv += g;
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / double(a.numel());
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    acc *= inv;
    auto an = a.node();
    return detail::make_result({}, {acc}, {a}, [an, inv](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0] * inv;
        for (auto& gv : an->grad) gv += g;
    });
}

// Inverted dropout; identity when rate == 0.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    detail::check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
    if (rate == 0.0) return a;
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(size_t(a.numel()));
    std::vector<double> out(static_cast<size_t>(a.numel()));
    for (long i = 0; i < a.numel(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        (*mask)[size_t(i)] = m;
        out[size_t(i)] = a.data()[size_t(i)] * m;
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a},
                               [an, mask](Tensor::Node& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (long i = 0; i < self.numel(); ++i) {
                                       an->grad[size_t(i)] +=
                                           self.grad[size_t(i)] * (*mask)[size_t(i)];
                                   }
                               });
}

// Expands per-distance position scores into a [n_queries, n_keys] score matrix.
// p[i, d] holds the score of query i at relative distance d = (q_offset + i) - j;
// entries whose distance falls outside [0, D) are zero (they are masked later).
inline Tensor rel_gather(const Tensor& p, long q_offset, long n_keys) {
    detail::check(p.rank() == 2, "rel_gather: expects 2-D, got " + shape_str(p.shape()));
    const long tq = p.dim(0), nd = p.dim(1);
    detail::check(q_offset >= 0 && n_keys >= 1, "rel_gather: bad offsets");
    std::vector<double> out(static_cast<size_t>(tq * n_keys), 0.0);
    for (long i = 0; i < tq; ++i) {
        for (long j = 0; j < n_keys; ++j) {
            const long d = q_offset + i - j;
            if (d >= 0 && d < nd) out[size_t(i * n_keys + j)] = p.data()[size_t(i * nd + d)];
        }
    }
    auto pn = p.node();
    return detail::make_result(
        {tq, n_keys}, std::move(out), {p},
        [pn, q_offset, n_keys, tq, nd](Tensor::Node& self) {
            if (!pn->requires_grad) return;
            pn->ensure_grad();
            for (long i = 0; i < tq; ++i) {
                for (long j = 0; j < n_keys; ++j) {
                    const long d = q_offset + i - j;
                    if (d >= 0 && d < nd) {
                        pn->grad[size_t(i * nd + d)] += self.grad[size_t(i * n_keys + j)];
                    }
                }
            }
        });
}

}  // namespace ctt
