#include "explora/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

namespace explora {
namespace ops {

namespace {

template <class F> void dispatch(DType dt, F&& f) {
    if (dt == DType::f32)
        f(float{});
    else
        f(double{});
}

void check_finite(const char* op, const Tensor& t, const char* arg) {
    if (!t.all_finite())
        throw NumericError(std::string(op) + ": non-finite values in input '" + arg + "'");
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                            dtype_name(b.dtype()) + ")");
}

// C[M,N] += op(A)[M,K] * op(B)[K,N]; A stored [K,M] when trans_a, B stored [N,K] when trans_b.
template <class T>
void gemm(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
    if (!trans_a && !trans_b) {
        for (int64_t i = 0; i < M; ++i) {
            T* crow = C + i * N;
            for (int64_t p = 0; p < K; ++p) {
                const T av = A[i * K + p];
                const T* brow = B + p * N;
                for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (int64_t i = 0; i < M; ++i) {
            const T* arow = A + i * K;
            T* crow = C + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const T* brow = B + j * K;
                T acc = 0;
                for (int64_t p = 0; p < K; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        for (int64_t p = 0; p < K; ++p) {
            const T* arow = A + p * M;
            const T* brow = B + p * N;
            for (int64_t i = 0; i < M; ++i) {
                const T av = arow[i];
                T* crow = C + i * N;
                for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int64_t i = 0; i < M; ++i) {
            T* crow = C + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const T* brow = B + j * K;
                T acc = 0;
                for (int64_t p = 0; p < K; ++p) acc += A[p * M + i] * brow[p];
                crow[j] += acc;
            }
        }
    }
}

struct BcastPlan {
    Shape out_shape;
    std::vector<int64_t> a_stride, b_stride;  // per out dim; 0 on broadcast dims
    int64_t n = 0;
    int rank = 0;
};

std::vector<int64_t> natural_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

BcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
    BcastPlan p;
    p.rank = static_cast<int>(std::max(a.size(), b.size()));
    p.out_shape.assign(static_cast<size_t>(p.rank), 1);
    const auto sa = natural_strides(a);
    const auto sb = natural_strides(b);
    p.a_stride.assign(static_cast<size_t>(p.rank), 0);
    p.b_stride.assign(static_cast<size_t>(p.rank), 0);
    for (int i = 0; i < p.rank; ++i) {
        const int ia = static_cast<int>(a.size()) - p.rank + i;
        const int ib = static_cast<int>(b.size()) - p.rank + i;
        const int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
        const int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        p.out_shape[static_cast<size_t>(i)] = std::max(da, db);
        if (ia >= 0 && da != 1) p.a_stride[static_cast<size_t>(i)] = sa[static_cast<size_t>(ia)];
        if (ib >= 0 && db != 1) p.b_stride[static_cast<size_t>(i)] = sb[static_cast<size_t>(ib)];
    }
    p.n = shape_numel(p.out_shape);
    return p;
}

// Visit every output position with the mapped flat offsets into a and b.
template <class F> void bcast_loop(const BcastPlan& p, F&& f) {
    std::vector<int64_t> idx(static_cast<size_t>(p.rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t o = 0; o < p.n; ++o) {
        f(o, oa, ob);
        for (int d = p.rank - 1; d >= 0; --d) {
            const size_t du = static_cast<size_t>(d);
            ++idx[du];
            oa += p.a_stride[du];
            ob += p.b_stride[du];
            if (idx[du] < p.out_shape[du]) break;
            oa -= p.a_stride[du] * p.out_shape[du];
            ob -= p.b_stride[du] * p.out_shape[du];
            idx[du] = 0;
        }
    }
}

enum class BinKind { add, sub, mul, divide };

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, BinKind kind) {
    check_same_dtype(name, a, b);
    check_finite(name, a, "lhs");
    check_finite(name, b, "rhs");
    BcastPlan plan = plan_broadcast(name, a.shape(), b.shape());
    Tensor out = make_tensor(plan.out_shape, a.dtype());
    const bool same = a.shape() == b.shape();
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto po = out.data<T>();
        auto apply = [kind](T x, T y) -> T {
            switch (kind) {
                case BinKind::add: return x + y;
                case BinKind::sub: return x - y;
                case BinKind::mul: return x * y;
                case BinKind::divide: return x / y;
            }
            return 0;
        };
        if (same) {
            for (int64_t i = 0; i < plan.n; ++i)
                po[static_cast<size_t>(i)] = apply(pa[static_cast<size_t>(i)], pb[static_cast<size_t>(i)]);
        } else {
            bcast_loop(plan, [&](int64_t o, int64_t oa, int64_t ob) {
                po[static_cast<size_t>(o)] = apply(pa[static_cast<size_t>(oa)], pb[static_cast<size_t>(ob)]);
            });
        }
    });
    if (kind == BinKind::divide) check_finite(name, out, "result");
    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc, plan, kind]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                const bool need_a = ac.requires_grad();
                const bool need_b = bc.requires_grad();
                auto pa = ac.data<T>();
                auto pb = bc.data<T>();
                std::span<T> ga, gb;
                if (need_a) ga = ac.grad<T>();
                if (need_b) gb = bc.grad<T>();
                bcast_loop(plan, [&](int64_t o, int64_t oa, int64_t ob) {
                    const T gv = g[static_cast<size_t>(o)];
                    switch (kind) {
                        case BinKind::add:
                            if (need_a) ga[static_cast<size_t>(oa)] += gv;
                            if (need_b) gb[static_cast<size_t>(ob)] += gv;
                            break;
                        case BinKind::sub:
                            if (need_a) ga[static_cast<size_t>(oa)] += gv;
                            if (need_b) gb[static_cast<size_t>(ob)] -= gv;
                            break;
                        case BinKind::mul:
                            if (need_a) ga[static_cast<size_t>(oa)] += gv * pb[static_cast<size_t>(ob)];
                            if (need_b) gb[static_cast<size_t>(ob)] += gv * pa[static_cast<size_t>(oa)];
                            break;
                        case BinKind::divide: {
                            const T bv = pb[static_cast<size_t>(ob)];
                            if (need_a) ga[static_cast<size_t>(oa)] += gv / bv;
                            if (need_b)
                                gb[static_cast<size_t>(ob)] -= gv * pa[static_cast<size_t>(oa)] / (bv * bv);
                            break;
                        }
                    }
                });
            });
        });
    }
    return out;
}

// generic elementwise unary with value/derivative callables per dtype
template <class FwdF, class BwdF>
Tensor unary_op(const char* name, const Tensor& x, FwdF&& fwd, BwdF&& dfdx_from_xy) {
    check_finite(name, x, "x");
    Tensor out = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        const int64_t n = x.numel();
        for (int64_t i = 0; i < n; ++i)
            po[static_cast<size_t>(i)] = static_cast<T>(fwd(static_cast<double>(px[static_cast<size_t>(i)])));
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        auto deriv = dfdx_from_xy;
        Tape::active()->record([xc, oc, deriv]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto px = xc.data<T>();
                auto py = oc.data<T>();
                auto gx = xc.grad<T>();
                const int64_t n = xc.numel();
                for (int64_t i = 0; i < n; ++i) {
                    const size_t u = static_cast<size_t>(i);
                    gx[u] += g[u] * static_cast<T>(deriv(static_cast<double>(px[u]), static_cast<double>(py[u])));
                }
            });
        });
    }
    return out;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    check_same_dtype("matmul", a, b);
    check_finite("matmul", a, "a");
    check_finite("matmul", b, "b");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_tensor({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        gemm<T>(false, false, m, n, k, a.data<T>().data(), b.data<T>().data(), out.data<T>().data());
    });
    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc, m, n, k]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                if (ac.requires_grad())
                    gemm<T>(false, true, m, k, n, g.data(), bc.data<T>().data(), ac.grad<T>().data());
                if (bc.requires_grad())
                    gemm<T>(true, false, k, n, m, ac.data<T>().data(), g.data(), bc.grad<T>().data());
            });
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.rank() != 3 || b.rank() != 3)
        throw ShapeError("bmm: expected rank-3 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(0) != b.dim(0)) throw ShapeError("bmm: batch dims differ");
    check_same_dtype("bmm", a, b);
    check_finite("bmm", a, "a");
    check_finite("bmm", b, "b");
    const int64_t g = a.dim(0);
    const int64_t m = trans_a ? a.dim(2) : a.dim(1);
    const int64_t k = trans_a ? a.dim(1) : a.dim(2);
    const int64_t kb = trans_b ? b.dim(2) : b.dim(1);
    const int64_t n = trans_b ? b.dim(1) : b.dim(2);
    if (k != kb)
        throw ShapeError("bmm: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = make_tensor({g, m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* po = out.data<T>().data();
        for (int64_t i = 0; i < g; ++i)
            gemm<T>(trans_a, trans_b, m, n, k, pa + i * m * k, pb + i * k * n, po + i * m * n);
    });
    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc, g, m, n, k, trans_a, trans_b]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto gspan = std::as_const(oc).grad<T>();
                const bool need_a = ac.requires_grad();
                const bool need_b = bc.requires_grad();
                const T* pa = ac.data<T>().data();
                const T* pb = bc.data<T>().data();
                T* ga = need_a ? ac.grad<T>().data() : nullptr;
                T* gb = need_b ? bc.grad<T>().data() : nullptr;
                for (int64_t i = 0; i < g; ++i) {
                    const T* G = gspan.data() + i * m * n;
                    const T* A = pa + i * m * k;
                    const T* B = pb + i * k * n;
                    if (need_a) {
                        T* dA = ga + i * m * k;
                        if (!trans_a && !trans_b) gemm<T>(false, true, m, k, n, G, B, dA);
                        else if (!trans_a && trans_b) gemm<T>(false, false, m, k, n, G, B, dA);
                        else if (trans_a && !trans_b) gemm<T>(false, true, k, m, n, B, G, dA);
                        else gemm<T>(true, true, k, m, n, B, G, dA);
                    }
                    if (need_b) {
                        T* dB = gb + i * k * n;
                        if (!trans_a && !trans_b) gemm<T>(true, false, k, n, m, A, G, dB);
                        else if (!trans_a && trans_b) gemm<T>(true, false, n, k, m, G, A, dB);
                        else if (trans_a && !trans_b) gemm<T>(false, false, k, n, m, A, G, dB);
                        else gemm<T>(true, true, n, k, m, G, A, dB);
                    }
                }
            });
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", a, b, BinKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", a, b, BinKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", a, b, BinKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", a, b, BinKind::divide); }

Tensor scale(const Tensor& a, double s) {
    return unary_op("scale", a, [s](double x) { return s * x; },
                    [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op("add_scalar", a, [s](double x) { return x + s; },
                    [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op("gelu", x,
                    [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
                    [](double v, double) {
                        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                        return cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
                    });
}

Tensor exp(const Tensor& x) {
    return unary_op("exp", x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op("log", x, [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op("sqrt", x, [](double v) { return std::sqrt(v); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor clamp_min(const Tensor& x, double v) {
    return unary_op("clamp_min", x, [v](double a) { return a < v ? v : a; },
                    [v](double a, double) { return a > v ? 1.0 : 0.0; });
}

namespace {

// rows-by-d view of the last axis
std::pair<int64_t, int64_t> last_axis_view(const char* op, const Tensor& x) {
    if (x.rank() < 1) throw ShapeError(std::string(op) + ": rank must be >= 1");
    const int64_t d = x.dim(-1);
    if (d == 0) throw ShapeError(std::string(op) + ": empty last axis");
    return {x.numel() / d, d};
}

} // namespace

Tensor softmax(const Tensor& x) {
    check_finite("softmax", x, "x");
    auto [rows, d] = last_axis_view("softmax", x);
    Tensor out = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* in = px.data() + r * d;
            T* o = po.data() + r * d;
            T mx = in[0];
            for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
            T sum = 0;
            for (int64_t j = 0; j < d; ++j) {
                o[j] = std::exp(in[j] - mx);
                sum += o[j];
            }
            const T inv = T(1) / sum;
            for (int64_t j = 0; j < d; ++j) o[j] *= inv;
        }
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, rows = rows, d = d]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto y = oc.data<T>();
                auto gx = xc.grad<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * d;
                    const T* yr = y.data() + r * d;
                    T* gxr = gx.data() + r * d;
                    T dot = 0;
                    for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                    for (int64_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                }
            });
        });
    }
    return out;
}

Tensor log_softmax(const Tensor& x) {
    check_finite("log_softmax", x, "x");
    auto [rows, d] = last_axis_view("log_softmax", x);
    Tensor out = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* in = px.data() + r * d;
            T* o = po.data() + r * d;
            T mx = in[0];
            for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
            T sum = 0;
            for (int64_t j = 0; j < d; ++j) sum += std::exp(in[j] - mx);
            const T lse = mx + std::log(sum);
            for (int64_t j = 0; j < d; ++j) o[j] = in[j] - lse;
        }
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, rows = rows, d = d]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto y = oc.data<T>();
                auto gx = xc.grad<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * d;
                    const T* yr = y.data() + r * d;
                    T* gxr = gx.data() + r * d;
                    T gsum = 0;
                    for (int64_t j = 0; j < d; ++j) gsum += gr[j];
                    for (int64_t j = 0; j < d; ++j) gxr[j] += gr[j] - std::exp(yr[j]) * gsum;
                }
            });
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
    auto [rows, d] = last_axis_view("layer_norm", x);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
    check_same_dtype("layer_norm", x, gamma);
    check_same_dtype("layer_norm", x, beta);
    check_finite("layer_norm", x, "x");
    check_finite("layer_norm", gamma, "gamma");
    check_finite("layer_norm", beta, "beta");
    Tensor out = make_tensor(x.shape(), x.dtype());
    // per-row statistics saved for the backward pass
    auto mean_buf = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto rstd_buf = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto pg = gamma.data<T>();
        auto pb = beta.data<T>();
        auto po = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* in = px.data() + r * d;
            T* o = po.data() + r * d;
            double mu = 0;
            for (int64_t j = 0; j < d; ++j) mu += in[j];
            mu /= static_cast<double>(d);
            double var = 0;
            for (int64_t j = 0; j < d; ++j) {
                const double c = in[j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double rstd = 1.0 / std::sqrt(var + eps);
            (*mean_buf)[static_cast<size_t>(r)] = mu;
            (*rstd_buf)[static_cast<size_t>(r)] = rstd;
            for (int64_t j = 0; j < d; ++j) {
                const double xh = (in[j] - mu) * rstd;
                o[j] = static_cast<T>(xh * static_cast<double>(pg[static_cast<size_t>(j)]) +
                                      static_cast<double>(pb[static_cast<size_t>(j)]));
            }
        }
    });
    if (should_record({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta, oc = out;
        Tape::active()->record([xc, gc, bc, oc, mean_buf, rstd_buf, rows = rows, d = d]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto px = xc.data<T>();
                auto pg = gc.data<T>();
                const bool need_x = xc.requires_grad();
                const bool need_g = gc.requires_grad();
                const bool need_b = bc.requires_grad();
                std::span<T> gx, gg, gb;
                if (need_x) gx = xc.grad<T>();
                if (need_g) gg = gc.grad<T>();
                if (need_b) gb = bc.grad<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* in = px.data() + r * d;
                    const T* gr = g.data() + r * d;
                    const double mu = (*mean_buf)[static_cast<size_t>(r)];
                    const double rstd = (*rstd_buf)[static_cast<size_t>(r)];
                    double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat*xhat)
                    for (int64_t j = 0; j < d; ++j) {
                        const double xh = (in[j] - mu) * rstd;
                        const double dxh = static_cast<double>(gr[j]) * static_cast<double>(pg[static_cast<size_t>(j)]);
                        m1 += dxh;
                        m2 += dxh * xh;
                        if (need_g) gg[static_cast<size_t>(j)] += static_cast<T>(static_cast<double>(gr[j]) * xh);
                        if (need_b) gb[static_cast<size_t>(j)] += gr[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    if (need_x) {
                        T* gxr = gx.data() + r * d;
                        for (int64_t j = 0; j < d; ++j) {
                            const double xh = (in[j] - mu) * rstd;
                            const double dxh =
                                static_cast<double>(gr[j]) * static_cast<double>(pg[static_cast<size_t>(j)]);
                            gxr[j] += static_cast<T>(rstd * (dxh - m1 - xh * m2));
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor out = make_tensor(new_shape, x.dtype());
    std::memcpy(out.bytes().data(), x.bytes().data(), x.bytes().size());
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            });
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
    const int r = x.rank();
    if (static_cast<int>(dims.size()) != r) throw ShapeError("permute: dims size must equal rank");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int d : dims) {
        if (d < 0 || d >= r || seen[static_cast<size_t>(d)])
            throw ShapeError("permute: dims must be a permutation of 0.." + std::to_string(r - 1));
        seen[static_cast<size_t>(d)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(dims[static_cast<size_t>(i)]);
    Tensor out = make_tensor(out_shape, x.dtype());
    const auto in_strides = natural_strides(x.shape());
    // stride of output dim i in the input layout
    std::vector<int64_t> map_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) map_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];
    const int64_t n = x.numel();
    auto copy_perm = [&](auto get, auto put) {
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t src = 0;
        for (int64_t o = 0; o < n; ++o) {
            put(o, get(src));
            for (int d = r - 1; d >= 0; --d) {
                const size_t du = static_cast<size_t>(d);
                ++idx[du];
                src += map_stride[du];
                if (idx[du] < out_shape[du]) break;
                src -= map_stride[du] * out_shape[du];
                idx[du] = 0;
            }
        }
    };
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        copy_perm([&](int64_t s) { return px[static_cast<size_t>(s)]; },
                  [&](int64_t o, T v) { po[static_cast<size_t>(o)] = v; });
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, map_stride, out_shape, r, n]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                std::vector<int64_t> idx(static_cast<size_t>(r), 0);
                int64_t src = 0;
                for (int64_t o = 0; o < n; ++o) {
                    gx[static_cast<size_t>(src)] += g[static_cast<size_t>(o)];
                    for (int d = r - 1; d >= 0; --d) {
                        const size_t du = static_cast<size_t>(d);
                        ++idx[du];
                        src += map_stride[du];
                        if (idx[du] < out_shape[du]) break;
                        src -= map_stride[du] * out_shape[du];
                        idx[du] = 0;
                    }
                }
            });
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: expected rank-2 tensor");
    return permute(x, {1, 0});
}

namespace {

// decompose shape around `axis` into [outer, axis_len, inner]
struct AxisView {
    int64_t outer, len, inner;
};

AxisView axis_view(const char* op, const Shape& shape, int axis) {
    const int r = static_cast<int>(shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range");
    AxisView v{1, shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) v.inner *= shape[static_cast<size_t>(i)];
    return v;
}

int normalize_axis(const char* op, int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
    return axis;
}

} // namespace

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    axis = normalize_axis("slice", axis, x.rank());
    const AxisView v = axis_view("slice", x.shape(), axis);
    if (start < 0 || len < 0 || start + len > v.len)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") exceeds axis length " + std::to_string(v.len));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = make_tensor(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t o = 0; o < v.outer; ++o)
            std::memcpy(po.data() + o * len * v.inner, px.data() + (o * v.len + start) * v.inner,
                        static_cast<size_t>(len * v.inner) * sizeof(T));
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, v, start, len]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                for (int64_t o = 0; o < v.outer; ++o) {
                    const T* gsrc = g.data() + o * len * v.inner;
                    T* gdst = gx.data() + (o * v.len + start) * v.inner;
                    for (int64_t i = 0; i < len * v.inner; ++i) gdst[i] += gsrc[i];
                }
            });
        });
    }
    return out;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& indices) {
    axis = normalize_axis("index_select", axis, x.rank());
    const AxisView v = axis_view("index_select", x.shape(), axis);
    for (int64_t idx : indices)
        if (idx < 0 || idx >= v.len)
            throw ShapeError("index_select: index " + std::to_string(idx) + " out of range [0, " +
                             std::to_string(v.len) + ")");
    const int64_t k = static_cast<int64_t>(indices.size());
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = k;
    Tensor out = make_tensor(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t o = 0; o < v.outer; ++o)
            for (int64_t j = 0; j < k; ++j)
                std::memcpy(po.data() + (o * k + j) * v.inner,
                            px.data() + (o * v.len + indices[static_cast<size_t>(j)]) * v.inner,
                            static_cast<size_t>(v.inner) * sizeof(T));
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, v, indices, k]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                for (int64_t o = 0; o < v.outer; ++o)
                    for (int64_t j = 0; j < k; ++j) {
                        const T* gsrc = g.data() + (o * k + j) * v.inner;
                        T* gdst = gx.data() + (o * v.len + indices[static_cast<size_t>(j)]) * v.inner;
                        for (int64_t i = 0; i < v.inner; ++i) gdst[i] += gsrc[i];
                    }
            });
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no tensors given");
    const int r = parts[0].rank();
    axis = normalize_axis("concat", axis, r);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        check_same_dtype("concat", parts[0], p);
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch at non-concat axis " + std::to_string(i));
        total += p.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = make_tensor(out_shape, parts[0].dtype());
    const AxisView vo = axis_view("concat", out_shape, axis);
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto po = out.data<T>();
        int64_t off = 0;
        for (const Tensor& p : parts) {
            const AxisView vp = axis_view("concat", p.shape(), axis);
            auto pp = p.data<T>();
            for (int64_t o = 0; o < vp.outer; ++o)
                std::memcpy(po.data() + (o * vo.len + off) * vo.inner, pp.data() + o * vp.len * vp.inner,
                            static_cast<size_t>(vp.len * vp.inner) * sizeof(T));
            off += vp.len;
        }
    });
    bool any_grad = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) any_grad = true;
    if (any_grad && grad_enabled() && Tape::active()) {
        out.set_requires_grad(true);
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        Tape::active()->record([pc, oc, vo, axis]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                int64_t off = 0;
                for (Tensor& p : pc) {
                    const AxisView vp = axis_view("concat", p.shape(), axis);
                    if (p.requires_grad()) {
                        auto gp = p.grad<T>();
                        for (int64_t o = 0; o < vp.outer; ++o) {
                            const T* gsrc = g.data() + (o * vo.len + off) * vo.inner;
                            T* gdst = gp.data() + o * vp.len * vp.inner;
                            for (int64_t i = 0; i < vp.len * vp.inner; ++i) gdst[i] += gsrc[i];
                        }
                    }
                    off += vp.len;
                }
            });
        });
    }
    return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("stack: no tensors given");
    std::vector<Tensor> reshaped;
    reshaped.reserve(parts.size());
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        reshaped.push_back(reshape(p, s));
    }
    return concat(reshaped, 0);
}

Tensor expand_leading(const Tensor& x, int64_t n) {
    if (n <= 0) throw ContractError("expand_leading: n must be positive");
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin(), n);
    Tensor out = make_tensor(out_shape, x.dtype());
    const int64_t inner = x.numel();
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t i = 0; i < n; ++i)
            std::memcpy(po.data() + i * inner, px.data(), static_cast<size_t>(inner) * sizeof(T));
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, n, inner]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                for (int64_t i = 0; i < n; ++i) {
                    const T* gr = g.data() + i * inner;
                    for (int64_t j = 0; j < inner; ++j) gx[static_cast<size_t>(j)] += gr[j];
                }
            });
        });
    }
    return out;
}

namespace {

Tensor reduce_all(const char* name, const Tensor& x, bool take_mean) {
    check_finite(name, x, "x");
    const int64_t n = x.numel();
    if (n == 0) throw ShapeError(std::string(name) + ": empty tensor");
    Tensor out = make_tensor({1}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(px[static_cast<size_t>(i)]);
        if (take_mean) acc /= static_cast<double>(n);
        out.data<T>()[0] = static_cast<T>(acc);
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        const double w = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
        Tape::active()->record([xc, oc, w, n]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T gv = std::as_const(oc).grad<T>()[0] * static_cast<T>(w);
                auto gx = xc.grad<T>();
                for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += gv;
            });
        });
    }
    return out;
}

} // namespace

Tensor sum(const Tensor& x) { return reduce_all("sum", x, false); }
Tensor mean(const Tensor& x) { return reduce_all("mean", x, true); }

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
    check_finite("sum_axis", x, "x");
    axis = normalize_axis("sum_axis", axis, x.rank());
    const AxisView v = axis_view("sum_axis", x.shape(), axis);
    Shape out_shape = x.shape();
    if (keepdim)
        out_shape[static_cast<size_t>(axis)] = 1;
    else
        out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (int64_t o = 0; o < v.outer; ++o)
            for (int64_t j = 0; j < v.len; ++j) {
                const T* src = px.data() + (o * v.len + j) * v.inner;
                T* dst = po.data() + o * v.inner;
                for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
            }
    });
    if (should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, v]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = std::as_const(oc).grad<T>();
                auto gx = xc.grad<T>();
                for (int64_t o = 0; o < v.outer; ++o)
                    for (int64_t j = 0; j < v.len; ++j) {
                        const T* gsrc = g.data() + o * v.inner;
                        T* gdst = gx.data() + (o * v.len + j) * v.inner;
                        for (int64_t i = 0; i < v.inner; ++i) gdst[i] += gsrc[i];
                    }
            });
        });
    }
    return out;
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
    axis = normalize_axis("mean_axis", axis, x.rank());
    const int64_t len = x.dim(axis);
    if (len == 0) throw ShapeError("mean_axis: empty axis");
    return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse: shape mismatch, " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    check_same_dtype("mse", pred, target);
    check_finite("mse", pred, "pred");
    check_finite("mse", target, "target");
    const int64_t n = pred.numel();
    Tensor out = make_tensor({1}, pred.dtype());
    dispatch(pred.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pp = pred.data<T>();
        auto pt = target.data<T>();
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double dlt = static_cast<double>(pp[static_cast<size_t>(i)]) -
                               static_cast<double>(pt[static_cast<size_t>(i)]);
            acc += dlt * dlt;
        }
        out.data<T>()[0] = static_cast<T>(acc / static_cast<double>(n));
    });
    if (should_record({&pred, &target})) {
        out.set_requires_grad(true);
        Tensor pc = pred, tc = target, oc = out;
        Tape::active()->record([pc, tc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T gv = std::as_const(oc).grad<T>()[0];
                auto pp = pc.data<T>();
                auto pt = tc.data<T>();
                const T w = static_cast<T>(2.0 / static_cast<double>(n)) * gv;
                const bool need_p = pc.requires_grad();
                const bool need_t = tc.requires_grad();
                std::span<T> gp, gt;
                if (need_p) gp = pc.grad<T>();
                if (need_t) gt = tc.grad<T>();
                for (int64_t i = 0; i < n; ++i) {
                    const size_t u = static_cast<size_t>(i);
                    const T dlt = pp[u] - pt[u];
                    if (need_p) gp[u] += w * dlt;
                    if (need_t) gt[u] -= w * dlt;
                }
            });
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [batch, classes]");
    const int64_t batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != batch)
        throw ShapeError("softmax_cross_entropy: label count mismatch");
    for (int64_t y : labels)
        if (y < 0 || y >= classes)
            throw DataError("softmax_cross_entropy: class index " + std::to_string(y) +
                            " out of range [0, " + std::to_string(classes) + ")");
    check_finite("softmax_cross_entropy", logits, "logits");
    Tensor out = make_tensor({1}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pl = logits.data<T>();
        double acc = 0;
        for (int64_t r = 0; r < batch; ++r) {
            const T* row = pl.data() + r * classes;
            double mx = static_cast<double>(row[0]);
            for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double sum = 0;
            for (int64_t j = 0; j < classes; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
            acc -= static_cast<double>(row[labels[static_cast<size_t>(r)]]) - mx - std::log(sum);
        }
        out.data<T>()[0] = static_cast<T>(acc / static_cast<double>(batch));
    });
    if (should_record({&logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, oc = out;
        Tape::active()->record([lc, oc, labels, batch, classes]() mutable {
            if (!oc.has_grad() || !lc.requires_grad()) return;
            dispatch(oc.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T gv = std::as_const(oc).grad<T>()[0];
                auto pl = lc.data<T>();
                auto gl = lc.grad<T>();
                const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch));
                for (int64_t r = 0; r < batch; ++r) {
                    const T* row = pl.data() + r * classes;
                    T* grow = gl.data() + r * classes;
                    double mx = static_cast<double>(row[0]);
                    for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                    double sum = 0;
                    for (int64_t j = 0; j < classes; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
                    for (int64_t j = 0; j < classes; ++j) {
                        double p = std::exp(static_cast<double>(row[j]) - mx) / sum;
                        if (j == labels[static_cast<size_t>(r)]) p -= 1.0;
                        grow[j] += gv * inv_b * static_cast<T>(p);
                    }
                }
            });
        });
    }
    return out;
}

} // namespace ops
} // namespace explora
