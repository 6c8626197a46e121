#include "stpredict/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stpredict {

namespace detail {

namespace {
constexpr std::size_t kAccBuf = 512;
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
    if (n <= kAccBuf) {
        // accumulate each output row in a local buffer so the inner loop has
        // no aliasing hazards and stays in registers/L1
        T acc[kAccBuf];
        for (std::size_t i = 0; i < m; ++i) {
            const T* __restrict__ arow = a + i * k;
            T* __restrict__ crow = c + i * n;
            if (accumulate) {
                for (std::size_t j = 0; j < n; ++j) acc[j] = crow[j];
            } else {
                std::fill(acc, acc + n, T(0));
            }
            for (std::size_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* __restrict__ brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
            }
            for (std::size_t j = 0; j < n; ++j) crow[j] = acc[j];
        }
        return;
    }
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const T* __restrict__ arow = a + i * k;
        T* __restrict__ crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* __restrict__ brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
        const T* __restrict__ arow = a + p * m;
        const T* __restrict__ brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* __restrict__ crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* __restrict__ arow = a + i * k;
        T* __restrict__ crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T* __restrict__ brow = b + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate) {
                crow[j] += acc;
            } else {
                crow[j] = acc;
            }
        }
    }
}

template void matmul<float>(const float*, const float*, float*, std::size_t,
                            std::size_t, std::size_t, bool);
template void matmul<double>(const double*, const double*, double*, std::size_t,
                             std::size_t, std::size_t, bool);
template void matmul_at_b<float>(const float*, const float*, float*, std::size_t,
                                 std::size_t, std::size_t, bool);
template void matmul_at_b<double>(const double*, const double*, double*,
                                  std::size_t, std::size_t, std::size_t, bool);
template void matmul_a_bt<float>(const float*, const float*, float*, std::size_t,
                                 std::size_t, std::size_t, bool);
template void matmul_a_bt<double>(const double*, const double*, double*,
                                  std::size_t, std::size_t, std::size_t, bool);

namespace {

template <typename T>
std::vector<T>& scratch(int slot) {
    thread_local std::vector<T> buffers[4];
    return buffers[slot];
}

// col[ci*kh*kw + u][oh*w + ow] = x[ci][oh+ki-p][ow+kj-p], zero outside.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, int pad, T* col) {
    const std::size_t hw = h * w;
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci) {
        const T* plane = x + ci * hw;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                T* dst = col + row * hw;
                const long di = static_cast<long>(ki) - pad;
                const long dj = static_cast<long>(kj) - pad;
                for (std::size_t oh = 0; oh < h; ++oh) {
                    const long ih = static_cast<long>(oh) + di;
                    T* drow = dst + oh * w;
                    if (ih < 0 || ih >= static_cast<long>(h)) {
                        std::fill(drow, drow + w, T(0));
                        continue;
                    }
                    const T* srow = plane + ih * w;
                    const long lo = std::max<long>(0, -dj);
                    const long hi = std::min<long>(w, static_cast<long>(w) - dj);
                    if (lo > 0) std::fill(drow, drow + lo, T(0));
                    if (hi > lo) {
                        std::memcpy(drow + lo, srow + lo + dj,
                                    static_cast<std::size_t>(hi - lo) * sizeof(T));
                    }
                    if (hi < static_cast<long>(w)) {
                        std::fill(drow + std::max<long>(hi, 0), drow + w, T(0));
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, std::size_t c, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, int pad, T* x) {
    const std::size_t hw = h * w;
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci) {
        T* plane = x + ci * hw;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                const T* src = col + row * hw;
                const long di = static_cast<long>(ki) - pad;
                const long dj = static_cast<long>(kj) - pad;
                for (std::size_t oh = 0; oh < h; ++oh) {
                    const long ih = static_cast<long>(oh) + di;
                    if (ih < 0 || ih >= static_cast<long>(h)) continue;
                    const T* srow = src + oh * w;
                    T* drow = plane + ih * w;
                    const long lo = std::max<long>(0, -dj);
                    const long hi = std::min<long>(w, static_cast<long>(w) - dj);
                    for (long j = lo; j < hi; ++j) drow[j + dj] += srow[j];
                }
            }
        }
    }
}

template <typename T>
void check_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.dims() != b.dims()) {
        throw ShapeError(std::string(what) + ": shape mismatch " +
                         format_dims(a.dims()) + " vs " + format_dims(b.dims()));
    }
}

}  // namespace
}  // namespace detail

template <typename T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4) {
        throw ShapeError("conv2d expects 4-D input/kernel, got " +
                         format_dims(input.dims()) + " and " +
                         format_dims(kernel.dims()));
    }
    const std::size_t b = input.dim(0), cin = input.dim(1), h = input.dim(2),
                      w = input.dim(3);
    const std::size_t cout = kernel.dim(0), kc = kernel.dim(1),
                      kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != cin) {
        throw ShapeError("conv2d: kernel channels " + format_dims(kernel.dims()) +
                         " do not match input " + format_dims(input.dims()));
    }
    if (kh != kw || padding != static_cast<int>(kh - 1) / 2) {
        throw ShapeError("conv2d: kernel " + format_dims(kernel.dims()) +
                         " with padding " + std::to_string(padding) +
                         " is not extent-preserving");
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("conv2d: bias " + format_dims(bias.dims()) +
                         " does not match Cout " + std::to_string(cout));
    }

    Tensor<T> out({b, cout, h, w});
    const std::size_t hw = h * w;
    const std::size_t krows = cin * kh * kw;
    auto& col = detail::scratch<T>(0);
    col.resize(krows * hw);

    const bool unit = (kh == 1);
    for (std::size_t bi = 0; bi < b; ++bi) {
        const T* x = input.data() + bi * cin * hw;
        if (!unit) detail::im2col(x, cin, h, w, kh, kw, padding, col.data());
        const T* colp = unit ? x : col.data();
        T* o = out.data() + bi * cout * hw;
        detail::matmul(kernel.data(), colp, o, cout, krows, hw, false);
        if (bias.defined()) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const T bv = bias.data()[oc];
                T* row = o + oc * hw;
                for (std::size_t p = 0; p < hw; ++p) row[p] += bv;
            }
        }
    }

    if (g) {
        auto in = input;
        auto k = kernel;
        auto bb = bias;
        auto res = out;
        g->record(out, {in, k, bb}, [in, k, bb, res, b, cin, cout, h, w, kh, kw, padding,
                        hw, krows, unit]() mutable {
            const T* go = res.grad_vec().data();
            auto& colb = detail::scratch<T>(1);
            auto& dcol = detail::scratch<T>(2);
            const bool need_dx = in.tracked();
            const bool need_dk = k.tracked();
            if (need_dx) in.ensure_grad();
            if (need_dk) k.ensure_grad();
            if (need_dx || need_dk) {
                colb.resize(krows * hw);
                dcol.resize(krows * hw);
                for (std::size_t bi = 0; bi < b; ++bi) {
                    const T* gorow = go + bi * cout * hw;
                    if (need_dk) {
                        const T* x = in.data() + bi * cin * hw;
                        const T* colp = x;
                        if (!unit) {
                            detail::im2col(x, cin, h, w, kh, kw, padding,
                                           colb.data());
                            colp = colb.data();
                        }
                        detail::matmul_a_bt(gorow, colp, k.grad(), cout, hw,
                                            krows, true);
                    }
                    if (need_dx) {
                        T* gx = in.grad() + bi * cin * hw;
                        if (unit) {
                            detail::matmul_at_b(k.data(), gorow, gx, cin, cout,
                                                hw, true);
                        } else {
                            detail::matmul_at_b(k.data(), gorow, dcol.data(),
                                                krows, cout, hw, false);
                            detail::col2im_acc(dcol.data(), cin, h, w, kh, kw,
                                               padding, gx);
                        }
                    }
                }
            }
            if (bb.defined() && bb.tracked()) {
                bb.ensure_grad();
                T* gb = bb.grad();
                for (std::size_t bi = 0; bi < b; ++bi) {
                    for (std::size_t oc = 0; oc < cout; ++oc) {
                        const T* row = go + (bi * cout + oc) * hw;
                        T acc = T(0);
                        for (std::size_t p = 0; p < hw; ++p) acc += row[p];
                        gb[oc] += acc;
                    }
                }
            }
        });
    }
    return out;
}

namespace {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_op(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b,
                    const char* name, FwdFn fwd, BwdFn bwd) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.dims() != b.dims()) {
        throw ShapeError(std::string(name) + ": shape mismatch " +
                         format_dims(a.dims()) + " vs " + format_dims(b.dims()));
    }
    const auto& big = (a.numel() >= b.numel()) ? a : b;
    Tensor<T> out(big.dims());
    const std::size_t n = out.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i], po[i]);
    }
    if (g) {
        auto ta = a;
        auto tb = b;
        auto res = out;
        g->record(out, {ta, tb}, [ta, tb, res, n, a_scalar, b_scalar, bwd]() mutable {
            const T* go = res.grad_vec().data();
            const bool need_a = ta.tracked();
            const bool need_b = tb.tracked();
            if (!need_a && !need_b) return;
            T* ga = need_a ? ta.grad() : nullptr;
            T* gb = need_b ? tb.grad() : nullptr;
            const T* pa2 = ta.data();
            const T* pb2 = tb.data();
            if (need_a && need_b && !a_scalar && !b_scalar) {
                for (std::size_t i = 0; i < n; ++i) {
                    T da = T(0), db = T(0);
                    bwd(pa2[i], pb2[i], go[i], da, db);
                    ga[i] += da;
                    gb[i] += db;
                }
            } else if (need_a && !need_b && !a_scalar && !b_scalar) {
                for (std::size_t i = 0; i < n; ++i) {
                    T da = T(0), db = T(0);
                    bwd(pa2[i], pb2[i], go[i], da, db);
                    ga[i] += da;
                }
            } else if (!need_a && need_b && !a_scalar && !b_scalar) {
                for (std::size_t i = 0; i < n; ++i) {
                    T da = T(0), db = T(0);
                    bwd(pa2[i], pb2[i], go[i], da, db);
                    gb[i] += db;
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    T da = T(0), db = T(0);
                    bwd(pa2[a_scalar ? 0 : i], pb2[b_scalar ? 0 : i], go[i], da, db);
                    if (need_a) ga[a_scalar ? 0 : i] += da;
                    if (need_b) gb[b_scalar ? 0 : i] += db;
                }
            }
        });
    }
    return out;
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(Graph<T>* g, const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
    Tensor<T> out(a.dims());
    const std::size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    if (g) {
        auto ta = a;
        auto res = out;
        g->record(out, {ta}, [ta, res, n, bwd]() mutable {
            if (!ta.tracked()) return;
            const T* go = res.grad_vec().data();
            const T* y = res.data();
            const T* x = ta.data();
            T* ga = ta.grad();
            for (std::size_t i = 0; i < n; ++i) ga[i] += bwd(x[i], y[i]) * go[i];
        });
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        g, a, b, "add", [](T x, T y, T& o) { o = x + y; },
        [](T, T, T go, T& da, T& db) {
            da = go;
            db = go;
        });
}

template <typename T>
Tensor<T> sub(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        g, a, b, "sub", [](T x, T y, T& o) { o = x - y; },
        [](T, T, T go, T& da, T& db) {
            da = go;
            db = -go;
        });
}

template <typename T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        g, a, b, "mul", [](T x, T y, T& o) { o = x * y; },
        [](T x, T y, T go, T& da, T& db) {
            da = go * y;
            db = go * x;
        });
}

template <typename T>
Tensor<T> scale(Graph<T>* g, const Tensor<T>& a, T s) {
    return unary_op(
        g, a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sub_from_scalar(Graph<T>* g, T s, const Tensor<T>& a) {
    return unary_op(
        g, a, [s](T x) { return s - x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> sigmoid(Graph<T>* g, const Tensor<T>& a) {
    return unary_op(
        g, a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_act(Graph<T>* g, const Tensor<T>& a) {
    return unary_op(
        g, a, [](T x) { return std::tanh(x); },
        [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> spatial_pool(Graph<T>* g, const Tensor<T>& x, PoolKind kind) {
    if (x.ndim() != 4) {
        throw ShapeError("spatial_pool expects [B,C,H,W], got " +
                         format_dims(x.dims()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (hw == 0) throw ShapeError("spatial_pool: empty spatial axis");
    Tensor<T> out({b, c});
    std::vector<std::size_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(b * c);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < b * c; ++i) {
        const T* plane = px + i * hw;
        if (kind == PoolKind::Avg) {
            T acc = T(0);
            for (std::size_t p = 0; p < hw; ++p) acc += plane[p];
            po[i] = acc / static_cast<T>(hw);
        } else {
            std::size_t best = 0;
            for (std::size_t p = 1; p < hw; ++p) {
                if (plane[p] > plane[best]) best = p;
            }
            po[i] = plane[best];
            argmax[i] = best;
        }
    }
    if (g) {
        auto tx = x;
        auto res = out;
        g->record(out, {tx}, [tx, res, b, c, hw, kind, argmax = std::move(argmax)]() mutable {
            if (!tx.tracked()) return;
            const T* go = res.grad_vec().data();
            T* gx = tx.grad();
            for (std::size_t i = 0; i < b * c; ++i) {
                if (kind == PoolKind::Avg) {
                    const T v = go[i] / static_cast<T>(hw);
                    T* plane = gx + i * hw;
                    for (std::size_t p = 0; p < hw; ++p) plane[p] += v;
                } else {
                    gx[i * hw + argmax[i]] += go[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> channel_pool(Graph<T>* g, const Tensor<T>& x, PoolKind kind) {
    if (x.ndim() != 4) {
        throw ShapeError("channel_pool expects [B,C,H,W], got " +
                         format_dims(x.dims()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c == 0) throw ShapeError("channel_pool: empty channel axis");
    const std::size_t hw = h * w;
    Tensor<T> out({b, 1, h, w});
    std::vector<std::size_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(b * hw);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        const T* base = px + bi * c * hw;
        T* orow = po + bi * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            if (kind == PoolKind::Avg) {
                T acc = T(0);
                for (std::size_t ci = 0; ci < c; ++ci) acc += base[ci * hw + p];
                orow[p] = acc / static_cast<T>(c);
            } else {
                std::size_t best = 0;
                for (std::size_t ci = 1; ci < c; ++ci) {
                    if (base[ci * hw + p] > base[best * hw + p]) best = ci;
                }
                orow[p] = base[best * hw + p];
                argmax[bi * hw + p] = best;
            }
        }
    }
    if (g) {
        auto tx = x;
        auto res = out;
        g->record(out, {tx}, [tx, res, b, c, hw, kind, argmax = std::move(argmax)]() mutable {
            if (!tx.tracked()) return;
            const T* go = res.grad_vec().data();
            T* gx = tx.grad();
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* grow = go + bi * hw;
                T* base = gx + bi * c * hw;
                for (std::size_t p = 0; p < hw; ++p) {
                    if (kind == PoolKind::Avg) {
                        const T v = grow[p] / static_cast<T>(c);
                        for (std::size_t ci = 0; ci < c; ++ci) base[ci * hw + p] += v;
                    } else {
                        base[argmax[bi * hw + p] * hw + p] += grow[p];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> affine(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
    if (input.ndim() != 2 || weight.ndim() != 2 || input.dim(1) != weight.dim(1)) {
        throw ShapeError("affine: shape mismatch " + format_dims(input.dims()) +
                         " vs weight " + format_dims(weight.dims()));
    }
    const std::size_t b = input.dim(0), c = input.dim(1), co = weight.dim(0);
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != co)) {
        throw ShapeError("affine: bias " + format_dims(bias.dims()) +
                         " does not match Cout " + std::to_string(co));
    }
    Tensor<T> out({b, co});
    detail::matmul_a_bt(input.data(), weight.data(), out.data(), b, c, co, false);
    if (bias.defined()) {
        T* po = out.data();
        for (std::size_t bi = 0; bi < b; ++bi) {
            for (std::size_t j = 0; j < co; ++j) po[bi * co + j] += bias.data()[j];
        }
    }
    if (g) {
        auto tin = input;
        auto tw = weight;
        auto tb = bias;
        auto res = out;
        g->record(out, {tin, tw, tb}, [tin, tw, tb, res, b, c, co]() mutable {
            const T* go = res.grad_vec().data();
            if (tin.tracked()) {
                detail::matmul(go, tw.data(), tin.grad(), b, co, c, true);
            }
            if (tw.tracked()) {
                detail::matmul_at_b(go, tin.data(), tw.grad(), co, b, c, true);
            }
            if (tb.defined() && tb.tracked()) {
                T* gb = tb.grad();
                for (std::size_t bi = 0; bi < b; ++bi) {
                    for (std::size_t j = 0; j < co; ++j) gb[j] += go[bi * co + j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> channel_mul(Graph<T>* g, const Tensor<T>& coef, const Tensor<T>& x) {
    if (x.ndim() != 4 || coef.ndim() != 2 || coef.dim(0) != x.dim(0) ||
        coef.dim(1) != x.dim(1)) {
        throw ShapeError("channel_mul: coef " + format_dims(coef.dims()) +
                         " does not match " + format_dims(x.dims()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(x.dims());
    const T* pc = coef.data();
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < b * c; ++i) {
        const T v = pc[i];
        for (std::size_t p = 0; p < hw; ++p) po[i * hw + p] = v * px[i * hw + p];
    }
    if (g) {
        auto tc = coef;
        auto tx = x;
        auto res = out;
        g->record(out, {tc, tx}, [tc, tx, res, b, c, hw]() mutable {
            const T* go = res.grad_vec().data();
            if (tx.tracked()) {
                T* gx = tx.grad();
                const T* pc2 = tc.data();
                for (std::size_t i = 0; i < b * c; ++i) {
                    const T v = pc2[i];
                    for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += v * go[i * hw + p];
                }
            }
            if (tc.tracked()) {
                T* gc = tc.grad();
                const T* px2 = tx.data();
                for (std::size_t i = 0; i < b * c; ++i) {
                    T acc = T(0);
                    for (std::size_t p = 0; p < hw; ++p) acc += px2[i * hw + p] * go[i * hw + p];
                    gc[i] += acc;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> spatial_mul(Graph<T>* g, const Tensor<T>& mask, const Tensor<T>& x) {
    if (x.ndim() != 4 || mask.ndim() != 4 || mask.dim(0) != x.dim(0) ||
        mask.dim(1) != 1 || mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3)) {
        throw ShapeError("spatial_mul: mask " + format_dims(mask.dims()) +
                         " does not match " + format_dims(x.dims()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(x.dims());
    const T* pm = mask.data();
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        const T* mrow = pm + bi * hw;
        for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t off = (bi * c + ci) * hw;
            for (std::size_t p = 0; p < hw; ++p) po[off + p] = mrow[p] * px[off + p];
        }
    }
    if (g) {
        auto tm = mask;
        auto tx = x;
        auto res = out;
        g->record(out, {tm, tx}, [tm, tx, res, b, c, hw]() mutable {
            const T* go = res.grad_vec().data();
            if (tx.tracked()) {
                T* gx = tx.grad();
                const T* pm2 = tm.data();
                for (std::size_t bi = 0; bi < b; ++bi) {
                    const T* mrow = pm2 + bi * hw;
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const std::size_t off = (bi * c + ci) * hw;
                        for (std::size_t p = 0; p < hw; ++p) gx[off + p] += mrow[p] * go[off + p];
                    }
                }
            }
            if (tm.tracked()) {
                T* gm = tm.grad();
                const T* px2 = tx.data();
                for (std::size_t bi = 0; bi < b; ++bi) {
                    T* mrow = gm + bi * hw;
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const std::size_t off = (bi * c + ci) * hw;
                        for (std::size_t p = 0; p < hw; ++p) mrow[p] += px2[off + p] * go[off + p];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(Graph<T>* g, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const std::size_t b = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    std::size_t ctotal = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 4 || p.dim(0) != b || p.dim(2) != h || p.dim(3) != w) {
            throw ShapeError("concat_channels: incompatible part " +
                             format_dims(p.dims()) + " vs " +
                             format_dims(parts[0].dims()));
        }
        ctotal += p.dim(1);
    }
    const std::size_t hw = h * w;
    Tensor<T> out({b, ctotal, h, w});
    T* po = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        std::size_t coff = 0;
        for (const auto& p : parts) {
            const std::size_t pc = p.dim(1);
            std::memcpy(po + (bi * ctotal + coff) * hw,
                        p.data() + bi * pc * hw, pc * hw * sizeof(T));
            coff += pc;
        }
    }
    if (g) {
        auto ps = parts;
        auto res = out;
        g->record(out, ps, [ps, res, b, ctotal, hw]() mutable {
            const T* go = res.grad_vec().data();
            std::size_t coff = 0;
            for (auto& p : ps) {
                const std::size_t pc = p.dim(1);
                if (p.tracked()) {
                    T* gp = p.grad();
                    for (std::size_t bi = 0; bi < b; ++bi) {
                        const T* src = go + (bi * ctotal + coff) * hw;
                        T* dst = gp + bi * pc * hw;
                        for (std::size_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
                    }
                }
                coff += pc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> narrow_channels(Graph<T>* g, const Tensor<T>& x, std::size_t start,
                          std::size_t count) {
    if (x.ndim() != 4 || start + count > x.dim(1)) {
        throw ShapeError("narrow_channels: [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " +
                         format_dims(x.dims()));
    }
    const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({b, count, x.dim(2), x.dim(3)});
    T* po = out.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
        std::memcpy(po + bi * count * hw, x.data() + (bi * c + start) * hw,
                    count * hw * sizeof(T));
    }
    if (g) {
        auto tx = x;
        auto res = out;
        g->record(out, {tx}, [tx, res, b, c, hw, start, count]() mutable {
            if (!tx.tracked()) return;
            const T* go = res.grad_vec().data();
            T* gx = tx.grad();
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* src = go + bi * count * hw;
                T* dst = gx + (bi * c + start) * hw;
                for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& x) {
    Tensor<T> out({1});
    T acc = T(0);
    const T* px = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.data()[0] = acc;
    if (g) {
        auto tx = x;
        auto res = out;
        g->record(out, {tx}, [tx, res]() mutable {
            if (!tx.tracked()) return;
            const T go = res.grad_vec()[0];
            T* gx = tx.grad();
            for (std::size_t i = 0; i < tx.numel(); ++i) gx[i] += go;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mse_mean(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_dims(a, b, "mse_mean");
    const std::size_t n = a.numel();
    Tensor<T> out({1});
    const T* pa = a.data();
    const T* pb = b.data();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = pa[i] - pb[i];
        acc += d * d;
    }
    out.data()[0] = acc / static_cast<T>(n);
    if (g) {
        auto ta = a;
        auto tb = b;
        auto res = out;
        g->record(out, {ta, tb}, [ta, tb, res, n]() mutable {
            const T go = res.grad_vec()[0];
            const T k = T(2) * go / static_cast<T>(n);
            const T* pa2 = ta.data();
            const T* pb2 = tb.data();
            const bool need_a = ta.tracked();
            const bool need_b = tb.tracked();
            if (!need_a && !need_b) return;
            T* ga = need_a ? ta.grad() : nullptr;
            T* gb = need_b ? tb.grad() : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                const T d = k * (pa2[i] - pb2[i]);
                if (need_a) ga[i] += d;
                if (need_b) gb[i] -= d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> rowwise_weighted_mse(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b,
                               const std::vector<T>& row_weights) {
    detail::check_same_dims(a, b, "rowwise_weighted_mse");
    const std::size_t rows = a.dim(0);
    if (row_weights.size() != rows) {
        throw ShapeError("rowwise_weighted_mse: " + std::to_string(row_weights.size()) +
                         " weights for " + std::to_string(rows) + " rows");
    }
    const std::size_t chunk = a.numel() / rows;
    Tensor<T> out({1});
    const T* pa = a.data();
    const T* pb = b.data();
    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        T row_acc = T(0);
        for (std::size_t i = 0; i < chunk; ++i) {
            const T d = pa[r * chunk + i] - pb[r * chunk + i];
            row_acc += d * d;
        }
        acc += row_weights[r] * row_acc / static_cast<T>(chunk);
    }
    out.data()[0] = acc;
    if (g) {
        auto ta = a;
        auto tb = b;
        auto res = out;
        auto w = row_weights;
        g->record(out, {ta, tb}, [ta, tb, res, w, rows, chunk]() mutable {
            const T go = res.grad_vec()[0];
            const bool need_a = ta.tracked();
            const bool need_b = tb.tracked();
            if (!need_a && !need_b) return;
            T* ga = need_a ? ta.grad() : nullptr;
            T* gb = need_b ? tb.grad() : nullptr;
            const T* pa2 = ta.data();
            const T* pb2 = tb.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T k = T(2) * go * w[r] / static_cast<T>(chunk);
                for (std::size_t i = 0; i < chunk; ++i) {
                    const T d = k * (pa2[r * chunk + i] - pb2[r * chunk + i]);
                    if (need_a) ga[r * chunk + i] += d;
                    if (need_b) gb[r * chunk + i] -= d;
                }
            }
        });
    }
    return out;
}

#define STPREDICT_INSTANTIATE_OPS(T)                                            \
    template Tensor<T> conv2d<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&, \
                                 const Tensor<T>&, int);                        \
    template Tensor<T> add<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&);   \
    template Tensor<T> sub<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&);   \
    template Tensor<T> mul<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&);   \
    template Tensor<T> scale<T>(Graph<T>*, const Tensor<T>&, T);                \
    template Tensor<T> sub_from_scalar<T>(Graph<T>*, T, const Tensor<T>&);      \
    template Tensor<T> sigmoid<T>(Graph<T>*, const Tensor<T>&);                 \
    template Tensor<T> tanh_act<T>(Graph<T>*, const Tensor<T>&);                \
    template Tensor<T> spatial_pool<T>(Graph<T>*, const Tensor<T>&, PoolKind);  \
    template Tensor<T> channel_pool<T>(Graph<T>*, const Tensor<T>&, PoolKind);  \
    template Tensor<T> affine<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&, \
                                 const Tensor<T>&);                             \
    template Tensor<T> channel_mul<T>(Graph<T>*, const Tensor<T>&,              \
                                      const Tensor<T>&);                        \
    template Tensor<T> spatial_mul<T>(Graph<T>*, const Tensor<T>&,              \
                                      const Tensor<T>&);                        \
    template Tensor<T> concat_channels<T>(Graph<T>*,                            \
                                          const std::vector<Tensor<T>>&);       \
    template Tensor<T> narrow_channels<T>(Graph<T>*, const Tensor<T>&,          \
                                          std::size_t, std::size_t);            \
    template Tensor<T> sum_all<T>(Graph<T>*, const Tensor<T>&);                 \
    template Tensor<T> mse_mean<T>(Graph<T>*, const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> rowwise_weighted_mse<T>(Graph<T>*, const Tensor<T>&,     \
                                               const Tensor<T>&,                \
                                               const std::vector<T>&);

STPREDICT_INSTANTIATE_OPS(float)
STPREDICT_INSTANTIATE_OPS(double)

#undef STPREDICT_INSTANTIATE_OPS

}  // namespace stpredict
