#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pfm/rng.hpp"
#include "pfm/tape.hpp"
#include "pfm/tensor.hpp"

namespace pfm {

// ---------------------------------------------------------------------------
// broadcasting helpers (NumPy-style trailing alignment)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) {
        i64 da = d - (r - ra) >= 0 ? a[d - (r - ra)] : 1;
        i64 db = d - (r - rb) >= 0 ? b[d - (r - rb)] : 1;
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument("shape mismatch: cannot broadcast " + shape_str(a) +
                                        " with " + shape_str(b));
        }
        out[d] = std::max(da, db);
    }
    return out;
}

/// Strides that read `src` as if broadcast to `out` (0 on expanded axes).
inline Shape bcast_strides(const Shape& src, const Shape& out) {
    const int rs = static_cast<int>(src.size());
    const int ro = static_cast<int>(out.size());
    Shape ss = row_major_strides(src);
    Shape eff(static_cast<std::size_t>(ro), 0);
    for (int d = 0; d < ro; ++d) {
        int ds = d - (ro - rs);
        if (ds < 0) continue;
        if (src[ds] == 1 && out[d] != 1) continue;
        if (src[ds] != out[d]) {
            throw std::invalid_argument("shape mismatch: cannot broadcast " + shape_str(src) +
                                        " into " + shape_str(out));
        }
        eff[d] = ss[ds];
    }
    return eff;
}

/// Row-major odometer over `shape` maintaining K strided offsets.
/// The implicit row-major linear index is the loop counter at the call site.
template <int K>
struct NdCounter {
    static constexpr int kMaxRank = 8;

    int rank = 0;
    const i64* shape = nullptr;
    std::array<const i64*, K> strides{};
    i64 idx[kMaxRank] = {0};
    std::array<i64, K> off{};

    explicit NdCounter(const Shape& s) : rank(static_cast<int>(s.size())), shape(s.data()) {
        if (rank > kMaxRank) throw std::logic_error("tensor rank exceeds iteration limit");
    }

    void set(int k, const Shape& stride_vec) { strides[k] = stride_vec.data(); }

    void next() {
        for (int d = rank - 1; d >= 0; --d) {
            ++idx[d];
            for (int k = 0; k < K; ++k) off[k] += strides[k][d];
            if (idx[d] < shape[d]) return;
            for (int k = 0; k < K; ++k) off[k] -= shape[d] * strides[k][d];
            idx[d] = 0;
        }
    }
};

/// dst (broadcastable to src's shape) += src, summing over broadcast axes.
template <typename T>
void add_reduced(const Tensor<T>& src, Tensor<T>& dst) {
    if (src.shape() == dst.shape()) {
        T* d = dst.data();
        const T* s = src.data();
        for (i64 i = 0; i < src.size(); ++i) d[i] += s[i];
        return;
    }
    NdCounter<1> it(src.shape());
    Shape eff = bcast_strides(dst.shape(), src.shape());
    it.set(0, eff);
    T* d = dst.data();
    const T* s = src.data();
    for (i64 c = 0; c < src.size(); ++c, it.next()) d[it.off[0]] += s[c];
}

// ---------------------------------------------------------------------------
// GEMM: C (M,N) = op(A) * op(B), row-major, optional accumulate
// ---------------------------------------------------------------------------

template <typename T>
void transpose_copy(const T* src, i64 rows, i64 cols, std::vector<T>& dst) {
    dst.resize(static_cast<std::size_t>(rows * cols));
    for (i64 r = 0; r < rows; ++r)
        for (i64 c = 0; c < cols; ++c) dst[static_cast<std::size_t>(c * rows + r)] = src[r * cols + c];
}

template <typename T>
void gemm(bool ta, bool tb, i64 M, i64 N, i64 K, const T* a, const T* b, T* c,
          bool accumulate = false) {
    std::vector<T> packed_a, packed_b;
    if (ta) {
        transpose_copy(a, K, M, packed_a);  // stored (K,M) -> (M,K)
        a = packed_a.data();
    }
    if (tb) {
        transpose_copy(b, N, K, packed_b);  // stored (N,K) -> (K,N)
        b = packed_b.data();
    }
    if (!accumulate) std::memset(c, 0, static_cast<std::size_t>(M * N) * sizeof(T));
    for (i64 i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (i64 k = 0; k < K; ++k) {
            const T aik = arow[k];
            if (aik == T(0)) continue;
            const T* brow = b + k * N;
            for (i64 j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw std::invalid_argument("variables live on different tapes");
}

enum class BinKind { Add, Sub, Mul, Div, Max };

}  // namespace detail

// Every op records a closure capturing its own (future) node id, which equals
// tape.size() just before record() pushes the node.

template <typename T>
Var<T> make_binary(Var<T> a, Var<T> b, detail::BinKind kind, const char* name) {
    detail::check_same_tape(a, b);
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Shape os = broadcast_shape(av.shape(), bv.shape());
    Tensor<T> out(os);
    const T* pa = av.data();
    const T* pb = bv.data();
    T* po = out.data();
    const bool plain = av.shape() == os && bv.shape() == os;
    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case detail::BinKind::Add: return x + y;
            case detail::BinKind::Sub: return x - y;
            case detail::BinKind::Mul: return x * y;
            case detail::BinKind::Div: return x / y;
            case detail::BinKind::Max: return x >= y ? x : y;
        }
        return T(0);
    };
    if (plain) {
        for (i64 i = 0; i < out.size(); ++i) po[i] = apply(pa[i], pb[i]);
    } else {
        NdCounter<2> it(os);
        Shape ea = bcast_strides(av.shape(), os);
        Shape eb = bcast_strides(bv.shape(), os);
        it.set(0, ea);
        it.set(1, eb);
        for (i64 c = 0; c < out.size(); ++c, it.next()) po[c] = apply(pa[it.off[0]], pb[it.off[1]]);
    }
    const i64 ia = a.id, ib = b.id;
    const i64 oid = tape.size();
    return tape.record(name, {ia, ib}, std::move(out), [ia, ib, oid, kind](Tape<T>& t) {
        const Tensor<T>& dy = t.node(oid).grad;
        const Tensor<T>& va = t.value(ia);
        const Tensor<T>& vb = t.value(ib);
        const Shape& os2 = t.value(oid).shape();
        const bool need_a = t.node(ia).needs_grad;
        const bool need_b = t.node(ib).needs_grad;
        const T* pdy = dy.data();
        const T* qa = va.data();
        const T* qb = vb.data();
        T* ga = need_a ? t.grad_buf(ia).data() : nullptr;
        T* gb = need_b ? t.grad_buf(ib).data() : nullptr;
        NdCounter<2> it2(os2);
        Shape ea = bcast_strides(va.shape(), os2);
        Shape eb = bcast_strides(vb.shape(), os2);
        it2.set(0, ea);
        it2.set(1, eb);
        const i64 total = dy.size();
        for (i64 c = 0; c < total; ++c, it2.next()) {
            const i64 offa = it2.off[0];
            const i64 offb = it2.off[1];
            const T g = pdy[c];
            switch (kind) {
                case detail::BinKind::Add:
                    if (ga) ga[offa] += g;
                    if (gb) gb[offb] += g;
                    break;
                case detail::BinKind::Sub:
                    if (ga) ga[offa] += g;
                    if (gb) gb[offb] -= g;
                    break;
                case detail::BinKind::Mul:
                    if (ga) ga[offa] += g * qb[offb];
                    if (gb) gb[offb] += g * qa[offa];
                    break;
                case detail::BinKind::Div: {
                    const T bv2 = qb[offb];
                    if (ga) ga[offa] += g / bv2;
                    if (gb) gb[offb] -= g * qa[offa] / (bv2 * bv2);
                    break;
                }
                case detail::BinKind::Max: {
                    const bool takes_a = qa[offa] >= qb[offb];
                    if (ga && takes_a) ga[offa] += g;
                    if (gb && !takes_a) gb[offb] += g;
                    break;
                }
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return make_binary(a, b, detail::BinKind::Add, "add");
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return make_binary(a, b, detail::BinKind::Sub, "sub");
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return make_binary(a, b, detail::BinKind::Mul, "mul");
}
template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    return make_binary(a, b, detail::BinKind::Div, "div");
}
template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
    return make_binary(a, b, detail::BinKind::Max, "maximum");
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

/// grad_fn(x, y, dy) -> contribution to dx
template <typename T, class FwdF, class BwdF>
Var<T> unary_op(Var<T> a, const char* name, FwdF fwd, BwdF bwd) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    Tensor<T> out(av.shape());
    const T* pa = av.data();
    T* po = out.data();
    for (i64 i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record(name, {ia}, std::move(out), [ia, oid, bwd](Tape<T>& t) {
        if (!t.node(ia).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        const T* px = t.value(ia).data();
        const T* py = t.value(oid).data();
        const T* pdy = dy.data();
        T* gx = t.grad_buf(ia).data();
        for (i64 i = 0; i < dy.size(); ++i) gx[i] += bwd(px[i], py[i], pdy[i]);
    });
}

template <typename T>
void check_nonneg(const Tensor<T>& v, const char* op) {
    const T* p = v.data();
    for (i64 i = 0; i < v.size(); ++i) {
        if (p[i] < T(0)) {
            throw std::domain_error(std::string(op) + " of negative input at element " +
                                    std::to_string(i));
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> neg(Var<T> a) {
    return detail::unary_op(
        a, "neg", [](T x) { return -x; }, [](T, T, T dy) { return -dy; });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
    const T ts = static_cast<T>(s);
    return detail::unary_op(
        a, "scale", [ts](T x) { return x * ts; }, [ts](T, T, T dy) { return dy * ts; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double c) {
    const T tc = static_cast<T>(c);
    return detail::unary_op(
        a, "add_scalar", [tc](T x) { return x + tc; }, [](T, T, T dy) { return dy; });
}

template <typename T>
Var<T> exp(Var<T> a) {
    return detail::unary_op(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y, T dy) { return dy * y; });
}

template <typename T>
Var<T> log(Var<T> a) {
    detail::check_nonneg(a.value(), "log");
    return detail::unary_op(
        a, "log", [](T x) { return std::log(x); }, [](T x, T, T dy) { return dy / x; });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
    detail::check_nonneg(a.value(), "sqrt");
    return detail::unary_op(
        a, "sqrt", [](T x) { return std::sqrt(x); },
        [](T, T y, T dy) { return dy * T(0.5) / y; });
}

template <typename T>
Var<T> erf(Var<T> a) {
    constexpr double two_over_sqrt_pi = 1.1283791670955126;
    return detail::unary_op(
        a, "erf", [](T x) { return std::erf(x); },
        [](T x, T, T dy) { return dy * static_cast<T>(two_over_sqrt_pi) * std::exp(-x * x); });
}

template <typename T>
Var<T> relu(Var<T> a) {
    return detail::unary_op(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T, T dy) { return x > T(0) ? dy : T(0); });
}

/// Exact-erf GELU: x * Phi(x), Phi the standard normal CDF.
template <typename T>
Var<T> gelu(Var<T> a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return detail::unary_op(
        a, "gelu",
        [](T x) {
            const double xd = static_cast<double>(x);
            return static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd * inv_sqrt2)));
        },
        [](T x, T, T dy) {
            const double xd = static_cast<double>(x);
            const double phi = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xd * xd);
            return dy * static_cast<T>(phi + xd * pdf);
        });
}

// ---------------------------------------------------------------------------
// shape ops: reshape / permute / broadcast / slice / concat
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape new_shape) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    if (numel_of(new_shape) != av.size()) {
        throw std::invalid_argument("reshape from " + shape_str(av.shape()) + " to " +
                                    shape_str(new_shape) + " changes element count");
    }
    Tensor<T> out(new_shape, av.vec());
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record("reshape", {ia}, std::move(out), [ia, oid](Tape<T>& t) {
        if (!t.node(ia).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        T* gx = t.grad_buf(ia).data();
        const T* pdy = dy.data();
        for (i64 i = 0; i < dy.size(); ++i) gx[i] += pdy[i];
    });
}

inline std::vector<int> inverse_permutation(const std::vector<int>& order) {
    std::vector<int> inv(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inv[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    return inv;
}

template <typename T>
Var<T> permute(Var<T> a, const std::vector<int>& order) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const int r = av.rank();
    if (static_cast<int>(order.size()) != r) {
        throw std::invalid_argument("permute order rank mismatch");
    }
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int d : order) {
        if (d < 0 || d >= r || seen[static_cast<std::size_t>(d)]) {
            throw std::invalid_argument("permute order is not a permutation");
        }
        seen[static_cast<std::size_t>(d)] = true;
    }
    Shape os(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) os[d] = av.dim(order[d]);
    Shape in_strides = row_major_strides(av.shape());
    Shape overlay(static_cast<std::size_t>(r));
    for (int d = 0; d < r; ++d) overlay[d] = in_strides[order[d]];
    Tensor<T> out(os);
    {
        NdCounter<1> it(os);
        it.set(0, overlay);
        const T* pa = av.data();
        T* po = out.data();
        for (i64 c = 0; c < out.size(); ++c, it.next()) po[c] = pa[it.off[0]];
    }
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record("permute", {ia}, std::move(out), [ia, oid, os, overlay](Tape<T>& t) {
        if (!t.node(ia).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        T* gx = t.grad_buf(ia).data();
        const T* pdy = dy.data();
        NdCounter<1> it(os);
        it.set(0, overlay);
        for (i64 c = 0; c < dy.size(); ++c, it.next()) gx[it.off[0]] += pdy[c];
    });
}

template <typename T>
Var<T> broadcast_to(Var<T> a, Shape target) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    Shape eff = bcast_strides(av.shape(), target);
    Tensor<T> out(target);
    {
        NdCounter<1> it(target);
        it.set(0, eff);
        const T* pa = av.data();
        T* po = out.data();
        for (i64 c = 0; c < out.size(); ++c, it.next()) po[c] = pa[it.off[0]];
    }
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record("broadcast", {ia}, std::move(out), [ia, oid](Tape<T>& t) {
        if (!t.node(ia).needs_grad) return;
        add_reduced(t.node(oid).grad, t.grad_buf(ia));
    });
}

template <typename T>
Var<T> slice(Var<T> a, int axis, i64 start, i64 len) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const int r = av.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("slice axis out of range");
    const i64 dim = av.dim(axis);
    if (start < 0 || len <= 0 || start + len > dim) {
        throw std::invalid_argument("slice bounds [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") exceed axis size " +
                                    std::to_string(dim));
    }
    Shape os = av.shape();
    os[axis] = len;
    i64 outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= av.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= av.dim(d);
    Tensor<T> out(os);
    const T* pa = av.data();
    T* po = out.data();
    for (i64 o = 0; o < outer; ++o) {
        std::memcpy(po + o * len * inner, pa + (o * dim + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(T));
    }
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record("slice", {ia}, std::move(out),
                       [ia, oid, outer, inner, dim, start, len](Tape<T>& t) {
                           if (!t.node(ia).needs_grad) return;
                           const Tensor<T>& dy = t.node(oid).grad;
                           T* gx = t.grad_buf(ia).data();
                           const T* pdy = dy.data();
                           for (i64 o = 0; o < outer; ++o) {
                               T* dst = gx + (o * dim + start) * inner;
                               const T* src = pdy + o * len * inner;
                               for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
                           }
                       });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
    Tape<T>& tape = *xs[0].tape;
    const int r = xs[0].value().rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat axis out of range");
    Shape os = xs[0].value().shape();
    i64 total_axis = 0;
    for (const auto& x : xs) {
        detail::check_same_tape(xs[0], x);
        const Shape& s = x.value().shape();
        if (static_cast<int>(s.size()) != r) throw std::invalid_argument("concat rank mismatch");
        for (int d = 0; d < r; ++d) {
            if (d != axis && s[d] != os[d]) {
                throw std::invalid_argument("concat shape mismatch on axis " + std::to_string(d));
            }
        }
        total_axis += s[axis];
    }
    os[axis] = total_axis;
    i64 outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[d];
    for (int d = axis + 1; d < r; ++d) inner *= os[d];
    Tensor<T> out(os);
    std::vector<i64> ids;
    std::vector<i64> lens;
    T* po = out.data();
    i64 offset = 0;
    for (const auto& x : xs) {
        const i64 len = x.value().dim(axis);
        const T* pa = x.value().data();
        for (i64 o = 0; o < outer; ++o) {
            std::memcpy(po + (o * total_axis + offset) * inner, pa + o * len * inner,
                        static_cast<std::size_t>(len * inner) * sizeof(T));
        }
        offset += len;
        ids.push_back(x.id);
        lens.push_back(len);
    }
    const i64 oid = tape.size();
    return tape.record("concat", ids, std::move(out),
                       [ids, lens, oid, outer, inner, total_axis](Tape<T>& t) {
                           const Tensor<T>& dy = t.node(oid).grad;
                           const T* pdy = dy.data();
                           i64 off = 0;
                           for (std::size_t k = 0; k < ids.size(); ++k) {
                               const i64 len = lens[k];
                               if (t.node(ids[k]).needs_grad) {
                                   T* gx = t.grad_buf(ids[k]).data();
                                   for (i64 o = 0; o < outer; ++o) {
                                       const T* src = pdy + (o * total_axis + off) * inner;
                                       T* dst = gx + o * len * inner;
                                       for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
                                   }
                               }
                               off += len;
                           }
                       });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> normalize_axes(std::vector<int> axes, int rank) {
    if (axes.empty()) throw std::invalid_argument("reduction needs at least one axis");
    for (auto& a : axes) {
        if (a < 0) a += rank;
        if (a < 0 || a >= rank) throw std::invalid_argument("reduction axis out of range");
    }
    std::sort(axes.begin(), axes.end());
    if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
        throw std::invalid_argument("duplicate reduction axis");
    }
    return axes;
}

}  // namespace detail

template <typename T>
Var<T> sum_axes(Var<T> a, std::vector<int> axes, bool keepdims = false) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const int r = av.rank();
    axes = detail::normalize_axes(std::move(axes), r);
    Shape keep = av.shape();
    for (int ax : axes) keep[ax] = 1;
    Shape final_shape;
    if (keepdims) {
        final_shape = keep;
    } else {
        for (int d = 0; d < r; ++d) {
            if (!std::binary_search(axes.begin(), axes.end(), d)) final_shape.push_back(av.dim(d));
        }
    }
    Tensor<T> out(final_shape);
    Shape overlay = bcast_strides(keep, av.shape());
    {
        NdCounter<1> it(av.shape());
        it.set(0, overlay);
        const T* pa = av.data();
        T* po = out.data();
        for (i64 c = 0; c < av.size(); ++c, it.next()) po[it.off[0]] += pa[c];
    }
    const i64 ia = a.id;
    const i64 oid = tape.size();
    Shape in_shape = av.shape();
    return tape.record("sum", {ia}, std::move(out), [ia, oid, in_shape, overlay](Tape<T>& t) {
        if (!t.node(ia).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        T* gx = t.grad_buf(ia).data();
        const T* pdy = dy.data();
        NdCounter<1> it(in_shape);
        it.set(0, overlay);
        const i64 total = numel_of(in_shape);
        for (i64 c = 0; c < total; ++c, it.next()) gx[c] += pdy[it.off[0]];
    });
}

template <typename T>
Var<T> mean_axes(Var<T> a, std::vector<int> axes, bool keepdims = false) {
    const Tensor<T>& av = a.value();
    auto norm = detail::normalize_axes(axes, av.rank());
    i64 count = 1;
    for (int ax : norm) count *= av.dim(ax);
    return scale(sum_axes(a, std::move(axes), keepdims), 1.0 / static_cast<double>(count));
}

template <typename T>
Var<T> sum_all(Var<T> a) {
    std::vector<int> axes(static_cast<std::size_t>(a.value().rank()));
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    if (axes.empty()) return a;  // already scalar
    return sum_axes(a, axes, false);
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    if (a.value().rank() == 0) return a;
    return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

// ---------------------------------------------------------------------------
// softmax / log-softmax (numerically stabilized by max subtraction)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Var<T> softmax_last(Var<T> a, bool log_form) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    if (av.rank() < 1) throw std::invalid_argument("softmax needs rank >= 1");
    const i64 d = av.dim(av.rank() - 1);
    const i64 rows = av.size() / d;
    Tensor<T> out(av.shape());
    const T* pa = av.data();
    T* po = out.data();
    for (i64 row = 0; row < rows; ++row) {
        const T* x = pa + row * d;
        T* y = po + row * d;
        T m = x[0];
        for (i64 j = 1; j < d; ++j) m = std::max(m, x[j]);
        T s = T(0);
        for (i64 j = 0; j < d; ++j) s += std::exp(x[j] - m);
        if (log_form) {
            const T lse = m + std::log(s);
            for (i64 j = 0; j < d; ++j) y[j] = x[j] - lse;
        } else {
            for (i64 j = 0; j < d; ++j) y[j] = std::exp(x[j] - m) / s;
        }
    }
    const i64 ia = a.id;
    const i64 oid = tape.size();
    return tape.record(log_form ? "log_softmax" : "softmax", {ia}, std::move(out),
                       [ia, oid, d, rows, log_form](Tape<T>& t) {
                           if (!t.node(ia).needs_grad) return;
                           const Tensor<T>& dy = t.node(oid).grad;
                           const Tensor<T>& y = t.value(oid);
                           T* gx = t.grad_buf(ia).data();
                           const T* pdy = dy.data();
                           const T* py = y.data();
                           for (i64 row = 0; row < rows; ++row) {
                               const T* gy = pdy + row * d;
                               const T* yy = py + row * d;
                               T* gg = gx + row * d;
                               T dot = T(0);
                               if (log_form) {
                                   for (i64 j = 0; j < d; ++j) dot += gy[j];
                                   for (i64 j = 0; j < d; ++j) gg[j] += gy[j] - std::exp(yy[j]) * dot;
                               } else {
                                   for (i64 j = 0; j < d; ++j) dot += gy[j] * yy[j];
                                   for (i64 j = 0; j < d; ++j) gg[j] += yy[j] * (gy[j] - dot);
                               }
                           }
                       });
}

template <typename T>
Var<T> softmax_axis(Var<T> a, int axis, bool log_form) {
    const int r = a.value().rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("softmax axis out of range");
    if (axis == r - 1) return softmax_last(a, log_form);
    std::vector<int> order;
    for (int d2 = 0; d2 < r; ++d2) {
        if (d2 != axis) order.push_back(d2);
    }
    order.push_back(axis);
    Var<T> moved = permute(a, order);
    Var<T> sm = softmax_last(moved, log_form);
    return permute(sm, inverse_permutation(order));
}

}  // namespace detail

template <typename T>
Var<T> softmax(Var<T> a, int axis = -1) {
    return detail::softmax_axis(a, axis, false);
}

template <typename T>
Var<T> log_softmax(Var<T> a, int axis = -1) {
    return detail::softmax_axis(a, axis, true);
}

// ---------------------------------------------------------------------------
// matmul (optionally transposed operands, optionally batched)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
    detail::check_same_tape(a, b);
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.rank() < 2 || bv.rank() < 2) throw std::invalid_argument("matmul needs rank >= 2");
    if (bv.rank() > av.rank()) throw std::invalid_argument("matmul: rhs has higher rank than lhs");
    const int ra = av.rank();
    const int rb = bv.rank();
    const bool batched_b = rb > 2;
    if (batched_b && rb != ra) throw std::invalid_argument("matmul: batch ranks differ");
    i64 batch = 1;
    for (int d = 0; d < ra - 2; ++d) {
        batch *= av.dim(d);
        if (batched_b && bv.dim(d) != av.dim(d)) {
            throw std::invalid_argument("matmul: batch dims differ, " + shape_str(av.shape()) +
                                        " vs " + shape_str(bv.shape()));
        }
    }
    const i64 M = trans_a ? av.dim(ra - 1) : av.dim(ra - 2);
    const i64 K = trans_a ? av.dim(ra - 2) : av.dim(ra - 1);
    const i64 Kb = trans_b ? bv.dim(rb - 1) : bv.dim(rb - 2);
    const i64 N = trans_b ? bv.dim(rb - 2) : bv.dim(rb - 1);
    if (K != Kb) {
        throw std::invalid_argument("matmul shape mismatch: inner dimensions disagree, " +
                                    shape_str(av.shape()) + (trans_a ? "^T" : "") + " x " +
                                    shape_str(bv.shape()) + (trans_b ? "^T" : ""));
    }
    Shape os;
    for (int d = 0; d < ra - 2; ++d) os.push_back(av.dim(d));
    os.push_back(M);
    os.push_back(N);
    Tensor<T> out(os);
    const i64 a_block = av.dim(ra - 2) * av.dim(ra - 1);
    const i64 b_block = batched_b ? bv.dim(rb - 2) * bv.dim(rb - 1) : 0;
    for (i64 n = 0; n < batch; ++n) {
        gemm<T>(trans_a, trans_b, M, N, K, av.data() + n * a_block,
                bv.data() + (batched_b ? n * b_block : 0), out.data() + n * M * N, false);
    }
    const i64 ia = a.id, ib = b.id;
    const i64 oid = tape.size();
    return tape.record(
        "matmul", {ia, ib}, std::move(out),
        [ia, ib, oid, trans_a, trans_b, batch, M, N, K, a_block, b_block, batched_b](Tape<T>& t) {
            const Tensor<T>& dy = t.node(oid).grad;
            const Tensor<T>& va = t.value(ia);
            const Tensor<T>& vb = t.value(ib);
            const bool need_a = t.node(ia).needs_grad;
            const bool need_b = t.node(ib).needs_grad;
            T* ga = need_a ? t.grad_buf(ia).data() : nullptr;
            T* gb = need_b ? t.grad_buf(ib).data() : nullptr;
            for (i64 n = 0; n < batch; ++n) {
                const T* pdy = dy.data() + n * M * N;
                const T* pa = va.data() + n * a_block;
                const T* pb = vb.data() + (batched_b ? n * b_block : 0);
                T* pga = need_a ? ga + n * a_block : nullptr;
                T* pgb = need_b ? gb + (batched_b ? n * b_block : 0) : nullptr;
                if (!trans_a && !trans_b) {
                    if (pga) gemm<T>(false, true, M, K, N, pdy, pb, pga, true);
                    if (pgb) gemm<T>(true, false, K, N, M, pa, pdy, pgb, true);
                } else if (!trans_a && trans_b) {
                    if (pga) gemm<T>(false, false, M, K, N, pdy, pb, pga, true);
                    if (pgb) gemm<T>(true, false, N, K, M, pdy, pa, pgb, true);
                } else if (trans_a && !trans_b) {
                    if (pga) gemm<T>(false, true, K, M, N, pb, pdy, pga, true);
                    if (pgb) gemm<T>(false, false, K, N, M, pa, pdy, pgb, true);
                } else {
                    if (pga) gemm<T>(true, true, K, M, N, pb, pdy, pga, true);
                    if (pgb) gemm<T>(true, true, N, K, M, pdy, pa, pgb, true);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    i64 n, cin, h, w;
    i64 cout, kh, kw;
    i64 stride, pad;
    i64 ho, wo;
    i64 ck() const { return cin * kh * kw; }
    i64 patch() const { return ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
    // cols: (cin*kh*kw, ho*wo) for one sample, row-major
    const i64 P = d.patch();
    for (i64 ci = 0; ci < d.cin; ++ci) {
        const T* xc = x + ci * d.h * d.w;
        for (i64 ki = 0; ki < d.kh; ++ki) {
            for (i64 kj = 0; kj < d.kw; ++kj) {
                T* row = cols + ((ci * d.kh + ki) * d.kw + kj) * P;
                for (i64 ho = 0; ho < d.ho; ++ho) {
                    const i64 ih = ho * d.stride - d.pad + ki;
                    T* dst = row + ho * d.wo;
                    if (ih < 0 || ih >= d.h) {
                        for (i64 wo = 0; wo < d.wo; ++wo) dst[wo] = T(0);
                        continue;
                    }
                    const T* src = xc + ih * d.w;
                    for (i64 wo = 0; wo < d.wo; ++wo) {
                        const i64 iw = wo * d.stride - d.pad + kj;
                        dst[wo] = (iw >= 0 && iw < d.w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, T* gx) {
    const i64 P = d.patch();
    for (i64 ci = 0; ci < d.cin; ++ci) {
        T* xc = gx + ci * d.h * d.w;
        for (i64 ki = 0; ki < d.kh; ++ki) {
            for (i64 kj = 0; kj < d.kw; ++kj) {
                const T* row = cols + ((ci * d.kh + ki) * d.kw + kj) * P;
                for (i64 ho = 0; ho < d.ho; ++ho) {
                    const i64 ih = ho * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.h) continue;
                    T* dst = xc + ih * d.w;
                    const T* src = row + ho * d.wo;
                    for (i64 wo = 0; wo < d.wo; ++wo) {
                        const i64 iw = wo * d.stride - d.pad + kj;
                        if (iw >= 0 && iw < d.w) dst[iw] += src[wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, i64 stride, i64 pad) {
    detail::check_same_tape(x, w);
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw std::invalid_argument("conv2d expects x (N,C,H,W) and w (Cout,Cin,kH,kW)");
    }
    detail::ConvDims d;
    d.n = xv.dim(0);
    d.cin = xv.dim(1);
    d.h = xv.dim(2);
    d.w = xv.dim(3);
    d.cout = wv.dim(0);
    d.kh = wv.dim(2);
    d.kw = wv.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: invalid stride/pad");
    if (wv.dim(1) != d.cin) {
        throw std::invalid_argument("conv2d channel mismatch: input has " + std::to_string(d.cin) +
                                    " channels, kernel expects " + std::to_string(wv.dim(1)));
    }
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw || d.ho <= 0 || d.wo <= 0) {
        throw std::invalid_argument("conv2d degenerate output size for input " +
                                    shape_str(xv.shape()) + " kernel " + shape_str(wv.shape()));
    }
    if (bias) {
        detail::check_same_tape(x, *bias);
        if (bias->value().rank() != 1 || bias->value().dim(0) != d.cout) {
            throw std::invalid_argument("conv2d bias shape mismatch");
        }
    }
    const i64 CK = d.ck();
    const i64 P = d.patch();
    Tensor<T> cols(Shape{d.n, CK, P});
    Tensor<T> out(Shape{d.n, d.cout, d.ho, d.wo});
    const T* bptr = bias ? bias->value().data() : nullptr;
    for (i64 n = 0; n < d.n; ++n) {
        T* cn = cols.data() + n * CK * P;
        detail::im2col(xv.data() + n * d.cin * d.h * d.w, d, cn);
        T* on = out.data() + n * d.cout * P;
        gemm<T>(false, false, d.cout, P, CK, wv.data(), cn, on, false);
        if (bptr) {
            for (i64 co = 0; co < d.cout; ++co) {
                T* row = on + co * P;
                const T bvv = bptr[co];
                for (i64 p = 0; p < P; ++p) row[p] += bvv;
            }
        }
    }
    std::vector<i64> ids{x.id, w.id};
    if (bias) ids.push_back(bias->id);
    const i64 ix = x.id, iw = w.id;
    const i64 ib = bias ? bias->id : -1;
    const i64 oid = tape.size();
    auto saved_cols = std::make_shared<Tensor<T>>(std::move(cols));
    return tape.record("conv2d", ids, std::move(out), [ix, iw, ib, oid, d, saved_cols](Tape<T>& t) {
        const i64 CK = d.ck();
        const i64 P = d.patch();
        const Tensor<T>& dy = t.node(oid).grad;
        const bool need_x = t.node(ix).needs_grad;
        const bool need_w = t.node(iw).needs_grad;
        const bool need_b = ib >= 0 && t.node(ib).needs_grad;
        T* gx = need_x ? t.grad_buf(ix).data() : nullptr;
        T* gw = need_w ? t.grad_buf(iw).data() : nullptr;
        T* gb = need_b ? t.grad_buf(ib).data() : nullptr;
        const T* wp = t.value(iw).data();
        std::vector<T> dcols;
        if (need_x) dcols.resize(static_cast<std::size_t>(CK * P));
        for (i64 n = 0; n < d.n; ++n) {
            const T* dyn = dy.data() + n * d.cout * P;
            const T* cn = saved_cols->data() + n * CK * P;
            if (need_w) gemm<T>(false, true, d.cout, CK, P, dyn, cn, gw, true);
            if (need_b) {
                for (i64 co = 0; co < d.cout; ++co) {
                    const T* row = dyn + co * P;
                    T s = T(0);
                    for (i64 p = 0; p < P; ++p) s += row[p];
                    gb[co] += s;
                }
            }
            if (need_x) {
                gemm<T>(true, false, CK, P, d.cout, wp, dyn, dcols.data(), false);
                detail::col2im_add(dcols.data(), d, gx + n * d.cin * d.h * d.w);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> maxpool2d(Var<T> x, i64 k, i64 stride, i64 pad) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4) throw std::invalid_argument("maxpool2d expects (N,C,H,W)");
    const i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const i64 Ho = (H + 2 * pad - k) / stride + 1;
    const i64 Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("maxpool2d degenerate output size");
    Tensor<T> out(Shape{N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<i64>>(static_cast<std::size_t>(out.size()), -1);
    const T* px = xv.data();
    T* po = out.data();
    i64 oi = 0;
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            const T* plane = px + (n * C + c) * H * W;
            for (i64 ho = 0; ho < Ho; ++ho) {
                for (i64 wo = 0; wo < Wo; ++wo, ++oi) {
                    T best = T(0);
                    i64 best_idx = -1;
                    for (i64 ki = 0; ki < k; ++ki) {
                        const i64 ih = ho * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        for (i64 kj = 0; kj < k; ++kj) {
                            const i64 iw = wo * stride - pad + kj;
                            if (iw < 0 || iw >= W) continue;
                            const T v = plane[ih * W + iw];
                            if (best_idx < 0 || v > best) {
                                best = v;
                                best_idx = (n * C + c) * H * W + ih * W + iw;
                            }
                        }
                    }
                    po[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }
    const i64 ix = x.id;
    const i64 oid = tape.size();
    return tape.record("maxpool2d", {ix}, std::move(out), [ix, oid, argmax](Tape<T>& t) {
        if (!t.node(ix).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        T* gx = t.grad_buf(ix).data();
        const T* pdy = dy.data();
        for (i64 i = 0; i < dy.size(); ++i) {
            const i64 a = (*argmax)[static_cast<std::size_t>(i)];
            if (a >= 0) gx[a] += pdy[i];
        }
    });
}

// ---------------------------------------------------------------------------
// stochastic depth (per-sample residual drop)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> drop_path(Var<T> x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("drop_path probability must be in [0,1), got " +
                                    std::to_string(p));
    }
    if (!training || p == 0.0) return x;  // identity in eval mode
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = x.value();
    if (xv.rank() < 1) throw std::invalid_argument("drop_path expects a batched tensor");
    const i64 N = xv.dim(0);
    const i64 inner = xv.size() / N;
    auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N));
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (i64 n = 0; n < N; ++n) {
        (*mask)[static_cast<std::size_t>(n)] = rng.uniform() < p ? T(0) : keep_scale;
    }
    Tensor<T> out(xv.shape());
    const T* px = xv.data();
    T* po = out.data();
    for (i64 n = 0; n < N; ++n) {
        const T m = (*mask)[static_cast<std::size_t>(n)];
        for (i64 i = 0; i < inner; ++i) po[n * inner + i] = px[n * inner + i] * m;
    }
    const i64 ix = x.id;
    const i64 oid = tape.size();
    return tape.record("drop_path", {ix}, std::move(out), [ix, oid, mask, inner](Tape<T>& t) {
        if (!t.node(ix).needs_grad) return;
        const Tensor<T>& dy = t.node(oid).grad;
        T* gx = t.grad_buf(ix).data();
        const T* pdy = dy.data();
        const i64 N = static_cast<i64>(mask->size());
        for (i64 n = 0; n < N; ++n) {
            const T m = (*mask)[static_cast<std::size_t>(n)];
            if (m == T(0)) continue;
            for (i64 i = 0; i < inner; ++i) gx[n * inner + i] += pdy[n * inner + i] * m;
        }
    });
}

/// Mean over the two spatial axes of (N,C,H,W).
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    if (x.value().rank() != 4) throw std::invalid_argument("global_avg_pool expects (N,C,H,W)");
    return mean_axes(x, {2, 3}, false);
}

}  // namespace pfm
