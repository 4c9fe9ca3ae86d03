// SPDX-License-Identifier: Apache-2.0
//
// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after a CPUID check (see dispatch.cpp).
#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "lqat/kernels.hpp"

#if !defined(__AVX2__) || !defined(__FMA__)
#error "avx2.cpp must be compiled with -mavx2 -mfma"
#endif

namespace lqat::kernels::avx2 {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
    using reg = __m256;
    static constexpr std::size_t width = 8;
    static reg zero() { return _mm256_setzero_ps(); }
    static reg set1(float v) { return _mm256_set1_ps(v); }
    static reg load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
    static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
    static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
    static reg div(reg a, reg b) { return _mm256_div_ps(a, b); }
    static reg min(reg a, reg b) { return _mm256_min_ps(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
    static reg trunc(reg a) { return _mm256_round_ps(a, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC); }
    static reg abs(reg a) { return _mm256_andnot_ps(_mm256_set1_ps(-0.0f), a); }
    static reg sign_bits(reg a) { return _mm256_and_ps(_mm256_set1_ps(-0.0f), a); }
    static reg or_(reg a, reg b) { return _mm256_or_ps(a, b); }
    static reg and_(reg a, reg b) { return _mm256_and_ps(a, b); }
    static reg ge(reg a, reg b) { return _mm256_cmp_ps(a, b, _CMP_GE_OQ); }
    static reg eq(reg a, reg b) { return _mm256_cmp_ps(a, b, _CMP_EQ_OQ); }
    static reg blend(reg a, reg b, reg mask) { return _mm256_blendv_ps(a, b, mask); }
    static float hsum(reg v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 sh = _mm_movehdup_ps(lo);
        __m128 s = _mm_add_ps(lo, sh);
        sh = _mm_movehl_ps(sh, s);
        s = _mm_add_ss(s, sh);
        return _mm_cvtss_f32(s);
    }
    static float hmax(reg v) {
        alignas(32) float buf[8];
        _mm256_store_ps(buf, v);
        return *std::max_element(buf, buf + 8);
    }
    static float hmin(reg v) {
        alignas(32) float buf[8];
        _mm256_store_ps(buf, v);
        return *std::min_element(buf, buf + 8);
    }
};

template <>
struct Vec<double> {
    using reg = __m256d;
    static constexpr std::size_t width = 4;
    static reg zero() { return _mm256_setzero_pd(); }
    static reg set1(double v) { return _mm256_set1_pd(v); }
    static reg load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
    static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
    static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
    static reg div(reg a, reg b) { return _mm256_div_pd(a, b); }
    static reg min(reg a, reg b) { return _mm256_min_pd(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
    static reg trunc(reg a) { return _mm256_round_pd(a, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC); }
    static reg abs(reg a) { return _mm256_andnot_pd(_mm256_set1_pd(-0.0), a); }
    static reg sign_bits(reg a) { return _mm256_and_pd(_mm256_set1_pd(-0.0), a); }
    static reg or_(reg a, reg b) { return _mm256_or_pd(a, b); }
    static reg and_(reg a, reg b) { return _mm256_and_pd(a, b); }
    static reg ge(reg a, reg b) { return _mm256_cmp_pd(a, b, _CMP_GE_OQ); }
    static reg eq(reg a, reg b) { return _mm256_cmp_pd(a, b, _CMP_EQ_OQ); }
    static reg blend(reg a, reg b, reg mask) { return _mm256_blendv_pd(a, b, mask); }
    static double hsum(reg v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d h = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, h));
    }
    static double hmax(reg v) {
        alignas(32) double buf[4];
        _mm256_store_pd(buf, v);
        return *std::max_element(buf, buf + 4);
    }
    static double hmin(reg v) {
        alignas(32) double buf[4];
        _mm256_store_pd(buf, v);
        return *std::min_element(buf, buf + 4);
    }
};

// Register-blocked micro-kernel: MR rows of C by two vector widths of columns.
// `bp` is a packed panel [k][NR]; `a` rows are read with stride lda.
template <typename T, int MR>
void micro_kernel(std::size_t k, const T* a, std::size_t lda, const T* bp, T* acc_out) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    typename V::reg c0[MR];
    typename V::reg c1[MR];
    for (int r = 0; r < MR; ++r) {
        c0[r] = V::zero();
        c1[r] = V::zero();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const auto b0 = V::load(bp + p * 2 * W);
        const auto b1 = V::load(bp + p * 2 * W + W);
        for (int r = 0; r < MR; ++r) {
            const auto av = V::set1(a[r * lda + p]);
            c0[r] = V::fmadd(av, b0, c0[r]);
            c1[r] = V::fmadd(av, b1, c1[r]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        V::store(acc_out + r * 2 * W, c0[r]);
        V::store(acc_out + r * 2 * W + W, c1[r]);
    }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    constexpr std::size_t NR = 2 * W;
    constexpr int MR = 4;

    // Thin products against a transposed B are dot products over contiguous rows.
    if (!trans_a && trans_b && m < MR) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                auto acc = V::zero();
                std::size_t p = 0;
                for (; p + W <= k; p += W) acc = V::fmadd(V::load(arow + p), V::load(brow + p), acc);
                T s = V::hsum(acc);
                for (; p < k; ++p) s += arow[p] * brow[p];
                c[i * n + j] = accumulate ? c[i * n + j] + s : s;
            }
        }
        return;
    }

    std::vector<T> a_packed;
    const T* a_rows = a;
    if (trans_a) {
        a_packed.resize(m * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) a_packed[i * k + p] = a[p * m + i];
        a_rows = a_packed.data();
    }

    const std::size_t panels = (n + NR - 1) / NR;
    std::vector<T> b_packed(panels * k * NR, T{0});
    for (std::size_t jp = 0; jp < panels; ++jp) {
        T* dst = b_packed.data() + jp * k * NR;
        const std::size_t j0 = jp * NR;
        const std::size_t jn = std::min(NR, n - j0);
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t jj = 0; jj < jn; ++jj) {
                dst[p * NR + jj] = trans_b ? b[(j0 + jj) * k + p] : b[p * n + j0 + jj];
            }
        }
    }

    alignas(32) T tile[MR * NR];
    auto flush = [&](std::size_t i0, std::size_t rows, std::size_t jp) {
        const std::size_t j0 = jp * NR;
        const std::size_t jn = std::min(NR, n - j0);
        for (std::size_t r = 0; r < rows; ++r) {
            T* crow = c + (i0 + r) * n + j0;
            const T* trow = tile + r * NR;
            if (accumulate) {
                for (std::size_t jj = 0; jj < jn; ++jj) crow[jj] += trow[jj];
            } else {
                std::copy(trow, trow + jn, crow);
            }
        }
    };

    std::size_t i0 = 0;
    for (; i0 + MR <= m; i0 += MR) {
        for (std::size_t jp = 0; jp < panels; ++jp) {
            micro_kernel<T, MR>(k, a_rows + i0 * k, k, b_packed.data() + jp * k * NR, tile);
            flush(i0, MR, jp);
        }
    }
    const std::size_t rest = m - i0;
    if (rest > 0) {
        for (std::size_t jp = 0; jp < panels; ++jp) {
            const T* bp = b_packed.data() + jp * k * NR;
            const T* ap = a_rows + i0 * k;
            switch (rest) {
                case 1: micro_kernel<T, 1>(k, ap, k, bp, tile); break;
                case 2: micro_kernel<T, 2>(k, ap, k, bp, tile); break;
                default: micro_kernel<T, 3>(k, ap, k, bp, tile); break;
            }
            flush(i0, rest, jp);
        }
    }
}

template <typename T>
typename Vec<T>::reg round_half_away(typename Vec<T>::reg v) {
    using V = Vec<T>;
    // v - trunc(v) is exact, so the tie test matches std::round bit for bit.
    const auto t = V::trunc(v);
    const auto frac = V::abs(V::sub(v, t));
    const auto bump = V::and_(V::ge(frac, V::set1(T(0.5))), V::or_(V::set1(T(1)), V::sign_bits(v)));
    return V::add(t, bump);
}

template <typename T>
void fake_quant(const T* x, T* y, std::size_t n, Grid<T> g) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    const auto step = V::set1(g.step);
    const auto offset = V::set1(g.offset);
    const auto qmin = V::set1(g.qmin);
    const auto qmax = V::set1(g.qmax);
    const auto lo = V::set1(g.lo);
    const auto hi = V::set1(g.hi);
    std::size_t i = 0;
    for (; i + W <= n; i += W) {
        auto v = V::div(V::sub(V::load(x + i), offset), step);
        auto r = round_half_away<T>(v);
        r = V::min(V::max(r, qmin), qmax);
        auto out = V::add(V::mul(r, step), offset);
        out = V::blend(out, hi, V::eq(r, qmax));
        out = V::blend(out, lo, V::eq(r, qmin));
        V::store(y + i, out);
    }
    for (; i < n; ++i) {
        T v = (x[i] - g.offset) / g.step;
        T r = std::round(v);
        r = std::min(std::max(r, g.qmin), g.qmax);
        T scaled = r * g.step;
        T out = scaled + g.offset;
        if (r == g.qmax) out = g.hi;
        if (r == g.qmin) out = g.lo;
        y[i] = out;
    }
}

template <typename T>
T abs_max(const T* x, std::size_t n) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    auto m = V::zero();
    std::size_t i = 0;
    for (; i + W <= n; i += W) m = V::max(m, V::abs(V::load(x + i)));
    T r = V::hmax(m);
    for (; i < n; ++i) r = std::max(r, std::abs(x[i]));
    return r;
}

template <typename T>
std::pair<T, T> min_max(const T* x, std::size_t n) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    T lo = x[0];
    T hi = x[0];
    std::size_t i = 0;
    if (n >= W) {
        auto vlo = V::load(x);
        auto vhi = vlo;
        for (i = W; i + W <= n; i += W) {
            const auto v = V::load(x + i);
            vlo = V::min(vlo, v);
            vhi = V::max(vhi, v);
        }
        lo = V::hmin(vlo);
        hi = V::hmax(vhi);
    }
    for (; i < n; ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
    }
    return {lo, hi};
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    auto acc = V::zero();
    std::size_t i = 0;
    for (; i + W <= n; i += W) acc = V::fmadd(V::load(a + i), V::load(b + i), acc);
    T s = V::hsum(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    const auto av = V::set1(alpha);
    std::size_t i = 0;
    for (; i + W <= n; i += W) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

template <typename T>
const Table<T>& table() {
    static const Table<T> t{&gemm<T>, &fake_quant<T>, &abs_max<T>, &min_max<T>, &dot<T>, &axpy<T>};
    return t;
}

template const Table<float>& table<float>();
template const Table<double>& table<double>();

}  // namespace lqat::kernels::avx2
