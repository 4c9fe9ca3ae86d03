// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <vector>

#include "lqat/kernels.hpp"

namespace lqat::kernels::scalar {
namespace {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    // Each C[i,j] is summed from zero in increasing p, then added to C.
    std::vector<T> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), T{0});
        for (std::size_t p = 0; p < k; ++p) {
            const T av = trans_a ? a[p * m + i] : a[i * k + p];
            if (trans_b) {
                for (std::size_t j = 0; j < n; ++j) row[j] += av * b[j * k + p];
            } else {
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
            }
        }
        T* crow = c + i * n;
        if (accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] += row[j];
        } else {
            std::copy(row.begin(), row.end(), crow);
        }
    }
}

template <typename T>
void fake_quant(const T* x, T* y, std::size_t n, Grid<T> g) {
    for (std::size_t i = 0; i < n; ++i) {
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
    T m = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(x[i]));
    return m;
}

template <typename T>
std::pair<T, T> min_max(const T* x, std::size_t n) {
    T lo = x[0];
    T hi = x[0];
    for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
    }
    return {lo, hi};
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

template <typename T>
const Table<T>& table() {
    static const Table<T> t{&gemm<T>, &fake_quant<T>, &abs_max<T>, &min_max<T>, &dot<T>, &axpy<T>};
    return t;
}

template const Table<float>& table<float>();
template const Table<double>& table<double>();

}  // namespace lqat::kernels::scalar
