// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops. Every kernel has a portable scalar reference in
// `kernels::scalar` and an AVX2/FMA variant in `kernels::avx2`; the free
// functions in `kernels` forward to whichever table is active. Selection
// happens once at startup from CPUID and can be overridden with the
// LQAT_ISA environment variable ("scalar" or "avx2") or set_isa().
#pragma once

#include <cstddef>
#include <utility>

namespace lqat::kernels {

enum class Isa { Scalar, Avx2 };

const char* isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws ContractError if the ISA is not supported on this CPU.
void set_isa(Isa isa);

/// Uniform grid for fake quantization:
///   k = clamp(round((x - offset) / step), qmin, qmax)
///   y = k == qmin ? lo : k == qmax ? hi : step * k + offset
/// with round-half-away-from-zero. `lo`/`hi` pin the two end codes to exact
/// values (the observed extremes for MinMax grids), since step * qmax can
/// miss max|x| by an ulp. Operations are evaluated in exactly this order
/// (no fused multiply-add) so every ISA produces identical bits.
template <typename T>
struct Grid {
    T step;
    T offset;
    T qmin;
    T qmax;
    T lo;
    T hi;
};

// C[m,n] (+)= op(A) * op(B), all row-major and contiguous.
// op(A) is A[m,k] or, when trans_a, A is stored [k,m]; likewise B is [k,n] or [n,k].
template <typename T>
using GemmFn = void (*)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                        const T* a, const T* b, T* c, bool accumulate);
template <typename T>
using FakeQuantFn = void (*)(const T* x, T* y, std::size_t n, Grid<T> grid);
template <typename T>
using AbsMaxFn = T (*)(const T* x, std::size_t n);
template <typename T>
using MinMaxFn = std::pair<T, T> (*)(const T* x, std::size_t n);
template <typename T>
using DotFn = T (*)(const T* a, const T* b, std::size_t n);
template <typename T>
using AxpyFn = void (*)(T alpha, const T* x, T* y, std::size_t n);

template <typename T>
struct Table {
    GemmFn<T> gemm;
    FakeQuantFn<T> fake_quant;
    AbsMaxFn<T> abs_max;
    MinMaxFn<T> min_max;
    DotFn<T> dot;
    AxpyFn<T> axpy;
};

template <typename T>
const Table<T>& table(Isa isa);

template <typename T>
const Table<T>& active();

template <typename T>
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
                 const T* b, T* c, bool accumulate) {
    active<T>().gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

template <typename T>
inline void fake_quant(const T* x, T* y, std::size_t n, Grid<T> grid) {
    active<T>().fake_quant(x, y, n, grid);
}

template <typename T>
inline T abs_max(const T* x, std::size_t n) {
    return active<T>().abs_max(x, n);
}

template <typename T>
inline std::pair<T, T> min_max(const T* x, std::size_t n) {
    return active<T>().min_max(x, n);
}

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
    return active<T>().dot(a, b, n);
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
    active<T>().axpy(alpha, x, y, n);
}

namespace scalar {
template <typename T>
const Table<T>& table();
}  // namespace scalar

namespace avx2 {
// Only valid to call when isa_supported(Isa::Avx2).
template <typename T>
const Table<T>& table();
}  // namespace avx2

}  // namespace lqat::kernels
