// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries: random tensors and an independent
// scalar-loop quantizer used as the oracle for the library's kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lqat/kernels.hpp"
#include "lqat/quant.hpp"
#include "lqat/random.hpp"
#include "lqat/tensor.hpp"

namespace lqat::test {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(shape);
    for (T& v : t.data()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
}

// Heavy-tailed values: mostly small, a few large outliers.
template <typename T>
Tensor<T> outlier_tensor(const Shape& shape, Rng& rng) {
    Tensor<T> t(shape);
    for (T& v : t.data()) {
        double x = rng.normal();
        if (rng.uniform() < 0.02) x *= 20.0;
        v = static_cast<T>(x);
    }
    return t;
}

inline Shape random_shape(Rng& rng, std::size_t max_rows = 8, std::size_t max_cols = 64) {
    const std::size_t r = 1 + rng.below(max_rows);
    const std::size_t c = 1 + rng.below(max_cols);
    return {r, c};
}

// Index of element (row, col) of a [rows, cols] tensor in its quantization group.
inline std::size_t group_of(std::size_t row, std::size_t col, const Granularity& g) {
    switch (g.kind) {
        case Granularity::Kind::PerTensor: return 0;
        case Granularity::Kind::PerToken: return row;
        case Granularity::Kind::PerChannel: return g.axis == 0 ? row : col;
    }
    return 0;
}

inline std::size_t group_count(std::size_t rows, std::size_t cols, const Granularity& g) {
    switch (g.kind) {
        case Granularity::Kind::PerTensor: return 1;
        case Granularity::Kind::PerToken: return rows;
        case Granularity::Kind::PerChannel: return g.axis == 0 ? rows : cols;
    }
    return 1;
}

// Plain loop MinMax fake quantization of a [rows, cols] tensor.
template <typename T>
std::vector<T> oracle_minmax(const Tensor<T>& x, const QuantSpec& spec) {
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    const std::size_t ng = group_count(rows, cols, spec.granularity);
    std::vector<T> mn(ng, INFINITY), mx(ng, -INFINITY);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t g = group_of(r, c, spec.granularity);
            mn[g] = std::min(mn[g], x[r * cols + c]);
            mx[g] = std::max(mx[g], x[r * cols + c]);
        }
    }
    const bool sym = spec.symmetry == Symmetry::Symmetric;
    const T qmax = sym ? static_cast<T>((1 << (spec.bits - 1)) - 1) : static_cast<T>((1 << spec.bits) - 1);
    const T qmin = sym ? -qmax : T(0);
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t g = group_of(r, c, spec.granularity);
            T lo, hi, step, offset;
            if (sym) {
                hi = std::max(std::abs(mn[g]), std::abs(mx[g]));
                lo = -hi;
                step = hi == 0 ? T(1) : hi / qmax;
                offset = 0;
            } else {
                lo = mn[g];
                hi = mx[g];
                step = hi == lo ? T(1) : (hi - lo) / qmax;
                offset = lo;
            }
            const T v = (x[r * cols + c] - offset) / step;
            T k = std::round(v);
            if (k < qmin) k = qmin;
            if (k > qmax) k = qmax;
            T y;
            if (step == T(1) && (sym ? hi == 0 : hi == lo)) {
                const T scaled = k * step;
                y = scaled + offset;
            } else if (k == qmin) {
                y = lo;
            } else if (k == qmax) {
                y = hi;
            } else {
                const T scaled = k * step;
                y = scaled + offset;
            }
            out[r * cols + c] = y;
        }
    }
    return out;
}

// Restores the startup ISA when a test switches it.
class IsaGuard {
public:
    IsaGuard() : saved_(kernels::active_isa()) {}
    ~IsaGuard() { kernels::set_isa(saved_); }

private:
    kernels::Isa saved_;
};

}  // namespace lqat::test
