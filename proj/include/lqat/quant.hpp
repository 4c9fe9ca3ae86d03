// SPDX-License-Identifier: Apache-2.0
//
// Uniform (linear) fake quantization: MinMax and clipping-based quantizers at
// per-tensor, per-channel and per-token granularity, their straight-through
// tape ops, the W-A-KV scheme notation, and the activation-smoothing rescale.
//
// Rounding is round-half-away-from-zero everywhere. A group whose scale would
// be zero (all elements equal for asymmetric, all zero for symmetric) uses a
// unit step, which maps the group onto itself.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lqat/autodiff.hpp"
#include "lqat/kernels.hpp"
#include "lqat/tensor.hpp"

namespace lqat {

enum class Symmetry : std::uint8_t { Symmetric, Asymmetric };

struct Granularity {
    enum class Kind : std::uint8_t { PerTensor, PerChannel, PerToken };
    Kind kind = Kind::PerTensor;
    std::size_t axis = 0;  // PerChannel only

    static Granularity per_tensor() { return {Kind::PerTensor, 0}; }
    static Granularity per_channel(std::size_t axis) { return {Kind::PerChannel, axis}; }
    // One group per row: all leading dimensions, grouped over the last one.
    static Granularity per_token() { return {Kind::PerToken, 0}; }

    friend bool operator==(const Granularity&, const Granularity&) = default;
};

struct Clipping {
    enum class Kind : std::uint8_t { None, Statistical, Learnable };
    Kind kind = Kind::None;
    // Statistical: clip magnitude is this quantile of |x|.
    double fraction = 0.9995;

    static Clipping none() { return {}; }
    static Clipping statistical(double fraction = 0.9995) { return {Kind::Statistical, fraction}; }
    static Clipping learnable() { return {Kind::Learnable, 0.0}; }

    friend bool operator==(const Clipping&, const Clipping&) = default;
};

struct QuantSpec {
    static constexpr int kFullPrecision = 16;

    int bits = kFullPrecision;
    Symmetry symmetry = Symmetry::Symmetric;
    Granularity granularity = Granularity::per_tensor();
    Clipping clipping = Clipping::none();

    static QuantSpec full_precision() { return {}; }
    static QuantSpec minmax(int bits, Granularity g, Symmetry s = Symmetry::Symmetric) {
        return {bits, s, g, Clipping::none()};
    }

    bool is_full_precision() const { return bits == kFullPrecision; }
    // Integer code range: [-(2^(N-1)-1), 2^(N-1)-1] or [0, 2^N-1].
    double qmin() const;
    double qmax() const;
    // "16" for full precision, else the bit count.
    std::string bits_string() const { return std::to_string(bits); }

    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// Weights, activations and KV cache specs, written "W-A-KV".
struct QuantScheme {
    QuantSpec weights = weight_spec(QuantSpec::kFullPrecision);
    QuantSpec activations = activation_spec(QuantSpec::kFullPrecision);
    QuantSpec kv = activation_spec(QuantSpec::kFullPrecision);

    // Default placement: per output channel for weights, per token otherwise.
    static QuantSpec weight_spec(int bits) { return QuantSpec::minmax(bits, Granularity::per_channel(0)); }
    static QuantSpec activation_spec(int bits) { return QuantSpec::minmax(bits, Granularity::per_token()); }

    static QuantScheme full_precision() { return {}; }
    // Strict grammar `<w>-<a>-<kv>` with fields in {2..8} or 16.
    static QuantScheme parse(std::string_view text);
    std::string to_string() const;
    bool is_full_precision() const {
        return weights.is_full_precision() && activations.is_full_precision() && kv.is_full_precision();
    }

    friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

/// Fake-quantized tensor plus the grid that produced it. Group g owns the
/// elements whose index along the grouping axis is g; `values` satisfy
/// value = scales[g] * k + zero_points[g] for an integer code k.
template <typename T>
struct QuantizedView {
    Tensor<T> values;
    std::vector<T> scales;
    std::vector<T> zero_points;
    Granularity granularity;
    // Per element: 1 if inside the clip range (gradient passes), else 0.
    std::vector<std::uint8_t> pass_mask;
};

/// Element layout of quantization groups: index = (o * groups + g) * inner + i.
struct GroupLayout {
    std::size_t outer = 1;
    std::size_t groups = 1;
    std::size_t inner = 1;

    static GroupLayout of(const Shape& shape, const Granularity& g);
};

/// Source of the (range, zero-point) pair for clipping-based quantization.
template <typename T>
struct ScaleSource {
    enum class Kind : std::uint8_t { Fixed, Statistical, Learnable };
    Kind kind = Kind::Fixed;
    // Fixed: representable range is [offset, offset + range].
    T range = 1;
    T offset = 0;
    double fraction = 0.9995;
    // Learnable: grid step (and offset for asymmetric specs), one element each.
    const Parameter<T>* step = nullptr;
    const Parameter<T>* zero_point = nullptr;

    static ScaleSource fixed(T range, T offset) { return {Kind::Fixed, range, offset}; }
    static ScaleSource statistical(double fraction) {
        ScaleSource s;
        s.kind = Kind::Statistical;
        s.fraction = fraction;
        return s;
    }
};

template <typename T>
QuantizedView<T> quantize_minmax(const Tensor<T>& x, const QuantSpec& spec);

template <typename T>
QuantizedView<T> quantize_clipped(const Tensor<T>& x, const QuantSpec& spec, const ScaleSource<T>& source);

/// Grid fitted to one contiguous group under a MinMax or Statistical spec.
template <typename T>
kernels::Grid<T> fit_grid(std::span<const T> group, const QuantSpec& spec);

/// Integer code of x on a grid (as T) and the value a code dequantizes to.
/// grid_value(grid_code(x, g), g) equals the fake-quant kernel output bit for bit.
template <typename T>
T grid_code(T x, const kernels::Grid<T>& g);

template <typename T>
T grid_value(T code, const kernels::Grid<T>& g);

/// Forward/backward-aware fake quantization on a tape. MinMax passes the
/// upstream gradient unchanged; clipped variants zero it outside the range.
/// Scales computed from the forward values are constants in backward.
template <typename T>
Var<T> fake_quant_ste(Var<T> x, const QuantSpec& spec);

/// Learned-step-size variant: `step` (and `zero_point` for asymmetric specs)
/// are one-element tape variables that receive gradients
///   d y / d step = round(v) - v inside the range, the end code outside,
///   d y / d zero_point = 0 inside, 1 outside,
/// where v = (x - zero_point) / step.
template <typename T>
Var<T> fake_quant_learnable(Var<T> x, const QuantSpec& spec, Var<T> step, std::optional<Var<T>> zero_point);

/// Initial learned step for an activation sample: 2 * mean|x| / sqrt(qmax).
template <typename T>
T learnable_step_init(const Tensor<T>& sample, const QuantSpec& spec);

/// Channel-wise smoothing factors s (all finite and > 0) with migration exponent a.
template <typename T>
struct SmoothingParams {
    std::vector<T> scales;
    double migration = 0.5;
};

template <typename T>
struct SmoothedWeight {
    Tensor<T> weight;
    SmoothingParams<T> params;
};

/// s_j = act_absmax_j^a / colmax_j^(1-a) (s_j = 1 if either statistic is zero),
/// weight [out, in] becomes weight * diag(s). Callers divide activations by s.
template <typename T>
SmoothedWeight<T> smooth_rescale(const Tensor<T>& weight, std::span<const T> act_absmax, double migration = 0.5);

}  // namespace lqat
