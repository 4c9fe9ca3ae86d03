// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <charconv>
#include <cmath>

#include "lqat/quant.hpp"

namespace lqat {

double QuantSpec::qmin() const {
    if (symmetry == Symmetry::Asymmetric) return 0.0;
    return -(std::ldexp(1.0, bits - 1) - 1.0);
}

double QuantSpec::qmax() const {
    if (symmetry == Symmetry::Asymmetric) return std::ldexp(1.0, bits) - 1.0;
    return std::ldexp(1.0, bits - 1) - 1.0;
}

namespace {

int parse_bits_field(std::string_view field, std::string_view whole) {
    auto bad = [&](const std::string& why) {
        return ConfigError("invalid quantization scheme '" + std::string(whole) + "': " + why);
    };
    if (field.empty()) throw bad("empty field");
    if (field.size() > 1 && field[0] == '0') throw bad("leading zero in '" + std::string(field) + "'");
    int v = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw bad("'" + std::string(field) + "' is not an integer");
    }
    if (!((v >= 2 && v <= 8) || v == QuantSpec::kFullPrecision)) {
        throw bad("bit width " + std::to_string(v) + " not in {2..8, 16}");
    }
    return v;
}

void check_spec(const QuantSpec& spec) {
    if (spec.bits < 2 || spec.bits > QuantSpec::kFullPrecision) {
        throw ContractError("quantizer bit width must be in [2, 16], got " + std::to_string(spec.bits));
    }
}

template <typename T>
void check_finite(const Tensor<T>& x, const char* op) {
    if (!x.all_finite()) throw NumericError(std::string(op) + ": input contains non-finite values");
}

template <typename T>
kernels::Grid<T> formula_grid(T step, T offset, const QuantSpec& spec) {
    const T qmin = static_cast<T>(spec.qmin());
    const T qmax = static_cast<T>(spec.qmax());
    return {step, offset, qmin, qmax, qmin * step + offset, qmax * step + offset};
}

// Grid whose end codes land exactly on [lo, hi].
template <typename T>
kernels::Grid<T> pinned_grid(T lo, T hi, const QuantSpec& spec) {
    const T qmin = static_cast<T>(spec.qmin());
    const T qmax = static_cast<T>(spec.qmax());
    if (spec.symmetry == Symmetry::Symmetric) {
        const T a = hi;
        if (a == 0) return formula_grid<T>(T(1), T(0), spec);
        return {a / qmax, T(0), qmin, qmax, -a, a};
    }
    if (hi == lo) return formula_grid<T>(T(1), lo, spec);
    return {(hi - lo) / qmax, lo, qmin, qmax, lo, hi};
}

template <typename T>
QuantizedView<T> identity_view(const Tensor<T>& x, const QuantSpec& spec) {
    const GroupLayout layout = GroupLayout::of(x.shape(), spec.granularity);
    return {x, std::vector<T>(layout.groups, T(1)), std::vector<T>(layout.groups, T(0)), spec.granularity,
            std::vector<std::uint8_t>(x.size(), 1)};
}

// Applies one grid per group and records the pass-through mask.
template <typename T>
QuantizedView<T> apply_grids(const Tensor<T>& x, const QuantSpec& spec, const GroupLayout& layout,
                             const std::vector<kernels::Grid<T>>& grids, bool track_mask) {
    QuantizedView<T> view{Tensor<T>(x.shape()), {}, {}, spec.granularity, {}};
    view.scales.reserve(grids.size());
    view.zero_points.reserve(grids.size());
    for (const auto& g : grids) {
        view.scales.push_back(g.step);
        view.zero_points.push_back(g.offset);
    }
    view.pass_mask.assign(x.size(), 1);
    const T* src = x.ptr();
    T* dst = view.values.ptr();
    for (std::size_t o = 0; o < layout.outer; ++o) {
        for (std::size_t g = 0; g < layout.groups; ++g) {
            const std::size_t base = (o * layout.groups + g) * layout.inner;
            kernels::fake_quant<T>(src + base, dst + base, layout.inner, grids[g]);
            if (track_mask) {
                const auto& gr = grids[g];
                for (std::size_t i = 0; i < layout.inner; ++i) {
                    view.pass_mask[base + i] = (src[base + i] >= gr.lo && src[base + i] <= gr.hi) ? 1 : 0;
                }
            }
        }
    }
    return view;
}

template <typename T>
std::vector<std::pair<T, T>> group_min_max(const Tensor<T>& x, const GroupLayout& layout) {
    std::vector<std::pair<T, T>> out(layout.groups);
    for (std::size_t g = 0; g < layout.groups; ++g) {
        for (std::size_t o = 0; o < layout.outer; ++o) {
            const auto mm = kernels::min_max<T>(x.ptr() + (o * layout.groups + g) * layout.inner, layout.inner);
            if (o == 0) {
                out[g] = mm;
            } else {
                out[g].first = std::min(out[g].first, mm.first);
                out[g].second = std::max(out[g].second, mm.second);
            }
        }
    }
    return out;
}

template <typename T>
std::vector<T> group_abs_max(const Tensor<T>& x, const GroupLayout& layout) {
    std::vector<T> out(layout.groups, T(0));
    for (std::size_t g = 0; g < layout.groups; ++g) {
        for (std::size_t o = 0; o < layout.outer; ++o) {
            out[g] = std::max(out[g], kernels::abs_max<T>(x.ptr() + (o * layout.groups + g) * layout.inner, layout.inner));
        }
    }
    return out;
}

// Nearest-rank quantile of |x| within each group.
template <typename T>
std::vector<T> group_abs_quantile(const Tensor<T>& x, const GroupLayout& layout, double fraction) {
    std::vector<T> out(layout.groups);
    std::vector<T> buf;
    for (std::size_t g = 0; g < layout.groups; ++g) {
        buf.clear();
        for (std::size_t o = 0; o < layout.outer; ++o) {
            const T* p = x.ptr() + (o * layout.groups + g) * layout.inner;
            for (std::size_t i = 0; i < layout.inner; ++i) buf.push_back(std::abs(p[i]));
        }
        const double n = static_cast<double>(buf.size());
        std::size_t rank = static_cast<std::size_t>(std::ceil(fraction * n));
        rank = std::clamp<std::size_t>(rank, 1, buf.size());
        std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(rank - 1), buf.end());
        out[g] = buf[rank - 1];
    }
    return out;
}

}  // namespace

QuantScheme QuantScheme::parse(std::string_view text) {
    const auto first = text.find('-');
    const auto second = first == std::string_view::npos ? first : text.find('-', first + 1);
    if (first == std::string_view::npos || second == std::string_view::npos ||
        text.find('-', second + 1) != std::string_view::npos) {
        throw ConfigError("invalid quantization scheme '" + std::string(text) + "': expected <w>-<a>-<kv>");
    }
    QuantScheme s;
    s.weights = weight_spec(parse_bits_field(text.substr(0, first), text));
    s.activations = activation_spec(parse_bits_field(text.substr(first + 1, second - first - 1), text));
    s.kv = activation_spec(parse_bits_field(text.substr(second + 1), text));
    return s;
}

std::string QuantScheme::to_string() const {
    return weights.bits_string() + "-" + activations.bits_string() + "-" + kv.bits_string();
}

GroupLayout GroupLayout::of(const Shape& shape, const Granularity& g) {
    const std::size_t n = numel(shape);
    switch (g.kind) {
        case Granularity::Kind::PerTensor: return {1, 1, n};
        case Granularity::Kind::PerToken: return {1, n / shape.back(), shape.back()};
        case Granularity::Kind::PerChannel: {
            if (g.axis >= shape.size()) {
                throw ContractError("per-channel axis " + std::to_string(g.axis) + " invalid for shape " +
                                    lqat::to_string(shape));
            }
            GroupLayout l{1, shape[g.axis], 1};
            for (std::size_t i = 0; i < g.axis; ++i) l.outer *= shape[i];
            for (std::size_t i = g.axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
            return l;
        }
    }
    return {1, 1, n};
}

template <typename T>
QuantizedView<T> quantize_minmax(const Tensor<T>& x, const QuantSpec& spec) {
    check_spec(spec);
    if (spec.clipping.kind != Clipping::Kind::None) {
        throw ContractError("quantize_minmax called with a clipping quantizer spec");
    }
    const GroupLayout layout = GroupLayout::of(x.shape(), spec.granularity);
    if (spec.is_full_precision()) return identity_view(x, spec);
    check_finite(x, "quantize_minmax");
    std::vector<kernels::Grid<T>> grids(layout.groups);
    if (spec.symmetry == Symmetry::Symmetric) {
        const auto amax = group_abs_max(x, layout);
        for (std::size_t g = 0; g < layout.groups; ++g) grids[g] = pinned_grid<T>(-amax[g], amax[g], spec);
    } else {
        const auto mm = group_min_max(x, layout);
        for (std::size_t g = 0; g < layout.groups; ++g) grids[g] = pinned_grid<T>(mm[g].first, mm[g].second, spec);
    }
    return apply_grids(x, spec, layout, grids, false);
}

template <typename T>
QuantizedView<T> quantize_clipped(const Tensor<T>& x, const QuantSpec& spec, const ScaleSource<T>& source) {
    check_spec(spec);
    const GroupLayout layout = GroupLayout::of(x.shape(), spec.granularity);
    if (spec.is_full_precision()) return identity_view(x, spec);
    check_finite(x, "quantize_clipped");
    std::vector<kernels::Grid<T>> grids(layout.groups);
    switch (source.kind) {
        case ScaleSource<T>::Kind::Fixed: {
            if (!(source.range > 0)) {
                throw ContractError("clipping range must be positive, got " + std::to_string(source.range));
            }
            // Codes 0..2^N-1 across [offset, offset + range].
            QuantSpec asym = spec;
            asym.symmetry = Symmetry::Asymmetric;
            const T levels = static_cast<T>(asym.qmax());
            const kernels::Grid<T> g{source.range / levels, source.offset, T(0), levels, source.offset,
                                     source.offset + source.range};
            std::fill(grids.begin(), grids.end(), g);
            break;
        }
        case ScaleSource<T>::Kind::Statistical: {
            if (!(source.fraction > 0.0 && source.fraction <= 1.0)) {
                throw ContractError("clip fraction must be in (0, 1]");
            }
            const auto clip = group_abs_quantile(x, layout, source.fraction);
            if (spec.symmetry == Symmetry::Symmetric) {
                for (std::size_t g = 0; g < layout.groups; ++g) grids[g] = pinned_grid<T>(-clip[g], clip[g], spec);
            } else {
                const auto mm = group_min_max(x, layout);
                for (std::size_t g = 0; g < layout.groups; ++g) {
                    const T lo = std::max(mm[g].first, -clip[g]);
                    const T hi = std::min(mm[g].second, clip[g]);
                    grids[g] = pinned_grid<T>(lo, hi, spec);
                }
            }
            break;
        }
        case ScaleSource<T>::Kind::Learnable: {
            if (source.step == nullptr) throw ContractError("learnable scale source without a step parameter");
            const T step = source.step->value.item();
            if (!(step > 0)) throw ContractError("learned step must be positive, got " + std::to_string(step));
            const T offset = source.zero_point != nullptr ? source.zero_point->value.item() : T(0);
            std::fill(grids.begin(), grids.end(), formula_grid<T>(step, offset, spec));
            break;
        }
    }
    return apply_grids(x, spec, layout, grids, true);
}

template <typename T>
kernels::Grid<T> fit_grid(std::span<const T> group, const QuantSpec& spec) {
    check_spec(spec);
    if (group.empty()) throw ContractError("fit_grid: empty group");
    if (spec.is_full_precision()) throw ContractError("fit_grid: full-precision spec has no grid");
    for (T v : group) {
        if (!std::isfinite(v)) throw NumericError("fit_grid: input contains non-finite values");
    }
    const auto [mn, mx] = kernels::min_max<T>(group.data(), group.size());
    const T amax = std::max(std::abs(mn), std::abs(mx));
    switch (spec.clipping.kind) {
        case Clipping::Kind::None:
            return spec.symmetry == Symmetry::Symmetric ? pinned_grid<T>(-amax, amax, spec) : pinned_grid<T>(mn, mx, spec);
        case Clipping::Kind::Statistical: {
            const Tensor<T> tmp(Shape{group.size()}, std::vector<T>(group.begin(), group.end()));
            const T clip = group_abs_quantile(tmp, GroupLayout{1, 1, group.size()}, spec.clipping.fraction)[0];
            if (spec.symmetry == Symmetry::Symmetric) return pinned_grid<T>(-clip, clip, spec);
            return pinned_grid<T>(std::max(mn, -clip), std::min(mx, clip), spec);
        }
        case Clipping::Kind::Learnable: break;
    }
    throw ContractError("fit_grid: learnable clipping has no data-derived grid");
}

template <typename T>
T grid_code(T x, const kernels::Grid<T>& g) {
    const T v = (x - g.offset) / g.step;
    return std::min(std::max(std::round(v), g.qmin), g.qmax);
}

template <typename T>
T grid_value(T code, const kernels::Grid<T>& g) {
    if (code == g.qmin) return g.lo;
    if (code == g.qmax) return g.hi;
    const T scaled = code * g.step;
    return scaled + g.offset;
}

template <typename T>
Var<T> fake_quant_ste(Var<T> x, const QuantSpec& spec) {
    if (spec.is_full_precision()) return x;
    if (spec.clipping.kind == Clipping::Kind::Learnable) {
        throw ContractError("fake_quant_ste: learnable clipping needs fake_quant_learnable");
    }
    const std::size_t ix = x.id;
    if (spec.clipping.kind == Clipping::Kind::None) {
        QuantizedView<T> view = quantize_minmax(x.value(), spec);
        return x.tape->record(OpKind::FakeQuant, {ix}, std::move(view.values),
                              [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                                  Tensor<T>& dx = t.grad_buffer(ix);
                                  for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                              });
    }
    QuantizedView<T> view = quantize_clipped(x.value(), spec, ScaleSource<T>::statistical(spec.clipping.fraction));
    return x.tape->record(OpKind::FakeQuant, {ix}, std::move(view.values),
                          [=, mask = std::move(view.pass_mask)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              Tensor<T>& dx = t.grad_buffer(ix);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (mask[i]) dx[i] += g[i];
                              }
                          });
}

template <typename T>
Var<T> fake_quant_learnable(Var<T> x, const QuantSpec& spec, Var<T> step, std::optional<Var<T>> zero_point) {
    if (spec.is_full_precision()) return x;
    if (step.value().size() != 1 || (zero_point && zero_point->value().size() != 1)) {
        throw DimensionError("fake_quant_learnable: step and zero point must have one element");
    }
    // Route the tape values through Parameters so quantize_clipped can read them.
    Parameter<T> step_view(step.value());
    Parameter<T> zp_view(zero_point ? zero_point->value() : Tensor<T>::scalar(T(0)));
    ScaleSource<T> src;
    src.kind = ScaleSource<T>::Kind::Learnable;
    src.step = &step_view;
    src.zero_point = zero_point ? &zp_view : nullptr;
    QuantizedView<T> view = quantize_clipped(x.value(), spec, src);

    const std::size_t ix = x.id, is = step.id;
    const std::optional<std::size_t> iz = zero_point ? std::optional<std::size_t>(zero_point->id) : std::nullopt;
    std::vector<std::size_t> inputs{ix, is};
    if (iz) inputs.push_back(*iz);
    const T s = step.value().item();
    const T z = zero_point ? zero_point->value().item() : T(0);
    const T qmin = static_cast<T>(spec.qmin());
    const T qmax = static_cast<T>(spec.qmax());
    return x.tape->record(
        OpKind::FakeQuantLearnable, std::move(inputs), std::move(view.values),
        [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
            const T* xv = t.value(ix).ptr();
            T* dx = t.requires_grad(ix) ? t.grad_buffer(ix).ptr() : nullptr;
            T ds = 0, dz = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = (xv[i] - z) / s;
                if (v < qmin) {
                    ds += g[i] * qmin;
                    dz += g[i];
                } else if (v > qmax) {
                    ds += g[i] * qmax;
                    dz += g[i];
                } else {
                    ds += g[i] * (std::round(v) - v);
                    if (dx) dx[i] += g[i];
                }
            }
            if (t.requires_grad(is)) t.grad_buffer(is)[0] += ds;
            if (iz && t.requires_grad(*iz)) t.grad_buffer(*iz)[0] += dz;
        });
}

template <typename T>
T learnable_step_init(const Tensor<T>& sample, const QuantSpec& spec) {
    T acc = 0;
    for (T v : sample.data()) acc += std::abs(v);
    const T mean_abs = acc / static_cast<T>(sample.size());
    const T step = T(2) * mean_abs / std::sqrt(static_cast<T>(spec.qmax()));
    return step > 0 ? step : T(1);
}

template <typename T>
SmoothedWeight<T> smooth_rescale(const Tensor<T>& weight, std::span<const T> act_absmax, double migration) {
    if (weight.rank() != 2) throw DimensionError("smooth_rescale: weight must be [out, in], got " + to_string(weight.shape()));
    const std::size_t out = weight.dim(0), in = weight.dim(1);
    if (act_absmax.size() != in) {
        throw DimensionError("smooth_rescale: " + std::to_string(act_absmax.size()) +
                             " activation statistics for " + std::to_string(in) + " input channels");
    }
    if (!(migration >= 0.0 && migration <= 1.0)) throw ContractError("smoothing exponent must lie in [0, 1]");
    for (T a : act_absmax) {
        if (!(a >= 0) || !std::isfinite(a)) throw ContractError("activation statistics must be finite and >= 0");
    }
    SmoothedWeight<T> res{weight, {std::vector<T>(in, T(1)), migration}};
    for (std::size_t j = 0; j < in; ++j) {
        T colmax = 0;
        for (std::size_t i = 0; i < out; ++i) colmax = std::max(colmax, std::abs(weight[i * in + j]));
        if (colmax > 0 && act_absmax[j] > 0) {
            const double s = std::pow(static_cast<double>(act_absmax[j]), migration) /
                             std::pow(static_cast<double>(colmax), 1.0 - migration);
            res.params.scales[j] = static_cast<T>(s);
        }
        if (!(res.params.scales[j] > 0) || !std::isfinite(res.params.scales[j])) {
            throw NumericError("smooth_rescale: degenerate factor for input channel " + std::to_string(j));
        }
    }
    for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < in; ++j) res.weight[i * in + j] *= res.params.scales[j];
    return res;
}

#define LQAT_INSTANTIATE_QUANT(T)                                                                           \
    template QuantizedView<T> quantize_minmax(const Tensor<T>&, const QuantSpec&);                          \
    template QuantizedView<T> quantize_clipped(const Tensor<T>&, const QuantSpec&, const ScaleSource<T>&);  \
    template Var<T> fake_quant_ste(Var<T>, const QuantSpec&);                                               \
    template Var<T> fake_quant_learnable(Var<T>, const QuantSpec&, Var<T>, std::optional<Var<T>>);          \
    template T learnable_step_init(const Tensor<T>&, const QuantSpec&);                                     \
    template kernels::Grid<T> fit_grid(std::span<const T>, const QuantSpec&);                               \
    template T grid_code(T, const kernels::Grid<T>&);                                                       \
    template T grid_value(T, const kernels::Grid<T>&);                                                      \
    template SmoothedWeight<T> smooth_rescale(const Tensor<T>&, std::span<const T>, double);

LQAT_INSTANTIATE_QUANT(float)
LQAT_INSTANTIATE_QUANT(double)

}  // namespace lqat
