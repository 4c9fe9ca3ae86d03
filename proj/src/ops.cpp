// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "lqat/autodiff.hpp"
#include "lqat/kernels.hpp"

namespace lqat {
namespace {

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

std::size_t last_dim(const Shape& s) { return s.back(); }

std::size_t rows_of(const Shape& s) { return numel(s) / s.back(); }

enum class Broadcast { Same, LastDim, Scalar };

Broadcast classify(const Shape& a, const Shape& b, bool allow_scalar, const char* op) {
    if (a == b) return Broadcast::Same;
    if (b.size() == 1 && b[0] == last_dim(a)) return Broadcast::LastDim;
    if (allow_scalar && numel(b) == 1) return Broadcast::Scalar;
    shape_error(op, a, b);
}

// Row-wise log-sum-exp helpers shared by the loss ops.
template <typename T>
void row_softmax(const T* x, T* y, std::size_t n) {
    T m = *std::max_element(x, x + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - m);
        s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
}

template <typename T>
T row_logsumexp(const T* x, std::size_t n) {
    T m = *std::max_element(x, x + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - m);
    return m + std::log(s);
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, Trans trans_b) {
    same_tape(a, b, "matmul");
    const Shape as = a.shape();
    const Shape bs = b.shape();
    const bool tb = trans_b == Trans::Yes;
    std::size_t batch = 1;
    std::size_t m, k, n;
    if (as.size() == 2 && bs.size() == 2) {
        m = as[0];
        k = as[1];
        n = tb ? bs[0] : bs[1];
        if ((tb ? bs[1] : bs[0]) != k) shape_error("matmul", as, bs);
    } else if (as.size() == 3 && bs.size() == 3 && as[0] == bs[0]) {
        batch = as[0];
        m = as[1];
        k = as[2];
        n = tb ? bs[1] : bs[2];
        if ((tb ? bs[2] : bs[1]) != k) shape_error("matmul", as, bs);
    } else {
        shape_error("matmul", as, bs);
    }
    Shape out_shape = batch == 1 && as.size() == 2 ? Shape{m, n} : Shape{batch, m, n};
    Tensor<T> out(out_shape);
    const T* ap = a.value().ptr();
    const T* bp = b.value().ptr();
    for (std::size_t q = 0; q < batch; ++q) {
        kernels::gemm<T>(false, tb, m, n, k, ap + q * m * k, bp + q * k * n, out.ptr() + q * m * n, false);
    }
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(OpKind::MatMul, {ia, ib}, std::move(out),
                          [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              const T* gp = g.ptr();
                              const T* av = t.value(ia).ptr();
                              const T* bv = t.value(ib).ptr();
                              if (t.requires_grad(ia)) {
                                  T* da = t.grad_buffer(ia).ptr();
                                  for (std::size_t q = 0; q < batch; ++q) {
                                      // da = g * op(B)^T
                                      kernels::gemm<T>(false, !tb, m, k, n, gp + q * m * n, bv + q * k * n,
                                                       da + q * m * k, true);
                                  }
                              }
                              if (t.requires_grad(ib)) {
                                  T* db = t.grad_buffer(ib).ptr();
                                  for (std::size_t q = 0; q < batch; ++q) {
                                      if (tb) {
                                          kernels::gemm<T>(true, false, n, k, m, gp + q * m * n, av + q * m * k,
                                                           db + q * k * n, true);
                                      } else {
                                          kernels::gemm<T>(true, false, k, n, m, av + q * m * k, gp + q * m * n,
                                                           db + q * k * n, true);
                                      }
                                  }
                              }
                          });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    same_tape(a, b, "add");
    const Broadcast mode = classify(a.shape(), b.shape(), false, "add");
    Tensor<T> out = a.value();
    const T* bp = b.value().ptr();
    const std::size_t d = last_dim(out.shape());
    if (mode == Broadcast::Same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i % d];
    }
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(OpKind::Add, {ia, ib}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        if (t.requires_grad(ia)) {
            Tensor<T>& da = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            Tensor<T>& db = t.grad_buffer(ib);
            if (mode == Broadcast::Same) {
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    same_tape(a, b, "mul");
    const Shape as = a.shape();
    const Shape bs = b.shape();
    Broadcast mode;
    if (numel(bs) == 1) {
        mode = Broadcast::Scalar;
    } else if (bs.size() == 1 && bs[0] == last_dim(as)) {
        mode = Broadcast::LastDim;
    } else {
        shape_error("mul", as, bs);
    }
    Tensor<T> out = a.value();
    const T* bp = b.value().ptr();
    const std::size_t d = last_dim(as);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mode == Broadcast::Scalar ? bp[0] : bp[i % d];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(OpKind::Mul, {ia, ib}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        const Tensor<T>& av = t.value(ia);
        const Tensor<T>& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor<T>& da = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i)
                da[i] += g[i] * (mode == Broadcast::Scalar ? bv[0] : bv[i % d]);
        }
        if (t.requires_grad(ib)) {
            Tensor<T>& db = t.grad_buffer(ib);
            if (mode == Broadcast::Scalar) {
                T s = 0;
                for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
                db[0] += s;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i] * av[i];
            }
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    Tensor<T> out = a.value();
    for (T& v : out.data()) v *= factor;
    const std::size_t ia = a.id;
    return a.tape->record(OpKind::Scale, {ia}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        Tensor<T>& da = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
    });
}

template <typename T>
Var<T> elementwise_mul(Var<T> a, Var<T> b) {
    same_tape(a, b, "elementwise_mul");
    if (a.shape() != b.shape()) shape_error("elementwise_mul", a.shape(), b.shape());
    Tensor<T> out = a.value();
    const T* bp = b.value().ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(OpKind::ElementwiseMul, {ia, ib}, std::move(out),
                          [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              const Tensor<T>& av = t.value(ia);
                              const Tensor<T>& bv = t.value(ib);
                              if (t.requires_grad(ia)) {
                                  Tensor<T>& da = t.grad_buffer(ia);
                                  for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
                              }
                              if (t.requires_grad(ib)) {
                                  Tensor<T>& db = t.grad_buffer(ib);
                                  for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
                              }
                          });
}

template <typename T>
Var<T> embed_lookup(Var<T> table, std::span<const Token> ids) {
    const Shape& ts = table.shape();
    if (ts.size() != 2) throw DimensionError("embed_lookup: table must be rank 2, got " + to_string(ts));
    if (ids.empty()) throw InputError("embed_lookup: empty id sequence");
    const std::size_t vocab = ts[0], d = ts[1];
    Tensor<T> out(Shape{ids.size(), d});
    const T* tp = table.value().ptr();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw InputError("token id " + std::to_string(ids[i]) + " out of range for vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(tp + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
    }
    const std::size_t it = table.id;
    std::vector<Token> saved(ids.begin(), ids.end());
    return table.tape->record(OpKind::EmbedLookup, {it}, std::move(out),
                              [=, saved = std::move(saved)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                                  T* dt = t.grad_buffer(it).ptr();
                                  for (std::size_t i = 0; i < saved.size(); ++i) {
                                      T* row = dt + static_cast<std::size_t>(saved[i]) * d;
                                      for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                                  }
                              });
}

template <typename T>
Var<T> softmax_lastdim(Var<T> x, bool causal, std::size_t offset) {
    const Shape& s = x.shape();
    const std::size_t d = last_dim(s);
    const std::size_t rows = rows_of(s);
    const std::size_t seq_rows = s.size() >= 2 ? s[s.size() - 2] : 1;
    Tensor<T> out(s);
    const T* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t visible = causal ? std::min(d, (r % seq_rows) + offset + 1) : d;
        row_softmax(xp + r * d, out.ptr() + r * d, visible);
    }
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Softmax, {ix}, std::move(out),
                          [=](Tape<T>& t, std::size_t self, const Tensor<T>& g) {
                              const T* y = t.value(self).ptr();
                              T* dx = t.grad_buffer(ix).ptr();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* yr = y + r * d;
                                  const T* gr = g.ptr() + r * d;
                                  T dotv = 0;
                                  for (std::size_t j = 0; j < d; ++j) dotv += gr[j] * yr[j];
                                  for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += yr[j] * (gr[j] - dotv);
                              }
                          });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
    same_tape(x, gain, "rms_norm");
    const Shape& s = x.shape();
    const std::size_t d = last_dim(s);
    if (gain.shape() != Shape{d}) shape_error("rms_norm", s, gain.shape());
    const std::size_t rows = rows_of(s);
    Tensor<T> out(s);
    std::vector<T> inv(rows);
    const T* xp = x.value().ptr();
    const T* gp = gain.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xp + r * d;
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv[r] * gp[j];
    }
    const std::size_t ix = x.id, ig = gain.id;
    return x.tape->record(
        OpKind::RmsNorm, {ix, ig}, std::move(out),
        [=, inv = std::move(inv)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
            const T* xv = t.value(ix).ptr();
            const T* gv = t.value(ig).ptr();
            const bool want_x = t.requires_grad(ix);
            const bool want_g = t.requires_grad(ig);
            T* dx = want_x ? t.grad_buffer(ix).ptr() : nullptr;
            T* dg = want_g ? t.grad_buffer(ig).ptr() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xv + r * d;
                const T* gr = g.ptr() + r * d;
                if (want_g) {
                    for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xr[j] * inv[r];
                }
                if (want_x) {
                    T proj = 0;
                    for (std::size_t j = 0; j < d; ++j) proj += gr[j] * gv[j] * xr[j] * inv[r];
                    proj /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        dx[r * d + j] += inv[r] * (gr[j] * gv[j] - xr[j] * inv[r] * proj);
                    }
                }
            }
        });
}

template <typename T>
Var<T> silu(Var<T> x) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = v / (T(1) + std::exp(-v));
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Silu, {ix}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        const T* xv = t.value(ix).ptr();
        T* dx = t.grad_buffer(ix).ptr();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T sig = T(1) / (T(1) + std::exp(-xv[i]));
            dx[i] += g[i] * sig * (T(1) + xv[i] * (T(1) - sig));
        }
    });
}

template <typename T>
Var<T> rope_rotate(Var<T> x, std::size_t position_offset, T base) {
    const Shape& s = x.shape();
    if (s.size() < 3 || s.back() % 2 != 0) {
        throw DimensionError("rope_rotate: expected [..., seq, heads, even head_dim], got " + to_string(s));
    }
    const std::size_t hd = s[s.size() - 1];
    const std::size_t heads = s[s.size() - 2];
    const std::size_t seq = s[s.size() - 3];
    const std::size_t outer = numel(s) / (seq * heads * hd);
    const std::size_t half = hd / 2;
    // cos/sin table [seq, half], evaluated in double for every element type.
    std::vector<T> cs(seq * half), sn(seq * half);
    for (std::size_t p = 0; p < seq; ++p) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double ang = static_cast<double>(p + position_offset) * freq;
            cs[p * half + i] = static_cast<T>(std::cos(ang));
            sn[p * half + i] = static_cast<T>(std::sin(ang));
        }
    }
    auto rotate = [=](const T* src, T* dst, const std::vector<T>& c, const std::vector<T>& sgn, T dir) {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t p = 0; p < seq; ++p)
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t baseidx = ((o * seq + p) * heads + h) * hd;
                    for (std::size_t i = 0; i < half; ++i) {
                        const T co = c[p * half + i];
                        const T si = dir * sgn[p * half + i];
                        const T x0 = src[baseidx + 2 * i];
                        const T x1 = src[baseidx + 2 * i + 1];
                        dst[baseidx + 2 * i] += x0 * co - x1 * si;
                        dst[baseidx + 2 * i + 1] += x0 * si + x1 * co;
                    }
                }
    };
    Tensor<T> out(s);
    rotate(x.value().ptr(), out.ptr(), cs, sn, T(1));
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Rope, {ix}, std::move(out),
                          [=, cs = std::move(cs), sn = std::move(sn)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              // The transpose of a rotation is the rotation by -theta.
                              rotate(g.ptr(), t.grad_buffer(ix).ptr(), cs, sn, T(-1));
                          });
}

namespace {

// Moves src (shape `in`) into dst with axes permuted; dst[out_index] (+)= src[...].
template <typename T>
void permute_into(const T* src, T* dst, const Shape& in, const std::vector<std::size_t>& perm, bool accumulate) {
    const std::size_t r = in.size();
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) stride[i] = in_stride[perm[i]];
    std::vector<std::size_t> idx(r, 0);
    const std::size_t total = numel(in);
    std::size_t src_off = 0;
    for (std::size_t o = 0; o < total; ++o) {
        if (accumulate) {
            dst[o] += src[src_off];
        } else {
            dst[o] = src[src_off];
        }
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            src_off += stride[ax];
            if (idx[ax] < out[ax]) break;
            src_off -= stride[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace

template <typename T>
Var<T> transpose(Var<T> x, std::vector<std::size_t> perm) {
    const Shape in = x.shape();
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    std::vector<std::size_t> iota(in.size());
    std::iota(iota.begin(), iota.end(), std::size_t{0});
    if (check != iota) throw DimensionError("transpose: permutation does not match rank of " + to_string(in));
    Shape out_shape(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[perm[i]];
    Tensor<T> out(out_shape);
    permute_into(x.value().ptr(), out.ptr(), in, perm, false);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Transpose, {ix}, std::move(out),
                          [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              permute_into(g.ptr(), t.grad_buffer(ix).ptr(), out_shape, inverse, true);
                          });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    if (numel(shape) != x.value().size()) shape_error("reshape", x.shape(), shape);
    Tensor<T> out = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Reshape, {ix}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        Tensor<T>& dx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape in = x.shape();
    if (axis >= in.size() || length == 0 || start + length > in[axis]) {
        throw DimensionError("slice: axis " + std::to_string(axis) + " range [" + std::to_string(start) + ", " +
                             std::to_string(start + length) + ") invalid for shape " + to_string(in));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
    Shape out_shape = in;
    out_shape[axis] = length;
    Tensor<T> out(out_shape);
    const T* xp = x.value().ptr();
    const std::size_t full = in[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xp + (o * full + start) * inner, length * inner, out.ptr() + o * length * inner);
    }
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Slice, {ix}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        T* dx = t.grad_buffer(ix).ptr();
        for (std::size_t o = 0; o < outer; ++o) {
            T* dst = dx + (o * full + start) * inner;
            const T* src = g.ptr() + o * length * inner;
            for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
    std::vector<std::size_t> widths;
    std::vector<std::size_t> ids;
    std::size_t total = 0;
    for (const Var<T>& p : parts) {
        same_tape(parts[0], p, "concat");
        Shape s = p.shape();
        Shape a = first, b = s;
        a[axis] = b[axis] = 0;
        if (a != b) shape_error("concat", first, s);
        widths.push_back(s[axis]);
        ids.push_back(p.id);
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    Shape out_shape = first;
    out_shape[axis] = total;
    Tensor<T> out(out_shape);
    std::size_t at = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const T* src = parts[p].value().ptr();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * widths[p] * inner, widths[p] * inner, out.ptr() + (o * total + at) * inner);
        }
        at += widths[p];
    }
    Tape<T>* tape = parts[0].tape;
    std::vector<std::size_t> inputs = ids;
    return tape->record(OpKind::Concat, std::move(inputs), std::move(out),
                        [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                            std::size_t pos = 0;
                            for (std::size_t p = 0; p < ids.size(); ++p) {
                                if (t.requires_grad(ids[p])) {
                                    T* dst = t.grad_buffer(ids[p]).ptr();
                                    for (std::size_t o = 0; o < outer; ++o) {
                                        const T* src = g.ptr() + (o * total + pos) * inner;
                                        for (std::size_t i = 0; i < widths[p] * inner; ++i)
                                            dst[o * widths[p] * inner + i] += src[i];
                                    }
                                }
                                pos += widths[p];
                            }
                        });
}

template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, std::span<const Token> targets) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != targets.size()) {
        throw DimensionError("cross_entropy_mean: logits " + to_string(s) + " vs " + std::to_string(targets.size()) +
                             " targets");
    }
    const std::size_t n = s[0], c = s[1];
    const T* xp = logits.value().ptr();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
            throw InputError("label " + std::to_string(targets[i]) + " out of range for " + std::to_string(c) +
                             " classes");
        }
        total += row_logsumexp(xp + i * c, c) - xp[i * c + static_cast<std::size_t>(targets[i])];
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    std::vector<Token> saved(targets.begin(), targets.end());
    const std::size_t ix = logits.id;
    return logits.tape->record(OpKind::CrossEntropyMean, {ix}, std::move(out),
                               [=, saved = std::move(saved)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                                   const T* xv = t.value(ix).ptr();
                                   T* dx = t.grad_buffer(ix).ptr();
                                   const T w = g[0] / static_cast<T>(n);
                                   std::vector<T> p(c);
                                   for (std::size_t i = 0; i < n; ++i) {
                                       row_softmax(xv + i * c, p.data(), c);
                                       p[static_cast<std::size_t>(saved[i])] -= T(1);
                                       for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += w * p[j];
                                   }
                               });
}

template <typename T>
Var<T> soft_cross_entropy_mean(Var<T> logits, const Tensor<T>& teacher_logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || teacher_logits.shape() != s) {
        throw ContractError("kd loss: student logits " + to_string(s) + " vs teacher logits " +
                            to_string(teacher_logits.shape()));
    }
    const std::size_t n = s[0], c = s[1];
    Tensor<T> teacher_probs(s);
    for (std::size_t i = 0; i < n; ++i) row_softmax(teacher_logits.ptr() + i * c, teacher_probs.ptr() + i * c, c);
    const T* xp = logits.value().ptr();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        // sum_c p_c (lse - x_c) with sum_c p_c = 1
        const T lse = row_logsumexp(xp + i * c, c);
        T row = 0;
        for (std::size_t j = 0; j < c; ++j) row += teacher_probs[i * c + j] * (lse - xp[i * c + j]);
        total += row;
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    const std::size_t ix = logits.id;
    return logits.tape->record(
        OpKind::SoftCrossEntropy, {ix}, std::move(out),
        [=, teacher_probs = std::move(teacher_probs)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
            const T* xv = t.value(ix).ptr();
            T* dx = t.grad_buffer(ix).ptr();
            const T w = g[0] / static_cast<T>(n);
            std::vector<T> q(c);
            for (std::size_t i = 0; i < n; ++i) {
                row_softmax(xv + i * c, q.data(), c);
                for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += w * (q[j] - teacher_probs[i * c + j]);
            }
        });
}

template <typename T>
Var<T> log(Var<T> x) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = std::log(v);
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Log, {ix}, std::move(out), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        const T* xv = t.value(ix).ptr();
        T* dx = t.grad_buffer(ix).ptr();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / xv[i];
    });
}

template <typename T>
Var<T> exp(Var<T> x) {
    Tensor<T> out = x.value();
    for (T& v : out.data()) v = std::exp(v);
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Exp, {ix}, std::move(out), [=](Tape<T>& t, std::size_t self, const Tensor<T>& g) {
        const T* y = t.value(self).ptr();
        T* dx = t.grad_buffer(ix).ptr();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    T s = 0;
    for (T v : x.value().data()) s += v;
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Sum, {ix}, Tensor<T>::scalar(s), [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        Tensor<T>& dx = t.grad_buffer(ix);
        for (T& v : dx.data()) v += g[0];
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    T s = 0;
    for (T v : x.value().data()) s += v;
    const T n = static_cast<T>(x.value().size());
    const std::size_t ix = x.id;
    return x.tape->record(OpKind::Mean, {ix}, Tensor<T>::scalar(s / n),
                          [=](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              Tensor<T>& dx = t.grad_buffer(ix);
                              for (T& v : dx.data()) v += g[0] / n;
                          });
}

template <typename T>
T grad_check(const std::function<Var<T>(Var<T>)>& f, const Tensor<T>& x, T eps) {
    if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
    Tensor<T> analytic;
    {
        Tape<T> tape;
        Var<T> xv = tape.variable(x);
        Var<T> loss = f(xv);
        if (loss.value().size() != 1) {
            throw ContractError("grad_check: function must return a scalar, got shape " + to_string(loss.shape()));
        }
        tape.backward(loss);
        analytic = tape.grad(xv);
    }
    auto eval = [&](const Tensor<T>& at) {
        Tape<T> tape;
        return f(tape.constant(at)).value().item();
    };
    T worst = 0;
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + eps;
        const T up = eval(probe);
        probe[i] = orig - eps;
        const T down = eval(probe);
        probe[i] = orig;
        const T numeric = (up - down) / (T(2) * eps);
        const T err = std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

#define LQAT_INSTANTIATE_OPS(T)                                                       \
    template Var<T> matmul(Var<T>, Var<T>, Trans);                                    \
    template Var<T> add(Var<T>, Var<T>);                                              \
    template Var<T> mul(Var<T>, Var<T>);                                              \
    template Var<T> scale(Var<T>, T);                                                 \
    template Var<T> elementwise_mul(Var<T>, Var<T>);                                  \
    template Var<T> embed_lookup(Var<T>, std::span<const Token>);                     \
    template Var<T> softmax_lastdim(Var<T>, bool, std::size_t);                       \
    template Var<T> rms_norm(Var<T>, Var<T>, T);                                      \
    template Var<T> silu(Var<T>);                                                     \
    template Var<T> rope_rotate(Var<T>, std::size_t, T);                              \
    template Var<T> transpose(Var<T>, std::vector<std::size_t>);                      \
    template Var<T> reshape(Var<T>, Shape);                                           \
    template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);             \
    template Var<T> concat(std::span<const Var<T>>, std::size_t);                     \
    template Var<T> cross_entropy_mean(Var<T>, std::span<const Token>);               \
    template Var<T> soft_cross_entropy_mean(Var<T>, const Tensor<T>&);                \
    template Var<T> log(Var<T>);                                                      \
    template Var<T> exp(Var<T>);                                                      \
    template Var<T> sum(Var<T>);                                                      \
    template Var<T> mean(Var<T>);                                                     \
    template T grad_check(const std::function<Var<T>(Var<T>)>&, const Tensor<T>&, T);

LQAT_INSTANTIATE_OPS(float)
LQAT_INSTANTIATE_OPS(double)

}  // namespace lqat
