// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "lqat/checkpoint.hpp"
#include "lqat/errors.hpp"
#include "lqat/io.hpp"
#include "lqat/model.hpp"
#include "lqat/tokenizer.hpp"
#include "gradcheck_cases.hpp"

using namespace lqat;
using TD = Tensor<double>;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 96;
    c.dim = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_hidden = 48;
    c.max_seq_len = 32;
    return c;
}

Model<double> tiny_model(std::uint64_t seed, const ModelConfig& c = tiny_config()) {
    return test::scaled_random_model(c, seed);
}

std::vector<Token> random_tokens(Rng& rng, std::size_t n, std::size_t vocab = 96) {
    std::vector<Token> t(n);
    for (auto& x : t) x = static_cast<Token>(rng.below(vocab));
    return t;
}

// Plain-loop reference forward without any quantization.
std::vector<double> reference_logits(const Model<double>& m, const std::vector<Token>& tokens) {
    const ModelConfig& c = m.config();
    const std::size_t S = tokens.size(), D = c.dim, H = c.n_heads, hd = c.head_dim(), F = c.ffn_hidden;
    auto linear = [](const std::vector<double>& x, std::size_t rows, const TD& w) {
        const std::size_t out = w.dim(0), in = w.dim(1);
        std::vector<double> y(rows * out, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out; ++o) {
                double s = 0;
                for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[o * in + i];
                y[r * out + o] = s;
            }
        return y;
    };
    auto rms = [&](const std::vector<double>& x, const TD& g) {
        std::vector<double> y(x.size());
        for (std::size_t r = 0; r < S; ++r) {
            double ms = 0;
            for (std::size_t d = 0; d < D; ++d) ms += x[r * D + d] * x[r * D + d];
            const double inv = 1.0 / std::sqrt(ms / D + c.rms_eps);
            for (std::size_t d = 0; d < D; ++d) y[r * D + d] = x[r * D + d] * inv * g[d];
        }
        return y;
    };
    auto rope = [&](std::vector<double>& x) {
        for (std::size_t p = 0; p < S; ++p)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t i = 0; i < hd / 2; ++i) {
                    const double th = p * std::pow(c.rope_base, -2.0 * i / hd);
                    double& a = x[p * D + h * hd + 2 * i];
                    double& b = x[p * D + h * hd + 2 * i + 1];
                    const double a0 = a, b0 = b;
                    a = a0 * std::cos(th) - b0 * std::sin(th);
                    b = a0 * std::sin(th) + b0 * std::cos(th);
                }
    };
    std::vector<double> h(S * D);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t d = 0; d < D; ++d) h[s * D + d] = m.tok_embeddings.value[tokens[s] * D + d];
    for (const auto& L : m.layers) {
        auto xn = rms(h, L.attention_norm.value);
        auto q = linear(xn, S, L.wq.weight.value);
        auto k = linear(xn, S, L.wk.weight.value);
        auto v = linear(xn, S, L.wv.weight.value);
        rope(q);
        rope(k);
        std::vector<double> o(S * D, 0.0);
        for (std::size_t hh = 0; hh < H; ++hh)
            for (std::size_t i = 0; i < S; ++i) {
                std::vector<double> sc(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0;
                    for (std::size_t e = 0; e < hd; ++e) s += q[i * D + hh * hd + e] * k[j * D + hh * hd + e];
                    sc[j] = s / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, sc[j]);
                }
                double z = 0;
                for (auto& s : sc) z += (s = std::exp(s - mx));
                for (std::size_t j = 0; j <= i; ++j)
                    for (std::size_t e = 0; e < hd; ++e) o[i * D + hh * hd + e] += sc[j] / z * v[j * D + hh * hd + e];
            }
        auto ao = linear(o, S, L.wo.weight.value);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += ao[i];
        xn = rms(h, L.ffn_norm.value);
        auto g = linear(xn, S, L.w_gate.weight.value);
        auto u = linear(xn, S, L.w_up.weight.value);
        std::vector<double> a(S * F);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
        auto f = linear(a, S, L.w_down.weight.value);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += f[i];
    }
    return linear(rms(h, m.norm.value), S, m.output.weight.value);
}

double max_rel_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    return worst;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.max_seq_len = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(tiny_config().eos() == 95);
}

TEST_CASE("logits shape") {
    const Model<double> m = tiny_model(1);
    Rng rng(2);
    const std::vector<std::vector<Token>> batch{random_tokens(rng, 5), random_tokens(rng, 5)};
    CHECK(m.logits(batch, QuantScheme::parse("4-8-4")).shape() == Shape{2, 5, 96});
}

TEST_CASE("full-precision forward matches the plain-loop reference") {
    const Model<double> m = tiny_model(3);
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const auto tokens = random_tokens(rng, 1 + rng.below(20));
        const TD l = m.logits(std::span<const Token>(tokens), QuantScheme::parse("16-16-16"));
        CHECK(max_rel_diff(l.data(), reference_logits(m, tokens)) < 1e-10);
    }
}

TEST_CASE("full-precision specs are an exact identity") {
    const Model<double> m = tiny_model(5);
    Rng rng(6);
    const auto tokens = random_tokens(rng, 12);
    QuantScheme odd = QuantScheme::full_precision();
    odd.weights.granularity = Granularity::per_tensor();
    odd.activations.symmetry = Symmetry::Asymmetric;
    odd.kv.clipping = Clipping::statistical(0.5);
    CHECK(m.logits(std::span<const Token>(tokens), odd) ==
          m.logits(std::span<const Token>(tokens), QuantScheme::full_precision()));
    const Model<double> r = rtn_apply(m, QuantScheme::parse("16-16-16"));
    CHECK(r.state() == m.state());
}

TEST_CASE("one token: per-token equals per-tensor quantization") {
    const Model<double> m = tiny_model(7);
    QuantScheme per_token = QuantScheme::parse("4-4-4");
    QuantScheme per_tensor = per_token;
    per_tensor.activations.granularity = Granularity::per_tensor();
    per_tensor.kv.granularity = Granularity::per_tensor();
    for (Token t : {0, 17, 95}) {
        const Token ids[] = {t};
        CHECK(m.logits(std::span<const Token>(ids), per_token) == m.logits(std::span<const Token>(ids), per_tensor));
    }
}

TEST_CASE("causality under quantization") {
    const Model<double> m = tiny_model(8);
    Rng rng(9);
    for (const char* scheme : {"16-16-16", "4-8-4", "2-4-2"}) {
        const QuantScheme s = QuantScheme::parse(scheme);
        for (int trial = 0; trial < 5; ++trial) {
            auto tokens = random_tokens(rng, 16);
            const TD base = m.logits(std::span<const Token>(tokens), s);
            const std::size_t t = rng.below(15);
            for (std::size_t i = t + 1; i < tokens.size(); ++i) tokens[i] = static_cast<Token>(rng.below(96));
            const TD pert = m.logits(std::span<const Token>(tokens), s);
            for (std::size_t i = 0; i < (t + 1) * 96; ++i) REQUIRE(base[i] == pert[i]);
        }
    }
}

TEST_CASE("incremental decoding") {
    const Model<double> m = tiny_model(10);
    Rng rng(11);
    const auto tokens = random_tokens(rng, 20);
    SUBCASE("full-precision cache equals the full forward") {
        const QuantScheme s = QuantScheme::full_precision();
        KVCache<double> cache(m.config(), s.kv);
        const TD full = m.logits(std::span<const Token>(tokens), s);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const TD step = decode_step(m, tokens[i], cache, s);
            CHECK(max_rel_diff(step.data(), std::span<const double>(full.ptr() + i * 96, 96)) < 1e-6);
            CHECK(cache.size() == i + 1);
        }
    }
    SUBCASE("quantized cache equals the quantized full forward") {
        const QuantScheme s = QuantScheme::parse("4-8-4");
        KVCache<double> cache(m.config(), s.kv);
        const TD full = m.logits(std::span<const Token>(tokens), s);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const TD step = decode_step(m, tokens[i], cache, s);
            CHECK(max_rel_diff(step.data(), std::span<const double>(full.ptr() + i * 96, 96)) < 1e-6);
        }
    }
    SUBCASE("append-only counts, grid membership and capacity") {
        const QuantScheme s = QuantScheme::parse("16-16-4");
        const QuantScheme fp = QuantScheme::full_precision();
        KVCache<double> cache(m.config(), s.kv);
        KVCache<double> ref(m.config(), fp.kv);
        for (std::size_t k = 0; k < m.config().max_seq_len; ++k) {
            const Token t = static_cast<Token>(rng.below(96));
            decode_step(m, t, cache, s);
            decode_step(m, t, ref, fp);
            REQUIRE(cache.size() == k + 1);
            for (std::size_t l = 0; l < m.config().n_layers; ++l) {
                const auto& L = cache.layer(l);
                REQUIRE(L.key_grids.size() == k + 1);
                REQUIRE(L.value_grids.size() == k + 1);
                REQUIRE(L.key_codes.size() == (k + 1) * 16);
            }
            // Layer 0 sees identical inputs in both caches; compare the new key row.
            const auto& q0 = cache.layer(0);
            const auto& r0 = ref.layer(0);
            const double alpha = cache.key_scale(0, k);
            for (std::size_t d = 0; d < 16; ++d) {
                REQUIRE(std::abs(q0.keys[k * 16 + d] - r0.keys[k * 16 + d]) <= alpha / 2 * (1 + 1e-12));
            }
        }
        for (std::size_t l = 0; l < m.config().n_layers; ++l) {
            const auto& L = cache.layer(l);
            for (std::size_t t = 0; t < cache.size(); ++t)
                for (std::size_t d = 0; d < 16; ++d) {
                    const auto& g = L.key_grids[t];
                    const double code = L.key_codes[t * 16 + d];
                    CHECK(code >= -7);
                    CHECK(code <= 7);
                    CHECK(std::abs(L.keys[t * 16 + d] - code * g.step) <= 1e-12 * (1 + std::abs(g.hi)));
                }
        }
        CHECK_THROWS_AS(decode_step(m, 0, cache, s), CapacityError);
        KVCache<double> mismatched(m.config(), fp.kv);
        CHECK_THROWS_AS(decode_step(m, 0, mismatched, s), ContractError);
    }
}

TEST_CASE("student initialization") {
    const Model<double> teacher = tiny_model(12);
    Model<double> student = init_student_from_teacher(teacher, teacher.config());
    Rng rng(13);
    const auto tokens = random_tokens(rng, 10);
    CHECK(student.logits(std::span<const Token>(tokens), QuantScheme::full_precision()) ==
          teacher.logits(std::span<const Token>(tokens), QuantScheme::full_precision()));
    const double before = teacher.layers[0].wq.weight.value[0];
    student.layers[0].wq.weight.value[0] += 1.0;
    CHECK(teacher.layers[0].wq.weight.value[0] == before);

    ModelConfig other = teacher.config();
    other.vocab_size = 128;
    try {
        init_student_from_teacher(teacher, other);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("vocab_size") != std::string::npos);
        CHECK(msg.find("96") != std::string::npos);
        CHECK(msg.find("128") != std::string::npos);
    }
}

TEST_CASE("end-to-end straight-through gradient check") {
    Model<double> m = tiny_model(14);
    const auto r = test::model_grad_check(m, QuantScheme::parse("4-8-4"), 15);
    INFO("checked " << r.checked << " coordinates, max rel err " << r.worst);
    CHECK(r.worst < 1e-4);
}

TEST_CASE("learnable activation clipping trains its step") {
    Model<double> m = tiny_model(16);
    QuantScheme s = QuantScheme::parse("4-4-16");
    s.activations.clipping = Clipping::learnable();
    Rng rng(17);
    const auto tokens = random_tokens(rng, 9);
    const std::span<const Token> in(tokens.data(), 8), tgt(tokens.data() + 1, 8);
    CHECK_THROWS_AS(m.logits(in, s), ContractError);
    Tape<double> tape;
    tape.backward(cross_entropy_mean(m.forward(tape, in, s, true), tgt));
    for (auto* lin : m.linears()) {
        REQUIRE(lin->act_step.has_value());
        CHECK(lin->act_step->value.item() > 0);
    }
    double total = 0;
    for (auto* lin : m.linears()) total += std::abs(lin->act_step->grad.item());
    CHECK(total > 0);
    CHECK_NOTHROW(m.logits(in, s));
}

TEST_CASE("round-to-nearest puts every weight row on its own grid") {
    const Model<double> m = tiny_model(18);
    const Model<double> q = rtn_apply(m, QuantScheme::parse("4-16-16"));
    CHECK(q.scheme == "4-16-16");
    for (const auto* lin : q.linears()) {
        const TD& w = lin->weight.value;
        const std::size_t in = w.dim(1);
        for (std::size_t r = 0; r < w.dim(0); ++r) {
            double amax = 0;
            for (std::size_t j = 0; j < in; ++j) amax = std::max(amax, std::abs(w[r * in + j]));
            const double step = amax / 7;
            for (std::size_t j = 0; j < in; ++j) {
                const double k = w[r * in + j] / step;
                REQUIRE(std::abs(k - std::round(k)) < 1e-9);
                REQUIRE(std::abs(k) <= 7 + 1e-9);
            }
        }
    }
}

TEST_CASE("smoothing keeps the full-precision model output") {
    Model<double> m = tiny_model(19);
    Rng rng(20);
    std::vector<std::vector<Token>> calib;
    for (int i = 0; i < 4; ++i) calib.push_back(random_tokens(rng, 12));
    const auto stats = collect_input_absmax(m, calib);
    CHECK(stats.size() == m.linears().size());
    const auto tokens = random_tokens(rng, 10);
    const TD before = m.logits(std::span<const Token>(tokens), QuantScheme::full_precision());
    apply_smoothing(m, stats, 0.5);
    const TD after = m.logits(std::span<const Token>(tokens), QuantScheme::full_precision());
    CHECK(max_rel_diff(after.data(), before.data()) < 1e-10);
    CHECK_THROWS_AS(apply_smoothing(m, stats, 0.5), ContractError);
}

TEST_CASE("checkpoint round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "lqat_test_model";
    std::filesystem::create_directories(dir);
    Model<float> m = tiny_model(21).cast<float>();
    m.scheme = "4-8-4";
    apply_smoothing(m, collect_input_absmax(m, {{1, 2, 3, 4}}), 0.5);
    const auto path = dir / "m.lqck";
    save_checkpoint(m, path);
    const Model<float> back = load_checkpoint<float>(path);
    CHECK(back.config() == m.config());
    CHECK(back.scheme == "4-8-4");
    CHECK(back.state() == m.state());
    CHECK(encode_checkpoint(back) == io::read_file(path));

    const std::string bytes = io::read_file(path);
    SUBCASE("truncation is reported, not a crash") {
        for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
            CHECK_THROWS_AS(decode_checkpoint<float>(std::string_view(bytes).substr(0, cut)), CheckpointError);
        }
    }
    SUBCASE("version mismatch names both versions") {
        std::string v2 = bytes;
        v2[4] = 2;
        try {
            decode_checkpoint<float>(v2);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("version 2") != std::string::npos);
            CHECK(msg.find("version 1") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_WITH_AS(decode_checkpoint<float>(bad), doctest::Contains("magic"), CheckpointError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint<float>(dir / "absent.lqck"), FileError);
    }
    SUBCASE("64-bit models are stored as 32-bit floats") {
        const Model<double> d = tiny_model(22);
        const Model<double> back64 = decode_checkpoint<double>(encode_checkpoint(d));
        CHECK(back64.state() == d.cast<float>().cast<double>().state());
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("character tokenizer") {
    CHECK(text::encode(" ~") == std::vector<Token>{0, 94});
    CHECK(text::encode("a\tb\n\x01") == std::vector<Token>{65, 0, 66, 95});
    CHECK(text::decode(text::encode("Hello, world!\n")) == "Hello, world!\n");
    const auto lines = text::encode_lines("ab\n\ncd");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == std::vector<Token>{65, 66, 95});
    CHECK(lines[1] == std::vector<Token>{67, 68, 95});
    const Token bad[] = {96};
    CHECK_THROWS_AS(text::decode(bad), InputError);
}
