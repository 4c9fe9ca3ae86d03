// SPDX-License-Identifier: Apache-2.0
#include "lqat/checkpoint.hpp"

#include <charconv>
#include <limits>
#include <map>

#include "lqat/errors.hpp"
#include "lqat/io.hpp"

namespace lqat {
namespace {

constexpr std::string_view kMagic = "LQCK";
constexpr std::uint8_t kDtypeF32 = 0;

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
    N out{};
    const auto r = std::from_chars(value.data(), value.data() + value.size(), out);
    if (r.ec != std::errc() || r.ptr != value.data() + value.size()) {
        throw CheckpointError("checkpoint config field '" + key + "' has malformed value '" + value + "'");
    }
    return out;
}

}  // namespace

std::vector<std::string> config_to_lines(const ModelConfig& c) {
    return {
        "vocab_size=" + std::to_string(c.vocab_size),
        "dim=" + std::to_string(c.dim),
        "n_layers=" + std::to_string(c.n_layers),
        "n_heads=" + std::to_string(c.n_heads),
        "ffn_hidden=" + std::to_string(c.ffn_hidden),
        "max_seq_len=" + std::to_string(c.max_seq_len),
        "rope_base=" + format_double(c.rope_base),
        "rms_eps=" + format_double(c.rms_eps),
    };
}

ModelConfig config_from_lines(const std::vector<std::string>& lines) {
    std::map<std::string, std::string> kv;
    for (const auto& line : lines) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("checkpoint config line '" + line + "' lacks '='");
        const std::string key = line.substr(0, eq);
        if (!kv.emplace(key, line.substr(eq + 1)).second) {
            throw CheckpointError("checkpoint config field '" + key + "' appears twice");
        }
    }
    ModelConfig c;
    auto take = [&](const char* key) {
        const auto it = kv.find(key);
        if (it == kv.end()) throw CheckpointError(std::string("checkpoint config lacks field '") + key + "'");
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    c.vocab_size = parse_number<std::size_t>("vocab_size", take("vocab_size"));
    c.dim = parse_number<std::size_t>("dim", take("dim"));
    c.n_layers = parse_number<std::size_t>("n_layers", take("n_layers"));
    c.n_heads = parse_number<std::size_t>("n_heads", take("n_heads"));
    c.ffn_hidden = parse_number<std::size_t>("ffn_hidden", take("ffn_hidden"));
    c.max_seq_len = parse_number<std::size_t>("max_seq_len", take("max_seq_len"));
    c.rope_base = parse_number<double>("rope_base", take("rope_base"));
    c.rms_eps = parse_number<double>("rms_eps", take("rms_eps"));
    if (!kv.empty()) throw CheckpointError("checkpoint config has unknown field '" + kv.begin()->first + "'");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
    return c;
}

template <typename T>
std::string encode_checkpoint(const Model<T>& model) {
    io::ByteWriter w;
    w.bytes(kMagic);
    w.u32(kCheckpointVersion);
    const auto lines = config_to_lines(model.config());
    w.u32(static_cast<std::uint32_t>(lines.size()));
    for (const auto& l : lines) {
        w.u32(static_cast<std::uint32_t>(l.size()));
        w.bytes(l);
    }
    w.u32(static_cast<std::uint32_t>(model.scheme.size()));
    w.bytes(model.scheme);
    const auto state = model.state();
    w.u32(static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.bytes(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.u8(kDtypeF32);
        for (T v : t.data()) w.f32(static_cast<float>(v));
    }
    return w.take();
}

template <typename T>
Model<T> decode_checkpoint(std::string_view bytes) {
    io::ByteReader<CheckpointError> r(bytes, "checkpoint");
    if (r.bytes(4, "magic") != kMagic) r.fail("bad magic (expected \"LQCK\")");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        r.fail("unsupported version " + std::to_string(version) + " (this reader supports version " +
               std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t n_lines = r.u32("config line count");
    std::vector<std::string> lines;
    for (std::uint32_t i = 0; i < n_lines; ++i) {
        const std::string field = "config line " + std::to_string(i);
        const std::uint32_t len = r.u32(field + " length");
        lines.emplace_back(r.bytes(len, field));
    }
    const ModelConfig config = config_from_lines(lines);
    const std::uint32_t scheme_len = r.u32("scheme length");
    std::string scheme(r.bytes(scheme_len, "scheme"));
    if (scheme != "none") {
        try {
            QuantScheme::parse(scheme);
        } catch (const ConfigError&) {
            r.fail("invalid trained-scheme field '" + scheme + "'");
        }
    }
    const std::uint32_t count = r.u32("tensor count");
    std::vector<std::pair<std::string, Tensor<T>>> state;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string idx = "tensor " + std::to_string(i);
        const std::uint16_t name_len = r.u16(idx + " name length");
        std::string name(r.bytes(name_len, idx + " name"));
        const std::uint8_t rank = r.u8("rank of '" + name + "'");
        if (rank == 0) r.fail("tensor '" + name + "' has rank 0");
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32("dims of '" + name + "'");
            if (dim == 0) r.fail("tensor '" + name + "' has a zero dimension");
            shape.push_back(dim);
            n *= dim;
            if (n > r.remaining()) r.fail("truncated while reading data of '" + name + "'");
        }
        const std::uint8_t dtype = r.u8("dtype of '" + name + "'");
        if (dtype != kDtypeF32) r.fail("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
        std::vector<T> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = static_cast<T>(r.f32("data of '" + name + "'"));
        state.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(data)));
    }
    if (!r.at_end()) r.fail(std::to_string(r.remaining()) + " trailing bytes after the last tensor");
    Model<T> model(config);
    model.load_state(state);
    model.scheme = std::move(scheme);
    return model;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    io::write_file(path, encode_checkpoint(model));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    try {
        return decode_checkpoint<T>(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

#define LQAT_INSTANTIATE_CHECKPOINT(T)                                              \
    template std::string encode_checkpoint(const Model<T>&);                        \
    template Model<T> decode_checkpoint(std::string_view);                          \
    template void save_checkpoint(const Model<T>&, const std::filesystem::path&);   \
    template Model<T> load_checkpoint(const std::filesystem::path&);

LQAT_INSTANTIATE_CHECKPOINT(float)
LQAT_INSTANTIATE_CHECKPOINT(double)

}  // namespace lqat
