// SPDX-License-Identifier: Apache-2.0
#include "lqat/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "lqat/checkpoint.hpp"
#include "lqat/datagen.hpp"
#include "lqat/distill.hpp"
#include "lqat/errors.hpp"
#include "lqat/eval.hpp"
#include "lqat/io.hpp"
#include "lqat/tokenizer.hpp"

namespace lqat::cli {
namespace {

namespace fs = std::filesystem;

// Flat key=value file; '#' starts a comment. Keys are long option names,
// with '_' accepted for '-'.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
    const std::string text = io::read_file(path);
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config file " + path.string() + " line " + std::to_string(lineno) + " lacks '='");
        }
        std::string key = trim(line.substr(0, eq));
        for (auto& c : key)
            if (c == '_') c = '-';
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

// Applies config-file values to options not given on the command line.
void merge_config(CLI::App& cmd, const std::string& config_path) {
    if (config_path.empty()) return;
    for (const auto& [key, value] : read_config_file(config_path)) {
        CLI::Option* opt = cmd.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config") {
            throw ConfigError("unknown config key '" + key + "' for command " + cmd.get_name());
        }
        if (opt->count() > 0) continue;
        opt->add_result(value);
        try {
            opt->run_callback();
        } catch (const CLI::ParseError& e) {
            throw ConfigError("config key '" + key + "' has invalid value '" + value + "': " + e.what());
        }
    }
}

void require(CLI::App& cmd, const char* name) {
    if (cmd.get_option("--" + std::string(name))->count() == 0) {
        throw ConfigError(std::string("--") + name + " is required for " + cmd.get_name());
    }
}

struct QuantizerFlags {
    std::string weight = "minmax";
    std::string activation = "minmax";
    std::string symmetry = "sym";
    double clip_fraction = 0.9995;

    void add(CLI::App& cmd) {
        cmd.add_option("--weight-quantizer", weight, "minmax or stats")->capture_default_str();
        cmd.add_option("--act-quantizer", activation, "minmax, stats or lsq")->capture_default_str();
        cmd.add_option("--symmetry", symmetry, "sym or asym")->capture_default_str();
        cmd.add_option("--clip-fraction", clip_fraction, "quantile of |x| kept by the stats quantizer")
            ->capture_default_str();
    }

    QuantScheme apply(QuantScheme s) const {
        Symmetry sym;
        if (symmetry == "sym") sym = Symmetry::Symmetric;
        else if (symmetry == "asym") sym = Symmetry::Asymmetric;
        else throw ConfigError("--symmetry must be sym or asym, got '" + symmetry + "'");
        if (!(clip_fraction > 0.0 && clip_fraction <= 1.0)) throw ConfigError("--clip-fraction must lie in (0, 1]");
        const Clipping stats = Clipping::statistical(clip_fraction);
        if (weight == "stats") s.weights.clipping = stats;
        else if (weight != "minmax") throw ConfigError("--weight-quantizer must be minmax or stats, got '" + weight + "'");
        if (activation == "stats") {
            s.activations.clipping = stats;
            s.kv.clipping = stats;
        } else if (activation == "lsq") {
            s.activations.clipping = Clipping::learnable();
        } else if (activation != "minmax") {
            throw ConfigError("--act-quantizer must be minmax, stats or lsq, got '" + activation + "'");
        }
        s.weights.symmetry = s.activations.symmetry = s.kv.symmetry = sym;
        return s;
    }
};

std::vector<Token> read_text_stream(const std::string& path) {
    const std::vector<Token> stream = text::encode(io::read_file(path));
    if (stream.empty()) throw InputError("corpus " + path + " contains no usable characters");
    return stream;
}

void write_text(const std::string& path, const std::string& content) { io::write_file(path, content); }

struct Context {
    std::ostream& out;
    unsigned threads = 0;
};

// -- commands ---------------------------------------------------------------

struct TeacherTrain {
    std::string corpus, out_path, metrics, config;
    ModelConfig model;
    TeacherConfig train;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("teacher-train", "Train the full-precision toy teacher on a text corpus");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--corpus", corpus, "plain-text training corpus");
        c->add_option("--out", out_path, "output checkpoint");
        c->add_option("--metrics", metrics, "per-step CSV log");
        c->add_option("--steps", train.steps)->capture_default_str();
        c->add_option("--lr", train.lr)->capture_default_str();
        c->add_option("--seq-len", train.seq_len, "training window length")->capture_default_str();
        c->add_option("--seed", train.seed)->capture_default_str();
        c->add_option("--dim", model.dim)->capture_default_str();
        c->add_option("--layers", model.n_layers)->capture_default_str();
        c->add_option("--heads", model.n_heads)->capture_default_str();
        c->add_option("--ffn-hidden", model.ffn_hidden)->capture_default_str();
        c->add_option("--max-seq-len", model.max_seq_len)->capture_default_str();
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "corpus");
        require(c, "out");
        model.vocab_size = text::kVocabSize;
        model.validate();
        const auto stream = read_text_stream(corpus);
        auto m = Model<float>::random(model, train.seed);
        const auto log = train_teacher(m, stream, train);
        save_checkpoint(m, out_path);
        if (!metrics.empty()) {
            std::ostringstream csv;
            write_metrics_csv(csv, log, "label", "none");
            write_text(metrics, csv.str());
        }
        ctx.out << "trained teacher for " << log.size() << " steps, final loss " << log.back().loss << ", wrote "
                << out_path << '\n';
    }
};

struct GenData {
    std::string teacher, out_path, strategy = "hybrid", config;
    std::size_t count = 2000;
    std::uint64_t seed = 0;
    GenStrategy gen{};
    GenOptions options{};

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("gen-data", "Generate a synthetic corpus from the teacher");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--teacher", teacher, "teacher checkpoint");
        c->add_option("--out", out_path, "output dataset");
        c->add_option("--count", count, "number of records")->capture_default_str();
        c->add_option("--seed", seed, "master seed (required)");
        c->add_option("--strategy", strategy, "top1, sampled or hybrid")->capture_default_str();
        c->add_option("--temperature", gen.temperature)->capture_default_str();
        c->add_option("--hybrid-k", gen.k, "greedy prefix length for hybrid")->capture_default_str();
        c->add_option("--top-k", gen.top_k, "sample among the k most likely tokens (0 = all)")->capture_default_str();
        c->add_option("--max-len", options.max_len)->capture_default_str();
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "teacher");
        require(c, "out");
        require(c, "seed");
        gen.kind = GenStrategy::parse_kind(strategy);
        const auto model = load_checkpoint<float>(teacher);
        const Dataset d = generate_corpus(model, gen, count, seed, options, resolve_threads(ctx.threads));
        write_dataset(d, out_path);
        ctx.out << "generated " << d.records.size() << " records (" << d.token_count() << " tokens), wrote " << out_path
                << '\n';
    }
};

struct Ptq {
    std::string model, out_path, scheme, calib, config;
    bool smooth = false;
    double alpha = 0.5;
    std::size_t calib_windows = 16;
    QuantizerFlags quant;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("ptq", "Round-to-nearest post-training quantization");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--model", model, "input checkpoint");
        c->add_option("--out", out_path, "output checkpoint");
        c->add_option("--scheme", scheme, "W-A-KV bit-widths, e.g. 4-8-8");
        c->add_flag("--smooth", smooth, "migrate activation outliers into weights before quantizing");
        c->add_option("--smooth-alpha", alpha, "migration exponent")->capture_default_str();
        c->add_option("--calib", calib, "plain-text calibration corpus for --smooth");
        c->add_option("--calib-windows", calib_windows, "calibration windows of max_seq_len tokens")
            ->capture_default_str();
        quant.add(*c);
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "model");
        require(c, "out");
        require(c, "scheme");
        const QuantScheme s = quant.apply(QuantScheme::parse(scheme));
        if (s.activations.clipping.kind == Clipping::Kind::Learnable) {
            throw ConfigError("the lsq activation quantizer learns its steps and needs qat, not ptq");
        }
        auto m = load_checkpoint<float>(model);
        if (smooth) {
            if (calib.empty()) throw ConfigError("--smooth needs --calib");
            if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("--smooth-alpha must lie in [0, 1]");
            const auto stream = read_text_stream(calib);
            const std::size_t w = m.config().max_seq_len;
            std::vector<std::vector<Token>> windows;
            for (std::size_t at = 0; at < stream.size() && windows.size() < calib_windows; at += w) {
                windows.emplace_back(stream.begin() + at, stream.begin() + std::min(stream.size(), at + w));
            }
            apply_smoothing(m, collect_input_absmax(m, windows), alpha);
        }
        const auto q = rtn_apply(m, s);
        save_checkpoint(q, out_path);
        ctx.out << "quantized to " << s.to_string() << (smooth ? " with smoothing" : "") << ", wrote " << out_path
                << '\n';
    }
};

struct Qat {
    std::string teacher, data, scheme, out_path, metrics, loss = "logits", config;
    TrainConfig train{};
    QuantizerFlags quant;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("qat", "Distill the teacher into a quantized student");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--teacher", teacher, "teacher checkpoint");
        c->add_option("--data", data, "dataset from gen-data");
        c->add_option("--scheme", scheme, "W-A-KV bit-widths, e.g. 4-8-4");
        c->add_option("--out", out_path, "output checkpoint");
        c->add_option("--metrics", metrics, "per-step CSV log");
        c->add_option("--seed", train.seed, "data-order seed (required)");
        c->add_option("--steps", train.steps)->capture_default_str();
        c->add_option("--lr", train.lr)->capture_default_str();
        c->add_option("--batch-size", train.batch_size, "sequences averaged per step")->capture_default_str();
        c->add_option("--weight-decay", train.adam.weight_decay)->capture_default_str();
        c->add_option("--loss", loss, "label, logits or label+logits")->capture_default_str();
        c->add_option("--attention-weight", train.attention_weight)->capture_default_str();
        c->add_option("--hidden-weight", train.hidden_weight)->capture_default_str();
        c->add_option("--max-seq-len", train.max_seq_len, "truncate sequences (0 = model limit)")
            ->capture_default_str();
        quant.add(*c);
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "teacher");
        require(c, "data");
        require(c, "scheme");
        require(c, "out");
        require(c, "seed");
        train.loss = parse_loss_variant(loss);
        const QuantScheme s = quant.apply(QuantScheme::parse(scheme));
        const auto t = load_checkpoint<float>(teacher);
        const Dataset d = read_dataset(data);
        if (d.vocab_size != t.config().vocab_size) {
            throw InputError("dataset " + data + " has vocabulary size " + std::to_string(d.vocab_size) +
                             " but the teacher has " + std::to_string(t.config().vocab_size));
        }
        auto student = init_student_from_teacher(t, t.config());
        const auto log = train_qat(student, t, d.records, s, train);
        save_checkpoint(student, out_path);
        if (!metrics.empty()) {
            std::ostringstream csv;
            write_metrics_csv(csv, log, loss_variant_name(train.loss), s.to_string());
            write_text(metrics, csv.str());
        }
        ctx.out << "trained " << s.to_string() << " student for " << log.size() << " steps, final loss "
                << log.back().loss << ", wrote " << out_path << '\n';
    }
};

struct Eval {
    std::string model, corpus, scheme, method = "model", corpus_name, out_path, config;
    std::size_t window = 0;
    QuantizerFlags quant;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("eval", "Perplexity and next-token accuracy on a text corpus");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--model", model, "checkpoint");
        c->add_option("--corpus", corpus, "plain-text evaluation corpus");
        c->add_option("--scheme", scheme, "W-A-KV (default: the checkpoint's trained scheme)");
        c->add_option("--method", method, "method label for the report")->capture_default_str();
        c->add_option("--corpus-name", corpus_name, "corpus label (default: file name)");
        c->add_option("--window", window, "window length (0 = max_seq_len)")->capture_default_str();
        c->add_option("--out", out_path, "results CSV (default: stdout)");
        quant.add(*c);
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "model");
        require(c, "corpus");
        const auto m = load_checkpoint<float>(model);
        if (scheme.empty()) scheme = m.scheme == "none" ? "16-16-16" : m.scheme;
        const QuantScheme s = quant.apply(QuantScheme::parse(scheme));
        const auto stream = read_text_stream(corpus);
        EvalResult r = perplexity(m, stream, s, resolve_threads(ctx.threads), window);
        r.method = method;
        r.corpus = corpus_name.empty() ? fs::path(corpus).filename().string() : corpus_name;
        const std::string csv = render_report({r}, ReportFormat::Csv);
        if (out_path.empty()) ctx.out << csv;
        else {
            write_text(out_path, csv);
            ctx.out << r.method << ' ' << r.scheme << " ppl " << r.ppl << " acc " << r.acc << ", wrote " << out_path
                    << '\n';
        }
    }
};

struct KvMem {
    std::string preset, config;
    std::uint64_t seq = 0;
    int bits = 16;
    bool pair = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("kv-mem", "KV-cache memory for a model preset");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("--preset", preset, "llama-7b, llama-13b or llama-30b");
        c->add_option("--seq", seq, "sequence length in tokens");
        c->add_option("--bits", bits, "4, 8 or 16")->capture_default_str();
        c->add_flag("--kv-pair", pair, "count keys and values separately (x2)");
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        require(c, "preset");
        require(c, "seq");
        ctx.out << kv_cache_memory(find_preset(preset), seq, bits, pair).display << '\n';
    }
};

struct Report {
    std::vector<std::string> inputs;
    std::string format = "markdown", out_path, config;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("report", "Merge eval CSVs into one table");
        c->add_option("--config", config, "key=value defaults file");
        c->add_option("inputs", inputs, "results CSV files");
        c->add_option("--format", format, "markdown or csv")->capture_default_str();
        c->add_option("--out", out_path, "output file (default: stdout)");
    }

    void run(CLI::App& c, Context& ctx) {
        merge_config(c, config);
        if (inputs.empty()) throw ConfigError("report needs at least one results CSV");
        const ReportFormat f = parse_report_format(format);
        std::vector<EvalResult> rows;
        for (const auto& path : inputs) {
            try {
                for (auto& r : parse_results_csv(io::read_file(path))) rows.push_back(std::move(r));
            } catch (const InputError& e) {
                throw InputError(path + ": " + e.what());
            }
        }
        if (rows.empty()) throw InputError("results CSVs hold no rows");
        const std::string text = render_report(rows, f);
        if (out_path.empty()) ctx.out << text;
        else write_text(out_path, text);
    }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quantization-aware training with data-free distillation for a toy LLaMA-style model", "lqat"};
    app.require_subcommand(1);
    Context ctx{out};
    app.add_option("--threads", ctx.threads, "worker threads (0 = machine parallelism)")->capture_default_str();

    TeacherTrain teacher_train;
    GenData gen_data;
    Ptq ptq;
    Qat qat;
    Eval eval;
    KvMem kv_mem;
    Report report;
    teacher_train.add(app);
    gen_data.add(app);
    ptq.add(app);
    qat.add(app);
    eval.add(app);
    kv_mem.add(app);
    report.add(app);
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    const std::map<std::string, std::function<void(CLI::App&)>> handlers = {
        {"teacher-train", [&](CLI::App& c) { teacher_train.run(c, ctx); }},
        {"gen-data", [&](CLI::App& c) { gen_data.run(c, ctx); }},
        {"ptq", [&](CLI::App& c) { ptq.run(c, ctx); }},
        {"qat", [&](CLI::App& c) { qat.run(c, ctx); }},
        {"eval", [&](CLI::App& c) { eval.run(c, ctx); }},
        {"kv-mem", [&](CLI::App& c) { kv_mem.run(c, ctx); }},
        {"report", [&](CLI::App& c) { report.run(c, ctx); }},
    };
    CLI::App* cmd = app.get_subcommands().front();
    try {
        handlers.at(cmd->get_name())(*cmd);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitOk;
}

}  // namespace lqat::cli
