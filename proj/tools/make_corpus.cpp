// SPDX-License-Identifier: Apache-2.0
//
// Writes the synthetic multi-domain text corpus used to train the toy teacher.
#include <CLI11.hpp>

#include <iostream>

#include "lqat/errors.hpp"
#include "lqat/io.hpp"
#include "lqat/synth.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generate a deterministic plain-text corpus", "make_corpus"};
    lqat::synth::CorpusOptions options;
    std::string out;
    std::vector<std::string> domains;
    app.add_option("--out", out, "output text file")->required();
    app.add_option("--seed", options.seed)->capture_default_str();
    app.add_option("--bytes", options.min_bytes, "minimum size in bytes")->capture_default_str();
    app.add_option("--domain", domains, "restrict to prose, arithmetic, logs or code (repeatable)");
    CLI11_PARSE(app, argc, argv);
    try {
        if (!domains.empty()) {
            options.domains.clear();
            for (const auto& d : domains) options.domains.push_back(lqat::synth::parse_domain(d));
        }
        const std::string text = lqat::synth::make_corpus(options);
        lqat::io::write_file(out, text);
        std::cout << "wrote " << text.size() << " bytes to " << out << '\n';
    } catch (const lqat::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const lqat::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
