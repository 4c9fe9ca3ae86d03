// SPDX-License-Identifier: Apache-2.0
#include "lqat/synth.hpp"

#include <algorithm>
#include <array>
#include <span>

#include "lqat/errors.hpp"

namespace lqat::synth {
namespace {

constexpr std::array kNouns = {"river",  "garden", "teacher", "market", "engine", "window", "farmer", "letter",
                               "forest", "castle", "doctor",  "bridge", "station", "island", "painter", "kitchen",
                               "valley", "storm",  "village", "sailor", "library", "mirror", "captain", "orchard"};
constexpr std::array kAdjectives = {"old",   "quiet", "bright", "small", "heavy", "green",  "distant", "broken",
                                    "warm",  "early", "silver", "calm",  "narrow", "golden", "busy",   "pale"};
constexpr std::array kVerbs = {"watched", "carried", "found",   "built", "followed", "painted", "opened", "crossed",
                               "visited", "repaired", "noticed", "left",  "described", "guarded"};
constexpr std::array kPlaces = {"near the", "behind the", "across the", "under the", "beside the", "past the"};
constexpr std::array kTimes = {"in the morning", "at night", "before the rain", "after dinner", "every spring",
                               "during the war", "at noon"};
constexpr std::array kLevels = {"INFO", "INFO", "INFO", "DEBUG", "WARN", "ERROR"};
constexpr std::array kServices = {"auth", "cache", "db", "gateway", "scheduler", "worker", "storage"};
constexpr std::array kEvents = {"request served",   "connection opened", "connection closed", "retrying task",
                                "cache miss",       "flushed buffer",    "job finished",      "timeout reached"};
constexpr std::array kKeys = {"timeout", "max_connections", "port", "retries", "log_level", "buffer_size", "workers"};
constexpr std::array kIdents = {"count", "total", "index", "value", "result", "size", "offset", "limit"};
constexpr std::array kFuncs = {"update", "compute", "load", "parse", "merge", "reset", "render", "check"};

template <typename A>
const char* pick(const A& items, Rng& rng) {
    return items[rng.below(items.size())];
}

std::string num(Rng& rng, std::uint64_t lo, std::uint64_t hi) { return std::to_string(lo + rng.below(hi - lo + 1)); }

std::string two(std::uint64_t v) { return (v < 10 ? "0" : "") + std::to_string(v); }

std::string prose(Rng& rng) {
    std::string s = "The ";
    s += pick(kAdjectives, rng);
    s += ' ';
    s += pick(kNouns, rng);
    s += ' ';
    s += pick(kVerbs, rng);
    s += " the ";
    s += pick(kNouns, rng);
    if (rng.below(2) == 0) {
        s += ' ';
        s += pick(kPlaces, rng);
        s += ' ';
        s += pick(kNouns, rng);
    }
    if (rng.below(3) == 0) {
        s += ' ';
        s += pick(kTimes, rng);
    }
    if (rng.below(3) == 0) {
        s += ", and the ";
        s += pick(kNouns, rng);
        s += " was ";
        s += pick(kAdjectives, rng);
    }
    s += '.';
    return s;
}

std::string arithmetic(Rng& rng) {
    const std::uint64_t a = rng.below(100), b = rng.below(100);
    switch (rng.below(3)) {
        case 0: return std::to_string(a) + " + " + std::to_string(b) + " = " + std::to_string(a + b);
        case 1: {
            const std::uint64_t hi = std::max(a, b), lo = std::min(a, b);
            return std::to_string(hi) + " - " + std::to_string(lo) + " = " + std::to_string(hi - lo);
        }
        default: {
            const std::uint64_t x = rng.below(13), y = rng.below(13);
            return std::to_string(x) + " * " + std::to_string(y) + " = " + std::to_string(x * y);
        }
    }
}

std::string logs(Rng& rng) {
    if (rng.below(3) == 0) {
        std::string s = pick(kKeys, rng);
        s += " = ";
        s += num(rng, 1, 512);
        return s;
    }
    std::string s = "2024-" + two(1 + rng.below(12)) + "-" + two(1 + rng.below(28)) + " " + two(rng.below(24)) + ":" +
                    two(rng.below(60)) + ":" + two(rng.below(60)) + " ";
    s += pick(kLevels, rng);
    s += ' ';
    s += pick(kServices, rng);
    s += ": ";
    s += pick(kEvents, rng);
    s += " id=" + num(rng, 1000, 9999) + " took " + num(rng, 1, 250) + "ms";
    return s;
}

std::string code(Rng& rng) {
    const std::string a = pick(kIdents, rng), b = pick(kIdents, rng);
    switch (rng.below(4)) {
        case 0: return "for (int i = 0; i < " + b + "; ++i) { " + a + " += data[i]; }";
        case 1: return "if (" + a + " > " + num(rng, 0, 64) + ") return " + b + ";";
        case 2: return "def " + std::string(pick(kFuncs, rng)) + "(" + a + "): return " + a + " * " + num(rng, 2, 9);
        default: return a + " = " + pick(kFuncs, rng) + "(" + b + ", " + num(rng, 0, 99) + ");";
    }
}

}  // namespace

std::string domain_name(Domain d) {
    switch (d) {
        case Domain::Prose: return "prose";
        case Domain::Arithmetic: return "arithmetic";
        case Domain::Logs: return "logs";
        case Domain::Code: return "code";
    }
    return "?";
}

Domain parse_domain(std::string_view name) {
    for (Domain d : kAllDomains)
        if (domain_name(d) == name) return d;
    throw ConfigError("unknown corpus domain '" + std::string(name) + "' (expected prose, arithmetic, logs or code)");
}

std::string make_line(Domain d, Rng& rng) {
    switch (d) {
        case Domain::Prose: return prose(rng);
        case Domain::Arithmetic: return arithmetic(rng);
        case Domain::Logs: return logs(rng);
        case Domain::Code: return code(rng);
    }
    return {};
}

std::string make_corpus(const CorpusOptions& options) {
    if (options.domains.empty()) throw ConfigError("corpus needs at least one domain");
    Rng rng(options.seed);
    std::string out;
    out.reserve(options.min_bytes + 128);
    while (out.size() < options.min_bytes) {
        out += make_line(options.domains[rng.below(options.domains.size())], rng);
        out += '\n';
    }
    return out;
}

}  // namespace lqat::synth
