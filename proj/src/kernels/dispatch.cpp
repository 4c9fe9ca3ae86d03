// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string_view>

#include "lqat/errors.hpp"
#include "lqat/kernels.hpp"

namespace lqat::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(LQAT_HAVE_AVX2_KERNELS) && (defined(__x86_64__) || defined(__i386__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa detect() {
    if (const char* env = std::getenv("LQAT_ISA")) {
        std::string_view want(env);
        if (want == "scalar") return Isa::Scalar;
        if (want == "avx2" && cpu_has_avx2()) return Isa::Avx2;
    }
    return cpu_has_avx2() ? Isa::Avx2 : Isa::Scalar;
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{detect()};
    return isa;
}

}  // namespace

const char* isa_name(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return "scalar";
        case Isa::Avx2: return "avx2";
    }
    return "unknown";
}

bool isa_supported(Isa isa) {
    return isa == Isa::Scalar || cpu_has_avx2();
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
    if (!isa_supported(isa)) {
        throw ContractError(std::string("instruction set ") + isa_name(isa) + " is not supported on this CPU");
    }
    current().store(isa, std::memory_order_relaxed);
}

template <typename T>
const Table<T>& table(Isa isa) {
#if defined(LQAT_HAVE_AVX2_KERNELS)
    if (isa == Isa::Avx2) return avx2::table<T>();
#endif
    (void)isa;
    return scalar::table<T>();
}

template <typename T>
const Table<T>& active() {
    return table<T>(active_isa());
}

template const Table<float>& table<float>(Isa);
template const Table<double>& table<double>(Isa);
template const Table<float>& active<float>();
template const Table<double>& active<double>();

}  // namespace lqat::kernels
