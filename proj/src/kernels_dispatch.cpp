#include "ctrag/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace ctrag::kernels {

namespace {

Level detect_best() {
#if defined(__x86_64__) || defined(_M_X64)
    if (__builtin_cpu_supports("avx2")) {
        return Level::avx2;
    }
#endif
    return Level::scalar;
}

Level initial_level() {
    Level level = detect_best();
    if (const char* env = std::getenv("CTRAG_SIMD")) {
        if (std::strcmp(env, "scalar") == 0) {
            level = Level::scalar;
        }
    }
    return level;
}

std::atomic<Level>& level_slot() {
    static std::atomic<Level> slot{initial_level()};
    return slot;
}

} // namespace

Level best_available() {
    static const Level best = detect_best();
    return best;
}

Level active_level() {
    return level_slot().load(std::memory_order_relaxed);
}

void force_level(Level level) {
    if (level == Level::avx2 && best_available() != Level::avx2) {
        level = Level::scalar;
    }
    level_slot().store(level, std::memory_order_relaxed);
}

std::string_view level_name(Level level) {
    switch (level) {
    case Level::avx2:
        return "avx2";
    case Level::scalar:
        break;
    }
    return "scalar";
}

std::uint64_t count_nonzero_u8(const std::uint8_t* p, std::size_t n) {
#if defined(__x86_64__) || defined(_M_X64)
    if (active_level() == Level::avx2) {
        return detail::count_nonzero_u8_avx2(p, n);
    }
#endif
    return detail::count_nonzero_u8_scalar(p, n);
}

MaskedHuStats masked_hu_stats(const std::int16_t* hu, const std::uint8_t* mask,
                              std::size_t n, std::int16_t lo, std::int16_t hi) {
#if defined(__x86_64__) || defined(_M_X64)
    if (active_level() == Level::avx2) {
        return detail::masked_hu_stats_avx2(hu, mask, n, lo, hi);
    }
#endif
    return detail::masked_hu_stats_scalar(hu, mask, n, lo, hi);
}

double l2_squared(const double* a, const double* b, std::size_t d) {
#if defined(__x86_64__) || defined(_M_X64)
    if (active_level() == Level::avx2) {
        return detail::l2_squared_avx2(a, b, d);
    }
#endif
    return detail::l2_squared_scalar(a, b, d);
}

void l2_squared_batch(const double* query, const double* rows, std::size_t n,
                      std::size_t d, double* out) {
    auto* impl = &detail::l2_squared_scalar;
#if defined(__x86_64__) || defined(_M_X64)
    if (active_level() == Level::avx2) {
        impl = &detail::l2_squared_avx2;
    }
#endif
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = impl(query, rows + i * d, d);
    }
}

} // namespace ctrag::kernels
