#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

// Data-parallel inner loops shared by the radiomics extractors and the
// retrieval scan. Every kernel has a scalar reference implementation and an
// AVX2 variant; the public entry points dispatch once at startup based on
// runtime CPU detection. Integer kernels are bit-identical across variants;
// the floating-point distance kernels may differ only in summation order.

namespace ctrag::kernels {

enum class Level {
    scalar,
    avx2,
};

/// Highest implementation level usable on this CPU.
Level best_available();

/// Level currently used by the dispatching entry points.
Level active_level();

/// Force a dispatch level (clamped to best_available). Used by the
/// equivalence tests; also honored when CTRAG_SIMD=scalar is set in the
/// environment at first use.
void force_level(Level level);

std::string_view level_name(Level level);

/// Number of nonzero bytes in p[0..n).
std::uint64_t count_nonzero_u8(const std::uint8_t* p, std::size_t n);

struct MaskedHuStats {
    std::uint64_t count = 0;
    std::int64_t sum = 0;
    std::int16_t min = 0; // undefined when count == 0
    std::int16_t max = 0;
};

/// Count/sum/min/max over { hu[i] : mask[i] != 0 and lo <= hu[i] <= hi }.
MaskedHuStats masked_hu_stats(const std::int16_t* hu, const std::uint8_t* mask,
                              std::size_t n, std::int16_t lo, std::int16_t hi);

/// Squared Euclidean distance between a[0..d) and b[0..d).
double l2_squared(const double* a, const double* b, std::size_t d);

/// out[i] = squared Euclidean distance between query and rows + i*d,
/// for i in [0, n).
void l2_squared_batch(const double* query, const double* rows, std::size_t n,
                      std::size_t d, double* out);

namespace detail {
std::uint64_t count_nonzero_u8_scalar(const std::uint8_t* p, std::size_t n);
MaskedHuStats masked_hu_stats_scalar(const std::int16_t* hu, const std::uint8_t* mask,
                                     std::size_t n, std::int16_t lo, std::int16_t hi);
double l2_squared_scalar(const double* a, const double* b, std::size_t d);

#if defined(__x86_64__) || defined(_M_X64)
std::uint64_t count_nonzero_u8_avx2(const std::uint8_t* p, std::size_t n);
MaskedHuStats masked_hu_stats_avx2(const std::int16_t* hu, const std::uint8_t* mask,
                                   std::size_t n, std::int16_t lo, std::int16_t hi);
double l2_squared_avx2(const double* a, const double* b, std::size_t d);
#endif
} // namespace detail

} // namespace ctrag::kernels
