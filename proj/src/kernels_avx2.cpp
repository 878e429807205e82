// AVX2 kernel variants. This translation unit is the only one compiled with
// -mavx2/-mfma; callers must check runtime support before entering.

#include "ctrag/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>

namespace ctrag::kernels::detail {

std::uint64_t count_nonzero_u8_avx2(const std::uint8_t* p, std::size_t n) {
    std::uint64_t count = 0;
    std::size_t i = 0;
    const __m256i zero = _mm256_setzero_si256();
    for (; i + 32 <= n; i += 32) {
        const __m256i v = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(p + i));
        const __m256i is_zero = _mm256_cmpeq_epi8(v, zero);
        const unsigned bits = static_cast<unsigned>(_mm256_movemask_epi8(is_zero));
        count += 32u - static_cast<unsigned>(__builtin_popcount(bits));
    }
    for (; i < n; ++i) {
        count += p[i] != 0;
    }
    return count;
}

MaskedHuStats masked_hu_stats_avx2(const std::int16_t* hu, const std::uint8_t* mask,
                                   std::size_t n, std::int16_t lo, std::int16_t hi) {
    // i32 pair-sum lanes overflow after ~32k vectors of worst-case int16, so
    // the accumulator is flushed to i64 every block.
    constexpr std::size_t kBlockVectors = 4096; // 65536 elements per flush

    MaskedHuStats s;
    std::int64_t sum = 0;
    std::uint64_t count = 0;

    const __m256i vlo = _mm256_set1_epi16(lo);
    const __m256i vhi = _mm256_set1_epi16(hi);
    const __m256i vone = _mm256_set1_epi16(1);
    const __m256i zero = _mm256_setzero_si256();
    __m256i vmin = _mm256_set1_epi16(INT16_MAX);
    __m256i vmax = _mm256_set1_epi16(INT16_MIN);

    std::size_t i = 0;
    while (i + 16 <= n) {
        __m256i acc32 = _mm256_setzero_si256();
        const std::size_t block_end = std::min(n - (n - i) % 16, i + kBlockVectors * 16);
        for (; i + 16 <= block_end; i += 16) {
            const __m256i v = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(hu + i));
            const __m128i m8 = _mm_loadu_si128(reinterpret_cast<const __m128i*>(mask + i));
            const __m256i m16 = _mm256_cvtepu8_epi16(m8);

            const __m256i mask_zero = _mm256_cmpeq_epi16(m16, zero);
            const __m256i below = _mm256_cmpgt_epi16(vlo, v);
            const __m256i above = _mm256_cmpgt_epi16(v, vhi);
            const __m256i rejected = _mm256_or_si256(mask_zero, _mm256_or_si256(below, above));
            const __m256i pred = _mm256_xor_si256(rejected, _mm256_set1_epi8(-1));

            const unsigned bits = static_cast<unsigned>(_mm256_movemask_epi8(pred));
            count += static_cast<unsigned>(__builtin_popcount(bits)) / 2u;

            const __m256i selected_ones = _mm256_and_si256(pred, vone);
            acc32 = _mm256_add_epi32(acc32, _mm256_madd_epi16(v, selected_ones));

            vmin = _mm256_min_epi16(vmin, _mm256_blendv_epi8(_mm256_set1_epi16(INT16_MAX), v, pred));
            vmax = _mm256_max_epi16(vmax, _mm256_blendv_epi8(_mm256_set1_epi16(INT16_MIN), v, pred));
        }
        alignas(32) std::int32_t lanes[8];
        _mm256_store_si256(reinterpret_cast<__m256i*>(lanes), acc32);
        for (const std::int32_t lane : lanes) {
            sum += lane;
        }
    }

    alignas(32) std::int16_t mins[16];
    alignas(32) std::int16_t maxs[16];
    _mm256_store_si256(reinterpret_cast<__m256i*>(mins), vmin);
    _mm256_store_si256(reinterpret_cast<__m256i*>(maxs), vmax);
    std::int16_t vmin_s = INT16_MAX;
    std::int16_t vmax_s = INT16_MIN;
    for (int lane = 0; lane < 16; ++lane) {
        if (mins[lane] < vmin_s) vmin_s = mins[lane];
        if (maxs[lane] > vmax_s) vmax_s = maxs[lane];
    }

    for (; i < n; ++i) {
        const std::int16_t v = hu[i];
        if (mask[i] != 0 && v >= lo && v <= hi) {
            ++count;
            sum += v;
            if (v < vmin_s) vmin_s = v;
            if (v > vmax_s) vmax_s = v;
        }
    }

    s.count = count;
    s.sum = sum;
    s.min = count ? vmin_s : std::int16_t{0};
    s.max = count ? vmax_s : std::int16_t{0};
    return s;
}

double l2_squared_avx2(const double* a, const double* b, std::size_t d) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t j = 0;
    for (; j + 4 <= d; j += 4) {
        const __m256d va = _mm256_loadu_pd(a + j);
        const __m256d vb = _mm256_loadu_pd(b + j);
        const __m256d diff = _mm256_sub_pd(va, vb);
#if defined(__FMA__)
        acc = _mm256_fmadd_pd(diff, diff, acc);
#else
        acc = _mm256_add_pd(acc, _mm256_mul_pd(diff, diff));
#endif
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, acc);
    double total = lanes[0] + lanes[1] + lanes[2] + lanes[3];
    for (; j < d; ++j) {
        const double diff = a[j] - b[j];
        total += diff * diff;
    }
    return total;
}

} // namespace ctrag::kernels::detail

#endif // x86_64
