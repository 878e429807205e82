#include "ctrag/kernels.hpp"

namespace ctrag::kernels::detail {

std::uint64_t count_nonzero_u8_scalar(const std::uint8_t* p, std::size_t n) {
    std::uint64_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        count += p[i] != 0;
    }
    return count;
}

MaskedHuStats masked_hu_stats_scalar(const std::int16_t* hu, const std::uint8_t* mask,
                                     std::size_t n, std::int16_t lo, std::int16_t hi) {
    MaskedHuStats s;
    s.min = INT16_MAX;
    s.max = INT16_MIN;
    for (std::size_t i = 0; i < n; ++i) {
        const std::int16_t v = hu[i];
        if (mask[i] != 0 && v >= lo && v <= hi) {
            ++s.count;
            s.sum += v;
            if (v < s.min) s.min = v;
            if (v > s.max) s.max = v;
        }
    }
    if (s.count == 0) {
        s.min = 0;
        s.max = 0;
    }
    return s;
}

double l2_squared_scalar(const double* a, const double* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        acc += diff * diff;
    }
    return acc;
}

} // namespace ctrag::kernels::detail
