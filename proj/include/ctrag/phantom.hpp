#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctrag/volume.hpp"

namespace ctrag {

/// Axis-aligned ellipsoid painted into the phantom grid. A voxel belongs to
/// the ellipsoid iff its center (i+0.5)*spacing satisfies
/// sum(((p-c)/a)^2) <= 1.
struct EllipsoidSpec {
    std::string structure_id;
    std::array<double, 3> center_mm{};
    std::array<double, 3> semi_axes_mm{};
    double hu_value = 0.0;
};

struct LesionSpec {
    std::string pathology_id;
    EllipsoidSpec shape;
    std::optional<Laterality> intended_laterality;
};

/// Analytic ground-truth input for the synthetic phantom generator.
struct PhantomSpec {
    Dims dims{64, 64, 64};
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<EllipsoidSpec> organs;
    std::vector<LesionSpec> lesions;
    double background_hu = -1000.0;
    std::uint64_t rng_seed = 0;
};

/// Rasterizes the spec into a StudyBundle. Later list entries overwrite
/// earlier HU values; every organ and lesion also emits its mask; ground
/// truth is filled from the lesion specs. HU values are clamped to the
/// 12-bit CT range.
StudyBundle make_phantom(const PhantomSpec& spec);

/// Analytic ellipsoid volume (4/3)*pi*a*b*c in mm^3.
double ellipsoid_volume_mm3(const std::array<double, 3>& semi_axes_mm);

PhantomSpec load_phantom_spec(const std::filesystem::path& path);
void save_phantom_spec(const PhantomSpec& spec, const std::filesystem::path& path);

} // namespace ctrag
