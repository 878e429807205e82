#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ctrag {

inline constexpr std::int16_t kHuMin = -1024;
inline constexpr std::int16_t kHuMax = 3071;

using Dims = std::array<std::uint32_t, 3>;    // nx, ny, nz
using Spacing = std::array<double, 3>;        // sx, sy, sz in mm

/// A CT volume in Hounsfield Units. Row-major, x fastest, then y, then z.
/// Orientation: +x toward patient left, +y posterior, +z toward the head.
struct Volume {
    Dims dims{0, 0, 0};
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<std::int16_t> voxels;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
    }
    std::int16_t at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return voxels[index(x, y, z)];
    }

    bool operator==(const Volume&) const = default;
};

/// Binary segmentation mask sharing its companion volume's grid geometry.
struct Mask {
    std::string structure_id;
    Dims dims{0, 0, 0};
    Spacing spacing_mm{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> voxels;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
    }

    bool operator==(const Mask&) const = default;
};

enum class Laterality { left, right, bilateral };

std::string_view to_string(Laterality side);
Laterality laterality_from_string(std::string_view text);

struct GroundTruthFinding {
    bool present = false;
    std::optional<Laterality> laterality;

    bool operator==(const GroundTruthFinding&) const = default;
};

/// One scan's worth of pipeline input: the volume, its per-structure masks,
/// and (for phantoms and evaluation cohorts) the planted ground truth.
struct StudyBundle {
    std::string study_id;
    Volume volume;
    std::map<std::string, Mask> masks;
    std::optional<std::map<std::string, GroundTruthFinding>> ground_truth;
};

/// True when the mask's grid matches the volume's exactly.
bool geometry_compatible(const Volume& volume, const Mask& mask);
bool geometry_compatible(const Mask& a, const Mask& b);

/// Throws ValidationError when a struct violates its invariants.
void validate(const Volume& volume);
void validate(const Mask& mask);
void validate(const StudyBundle& study);

// MVOL/MMSK container (little-endian):
//   bytes  0-3   magic "MVOL" (volumes) or "MMSK" (masks)
//   bytes  4-7   version, u32 = 1
//   bytes  8-19  nx, ny, nz as u32
//   bytes 20-43  sx, sy, sz as f64
//   bytes 44-47  payload code, u32: 1 = int16 HU, 2 = uint8 binary
//   bytes 48-    payload, row-major, x fastest

std::size_t save_volume(const Volume& volume, std::ostream& sink);
Volume load_volume(std::istream& source);
std::size_t save_mask(const Mask& mask, std::ostream& sink);
Mask load_mask(std::istream& source);

std::size_t save_volume_file(const Volume& volume, const std::filesystem::path& path);
Volume load_volume_file(const std::filesystem::path& path);
std::size_t save_mask_file(const Mask& mask, const std::filesystem::path& path);
Mask load_mask_file(const std::filesystem::path& path);

// StudyBundle directory layout: volume.mvol, masks/<structure_id>.mmsk, and
// study.json carrying study_id, the structure list, and optional ground truth.
void save_study(const StudyBundle& study, const std::filesystem::path& dir);
StudyBundle load_study(const std::filesystem::path& dir);

} // namespace ctrag
