#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctrag/volume.hpp"

namespace ctrag {

/// Ordered, named descriptors produced by one pathology tool. Parallel
/// arrays in schema order; a feature that could not be computed carries
/// value 0.0 and its undefined flag.
struct FeatureVector {
    std::string schema_id;
    std::string pathology_id;
    std::vector<std::string> names;
    std::vector<double> values;
    std::vector<bool> undefined;

    std::size_t size() const { return names.size(); }
    bool all_undefined() const;

    bool operator==(const FeatureVector&) const = default;
};

struct HuWindow {
    double low = kHuMin;
    double high = kHuMax;

    bool operator==(const HuWindow&) const = default;
};

/// Binding of one target pathology to its structure set and feature list.
struct ToolSpec {
    std::string pathology_id;
    std::string display_name;
    std::vector<std::string> required_structures;
    std::vector<std::string> feature_list;
    std::optional<HuWindow> hu_window;
    std::string schema_id; // set by the owning registry
};

class ToolRegistry {
public:
    ToolRegistry(std::string schema_id, std::vector<ToolSpec> tools);

    const std::string& schema_id() const { return schema_id_; }
    /// Registry order; drives the deterministic fallback schedule.
    const std::vector<ToolSpec>& tools() const { return tools_; }
    const ToolSpec* find(std::string_view pathology_id) const;
    const ToolSpec& at(std::string_view pathology_id) const;
    std::size_t total_dimension() const;

private:
    std::string schema_id_;
    std::vector<ToolSpec> tools_;
};

/// The 18 target pathologies in canonical (legend) order.
std::span<const std::string_view> pathology_ids();
std::string_view pathology_display_name(std::string_view pathology_id);
bool is_known_pathology(std::string_view pathology_id);

/// Default schema: all 18 tools with the full 17-feature descriptor family.
ToolRegistry default_registry();

ToolRegistry load_registry(const std::filesystem::path& path);
void save_registry(const ToolRegistry& registry, const std::filesystem::path& path);

// -- descriptor primitives ---------------------------------------------------

/// Sum of mask voxels times the voxel volume, in mm^3.
double absolute_volume(const Mask& mask);

/// target volume / reference volume; empty reference is undefined.
std::optional<double> relative_volume(const Mask& target, const Mask& reference);

/// (z_max - z_min + 1) * sz over slices containing mask voxels; 0 when empty.
double axial_extent(const Mask& mask);

/// 95th percentile (nearest-rank) of the per-(slice, x-column) maximal
/// contiguous run of mask voxels along y, times sy; 0 when empty.
double thickness(const Mask& mask);

struct FractionPair {
    double first = 0.0;  // left (or anterior)
    double second = 0.0; // right (or posterior)
};

/// Shares of mask voxels on each side of the midsagittal plane. A voxel is
/// left when its center x >= midline (+x is patient-left; on-plane counts
/// left). The pair sums to 1.0 exactly and mirror-reflection swaps it
/// bitwise. Empty mask is undefined.
std::optional<FractionPair> laterality_fractions(const Mask& mask, double midline_x_mm);

/// Anterior/posterior mirror of laterality_fractions: posterior when the
/// voxel center y is strictly greater than the plane; on-plane is anterior.
std::optional<FractionPair> orientation_fractions(const Mask& mask, double midcoronal_y_mm);

struct HuStatistics {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::vector<double> percentile_values; // parallel to the requested list
};

/// Statistics over the HU values of mask voxels, optionally restricted to a
/// window. Percentiles (q in (0,100)) are nearest-rank: the value at 1-based
/// index ceil(q/100 * n) of the sorted sample. Empty sample is undefined.
std::optional<HuStatistics> hu_statistics(const Volume& volume, const Mask& mask,
                                          std::span<const double> percentiles,
                                          std::optional<HuWindow> window = {});

struct MidPlanes {
    double midline_x_mm = 0.0;
    double midcoronal_y_mm = 0.0;
};

/// Midsagittal/midcoronal planes from the lung-union centroid, falling back
/// to the grid center when no (nonempty) lung mask exists.
MidPlanes estimate_midplanes(const StudyBundle& study);

/// Evaluates the tool's feature list in schema order. Missing structures or
/// undefined features yield 0.0 with the undefined flag set; never throws on
/// degenerate input.
FeatureVector run_tool(const StudyBundle& study, const ToolSpec& tool,
                       const MidPlanes& planes);

// -- serialization ------------------------------------------------------------

/// {"schema_id":…,"pathology":…,"features":{…},"undefined":[…]}, keys in
/// schema order.
std::string feature_vector_to_json(const FeatureVector& fv);
FeatureVector feature_vector_from_json(const std::string& text);

} // namespace ctrag
