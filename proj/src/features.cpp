#include "ctrag/features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"
#include "ctrag/kernels.hpp"

namespace ctrag {

namespace {

struct PathologyInfo {
    std::string_view id;
    std::string_view display_name;
};

// Canonical legend order.
constexpr std::array<PathologyInfo, 18> kPathologies{{
    {"MedicalMaterial", "Medical material"},
    {"ArterialWallCalcification", "Arterial wall calcification"},
    {"Cardiomegaly", "Cardiomegaly"},
    {"PericardialEffusion", "Pericardial effusion"},
    {"CoronaryArteryWallCalcification", "Coronary artery wall calcification"},
    {"HiatalHernia", "Hiatal hernia"},
    {"Lymphadenopathy", "Lymphadenopathy"},
    {"Emphysema", "Emphysema"},
    {"Atelectasis", "Atelectasis"},
    {"LungNodule", "Lung nodule"},
    {"LungOpacity", "Lung opacity"},
    {"PulmonaryFibroticSequela", "Pulmonary fibrotic sequela"},
    {"PleuralEffusion", "Pleural effusion"},
    {"MosaicAttenuationPattern", "Mosaic attenuation pattern"},
    {"PeribronchialThickening", "Peribronchial thickening"},
    {"Consolidation", "Consolidation"},
    {"Bronchiectasis", "Bronchiectasis"},
    {"InterlobularSeptalThickening", "Interlobular septal thickening"},
}};

constexpr std::array<std::string_view, 17> kFeatureFamily{
    "absolute_volume_mm3", "volume_rel_lungs", "volume_rel_heart",
    "axial_extent_mm",     "thickness_mm",     "left_fraction",
    "right_fraction",      "anterior_fraction", "posterior_fraction",
    "hu_mean",             "hu_min",           "hu_max",
    "hu_p5",               "hu_p25",           "hu_p50",
    "hu_p75",              "hu_p95",
};

constexpr std::array<double, 5> kDefaultPercentiles{5.0, 25.0, 50.0, 75.0, 95.0};

bool known_feature(std::string_view name) {
    return std::find(kFeatureFamily.begin(), kFeatureFamily.end(), name) !=
           kFeatureFamily.end();
}

/// Correctly paired fractions: the smaller count is divided, the other is its
/// complement, so first+second == 1.0 bitwise and swapping the counts swaps
/// the pair bitwise.
FractionPair fraction_pair(std::uint64_t a, std::uint64_t total) {
    const std::uint64_t b = total - a;
    FractionPair pair;
    if (2 * a <= total) {
        pair.first = static_cast<double>(a) / static_cast<double>(total);
        pair.second = 1.0 - pair.first;
    } else {
        pair.second = static_cast<double>(b) / static_cast<double>(total);
        pair.first = 1.0 - pair.second;
    }
    return pair;
}

std::size_t nearest_rank(double q, std::size_t n) {
    const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
    return std::clamp<std::size_t>(rank, 1, n);
}

} // namespace

bool FeatureVector::all_undefined() const {
    return std::all_of(undefined.begin(), undefined.end(), [](bool f) { return f; });
}

ToolRegistry::ToolRegistry(std::string schema_id, std::vector<ToolSpec> tools)
    : schema_id_(std::move(schema_id)), tools_(std::move(tools)) {
    if (schema_id_.empty()) {
        throw ValidationError("registry schema_id must be non-empty");
    }
    std::unordered_set<std::string_view> seen_pathologies;
    for (auto& tool : tools_) {
        tool.schema_id = schema_id_;
        if (!seen_pathologies.insert(tool.pathology_id).second) {
            throw ValidationError("duplicate tool for pathology \"" + tool.pathology_id + "\"");
        }
        if (tool.feature_list.empty()) {
            throw ValidationError("tool \"" + tool.pathology_id + "\" has an empty feature list");
        }
        if (tool.required_structures.empty()) {
            throw ValidationError("tool \"" + tool.pathology_id + "\" names no structures");
        }
        std::unordered_set<std::string_view> seen_features;
        for (const auto& name : tool.feature_list) {
            if (!known_feature(name)) {
                throw ValidationError("tool \"" + tool.pathology_id +
                                      "\" lists unknown feature \"" + name + "\"");
            }
            if (!seen_features.insert(name).second) {
                throw ValidationError("tool \"" + tool.pathology_id +
                                      "\" lists feature \"" + name + "\" twice");
            }
        }
        if (tool.hu_window && !(tool.hu_window->low <= tool.hu_window->high)) {
            throw ValidationError("tool \"" + tool.pathology_id + "\" has an inverted HU window");
        }
        if (tool.display_name.empty()) {
            tool.display_name = pathology_display_name(tool.pathology_id);
        }
    }
}

const ToolSpec* ToolRegistry::find(std::string_view pathology_id) const {
    for (const auto& tool : tools_) {
        if (tool.pathology_id == pathology_id) {
            return &tool;
        }
    }
    return nullptr;
}

const ToolSpec& ToolRegistry::at(std::string_view pathology_id) const {
    if (const ToolSpec* tool = find(pathology_id)) {
        return *tool;
    }
    throw ValidationError("no tool registered for pathology \"" +
                          std::string(pathology_id) + "\"");
}

std::size_t ToolRegistry::total_dimension() const {
    std::size_t d = 0;
    for (const auto& tool : tools_) {
        d += tool.feature_list.size();
    }
    return d;
}

std::span<const std::string_view> pathology_ids() {
    static const std::array<std::string_view, 18> ids = [] {
        std::array<std::string_view, 18> out{};
        for (std::size_t i = 0; i < kPathologies.size(); ++i) {
            out[i] = kPathologies[i].id;
        }
        return out;
    }();
    return ids;
}

std::string_view pathology_display_name(std::string_view pathology_id) {
    for (const auto& p : kPathologies) {
        if (p.id == pathology_id) {
            return p.display_name;
        }
    }
    return pathology_id;
}

bool is_known_pathology(std::string_view pathology_id) {
    for (const auto& p : kPathologies) {
        if (p.id == pathology_id) {
            return true;
        }
    }
    return false;
}

ToolRegistry default_registry() {
    const std::vector<std::string> full_family(kFeatureFamily.begin(), kFeatureFamily.end());
    const std::vector<std::string> lungs{"lung_left", "lung_right"};
    const HuWindow calcium{130.0, 3071.0};

    auto structures_for = [&](std::string_view id) -> std::vector<std::string> {
        if (id == "MedicalMaterial") return {"medical_material_region"};
        if (id == "ArterialWallCalcification") return {"aorta"};
        if (id == "Cardiomegaly") return {"heart"};
        if (id == "PericardialEffusion") return {"pericardial_effusion_region"};
        if (id == "CoronaryArteryWallCalcification") return {"heart"};
        if (id == "HiatalHernia") return {"hiatal_hernia_region"};
        if (id == "Lymphadenopathy") return {"lymphadenopathy_region"};
        if (id == "LungNodule") return {"nodule_candidates"};
        if (id == "PleuralEffusion") return {"pleural_effusion_region"};
        return lungs;
    };

    std::vector<ToolSpec> tools;
    tools.reserve(kPathologies.size());
    for (const auto& p : kPathologies) {
        ToolSpec tool;
        tool.pathology_id = std::string(p.id);
        tool.display_name = std::string(p.display_name);
        tool.required_structures = structures_for(p.id);
        tool.feature_list = full_family;
        if (p.id == "ArterialWallCalcification" || p.id == "CoronaryArteryWallCalcification") {
            tool.hu_window = calcium;
        }
        tools.push_back(std::move(tool));
    }
    return ToolRegistry("ctrag-tools-v1", std::move(tools));
}

ToolRegistry load_registry(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open registry \"" + path.string() + "\"");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("registry parse error: " + std::string(e.what()));
    }
    std::vector<ToolSpec> tools;
    for (const auto& t : j.at("tools")) {
        ToolSpec tool;
        tool.pathology_id = t.at("pathology_id").get<std::string>();
        tool.display_name = t.value("display_name", std::string{});
        for (const auto& s : t.at("required_structures")) {
            tool.required_structures.push_back(s.get<std::string>());
        }
        for (const auto& f : t.at("feature_list")) {
            tool.feature_list.push_back(f.get<std::string>());
        }
        if (t.contains("hu_window") && !t.at("hu_window").is_null()) {
            const auto& w = t.at("hu_window");
            tool.hu_window = HuWindow{w.at(0).get<double>(), w.at(1).get<double>()};
        }
        tools.push_back(std::move(tool));
    }
    return ToolRegistry(j.at("schema_id").get<std::string>(), std::move(tools));
}

void save_registry(const ToolRegistry& registry, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["schema_id"] = registry.schema_id();
    auto tools = nlohmann::ordered_json::array();
    for (const auto& tool : registry.tools()) {
        nlohmann::ordered_json t;
        t["pathology_id"] = tool.pathology_id;
        t["display_name"] = tool.display_name;
        t["required_structures"] = tool.required_structures;
        t["feature_list"] = tool.feature_list;
        if (tool.hu_window) {
            t["hu_window"] = {tool.hu_window->low, tool.hu_window->high};
        }
        tools.push_back(std::move(t));
    }
    j["tools"] = std::move(tools);
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write registry \"" + path.string() + "\"");
    }
    out << j.dump(2) << '\n';
}

// -- descriptor primitives ---------------------------------------------------

double absolute_volume(const Mask& mask) {
    const auto count = kernels::count_nonzero_u8(mask.voxels.data(), mask.voxels.size());
    return static_cast<double>(count) * mask.spacing_mm[0] * mask.spacing_mm[1] *
           mask.spacing_mm[2];
}

std::optional<double> relative_volume(const Mask& target, const Mask& reference) {
    if (!geometry_compatible(target, reference)) {
        throw ValidationError("relative_volume requires geometry-compatible masks");
    }
    const double ref = absolute_volume(reference);
    if (ref == 0.0) {
        return std::nullopt;
    }
    return absolute_volume(target) / ref;
}

double axial_extent(const Mask& mask) {
    const auto& [nx, ny, nz] = mask.dims;
    const std::size_t slab = static_cast<std::size_t>(nx) * ny;
    std::uint32_t z_min = nz;
    std::uint32_t z_max = 0;
    for (std::uint32_t z = 0; z < nz; ++z) {
        if (kernels::count_nonzero_u8(mask.voxels.data() + z * slab, slab) > 0) {
            z_min = std::min(z_min, z);
            z_max = std::max(z_max, z);
        }
    }
    if (z_min > z_max) {
        return 0.0;
    }
    return static_cast<double>(z_max - z_min + 1) * mask.spacing_mm[2];
}

double thickness(const Mask& mask) {
    const auto& [nx, ny, nz] = mask.dims;
    std::vector<std::uint32_t> column_maxima;
    for (std::uint32_t z = 0; z < nz; ++z) {
        for (std::uint32_t x = 0; x < nx; ++x) {
            std::uint32_t best = 0;
            std::uint32_t run = 0;
            std::size_t idx = mask.index(x, 0, z);
            for (std::uint32_t y = 0; y < ny; ++y, idx += nx) {
                if (mask.voxels[idx]) {
                    ++run;
                    best = std::max(best, run);
                } else {
                    run = 0;
                }
            }
            if (best > 0) {
                column_maxima.push_back(best);
            }
        }
    }
    if (column_maxima.empty()) {
        return 0.0;
    }
    std::sort(column_maxima.begin(), column_maxima.end());
    const std::size_t rank = nearest_rank(95.0, column_maxima.size());
    return static_cast<double>(column_maxima[rank - 1]) * mask.spacing_mm[1];
}

std::optional<FractionPair> laterality_fractions(const Mask& mask, double midline_x_mm) {
    const auto& [nx, ny, nz] = mask.dims;
    const double sx = mask.spacing_mm[0];
    const std::uint64_t total = kernels::count_nonzero_u8(mask.voxels.data(), mask.voxels.size());
    if (total == 0) {
        return std::nullopt;
    }
    // Voxel-center x is monotone in the index, so the left half-space is a
    // contiguous index range [cut, nx).
    std::uint32_t cut = nx;
    for (std::uint32_t x = 0; x < nx; ++x) {
        if ((x + 0.5) * sx >= midline_x_mm) {
            cut = x;
            break;
        }
    }
    std::uint64_t left = 0;
    const std::size_t row_count = static_cast<std::size_t>(ny) * nz;
    for (std::size_t row = 0; row < row_count; ++row) {
        left += kernels::count_nonzero_u8(mask.voxels.data() + row * nx + cut, nx - cut);
    }
    return fraction_pair(left, total);
}

std::optional<FractionPair> orientation_fractions(const Mask& mask, double midcoronal_y_mm) {
    const auto& [nx, ny, nz] = mask.dims;
    const double sy = mask.spacing_mm[1];
    const std::uint64_t total = kernels::count_nonzero_u8(mask.voxels.data(), mask.voxels.size());
    if (total == 0) {
        return std::nullopt;
    }
    // Anterior rows are y indices with center <= plane.
    std::uint32_t ycut = ny;
    for (std::uint32_t y = 0; y < ny; ++y) {
        if ((y + 0.5) * sy > midcoronal_y_mm) {
            ycut = y;
            break;
        }
    }
    std::uint64_t anterior = 0;
    for (std::uint32_t z = 0; z < nz; ++z) {
        const std::size_t slab = mask.index(0, 0, z);
        anterior += kernels::count_nonzero_u8(mask.voxels.data() + slab,
                                              static_cast<std::size_t>(ycut) * nx);
    }
    return fraction_pair(anterior, total);
}

std::optional<HuStatistics> hu_statistics(const Volume& volume, const Mask& mask,
                                          std::span<const double> percentiles,
                                          std::optional<HuWindow> window) {
    if (!geometry_compatible(volume, mask)) {
        throw ValidationError("hu_statistics requires geometry-compatible volume and mask");
    }
    for (const double q : percentiles) {
        if (!(q > 0.0 && q < 100.0)) {
            throw ValidationError("percentile must lie in (0, 100)");
        }
    }
    std::int16_t lo = kHuMin;
    std::int16_t hi = kHuMax;
    if (window) {
        const double lo_d = std::max(std::ceil(window->low), double(kHuMin));
        const double hi_d = std::min(std::floor(window->high), double(kHuMax));
        if (lo_d > hi_d) {
            return std::nullopt;
        }
        lo = static_cast<std::int16_t>(lo_d);
        hi = static_cast<std::int16_t>(hi_d);
    }

    const auto stats = kernels::masked_hu_stats(volume.voxels.data(), mask.voxels.data(),
                                                volume.voxels.size(), lo, hi);
    if (stats.count == 0) {
        return std::nullopt;
    }

    HuStatistics out;
    out.mean = static_cast<double>(stats.sum) / static_cast<double>(stats.count);
    out.min = static_cast<double>(stats.min);
    out.max = static_cast<double>(stats.max);

    if (!percentiles.empty()) {
        // Exact nearest-rank selection via a value histogram over the HU range.
        std::array<std::uint64_t, 4096> hist{};
        for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
            const std::int16_t v = volume.voxels[i];
            if (mask.voxels[i] != 0 && v >= lo && v <= hi) {
                ++hist[static_cast<std::size_t>(v - kHuMin)];
            }
        }
        out.percentile_values.reserve(percentiles.size());
        for (const double q : percentiles) {
            const std::size_t rank = nearest_rank(q, stats.count);
            std::uint64_t cumulative = 0;
            double value = out.max;
            for (std::size_t bin = 0; bin < hist.size(); ++bin) {
                cumulative += hist[bin];
                if (cumulative >= rank) {
                    value = static_cast<double>(static_cast<std::int32_t>(bin) + kHuMin);
                    break;
                }
            }
            out.percentile_values.push_back(value);
        }
    }
    return out;
}

namespace {

/// Union of the study's lung masks; nullopt when neither lung exists.
std::optional<Mask> lung_union(const StudyBundle& study) {
    const Mask* left = nullptr;
    const Mask* right = nullptr;
    if (auto it = study.masks.find("lung_left"); it != study.masks.end()) left = &it->second;
    if (auto it = study.masks.find("lung_right"); it != study.masks.end()) right = &it->second;
    if (!left && !right) {
        return std::nullopt;
    }
    Mask out = left ? *left : *right;
    out.structure_id = "lungs";
    if (left && right) {
        for (std::size_t i = 0; i < out.voxels.size(); ++i) {
            out.voxels[i] = out.voxels[i] | right->voxels[i] ? 1 : 0;
        }
    }
    return out;
}

} // namespace

MidPlanes estimate_midplanes(const StudyBundle& study) {
    const auto& dims = study.volume.dims;
    const auto& spacing = study.volume.spacing_mm;
    MidPlanes planes;
    planes.midline_x_mm = dims[0] * spacing[0] / 2.0;
    planes.midcoronal_y_mm = dims[1] * spacing[1] / 2.0;

    const auto lungs = lung_union(study);
    if (!lungs) {
        return planes;
    }
    const auto& [nx, ny, nz] = lungs->dims;
    std::vector<std::uint64_t> x_hist(nx, 0);
    std::vector<std::uint64_t> y_hist(ny, 0);
    std::uint64_t total = 0;
    std::size_t idx = 0;
    for (std::uint32_t z = 0; z < nz; ++z) {
        for (std::uint32_t y = 0; y < ny; ++y) {
            for (std::uint32_t x = 0; x < nx; ++x, ++idx) {
                if (lungs->voxels[idx]) {
                    ++x_hist[x];
                    ++y_hist[y];
                    ++total;
                }
            }
        }
    }
    if (total == 0) {
        return planes;
    }
    double x_sum = 0.0;
    for (std::uint32_t x = 0; x < nx; ++x) {
        x_sum += static_cast<double>(x_hist[x]) * (x + 0.5) * spacing[0];
    }
    double y_sum = 0.0;
    for (std::uint32_t y = 0; y < ny; ++y) {
        y_sum += static_cast<double>(y_hist[y]) * (y + 0.5) * spacing[1];
    }
    planes.midline_x_mm = x_sum / static_cast<double>(total);
    planes.midcoronal_y_mm = y_sum / static_cast<double>(total);
    return planes;
}

FeatureVector run_tool(const StudyBundle& study, const ToolSpec& tool,
                       const MidPlanes& planes) {
    FeatureVector fv;
    fv.schema_id = tool.schema_id;
    fv.pathology_id = tool.pathology_id;
    fv.names = tool.feature_list;
    fv.values.assign(fv.names.size(), 0.0);
    fv.undefined.assign(fv.names.size(), false);

    auto flag_all = [&fv] {
        fv.undefined.assign(fv.undefined.size(), true);
    };

    // Resolve the target region; any missing structure degrades the whole tool.
    std::vector<const Mask*> parts;
    parts.reserve(tool.required_structures.size());
    for (const auto& structure_id : tool.required_structures) {
        const auto it = study.masks.find(structure_id);
        if (it == study.masks.end()) {
            flag_all();
            return fv;
        }
        parts.push_back(&it->second);
    }
    Mask united;
    const Mask* target = parts.front();
    if (parts.size() > 1) {
        united = *parts.front();
        for (std::size_t p = 1; p < parts.size(); ++p) {
            for (std::size_t i = 0; i < united.voxels.size(); ++i) {
                united.voxels[i] = united.voxels[i] | parts[p]->voxels[i] ? 1 : 0;
            }
        }
        target = &united;
    }

    const auto lungs = lung_union(study);
    const Mask* heart = nullptr;
    if (auto it = study.masks.find("heart"); it != study.masks.end()) {
        heart = &it->second;
    }

    std::optional<FractionPair> lat;
    std::optional<FractionPair> ori;
    std::optional<HuStatistics> hu;
    bool lat_done = false;
    bool ori_done = false;
    bool hu_done = false;
    auto lat_value = [&]() -> std::optional<FractionPair> {
        if (!lat_done) {
            lat = laterality_fractions(*target, planes.midline_x_mm);
            lat_done = true;
        }
        return lat;
    };
    auto ori_value = [&]() -> std::optional<FractionPair> {
        if (!ori_done) {
            ori = orientation_fractions(*target, planes.midcoronal_y_mm);
            ori_done = true;
        }
        return ori;
    };
    auto hu_value = [&]() -> std::optional<HuStatistics> {
        if (!hu_done) {
            hu = hu_statistics(study.volume, *target, kDefaultPercentiles, tool.hu_window);
            hu_done = true;
        }
        return hu;
    };

    for (std::size_t i = 0; i < fv.names.size(); ++i) {
        const std::string& name = fv.names[i];
        std::optional<double> value;
        if (name == "absolute_volume_mm3") {
            value = absolute_volume(*target);
        } else if (name == "volume_rel_lungs") {
            if (lungs) value = relative_volume(*target, *lungs);
        } else if (name == "volume_rel_heart") {
            if (heart) value = relative_volume(*target, *heart);
        } else if (name == "axial_extent_mm") {
            value = axial_extent(*target);
        } else if (name == "thickness_mm") {
            value = thickness(*target);
        } else if (name == "left_fraction") {
            if (auto f = lat_value()) value = f->first;
        } else if (name == "right_fraction") {
            if (auto f = lat_value()) value = f->second;
        } else if (name == "anterior_fraction") {
            if (auto f = ori_value()) value = f->first;
        } else if (name == "posterior_fraction") {
            if (auto f = ori_value()) value = f->second;
        } else if (name == "hu_mean") {
            if (auto s = hu_value()) value = s->mean;
        } else if (name == "hu_min") {
            if (auto s = hu_value()) value = s->min;
        } else if (name == "hu_max") {
            if (auto s = hu_value()) value = s->max;
        } else if (name == "hu_p5") {
            if (auto s = hu_value()) value = s->percentile_values[0];
        } else if (name == "hu_p25") {
            if (auto s = hu_value()) value = s->percentile_values[1];
        } else if (name == "hu_p50") {
            if (auto s = hu_value()) value = s->percentile_values[2];
        } else if (name == "hu_p75") {
            if (auto s = hu_value()) value = s->percentile_values[3];
        } else if (name == "hu_p95") {
            if (auto s = hu_value()) value = s->percentile_values[4];
        }
        if (value) {
            fv.values[i] = *value;
        } else {
            fv.undefined[i] = true;
        }
    }
    return fv;
}

std::string feature_vector_to_json(const FeatureVector& fv) {
    nlohmann::ordered_json j;
    j["schema_id"] = fv.schema_id;
    j["pathology"] = fv.pathology_id;
    nlohmann::ordered_json feats;
    for (std::size_t i = 0; i < fv.names.size(); ++i) {
        feats[fv.names[i]] = fv.values[i];
    }
    j["features"] = std::move(feats);
    auto undef = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < fv.names.size(); ++i) {
        if (fv.undefined[i]) {
            undef.push_back(fv.names[i]);
        }
    }
    j["undefined"] = std::move(undef);
    return j.dump();
}

FeatureVector feature_vector_from_json(const std::string& text) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("feature vector parse error: " + std::string(e.what()));
    }
    FeatureVector fv;
    fv.schema_id = j.at("schema_id").get<std::string>();
    fv.pathology_id = j.at("pathology").get<std::string>();
    for (const auto& [name, value] : j.at("features").items()) {
        fv.names.push_back(name);
        fv.values.push_back(value.get<double>());
        fv.undefined.push_back(false);
    }
    for (const auto& name : j.value("undefined", nlohmann::ordered_json::array())) {
        const auto it = std::find(fv.names.begin(), fv.names.end(), name.get<std::string>());
        if (it == fv.names.end()) {
            throw ValidationError("undefined flag names unknown feature \"" +
                                  name.get<std::string>() + "\"");
        }
        const auto i = static_cast<std::size_t>(it - fv.names.begin());
        if (fv.values[i] != 0.0) {
            throw ValidationError("undefined feature \"" + fv.names[i] +
                                  "\" must carry value 0.0");
        }
        fv.undefined[i] = true;
    }
    return fv;
}

} // namespace ctrag
