#include "ctrag/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"

namespace ctrag {

namespace {

void validate_ellipsoid(const EllipsoidSpec& e, const Dims& dims, const Spacing& spacing) {
    for (int axis = 0; axis < 3; ++axis) {
        if (!(e.semi_axes_mm[axis] > 0.0)) {
            throw ValidationError("ellipsoid \"" + e.structure_id +
                                  "\" semi-axes must be positive");
        }
        const double extent = dims[axis] * spacing[axis];
        if (e.center_mm[axis] - e.semi_axes_mm[axis] < 0.0 ||
            e.center_mm[axis] + e.semi_axes_mm[axis] > extent) {
            throw ValidationError("ellipsoid \"" + e.structure_id +
                                  "\" exceeds the grid bounds");
        }
    }
}

std::int16_t clamp_hu(double hu) {
    return static_cast<std::int16_t>(std::clamp(hu, double(kHuMin), double(kHuMax)));
}

// Paints one ellipsoid into the volume and ORs its footprint into `mask`.
void rasterize(const EllipsoidSpec& e, Volume& volume, Mask& mask) {
    const auto& [nx, ny, nz] = volume.dims;
    const auto& [sx, sy, sz] = volume.spacing_mm;
    const std::int16_t hu = clamp_hu(e.hu_value);

    std::vector<double> x_term(nx);
    for (std::uint32_t x = 0; x < nx; ++x) {
        const double dx = ((x + 0.5) * sx - e.center_mm[0]) / e.semi_axes_mm[0];
        x_term[x] = dx * dx;
    }
    for (std::uint32_t z = 0; z < nz; ++z) {
        const double dz = ((z + 0.5) * sz - e.center_mm[2]) / e.semi_axes_mm[2];
        const double z_term = dz * dz;
        if (z_term > 1.0) continue;
        for (std::uint32_t y = 0; y < ny; ++y) {
            const double dy = ((y + 0.5) * sy - e.center_mm[1]) / e.semi_axes_mm[1];
            const double yz_term = z_term + dy * dy;
            if (yz_term > 1.0) continue;
            const std::size_t row = volume.index(0, y, z);
            for (std::uint32_t x = 0; x < nx; ++x) {
                if (x_term[x] + yz_term <= 1.0) {
                    volume.voxels[row + x] = hu;
                    mask.voxels[row + x] = 1;
                }
            }
        }
    }
}

Mask& mask_for(StudyBundle& study, const std::string& structure_id) {
    auto it = study.masks.find(structure_id);
    if (it == study.masks.end()) {
        Mask mask;
        mask.structure_id = structure_id;
        mask.dims = study.volume.dims;
        mask.spacing_mm = study.volume.spacing_mm;
        mask.voxels.assign(study.volume.voxel_count(), 0);
        it = study.masks.emplace(structure_id, std::move(mask)).first;
    }
    return it->second;
}

} // namespace

double ellipsoid_volume_mm3(const std::array<double, 3>& semi_axes_mm) {
    return 4.0 / 3.0 * std::numbers::pi * semi_axes_mm[0] * semi_axes_mm[1] *
           semi_axes_mm[2];
}

StudyBundle make_phantom(const PhantomSpec& spec) {
    for (const std::uint32_t d : spec.dims) {
        if (d == 0) throw ValidationError("phantom dims must be positive");
    }
    for (const double s : spec.spacing_mm) {
        if (!(s > 0.0)) throw ValidationError("phantom spacing must be strictly positive");
    }
    for (const auto& organ : spec.organs) {
        validate_ellipsoid(organ, spec.dims, spec.spacing_mm);
    }
    for (const auto& lesion : spec.lesions) {
        validate_ellipsoid(lesion.shape, spec.dims, spec.spacing_mm);
    }

    StudyBundle study;
    study.study_id = "phantom";
    study.volume.dims = spec.dims;
    study.volume.spacing_mm = spec.spacing_mm;
    study.volume.voxels.assign(study.volume.voxel_count(), clamp_hu(spec.background_hu));

    for (const auto& organ : spec.organs) {
        rasterize(organ, study.volume, mask_for(study, organ.structure_id));
    }

    std::map<std::string, GroundTruthFinding> ground_truth;
    for (const auto& lesion : spec.lesions) {
        rasterize(lesion.shape, study.volume, mask_for(study, lesion.shape.structure_id));
        auto [it, inserted] = ground_truth.try_emplace(lesion.pathology_id);
        GroundTruthFinding& finding = it->second;
        finding.present = true;
        if (inserted) {
            finding.laterality = lesion.intended_laterality;
        } else if (finding.laterality && lesion.intended_laterality &&
                   *finding.laterality != *lesion.intended_laterality) {
            finding.laterality = Laterality::bilateral;
        }
    }
    if (!ground_truth.empty()) {
        study.ground_truth = std::move(ground_truth);
    }
    return study;
}

namespace {

std::array<double, 3> triple(const nlohmann::json& j, const char* key) {
    const auto& arr = j.at(key);
    if (!arr.is_array() || arr.size() != 3) {
        throw ValidationError(std::string(key) + " must be a 3-element array");
    }
    return {arr[0].get<double>(), arr[1].get<double>(), arr[2].get<double>()};
}

EllipsoidSpec parse_ellipsoid(const nlohmann::json& j) {
    EllipsoidSpec e;
    e.structure_id = j.at("structure_id").get<std::string>();
    e.center_mm = triple(j, "center_mm");
    e.semi_axes_mm = triple(j, "semi_axes_mm");
    e.hu_value = j.at("hu_value").get<double>();
    return e;
}

nlohmann::ordered_json dump_ellipsoid(const EllipsoidSpec& e) {
    nlohmann::ordered_json j;
    j["structure_id"] = e.structure_id;
    j["center_mm"] = e.center_mm;
    j["semi_axes_mm"] = e.semi_axes_mm;
    j["hu_value"] = e.hu_value;
    return j;
}

} // namespace

PhantomSpec load_phantom_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open phantom spec \"" + path.string() + "\"");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("phantom spec parse error: " + std::string(e.what()));
    }

    PhantomSpec spec;
    const auto& dims = j.at("dims");
    if (!dims.is_array() || dims.size() != 3) {
        throw ValidationError("dims must be a 3-element array");
    }
    for (int axis = 0; axis < 3; ++axis) {
        spec.dims[axis] = dims[axis].get<std::uint32_t>();
    }
    spec.spacing_mm = triple(j, "spacing_mm");
    spec.background_hu = j.value("background_hu", -1000.0);
    spec.rng_seed = j.value("rng_seed", std::uint64_t{0});
    for (const auto& organ : j.value("organs", nlohmann::json::array())) {
        spec.organs.push_back(parse_ellipsoid(organ));
    }
    for (const auto& lesion : j.value("lesions", nlohmann::json::array())) {
        LesionSpec l;
        l.pathology_id = lesion.at("pathology_id").get<std::string>();
        l.shape = parse_ellipsoid(lesion);
        if (lesion.contains("intended_laterality")) {
            l.intended_laterality =
                laterality_from_string(lesion.at("intended_laterality").get<std::string>());
        }
        spec.lesions.push_back(std::move(l));
    }
    return spec;
}

void save_phantom_spec(const PhantomSpec& spec, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["dims"] = spec.dims;
    j["spacing_mm"] = spec.spacing_mm;
    j["background_hu"] = spec.background_hu;
    j["rng_seed"] = spec.rng_seed;
    auto organs = nlohmann::ordered_json::array();
    for (const auto& organ : spec.organs) {
        organs.push_back(dump_ellipsoid(organ));
    }
    j["organs"] = std::move(organs);
    auto lesions = nlohmann::ordered_json::array();
    for (const auto& lesion : spec.lesions) {
        auto l = dump_ellipsoid(lesion.shape);
        l["pathology_id"] = lesion.pathology_id;
        if (lesion.intended_laterality) {
            l["intended_laterality"] = std::string(to_string(*lesion.intended_laterality));
        }
        lesions.push_back(std::move(l));
    }
    j["lesions"] = std::move(lesions);

    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write phantom spec \"" + path.string() + "\"");
    }
    out << j.dump(2) << '\n';
}

} // namespace ctrag
