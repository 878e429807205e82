#include "ctrag/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"

namespace ctrag {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kPayloadHu = 1;
constexpr std::uint32_t kPayloadBinary = 2;
constexpr std::size_t kHeaderBytes = 48;

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

void put_u32(std::ostream& sink, std::uint32_t v) {
    sink.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_f64(std::ostream& sink, double v) {
    sink.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& source) {
    std::uint32_t v = 0;
    source.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

double get_f64(std::istream& source) {
    double v = 0;
    source.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

struct Header {
    Dims dims;
    Spacing spacing;
};

void write_header(std::ostream& sink, const char* magic, const Dims& dims,
                  const Spacing& spacing, std::uint32_t payload_code) {
    sink.write(magic, 4);
    put_u32(sink, kFormatVersion);
    for (const std::uint32_t d : dims) put_u32(sink, d);
    for (const double s : spacing) put_f64(sink, s);
    put_u32(sink, payload_code);
    if (!sink) {
        throw IoError("container write failed while emitting the header");
    }
}

Header read_header(std::istream& source, const char* expected_magic,
                   std::uint32_t expected_payload) {
    char magic[4] = {};
    source.read(magic, 4);
    if (!source) {
        throw FormatError("container truncated before the magic bytes");
    }
    if (std::memcmp(magic, expected_magic, 4) != 0) {
        throw FormatError(std::string("bad magic: expected \"") + expected_magic +
                          "\", got \"" + std::string(magic, 4) + "\"");
    }
    const std::uint32_t version = get_u32(source);
    if (version != kFormatVersion) {
        throw FormatError("unsupported container version " + std::to_string(version));
    }
    Header h;
    for (auto& d : h.dims) d = get_u32(source);
    for (auto& s : h.spacing) s = get_f64(source);
    const std::uint32_t payload = get_u32(source);
    if (!source) {
        throw FormatError("container truncated inside the header");
    }
    if (payload != expected_payload) {
        throw FormatError("unexpected payload code " + std::to_string(payload));
    }
    for (const std::uint32_t d : h.dims) {
        if (d == 0) {
            throw FormatError("container dims must be positive");
        }
    }
    for (const double s : h.spacing) {
        if (!(s > 0.0)) {
            throw FormatError("container spacing must be strictly positive");
        }
    }
    return h;
}

// Reads exactly count*elem_size payload bytes and verifies the stream ends there.
void read_payload(std::istream& source, void* dst, std::size_t bytes) {
    source.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(source.gcount()) != bytes) {
        throw FormatError("payload length mismatch: truncated payload");
    }
    char extra;
    if (source.read(&extra, 1); source.gcount() != 0) {
        throw FormatError("payload length mismatch: trailing bytes after payload");
    }
}

} // namespace

std::string_view to_string(Laterality side) {
    switch (side) {
    case Laterality::left:
        return "left";
    case Laterality::right:
        return "right";
    case Laterality::bilateral:
        return "bilateral";
    }
    return "left";
}

Laterality laterality_from_string(std::string_view text) {
    if (text == "left") return Laterality::left;
    if (text == "right") return Laterality::right;
    if (text == "bilateral") return Laterality::bilateral;
    throw ValidationError("unknown laterality \"" + std::string(text) + "\"");
}

bool geometry_compatible(const Volume& volume, const Mask& mask) {
    return volume.dims == mask.dims && volume.spacing_mm == mask.spacing_mm;
}

bool geometry_compatible(const Mask& a, const Mask& b) {
    return a.dims == b.dims && a.spacing_mm == b.spacing_mm;
}

void validate(const Volume& volume) {
    if (volume.voxels.size() != volume.voxel_count()) {
        throw ValidationError("volume voxel count does not match dims");
    }
    for (const double s : volume.spacing_mm) {
        if (!(s > 0.0)) {
            throw ValidationError("volume spacing must be strictly positive");
        }
    }
    for (const std::int16_t v : volume.voxels) {
        if (v < kHuMin || v > kHuMax) {
            throw ValidationError("HU value " + std::to_string(v) +
                                  " outside [-1024, 3071]");
        }
    }
}

void validate(const Mask& mask) {
    if (mask.voxels.size() != mask.voxel_count()) {
        throw ValidationError("mask voxel count does not match dims");
    }
    for (const double s : mask.spacing_mm) {
        if (!(s > 0.0)) {
            throw ValidationError("mask spacing must be strictly positive");
        }
    }
    for (const std::uint8_t v : mask.voxels) {
        if (v > 1) {
            throw ValidationError("mask voxels must be 0 or 1");
        }
    }
}

void validate(const StudyBundle& study) {
    if (study.study_id.empty()) {
        throw ValidationError("study_id must be non-empty");
    }
    validate(study.volume);
    for (const auto& [structure_id, mask] : study.masks) {
        validate(mask);
        if (!geometry_compatible(study.volume, mask)) {
            throw ValidationError("mask \"" + structure_id +
                                  "\" geometry does not match the volume");
        }
    }
}

std::size_t save_volume(const Volume& volume, std::ostream& sink) {
    write_header(sink, "MVOL", volume.dims, volume.spacing_mm, kPayloadHu);
    const std::size_t payload_bytes = volume.voxels.size() * sizeof(std::int16_t);
    sink.write(reinterpret_cast<const char*>(volume.voxels.data()),
               static_cast<std::streamsize>(payload_bytes));
    if (!sink) {
        throw IoError("container write failed while emitting the payload");
    }
    return kHeaderBytes + payload_bytes;
}

Volume load_volume(std::istream& source) {
    const Header h = read_header(source, "MVOL", kPayloadHu);
    Volume volume;
    volume.dims = h.dims;
    volume.spacing_mm = h.spacing;
    volume.voxels.resize(volume.voxel_count());
    read_payload(source, volume.voxels.data(), volume.voxels.size() * sizeof(std::int16_t));
    for (const std::int16_t v : volume.voxels) {
        if (v < kHuMin || v > kHuMax) {
            throw FormatError("HU value " + std::to_string(v) + " outside [-1024, 3071]");
        }
    }
    return volume;
}

std::size_t save_mask(const Mask& mask, std::ostream& sink) {
    write_header(sink, "MMSK", mask.dims, mask.spacing_mm, kPayloadBinary);
    sink.write(reinterpret_cast<const char*>(mask.voxels.data()),
               static_cast<std::streamsize>(mask.voxels.size()));
    if (!sink) {
        throw IoError("container write failed while emitting the payload");
    }
    return kHeaderBytes + mask.voxels.size();
}

Mask load_mask(std::istream& source) {
    const Header h = read_header(source, "MMSK", kPayloadBinary);
    Mask mask;
    mask.dims = h.dims;
    mask.spacing_mm = h.spacing;
    mask.voxels.resize(mask.voxel_count());
    read_payload(source, mask.voxels.data(), mask.voxels.size());
    for (const std::uint8_t v : mask.voxels) {
        if (v > 1) {
            throw FormatError("invalid mask value " + std::to_string(v) +
                              ": payload bytes must be 0 or 1");
        }
    }
    return mask;
}

namespace {

std::ofstream open_sink(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open \"" + path.string() + "\" for writing");
    }
    return out;
}

std::ifstream open_source(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open \"" + path.string() + "\" for reading");
    }
    return in;
}

} // namespace

std::size_t save_volume_file(const Volume& volume, const std::filesystem::path& path) {
    auto out = open_sink(path);
    return save_volume(volume, out);
}

Volume load_volume_file(const std::filesystem::path& path) {
    auto in = open_source(path);
    return load_volume(in);
}

std::size_t save_mask_file(const Mask& mask, const std::filesystem::path& path) {
    auto out = open_sink(path);
    return save_mask(mask, out);
}

Mask load_mask_file(const std::filesystem::path& path) {
    auto in = open_source(path);
    return load_mask(in);
}

void save_study(const StudyBundle& study, const std::filesystem::path& dir) {
    validate(study);
    std::filesystem::create_directories(dir / "masks");
    save_volume_file(study.volume, dir / "volume.mvol");

    nlohmann::ordered_json meta;
    meta["study_id"] = study.study_id;
    auto structures = nlohmann::ordered_json::array();
    for (const auto& [structure_id, mask] : study.masks) {
        structures.push_back(structure_id);
        save_mask_file(mask, dir / "masks" / (structure_id + ".mmsk"));
    }
    meta["structures"] = structures;
    if (study.ground_truth) {
        nlohmann::ordered_json gt;
        for (const auto& [pathology_id, finding] : *study.ground_truth) {
            nlohmann::ordered_json f;
            f["present"] = finding.present;
            if (finding.laterality) {
                f["laterality"] = std::string(to_string(*finding.laterality));
            }
            gt[pathology_id] = std::move(f);
        }
        meta["ground_truth"] = std::move(gt);
    }

    auto out = open_sink(dir / "study.json");
    out << meta.dump(2) << '\n';
    if (!out) {
        throw IoError("failed to write study.json");
    }
}

StudyBundle load_study(const std::filesystem::path& dir) {
    auto in = open_source(dir / "study.json");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("study.json parse error: " + std::string(e.what()));
    }

    StudyBundle study;
    study.study_id = meta.at("study_id").get<std::string>();
    study.volume = load_volume_file(dir / "volume.mvol");
    for (const auto& structure : meta.at("structures")) {
        const auto structure_id = structure.get<std::string>();
        Mask mask = load_mask_file(dir / "masks" / (structure_id + ".mmsk"));
        mask.structure_id = structure_id;
        study.masks.emplace(structure_id, std::move(mask));
    }
    if (meta.contains("ground_truth")) {
        std::map<std::string, GroundTruthFinding> gt;
        for (const auto& [pathology_id, finding] : meta.at("ground_truth").items()) {
            GroundTruthFinding f;
            f.present = finding.at("present").get<bool>();
            if (finding.contains("laterality")) {
                f.laterality = laterality_from_string(finding.at("laterality").get<std::string>());
            }
            gt.emplace(pathology_id, f);
        }
        study.ground_truth = std::move(gt);
    }
    validate(study);
    return study;
}

} // namespace ctrag
