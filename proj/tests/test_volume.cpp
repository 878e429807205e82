#include <doctest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "ctrag/errors.hpp"
#include "ctrag/volume.hpp"

using namespace ctrag;

namespace {

Volume random_volume(std::mt19937& rng, Dims dims, Spacing spacing) {
    std::uniform_int_distribution<int> hu(-1024, 3071);
    Volume volume;
    volume.dims = dims;
    volume.spacing_mm = spacing;
    volume.voxels.resize(volume.voxel_count());
    for (auto& v : volume.voxels) {
        v = static_cast<std::int16_t>(hu(rng));
    }
    return volume;
}

Mask random_mask(std::mt19937& rng, Dims dims, Spacing spacing) {
    std::bernoulli_distribution bit(0.4);
    Mask mask;
    mask.structure_id = "test";
    mask.dims = dims;
    mask.spacing_mm = spacing;
    mask.voxels.resize(mask.voxel_count());
    for (auto& v : mask.voxels) {
        v = bit(rng) ? 1 : 0;
    }
    return mask;
}

} // namespace

TEST_CASE("smallest volume is 50 bytes: 48-byte header plus one int16 voxel") {
    Volume volume;
    volume.dims = {1, 1, 1};
    volume.spacing_mm = {1.0, 1.0, 1.0};
    volume.voxels = {0};
    std::ostringstream sink;
    CHECK(save_volume(volume, sink) == 50);
    CHECK(sink.str().size() == 50);
    CHECK(sink.str().substr(0, 4) == "MVOL");
}

TEST_CASE("volume round trip and deterministic bytes") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::uint32_t> dim(1, 9);
        std::uniform_real_distribution<double> s(0.25, 3.0);
        const Dims dims{dim(rng), dim(rng), dim(rng)};
        const Spacing spacing{s(rng), s(rng), s(rng)};
        const Volume volume = random_volume(rng, dims, spacing);

        std::ostringstream first;
        std::ostringstream second;
        save_volume(volume, first);
        save_volume(volume, second);
        CHECK(first.str() == second.str());

        std::istringstream source(first.str());
        CHECK(load_volume(source) == volume);
    }
}

TEST_CASE("mask round trip, determinism, and payload size") {
    std::mt19937 rng(8);
    Mask mask = random_mask(rng, {4, 4, 4}, {1.0, 1.0, 1.0});
    std::ostringstream sink;
    CHECK(save_mask(mask, sink) == 48 + 64);

    std::istringstream source(sink.str());
    Mask loaded = load_mask(source);
    loaded.structure_id = mask.structure_id; // ids travel in study.json, not the container
    CHECK(loaded == mask);
}

TEST_CASE("all-zero mask of dims (4,4,4) has 64 payload bytes") {
    Mask mask;
    mask.dims = {4, 4, 4};
    mask.spacing_mm = {1.0, 1.0, 1.0};
    mask.voxels.assign(64, 0);
    std::ostringstream sink;
    CHECK(save_mask(mask, sink) - 48 == 64);
}

TEST_CASE("bad magic is rejected") {
    Volume volume;
    volume.dims = {1, 1, 1};
    volume.voxels = {0};
    std::ostringstream sink;
    save_volume(volume, sink);
    std::string bytes = sink.str();
    bytes[0] = 'X';
    std::istringstream source(bytes);
    CHECK_THROWS_WITH_AS(load_volume(source), doctest::Contains("bad magic"), FormatError);
}

TEST_CASE("unsupported version is rejected") {
    Volume volume;
    volume.dims = {1, 1, 1};
    volume.voxels = {0};
    std::ostringstream sink;
    save_volume(volume, sink);
    std::string bytes = sink.str();
    bytes[4] = 2;
    std::istringstream source(bytes);
    CHECK_THROWS_WITH_AS(load_volume(source), doctest::Contains("version"), FormatError);
}

TEST_CASE("payload length mismatches are rejected both ways") {
    Volume volume;
    volume.dims = {2, 2, 2};
    volume.spacing_mm = {1.0, 1.0, 1.0};
    volume.voxels.assign(8, 5);
    std::ostringstream sink;
    save_volume(volume, sink);
    const std::string bytes = sink.str();

    std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_WITH_AS(load_volume(truncated), doctest::Contains("length mismatch"),
                         FormatError);

    std::istringstream padded(bytes + "zz");
    CHECK_THROWS_WITH_AS(load_volume(padded), doctest::Contains("length mismatch"), FormatError);
}

TEST_CASE("non-positive spacing is rejected") {
    Volume volume;
    volume.dims = {1, 1, 1};
    volume.spacing_mm = {1.0, 1.0, 1.0};
    volume.voxels = {0};
    std::ostringstream sink;
    save_volume(volume, sink);
    std::string bytes = sink.str();
    for (std::size_t i = 20; i < 28; ++i) {
        bytes[i] = 0; // sx := 0.0
    }
    std::istringstream source(bytes);
    CHECK_THROWS_AS(load_volume(source), FormatError);
}

TEST_CASE("mask payload byte 2 is an invalid-mask-value error") {
    Mask mask;
    mask.dims = {2, 1, 1};
    mask.spacing_mm = {1.0, 1.0, 1.0};
    mask.voxels = {1, 0};
    std::ostringstream sink;
    save_mask(mask, sink);
    std::string bytes = sink.str();
    bytes[bytes.size() - 1] = 2;
    std::istringstream source(bytes);
    CHECK_THROWS_WITH_AS(load_mask(source), doctest::Contains("invalid mask value"),
                         FormatError);
}

TEST_CASE("out-of-range HU on load is rejected") {
    Volume volume;
    volume.dims = {1, 1, 1};
    volume.spacing_mm = {1.0, 1.0, 1.0};
    volume.voxels = {0};
    std::ostringstream sink;
    save_volume(volume, sink);
    std::string bytes = sink.str();
    bytes[48] = 0x00;
    bytes[49] = 0x70; // 0x7000 = 28672, far outside the 12-bit range
    std::istringstream source(bytes);
    CHECK_THROWS_AS(load_volume(source), FormatError);
}

TEST_CASE("study bundle directory round trip") {
    std::mt19937 rng(9);
    const Dims dims{6, 5, 4};
    const Spacing spacing{1.0, 0.75, 2.0};

    StudyBundle study;
    study.study_id = "s1";
    study.volume = random_volume(rng, dims, spacing);
    Mask lung = random_mask(rng, dims, spacing);
    lung.structure_id = "lung_left";
    study.masks.emplace("lung_left", lung);
    std::map<std::string, GroundTruthFinding> gt;
    gt.emplace("PleuralEffusion", GroundTruthFinding{true, Laterality::left});
    gt.emplace("Cardiomegaly", GroundTruthFinding{false, std::nullopt});
    study.ground_truth = gt;

    const auto dir = std::filesystem::temp_directory_path() / "ctrag_test_study";
    std::filesystem::remove_all(dir);
    save_study(study, dir);
    const StudyBundle loaded = load_study(dir);

    CHECK(loaded.study_id == "s1");
    CHECK(loaded.volume == study.volume);
    CHECK(loaded.masks.at("lung_left") == lung);
    REQUIRE(loaded.ground_truth.has_value());
    CHECK(loaded.ground_truth->at("PleuralEffusion").present);
    CHECK(loaded.ground_truth->at("PleuralEffusion").laterality == Laterality::left);
    CHECK_FALSE(loaded.ground_truth->at("Cardiomegaly").present);
    std::filesystem::remove_all(dir);
}

TEST_CASE("validate rejects geometry mismatches and bad values") {
    Volume volume;
    volume.dims = {2, 2, 2};
    volume.spacing_mm = {1.0, 1.0, 1.0};
    volume.voxels.assign(8, 0);

    Mask mask;
    mask.structure_id = "m";
    mask.dims = {2, 2, 1};
    mask.spacing_mm = {1.0, 1.0, 1.0};
    mask.voxels.assign(4, 0);

    StudyBundle study;
    study.study_id = "s";
    study.volume = volume;
    study.masks.emplace("m", mask);
    CHECK_THROWS_AS(validate(study), ValidationError);

    Volume bad_hu = volume;
    bad_hu.voxels[0] = 3072;
    CHECK_THROWS_AS(validate(bad_hu), ValidationError);

    Mask bad_bit;
    bad_bit.dims = {1, 1, 1};
    bad_bit.spacing_mm = {1.0, 1.0, 1.0};
    bad_bit.voxels = {2};
    CHECK_THROWS_AS(validate(bad_bit), ValidationError);
}
