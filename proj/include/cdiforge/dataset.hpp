#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cdiforge/crystalgen.hpp"
#include "cdiforge/volume.hpp"

namespace cdiforge {

struct SampleRecord {
    int id = 0;
    std::string shape_path;  // relative to the manifest directory
    std::string phase_path;
    std::string magnitude_path;
    std::uint64_t seed = 0;
    bool include_strain = true;
    int n_planes = 0;
    std::array<double, 6> strain {0, 0, 0, 0, 0, 0};  // xx, yy, zz, xy, xz, yz
    std::string split;  // "train" | "test"
};

struct DatasetManifest {
    int format_version = 1;
    std::uint64_t dataset_seed = 0;
    Dims3 dims {32, 32, 32};
    double voxel_pitch = 2.0;
    std::string normalization = "max";
    std::array<double, 3> bragg_g {2.0 * M_PI, 2.0 * M_PI, 2.0 * M_PI};
    int train_count = 0;
    int test_count = 0;
    std::vector<SampleRecord> records;
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct DatasetConfig {
    int n_strained = 0;
    int n_unstrained = 0;
    double test_fraction = 0.1;  // fraction of geometry seeds held out per arm
    std::uint64_t seed = 0;
    CrystalGenConfig gen;
    GridSpec grid;
    ForwardConfig forward;
    BraggVector bragg;
    int threads = 0;

    void validate() const;
};

// Materializes CDIV triples plus manifest.json under out_dir. Strained and
// zero-strain arms share geometry seeds (the control set reuses geometry with
// the displacement removed); the train/test split is disjoint by geometry
// seed across both arms.
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

// Loads every sample of one split ("train" or "test") into memory.
std::vector<TrainingSample> load_split(const std::filesystem::path& manifest_dir,
                                       const DatasetManifest& m, const std::string& split);

// Experimental-volume preparation: pad to even dims, center-crop a cube about
// the intensity centroid, DCT-resample to target, clamp negatives, normalize.
RealVolume ingest_experimental(const RealVolume& vol, Dims3 target);

}  // namespace cdiforge
