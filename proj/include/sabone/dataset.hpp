#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sabone/volume.hpp"

namespace sabone {

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::filesystem::path volume;
    std::filesystem::path mask;
    std::string patient_id;
    std::string location_tag;
    std::string sequence_tag;
    Split split = Split::Train;
};

/// Invariant: no patient_id appears in more than one split.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(Split split, const std::string& sequence_tag = {}) const;
};

/// Relative paths in the file are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Paths under the manifest's directory are written relative to it.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Throws Error(Format) naming the first patient found in two splits.
void check_patient_disjoint(const DatasetManifest& m);

/// Assigns whole patients to (train, val, test) by the given ratios using a
/// seeded shuffle of the distinct patient ids. Counts use largest-remainder
/// rounding; every split with a positive ratio receives at least one patient.
DatasetManifest split_dataset(const DatasetManifest& m, std::array<double, 3> ratios, uint64_t seed);

/// A loaded (volume, mask) pair plus its manifest row.
struct Sample {
    ManifestEntry entry;
    Volume volume;
    MaskVolume mask;
};

std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries);

}  // namespace sabone
