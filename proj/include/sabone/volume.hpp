#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include "sabone/grid.hpp"

namespace sabone {

/// Physical voxel size in millimetres, per axis (depth, height, width).
struct Spacing {
    double depth = 1.0;
    double height = 1.0;
    double width = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// 3D intensity grid. Axis 0 is the acquisition (slicing) axis.
struct Volume {
    Grid3<float> data;
    Spacing spacing;
    std::string sequence_tag;
    std::string patient_id;
    std::string location_tag;

    const Shape3& shape() const { return data.shape(); }
};

/// Binary annotation aligned with a Volume; values are 0 or 1.
struct MaskVolume {
    Grid3<uint8_t> data;
    std::string link;

    const Shape3& shape() const { return data.shape(); }
};

/// Checks the Volume invariants (dims >= 1, positive spacing, finite data).
void validate(const Volume& v);
void validate(const MaskVolume& m);
void validate_pair(const Volume& v, const MaskVolume& m);

// --- archive I/O -----------------------------------------------------------
//
// An archive is `<name>.json` + `<name>.raw`. The JSON header holds shape,
// spacing_mm, dtype ("f32le" or "u8") and the three tags; the raw payload is
// row-major with width fastest, little-endian. Either file name (or the bare
// stem) may be passed.

struct ArchivePaths {
    std::filesystem::path header;
    std::filesystem::path raw;
};
ArchivePaths archive_paths(const std::filesystem::path& any);

/// Loads an f32le or u8 archive as intensities.
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

/// Loads a u8 archive whose values are all 0/1.
MaskVolume load_mask(const std::filesystem::path& path);
void save_mask(const MaskVolume& m, const std::filesystem::path& path, const Spacing& spacing = {});

/// Same as load_volume but reads an in-memory header + payload (used by the
/// HTTP upload endpoint).
Volume parse_volume_archive(std::string_view header_json, std::string_view raw);

/// Serializes to the "packed" single-buffer form: 8-byte little-endian header
/// length, JSON header, raw payload.
std::string pack_volume_archive(const Volume& v);
Volume unpack_volume_archive(std::string_view packed);

// --- resampling ------------------------------------------------------------

/// Resamples to isotropic `target_mm` voxels. Output size per axis is
/// floor((n - 1) * spacing / target_mm) + 1, so the first and last voxel
/// centres are kept. Intensities are trilinear, masks nearest-neighbour.
std::pair<Volume, std::optional<MaskVolume>> resample_isotropic(const Volume& v,
                                                                const MaskVolume* mask,
                                                                double target_mm);

/// Resizes to a fixed grid (default 64^3) with half-pixel-centre mapping,
/// trilinear for the image and nearest for the mask, then min-max rescales
/// the image to [0, 1].
std::pair<Volume, std::optional<MaskVolume>> downsample_to_lowres(const Volume& v,
                                                                  const MaskVolume* mask,
                                                                  Shape3 size = {64, 64, 64});

/// Convenience: isotropic at the finest input spacing, then downsample.
std::pair<Volume, std::optional<MaskVolume>> prepare_lowres(const Volume& v, const MaskVolume* mask,
                                                            Shape3 size = {64, 64, 64});

// --- slicing / 2D helpers --------------------------------------------------

FloatPlane extract_slice(const Volume& v, int64_t index);
MaskPlane extract_mask_slice(const MaskVolume& m, int64_t index);

/// Min-max scale into [0,1]; a constant plane maps to all zeros.
FloatPlane minmax_scale(const FloatPlane& p);

/// Bilinear resize with half-pixel-centre mapping (torch align_corners=false).
FloatPlane resize_bilinear(const FloatPlane& p, int64_t height, int64_t width);
/// Nearest-neighbour resize with half-pixel-centre mapping.
MaskPlane resize_nearest(const MaskPlane& p, int64_t height, int64_t width);

/// Channel-first image, as fed to the image encoder.
struct EncoderInput {
    int64_t channels = 3;
    int64_t size = 0;
    std::vector<float> data;  // [c][h][w]
};

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

/// Min-max to [0,1], replicate to 3 channels, bilinear resize to size x size,
/// then per-channel ImageNet standardization.
EncoderInput normalize_for_encoder(const FloatPlane& slice, int64_t size);

}  // namespace sabone
