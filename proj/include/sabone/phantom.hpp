#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sabone/volume.hpp"

namespace sabone {

enum class ObjectKind { Ellipsoid, Capsule, Tube };

std::string to_string(ObjectKind k);
ObjectKind object_kind_from_string(const std::string& s);

using Vec3 = std::array<double, 3>;  // (d, h, w) in voxel coordinates

/// One analytic bone-like solid.
///  - Ellipsoid: `centre`, `radii` = semi-axes, `axes` = orthonormal frame.
///  - Capsule:   segment centre +- half_length * axes[0], radius radii[0].
///  - Tube:      finite flat-capped cylinder, same parametrisation as Capsule.
struct PhantomObject {
    ObjectKind kind = ObjectKind::Ellipsoid;
    Vec3 centre{};
    Vec3 radii{};
    double half_length = 0.0;
    std::array<Vec3, 3> axes{Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
    double rim = 1.5;  ///< dark cortical rim thickness in voxels

    /// True when the point lies inside the solid shrunk by `inset` voxels.
    bool contains(const Vec3& p, double inset = 0.0) const;
    /// Conservative half-extent used to bound the rasterization box.
    double bounding_radius() const;
};

struct PhantomConfig {
    Shape3 size{96, 96, 96};
    Spacing spacing{1.0, 1.0, 1.0};
    int min_objects = 2;
    int max_objects = 6;
    std::vector<ObjectKind> kinds{ObjectKind::Ellipsoid, ObjectKind::Capsule, ObjectKind::Tube};

    // T1-like: bright marrow, dark cortex, mid-grey soft tissue.
    float interior = 0.85f;
    float rim = 0.08f;
    float background = 0.35f;
    // Twin: interior darker than background; cortex stays dark.
    float twin_interior = 0.30f;
    float twin_background = 0.80f;

    std::array<double, 2> rim_thickness{1.0, 2.0};
    std::array<double, 2> ellipsoid_radius{7.0, 16.0};
    std::array<double, 2> rod_radius{5.0, 10.0};
    std::array<double, 2> rod_half_length{10.0, 26.0};
    double margin = 2.0;  ///< minimum gap between objects and to the border, voxels

    float noise_sigma = 0.03f;
    float bias_magnitude = 0.15f;  ///< coefficient bound of the log-polynomial bias field
    int max_attempts = 200;

    std::string sequence_tag = "t1";
    std::string twin_sequence_tag = "t2-sim";
    std::string patient_id;
    std::string location_tag = "phantom";

    /// When non-empty these objects are used verbatim and no random
    /// placement happens.
    std::vector<PhantomObject> fixed_objects;
};

nlohmann::json to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j, PhantomConfig base = {});

struct Phantom {
    Volume volume;
    MaskVolume mask;
    Volume twin;
    std::vector<PhantomObject> objects;
};

/// Pure function of (seed, cfg). Objects are pairwise disjoint (separated by
/// cfg.margin); if placement keeps failing fewer objects are produced and a
/// warning is logged.
Phantom generate_phantom(uint64_t seed, const PhantomConfig& cfg);

/// Writes `count` phantoms (volume, mask, twin archives) under `out_dir`
/// and returns the manifest JSON path. Every phantom is its own patient;
/// the twin shares its patient id. Location tags cycle over a small set
/// with location-specific object mixes.
std::filesystem::path generate_phantom_set(int count, uint64_t seed, const PhantomConfig& cfg,
                                           const std::filesystem::path& out_dir);

}  // namespace sabone
