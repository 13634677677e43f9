#include "sabone/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "sabone/dataset.hpp"
#include "sabone/log.hpp"

namespace sabone {

using nlohmann::json;

std::string to_string(ObjectKind k) {
    switch (k) {
        case ObjectKind::Ellipsoid: return "ellipsoid";
        case ObjectKind::Capsule: return "capsule";
        case ObjectKind::Tube: return "tube";
    }
    return "ellipsoid";
}

ObjectKind object_kind_from_string(const std::string& s) {
    if (s == "ellipsoid") return ObjectKind::Ellipsoid;
    if (s == "capsule") return ObjectKind::Capsule;
    if (s == "tube") return ObjectKind::Tube;
    throw invalid_argument("unknown object kind '" + s + "'");
}

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }

Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (;;) {
        Vec3 v{n(rng), n(rng), n(rng)};
        const double len = std::sqrt(dot(v, v));
        if (len > 1e-6) return {v[0] / len, v[1] / len, v[2] / len};
    }
}

/// Orthonormal frame with first axis `u`.
std::array<Vec3, 3> frame_from(const Vec3& u) {
    Vec3 helper = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    Vec3 v{u[1] * helper[2] - u[2] * helper[1], u[2] * helper[0] - u[0] * helper[2],
           u[0] * helper[1] - u[1] * helper[0]};
    const double lv = std::sqrt(dot(v, v));
    v = {v[0] / lv, v[1] / lv, v[2] / lv};
    const Vec3 w{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    return {u, v, w};
}

}  // namespace

bool PhantomObject::contains(const Vec3& p, double inset) const {
    const Vec3 q = sub(p, centre);
    const double a = dot(q, axes[0]), b = dot(q, axes[1]), c = dot(q, axes[2]);
    switch (kind) {
        case ObjectKind::Ellipsoid: {
            const double ra = radii[0] - inset, rb = radii[1] - inset, rc = radii[2] - inset;
            if (ra <= 0 || rb <= 0 || rc <= 0) return false;
            return (a * a) / (ra * ra) + (b * b) / (rb * rb) + (c * c) / (rc * rc) <= 1.0;
        }
        case ObjectKind::Capsule: {
            const double r = radii[0] - inset;
            if (r <= 0) return false;
            const double t = std::clamp(a, -half_length, half_length);
            const double da = a - t;
            return da * da + b * b + c * c <= r * r;
        }
        case ObjectKind::Tube: {
            const double r = radii[0] - inset;
            if (r <= 0 || std::abs(a) > half_length - inset) return false;
            return b * b + c * c <= r * r;
        }
    }
    return false;
}

double PhantomObject::bounding_radius() const {
    switch (kind) {
        case ObjectKind::Ellipsoid: return std::max({radii[0], radii[1], radii[2]});
        case ObjectKind::Capsule: return half_length + radii[0];
        case ObjectKind::Tube: return std::sqrt(half_length * half_length + radii[0] * radii[0]);
    }
    return 0.0;
}

json to_json(const PhantomConfig& c) {
    json kinds = json::array();
    for (auto k : c.kinds) kinds.push_back(to_string(k));
    return json{{"size", {c.size.depth, c.size.height, c.size.width}},
                {"spacing_mm", {c.spacing.depth, c.spacing.height, c.spacing.width}},
                {"min_objects", c.min_objects},
                {"max_objects", c.max_objects},
                {"kinds", kinds},
                {"interior", c.interior},
                {"rim", c.rim},
                {"background", c.background},
                {"twin_interior", c.twin_interior},
                {"twin_background", c.twin_background},
                {"rim_thickness", c.rim_thickness},
                {"ellipsoid_radius", c.ellipsoid_radius},
                {"rod_radius", c.rod_radius},
                {"rod_half_length", c.rod_half_length},
                {"margin", c.margin},
                {"noise_sigma", c.noise_sigma},
                {"bias_magnitude", c.bias_magnitude},
                {"max_attempts", c.max_attempts}};
}

PhantomConfig phantom_config_from_json(const json& j, PhantomConfig c) {
    if (j.contains("size")) {
        auto s = j["size"].get<std::vector<int64_t>>();
        if (s.size() != 3) throw invalid_argument("phantom size needs 3 entries");
        c.size = {s[0], s[1], s[2]};
    }
    if (j.contains("spacing_mm")) {
        auto s = j["spacing_mm"].get<std::vector<double>>();
        if (s.size() != 3) throw invalid_argument("phantom spacing_mm needs 3 entries");
        c.spacing = {s[0], s[1], s[2]};
    }
    if (j.contains("kinds")) {
        c.kinds.clear();
        for (const auto& k : j["kinds"]) c.kinds.push_back(object_kind_from_string(k.get<std::string>()));
    }
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.interior = j.value("interior", c.interior);
    c.rim = j.value("rim", c.rim);
    c.background = j.value("background", c.background);
    c.twin_interior = j.value("twin_interior", c.twin_interior);
    c.twin_background = j.value("twin_background", c.twin_background);
    c.rim_thickness = j.value("rim_thickness", c.rim_thickness);
    c.ellipsoid_radius = j.value("ellipsoid_radius", c.ellipsoid_radius);
    c.rod_radius = j.value("rod_radius", c.rod_radius);
    c.rod_half_length = j.value("rod_half_length", c.rod_half_length);
    c.margin = j.value("margin", c.margin);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.bias_magnitude = j.value("bias_magnitude", c.bias_magnitude);
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    if (c.min_objects < 1 || c.max_objects < c.min_objects) throw invalid_argument("bad phantom object count range");
    if (c.kinds.empty()) throw invalid_argument("phantom kinds must not be empty");
    return c;
}

namespace {

struct Box {
    int64_t lo[3];
    int64_t hi[3];  // inclusive
};

Box raster_box(const PhantomObject& o, const Shape3& s, double pad) {
    const double r = o.bounding_radius() + pad;
    const int64_t n[3] = {s.depth, s.height, s.width};
    Box b{};
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = std::max<int64_t>(0, static_cast<int64_t>(std::floor(o.centre[static_cast<size_t>(a)] - r)));
        b.hi[a] = std::min<int64_t>(n[a] - 1, static_cast<int64_t>(std::ceil(o.centre[static_cast<size_t>(a)] + r)));
    }
    return b;
}

template <class F>
void for_each_voxel(const Box& b, F&& f) {
    for (int64_t d = b.lo[0]; d <= b.hi[0]; ++d)
        for (int64_t h = b.lo[1]; h <= b.hi[1]; ++h)
            for (int64_t w = b.lo[2]; w <= b.hi[2]; ++w) f(d, h, w);
}

PhantomObject random_object(std::mt19937_64& rng, const PhantomConfig& cfg) {
    std::uniform_int_distribution<size_t> pick(0, cfg.kinds.size() - 1);
    auto uni = [&](const std::array<double, 2>& r) { return std::uniform_real_distribution<double>(r[0], r[1])(rng); };
    PhantomObject o;
    o.kind = cfg.kinds[pick(rng)];
    o.rim = uni(cfg.rim_thickness);
    o.axes = frame_from(random_unit(rng));
    if (o.kind == ObjectKind::Ellipsoid) {
        o.radii = {uni(cfg.ellipsoid_radius), uni(cfg.ellipsoid_radius), uni(cfg.ellipsoid_radius)};
    } else {
        const double r = uni(cfg.rod_radius);
        o.radii = {r, r, r};
        o.half_length = uni(cfg.rod_half_length);
    }
    const double br = o.bounding_radius() + cfg.margin;
    const double n[3] = {static_cast<double>(cfg.size.depth), static_cast<double>(cfg.size.height),
                         static_cast<double>(cfg.size.width)};
    for (size_t a = 0; a < 3; ++a) {
        // Objects larger than the field of view are clipped rather than rejected.
        const double lo = std::min(br, n[a] / 2.0), hi = std::max(n[a] - 1.0 - br, n[a] / 2.0);
        o.centre[a] = std::uniform_real_distribution<double>(lo, hi)(rng);
    }
    return o;
}

/// Smooth multiplicative field exp(P(z, y, x)) with a second-order
/// polynomial in normalised coordinates.
std::vector<float> bias_field(std::mt19937_64& rng, const Shape3& s, double magnitude) {
    std::uniform_real_distribution<double> u(-magnitude, magnitude);
    double c[10];
    for (double& x : c) x = u(rng);
    std::vector<float> f(static_cast<size_t>(s.voxels()));
    auto norm = [](int64_t i, int64_t n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
    size_t idx = 0;
    for (int64_t d = 0; d < s.depth; ++d) {
        const double z = norm(d, s.depth);
        for (int64_t h = 0; h < s.height; ++h) {
            const double y = norm(h, s.height);
            for (int64_t w = 0; w < s.width; ++w) {
                const double x = norm(w, s.width);
                const double p = c[0] * x + c[1] * y + c[2] * z + c[3] * x * x + c[4] * y * y + c[5] * z * z +
                                 c[6] * x * y + c[7] * y * z + c[8] * x * z + c[9];
                f[idx++] = static_cast<float>(std::exp(p));
            }
        }
    }
    return f;
}

Volume render(const Grid3<uint8_t>& label, const PhantomConfig& cfg, float interior, float background,
              std::mt19937_64& rng, const std::string& seq) {
    // label: 0 background, 1 rim, 2 interior
    Volume v;
    v.spacing = cfg.spacing;
    v.sequence_tag = seq;
    v.patient_id = cfg.patient_id;
    v.location_tag = cfg.location_tag;
    v.data = Grid3<float>(label.shape());
    const auto field = bias_field(rng, label.shape(), cfg.bias_magnitude);
    std::normal_distribution<float> noise(0.0f, cfg.noise_sigma);
    auto& out = v.data.data();
    const auto& lab = label.data();
    for (size_t i = 0; i < out.size(); ++i) {
        const float base = lab[i] == 2 ? interior : lab[i] == 1 ? cfg.rim : background;
        const float n = cfg.noise_sigma > 0 ? noise(rng) : 0.0f;
        out[i] = std::max(0.0f, base * field[i] + n);
    }
    return v;
}

}  // namespace

Phantom generate_phantom(uint64_t seed, const PhantomConfig& cfg) {
    const Shape3& s = cfg.size;
    std::mt19937_64 rng(seed);
    Phantom ph;
    Grid3<uint8_t> label(s, 0);
    Grid3<uint8_t> occupied(s, 0);  // objects dilated by the margin

    auto centre_of = [](int64_t d, int64_t h, int64_t w) {
        return Vec3{static_cast<double>(d), static_cast<double>(h), static_cast<double>(w)};
    };

    auto place = [&](const PhantomObject& o, bool check) -> bool {
        const Box box = raster_box(o, s, cfg.margin + 1.0);
        if (check) {
            bool clash = false;
            for_each_voxel(box, [&](int64_t d, int64_t h, int64_t w) {
                if (!clash && occupied.at(d, h, w) && o.contains(centre_of(d, h, w), -cfg.margin)) clash = true;
            });
            if (clash) return false;
        }
        int64_t inside = 0;
        for_each_voxel(box, [&](int64_t d, int64_t h, int64_t w) {
            const Vec3 p = centre_of(d, h, w);
            if (o.contains(p, -cfg.margin)) occupied.at(d, h, w) = 1;
            if (o.contains(p)) {
                ++inside;
                label.at(d, h, w) = o.contains(p, o.rim) ? 2 : 1;
            }
        });
        return inside > 0;
    };

    if (!cfg.fixed_objects.empty()) {
        for (const auto& o : cfg.fixed_objects) {
            place(o, false);
            ph.objects.push_back(o);
        }
    } else {
        const int wanted = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
        int attempts = 0;
        while (static_cast<int>(ph.objects.size()) < wanted && attempts < cfg.max_attempts) {
            ++attempts;
            PhantomObject o = random_object(rng, cfg);
            if (place(o, true)) ph.objects.push_back(o);
        }
        if (static_cast<int>(ph.objects.size()) < wanted)
            log::warn("phantom placement exhausted retries",
                      {{"seed", seed}, {"wanted", wanted}, {"placed", ph.objects.size()}});
    }

    ph.mask.data = Grid3<uint8_t>(s, 0);
    for (size_t i = 0; i < label.data().size(); ++i) ph.mask.data.data()[i] = label.data()[i] ? 1 : 0;

    std::mt19937_64 rng_t1(seed ^ 0x7431ULL);
    std::mt19937_64 rng_t2(seed ^ 0x7432ULL);
    ph.volume = render(label, cfg, cfg.interior, cfg.background, rng_t1, cfg.sequence_tag);
    ph.twin = render(label, cfg, cfg.twin_interior, cfg.twin_background, rng_t2, cfg.twin_sequence_tag);
    return ph;
}

namespace {

struct LocationMix {
    const char* tag;
    std::vector<ObjectKind> kinds;
};

const std::vector<LocationMix>& location_mixes() {
    static const std::vector<LocationMix> mixes{
        {"knee", {ObjectKind::Capsule, ObjectKind::Ellipsoid}},
        {"shoulder", {ObjectKind::Ellipsoid, ObjectKind::Capsule, ObjectKind::Tube}},
        {"spine", {ObjectKind::Ellipsoid}},
        {"forearm", {ObjectKind::Tube, ObjectKind::Capsule}},
    };
    return mixes;
}

}  // namespace

std::filesystem::path generate_phantom_set(int count, uint64_t seed, const PhantomConfig& base,
                                           const std::filesystem::path& out_dir) {
    if (count < 1) throw invalid_argument("phantom count must be >= 1");
    std::filesystem::create_directories(out_dir);
    DatasetManifest manifest;
    for (int i = 0; i < count; ++i) {
        const auto& mix = location_mixes()[static_cast<size_t>(i) % location_mixes().size()];
        PhantomConfig cfg = base;
        char name[32];
        std::snprintf(name, sizeof name, "phantom_%03d", i);
        cfg.patient_id = std::string("P") + std::to_string(seed) + "-" + std::to_string(i);
        cfg.location_tag = mix.tag;
        if (base.fixed_objects.empty()) cfg.kinds = mix.kinds;
        const Phantom ph = generate_phantom(seed * 1000003ULL + static_cast<uint64_t>(i), cfg);

        const auto vol = out_dir / (std::string(name) + ".json");
        const auto twin = out_dir / (std::string(name) + "_twin.json");
        const auto mask = out_dir / (std::string(name) + "_mask.json");
        save_volume(ph.volume, vol);
        save_volume(ph.twin, twin);
        MaskVolume m = ph.mask;
        m.link = name;
        save_mask(m, mask, cfg.spacing);
        manifest.entries.push_back({vol, mask, cfg.patient_id, cfg.location_tag, cfg.sequence_tag, Split::Train});
        manifest.entries.push_back({twin, mask, cfg.patient_id, cfg.location_tag, cfg.twin_sequence_tag, Split::Train});
    }
    const auto path = out_dir / "manifest.json";
    save_manifest(manifest, path);
    return path;
}

}  // namespace sabone
