#include "sabone/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sabone/log.hpp"

namespace sabone {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(const Shape3& s) {
    return "[" + std::to_string(s.depth) + "," + std::to_string(s.height) + "," + std::to_string(s.width) + "]";
}

void validate(const Volume& v) {
    const auto& s = v.shape();
    if (s.depth < 1 || s.height < 1 || s.width < 1) throw shape_error("volume dims must be >= 1");
    if (!(v.spacing.depth > 0 && v.spacing.height > 0 && v.spacing.width > 0))
        throw invalid_argument("volume spacing must be positive");
    for (float x : v.data.data())
        if (!std::isfinite(x)) throw format_error("volume contains non-finite intensities");
}

void validate(const MaskVolume& m) {
    for (uint8_t x : m.data.data())
        if (x > 1) throw format_error("mask values must be 0 or 1");
}

void validate_pair(const Volume& v, const MaskVolume& m) {
    if (!(v.shape() == m.shape()))
        throw shape_error("mask shape " + to_string(m.shape()) + " != volume shape " + to_string(v.shape()));
}

// --- archive I/O -----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void to_little_endian_inplace(std::span<T> values) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        for (auto& v : values) {
            auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            v = std::bit_cast<T>(bytes);
        }
    }
}

struct Header {
    Shape3 shape;
    Spacing spacing;
    std::string dtype;
    std::string sequence_tag;
    std::string patient_id;
    std::string location_tag;
    std::string link;
};

Header parse_header(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw format_error(std::string("archive header is not valid JSON: ") + e.what());
    }
    Header h;
    try {
        auto shape = j.at("shape").get<std::vector<int64_t>>();
        auto spacing = j.at("spacing_mm").get<std::vector<double>>();
        if (shape.size() != 3 || spacing.size() != 3)
            throw format_error("archive header shape/spacing_mm must have 3 entries");
        h.shape = {shape[0], shape[1], shape[2]};
        h.spacing = {spacing[0], spacing[1], spacing[2]};
        h.dtype = j.at("dtype").get<std::string>();
        h.sequence_tag = j.value("sequence_tag", "");
        h.patient_id = j.value("patient_id", "");
        h.location_tag = j.value("location_tag", "");
        h.link = j.value("link", "");
    } catch (const json::exception& e) {
        throw format_error(std::string("archive header: ") + e.what());
    }
    if (h.shape.depth < 1 || h.shape.height < 1 || h.shape.width < 1)
        throw format_error("archive shape must be >= 1 on every axis");
    if (!(h.spacing.depth > 0 && h.spacing.height > 0 && h.spacing.width > 0))
        throw format_error("archive spacing must be positive");
    if (h.dtype != "f32le" && h.dtype != "u8") throw format_error("unsupported dtype '" + h.dtype + "'");
    return h;
}

json header_json(const Shape3& s, const Spacing& sp, std::string_view dtype, std::string_view seq,
                 std::string_view pid, std::string_view loc) {
    return json{{"shape", {s.depth, s.height, s.width}},
                {"spacing_mm", {sp.depth, sp.height, sp.width}},
                {"dtype", dtype},
                {"sequence_tag", seq},
                {"patient_id", pid},
                {"location_tag", loc}};
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw io_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, std::string_view bytes) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write failed for " + p.string());
}

Volume volume_from(const Header& h, std::string_view raw) {
    const auto n = static_cast<size_t>(h.shape.voxels());
    const size_t elem = h.dtype == "f32le" ? 4 : 1;
    if (raw.size() != n * elem)
        throw format_error("raw payload holds " + std::to_string(raw.size()) + " bytes, header " +
                           to_string(h.shape) + " " + h.dtype + " needs " + std::to_string(n * elem));
    Volume v;
    v.spacing = h.spacing;
    v.sequence_tag = h.sequence_tag;
    v.patient_id = h.patient_id;
    v.location_tag = h.location_tag;
    std::vector<float> data(n);
    if (elem == 4) {
        std::memcpy(data.data(), raw.data(), raw.size());
        to_little_endian_inplace(std::span<float>(data));
    } else {
        for (size_t i = 0; i < n; ++i) data[i] = static_cast<float>(static_cast<uint8_t>(raw[i]));
    }
    v.data = Grid3<float>(h.shape, std::move(data));
    for (float x : v.data.data())
        if (!std::isfinite(x)) throw format_error("archive contains non-finite values");
    return v;
}

std::string float_payload(const Volume& v) {
    std::vector<float> copy = v.data.data();
    to_little_endian_inplace(std::span<float>(copy));
    return std::string(reinterpret_cast<const char*>(copy.data()), copy.size() * sizeof(float));
}

}  // namespace

ArchivePaths archive_paths(const fs::path& any) {
    fs::path stem = any;
    const auto ext = any.extension().string();
    if (ext == ".json" || ext == ".raw") stem.replace_extension();
    return {fs::path(stem.string() + ".json"), fs::path(stem.string() + ".raw")};
}

Volume load_volume(const fs::path& path) {
    const auto paths = archive_paths(path);
    if (!fs::exists(paths.header)) throw io_error("missing archive header " + paths.header.string());
    if (!fs::exists(paths.raw)) throw io_error("missing archive payload " + paths.raw.string());
    return parse_volume_archive(read_file(paths.header), read_file(paths.raw));
}

Volume parse_volume_archive(std::string_view header, std::string_view raw) {
    return volume_from(parse_header(header), raw);
}

void save_volume(const Volume& v, const fs::path& path) {
    validate(v);
    const auto paths = archive_paths(path);
    auto h = header_json(v.shape(), v.spacing, "f32le", v.sequence_tag, v.patient_id, v.location_tag);
    write_file(paths.raw, float_payload(v));
    write_file(paths.header, h.dump(2));
}

MaskVolume load_mask(const fs::path& path) {
    const auto paths = archive_paths(path);
    if (!fs::exists(paths.header)) throw io_error("missing archive header " + paths.header.string());
    if (!fs::exists(paths.raw)) throw io_error("missing archive payload " + paths.raw.string());
    const auto h = parse_header(read_file(paths.header));
    if (h.dtype != "u8") throw format_error("mask archive must be u8, got " + h.dtype);
    const auto raw = read_file(paths.raw);
    if (raw.size() != static_cast<size_t>(h.shape.voxels()))
        throw format_error("mask payload size does not match header " + to_string(h.shape));
    MaskVolume m;
    m.link = h.link;
    m.data = Grid3<uint8_t>(h.shape, std::vector<uint8_t>(raw.begin(), raw.end()));
    validate(m);
    return m;
}

void save_mask(const MaskVolume& m, const fs::path& path, const Spacing& spacing) {
    validate(m);
    const auto paths = archive_paths(path);
    auto h = header_json(m.shape(), spacing, "u8", "", "", "");
    h["link"] = m.link;
    const auto& d = m.data.data();
    write_file(paths.raw, std::string_view(reinterpret_cast<const char*>(d.data()), d.size()));
    write_file(paths.header, h.dump(2));
}

std::string pack_volume_archive(const Volume& v) {
    const auto header =
        header_json(v.shape(), v.spacing, "f32le", v.sequence_tag, v.patient_id, v.location_tag).dump();
    std::string out(8, '\0');
    uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[static_cast<size_t>(i)] = static_cast<char>((n >> (8 * i)) & 0xff);
    out += header;
    out += float_payload(v);
    return out;
}

Volume unpack_volume_archive(std::string_view packed) {
    if (packed.size() < 8) throw format_error("packed archive shorter than its length prefix");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(static_cast<uint8_t>(packed[static_cast<size_t>(i)])) << (8 * i);
    if (n > packed.size() - 8) throw format_error("packed archive header length exceeds body");
    return parse_volume_archive(packed.substr(8, n), packed.substr(8 + n));
}

// --- resampling ------------------------------------------------------------

namespace {

float trilinear(const Grid3<float>& g, double d, double h, double w) {
    const auto& s = g.shape();
    auto split = [](double x, int64_t n, int64_t& i0, int64_t& i1, double& t) {
        x = std::clamp(x, 0.0, static_cast<double>(n - 1));
        i0 = static_cast<int64_t>(std::floor(x));
        i1 = std::min(i0 + 1, n - 1);
        t = x - static_cast<double>(i0);
    };
    int64_t d0, d1, h0, h1, w0, w1;
    double td, th, tw;
    split(d, s.depth, d0, d1, td);
    split(h, s.height, h0, h1, th);
    split(w, s.width, w0, w1, tw);
    auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
    auto row = [&](int64_t dd, int64_t hh) { return lerp(g.at(dd, hh, w0), g.at(dd, hh, w1), tw); };
    const double c0 = lerp(row(d0, h0), row(d0, h1), th);
    const double c1 = lerp(row(d1, h0), row(d1, h1), th);
    return static_cast<float>(lerp(c0, c1, td));
}

int64_t nearest_index(double x, int64_t n) {
    return std::clamp<int64_t>(static_cast<int64_t>(std::floor(x + 0.5)), 0, n - 1);
}

/// Maps output index i to a continuous source coordinate.
using AxisMap = double (*)(int64_t i, double scale);
double corner_map(int64_t i, double scale) { return static_cast<double>(i) * scale; }
double centre_map(int64_t i, double scale) { return (static_cast<double>(i) + 0.5) * scale - 0.5; }

Grid3<float> resample_image(const Grid3<float>& src, Shape3 out, std::array<double, 3> scale, AxisMap map) {
    Grid3<float> dst(out);
    for (int64_t d = 0; d < out.depth; ++d) {
        const double sd = map(d, scale[0]);
        for (int64_t h = 0; h < out.height; ++h) {
            const double sh = map(h, scale[1]);
            for (int64_t w = 0; w < out.width; ++w) dst.at(d, h, w) = trilinear(src, sd, sh, map(w, scale[2]));
        }
    }
    return dst;
}

Grid3<uint8_t> resample_mask(const Grid3<uint8_t>& src, Shape3 out, std::array<double, 3> scale, AxisMap map) {
    const auto& s = src.shape();
    Grid3<uint8_t> dst(out);
    for (int64_t d = 0; d < out.depth; ++d) {
        const int64_t sd = nearest_index(map(d, scale[0]), s.depth);
        for (int64_t h = 0; h < out.height; ++h) {
            const int64_t sh = nearest_index(map(h, scale[1]), s.height);
            for (int64_t w = 0; w < out.width; ++w)
                dst.at(d, h, w) = src.at(sd, sh, nearest_index(map(w, scale[2]), s.width));
        }
    }
    return dst;
}

void minmax_inplace(std::vector<float>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const float mn = *lo, mx = *hi;
    if (mx > mn) {
        const double inv = 1.0 / (static_cast<double>(mx) - mn);
        for (auto& x : v) x = static_cast<float>((static_cast<double>(x) - mn) * inv);
    } else {
        std::fill(v.begin(), v.end(), 0.0f);
    }
}

}  // namespace

std::pair<Volume, std::optional<MaskVolume>> resample_isotropic(const Volume& v, const MaskVolume* mask,
                                                                double target_mm) {
    if (!(target_mm > 0)) throw invalid_argument("target_mm must be > 0");
    if (mask) validate_pair(v, *mask);
    const auto& s = v.shape();
    auto out_dim = [&](int64_t n, double spacing, const char* axis) {
        const double span = static_cast<double>(n - 1) * spacing / target_mm;
        const auto m = static_cast<int64_t>(std::floor(span + 1e-9)) + 1;
        if (static_cast<double>(n) * spacing < target_mm)
            log::warn("degenerate axis clamped to one voxel", {{"axis", axis}, {"extent_mm", n * spacing}});
        return std::max<int64_t>(m, 1);
    };
    const Shape3 out{out_dim(s.depth, v.spacing.depth, "depth"), out_dim(s.height, v.spacing.height, "height"),
                     out_dim(s.width, v.spacing.width, "width")};
    const std::array<double, 3> scale{target_mm / v.spacing.depth, target_mm / v.spacing.height,
                                      target_mm / v.spacing.width};
    Volume r = v;
    r.spacing = {target_mm, target_mm, target_mm};
    r.data = resample_image(v.data, out, scale, corner_map);
    std::optional<MaskVolume> rm;
    if (mask) rm = MaskVolume{resample_mask(mask->data, out, scale, corner_map), mask->link};
    return {std::move(r), std::move(rm)};
}

std::pair<Volume, std::optional<MaskVolume>> downsample_to_lowres(const Volume& v, const MaskVolume* mask,
                                                                  Shape3 size) {
    if (mask) validate_pair(v, *mask);
    const auto& s = v.shape();
    const std::array<double, 3> scale{static_cast<double>(s.depth) / size.depth,
                                      static_cast<double>(s.height) / size.height,
                                      static_cast<double>(s.width) / size.width};
    Volume r = v;
    r.spacing = {v.spacing.depth * scale[0], v.spacing.height * scale[1], v.spacing.width * scale[2]};
    if (s == size) {
        r.data = v.data;
    } else {
        r.data = resample_image(v.data, size, scale, centre_map);
    }
    minmax_inplace(r.data.data());
    std::optional<MaskVolume> rm;
    if (mask) rm = MaskVolume{s == size ? mask->data : resample_mask(mask->data, size, scale, centre_map), mask->link};
    return {std::move(r), std::move(rm)};
}

std::pair<Volume, std::optional<MaskVolume>> prepare_lowres(const Volume& v, const MaskVolume* mask, Shape3 size) {
    const double finest = std::min({v.spacing.depth, v.spacing.height, v.spacing.width});
    if (v.spacing.depth == finest && v.spacing.height == finest && v.spacing.width == finest)
        return downsample_to_lowres(v, mask, size);
    auto [iso, iso_mask] = resample_isotropic(v, mask, finest);
    return downsample_to_lowres(iso, iso_mask ? &*iso_mask : nullptr, size);
}

// --- slicing / 2D helpers --------------------------------------------------

FloatPlane extract_slice(const Volume& v, int64_t index) {
    if (index < 0 || index >= v.shape().depth)
        throw range_error("slice index " + std::to_string(index) + " outside [0," + std::to_string(v.shape().depth) + ")");
    auto p = v.data.plane(index);
    return FloatPlane(v.shape().height, v.shape().width, std::vector<float>(p.begin(), p.end()));
}

MaskPlane extract_mask_slice(const MaskVolume& m, int64_t index) {
    if (index < 0 || index >= m.shape().depth)
        throw range_error("slice index " + std::to_string(index) + " outside [0," + std::to_string(m.shape().depth) + ")");
    auto p = m.data.plane(index);
    return MaskPlane(m.shape().height, m.shape().width, std::vector<uint8_t>(p.begin(), p.end()));
}

FloatPlane minmax_scale(const FloatPlane& p) {
    FloatPlane r = p;
    minmax_inplace(r.data());
    return r;
}

FloatPlane resize_bilinear(const FloatPlane& p, int64_t height, int64_t width) {
    if (p.height() == height && p.width() == width) return p;
    FloatPlane r(height, width);
    const double sy = static_cast<double>(p.height()) / height;
    const double sx = static_cast<double>(p.width()) / width;
    for (int64_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(p.height() - 1));
        const auto y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, p.height() - 1);
        const double ty = fy - y0;
        for (int64_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(p.width() - 1));
            const auto x0 = static_cast<int64_t>(fx);
            const int64_t x1 = std::min(x0 + 1, p.width() - 1);
            const double tx = fx - x0;
            const double top = p.at(y0, x0) + (p.at(y0, x1) - p.at(y0, x0)) * tx;
            const double bot = p.at(y1, x0) + (p.at(y1, x1) - p.at(y1, x0)) * tx;
            r.at(y, x) = static_cast<float>(top + (bot - top) * ty);
        }
    }
    return r;
}

MaskPlane resize_nearest(const MaskPlane& p, int64_t height, int64_t width) {
    if (p.height() == height && p.width() == width) return p;
    MaskPlane r(height, width);
    const double sy = static_cast<double>(p.height()) / height;
    const double sx = static_cast<double>(p.width()) / width;
    for (int64_t y = 0; y < height; ++y) {
        const auto yy = std::min<int64_t>(static_cast<int64_t>(std::floor((y + 0.5) * sy)), p.height() - 1);
        for (int64_t x = 0; x < width; ++x) {
            const auto xx = std::min<int64_t>(static_cast<int64_t>(std::floor((x + 0.5) * sx)), p.width() - 1);
            r.at(y, x) = p.at(yy, xx);
        }
    }
    return r;
}

EncoderInput normalize_for_encoder(const FloatPlane& slice, int64_t size) {
    if (size < 1) throw invalid_argument("encoder input size must be >= 1");
    for (float x : slice.data())
        if (!std::isfinite(x)) throw invalid_argument("slice contains non-finite intensities");
    const FloatPlane resized = resize_bilinear(minmax_scale(slice), size, size);
    EncoderInput out;
    out.channels = 3;
    out.size = size;
    const auto plane = static_cast<size_t>(size * size);
    out.data.resize(3 * plane);
    for (size_t c = 0; c < 3; ++c) {
        const float mean = kImageNetMean[c], sd = kImageNetStd[c];
        for (size_t i = 0; i < plane; ++i) out.data[c * plane + i] = (resized.data()[i] - mean) / sd;
    }
    return out;
}

}  // namespace sabone
