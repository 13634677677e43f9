#include "sabone/augment.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "sabone/error.hpp"

namespace sabone {

using nlohmann::json;

AugmentPipeline AugmentPipeline::defaults(double p) {
    AugmentPipeline a;
    a.steps = {
        {transform::kResizedCrop, p, {0.7, 1.0}},
        {transform::kRotation, p, {-15.0, 15.0}},
        {transform::kSharpness, p, {0.5, 2.0}},
        {transform::kEqualize, p, {0.0, 0.0}},
        {transform::kGaussianNoise, p, {0.0, 0.05}},
        {transform::kBiasField, p, {3.0, 0.3}},
        {transform::kGibbsNoise, p, {0.5, 0.95}},
    };
    return a;
}

void AugmentPipeline::validate() const {
    static const std::vector<std::string> known{transform::kResizedCrop,   transform::kRotation,
                                                transform::kSharpness,     transform::kEqualize,
                                                transform::kGaussianNoise, transform::kBiasField,
                                                transform::kGibbsNoise};
    for (const auto& s : steps) {
        if (std::find(known.begin(), known.end(), s.name) == known.end())
            throw invalid_argument("unknown augmentation '" + s.name + "'");
        if (!(s.probability >= 0.0 && s.probability <= 1.0))
            throw invalid_argument("augmentation probability must be in [0,1]: " + s.name);
        if (s.name != transform::kBiasField && s.params[0] > s.params[1])
            throw invalid_argument("augmentation parameter range inverted: " + s.name);
    }
}

json to_json(const AugmentPipeline& p) {
    json steps = json::array();
    for (const auto& s : p.steps) steps.push_back({{"name", s.name}, {"probability", s.probability}, {"params", s.params}});
    return json{{"seed", p.seed}, {"steps", steps}};
}

AugmentPipeline augment_pipeline_from_json(const json& j) {
    AugmentPipeline p;
    p.seed = j.value("seed", uint64_t{0});
    for (const auto& s : j.at("steps"))
        p.steps.push_back({s.at("name").get<std::string>(), s.value("probability", 0.3),
                           s.value("params", std::array<double, 2>{0.0, 0.0})});
    p.validate();
    return p;
}

namespace {

/// Bilinear sample with zero outside [0,n-1]^2.
float sample_zero(const FloatPlane& p, double y, double x) {
    if (y < 0.0 || x < 0.0 || y > p.height() - 1.0 || x > p.width() - 1.0) return 0.0f;
    const auto y0 = static_cast<int64_t>(std::floor(y));
    const auto x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y1 = std::min(y0 + 1, p.height() - 1), x1 = std::min(x0 + 1, p.width() - 1);
    const double ty = y - y0, tx = x - x0;
    double top = p.at(y0, x0), bot = p.at(y1, x0);
    if (tx != 0.0) {
        top += (p.at(y0, x1) - top) * tx;
        bot += (p.at(y1, x1) - bot) * tx;
    }
    return static_cast<float>(ty != 0.0 ? top + (bot - top) * ty : top);
}

float sample_clamped(const FloatPlane& p, double y, double x) {
    return sample_zero(p, std::clamp(y, 0.0, p.height() - 1.0), std::clamp(x, 0.0, p.width() - 1.0));
}

double uniform(Rng& rng, double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

CropWindow sample_crop(int64_t height, int64_t width, std::array<double, 2> scale, Rng& rng) {
    const double area = static_cast<double>(height * width);
    const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
    for (int attempt = 0; attempt < 5; ++attempt) {
        const double target = area * uniform(rng, scale[0], scale[1]);
        const double ratio = std::exp(uniform(rng, log_lo, log_hi));
        const auto w = static_cast<int64_t>(std::lround(std::sqrt(target * ratio)));
        const auto h = static_cast<int64_t>(std::lround(std::sqrt(target / ratio)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const auto top = std::uniform_int_distribution<int64_t>(0, height - h)(rng);
            const auto left = std::uniform_int_distribution<int64_t>(0, width - w)(rng);
            return {top, left, h, w};
        }
    }
    return {0, 0, height, width};
}

void resized_crop(FloatPlane& image, MaskPlane& mask, const CropWindow& win, FloatPlane* aux) {
    if (image.height() != mask.height() || image.width() != mask.width())
        throw shape_error("image and mask shapes differ");
    const int64_t H = image.height(), W = image.width();
    if (win.top == 0 && win.left == 0 && win.height == H && win.width == W) return;
    const double sy = static_cast<double>(win.height) / H, sx = static_cast<double>(win.width) / W;
    auto resample = [&](const FloatPlane& src) {
        const double ay = static_cast<double>(src.height()) / H, ax = static_cast<double>(src.width()) / W;
        FloatPlane out(src.height(), src.width());
        for (int64_t y = 0; y < out.height(); ++y)
            for (int64_t x = 0; x < out.width(); ++x) {
                // aux may live at a different resolution; map through normalised coordinates.
                const double yy = (win.top + ((y + 0.5) / ay) * sy) * ay - 0.5;
                const double xx = (win.left + ((x + 0.5) / ax) * sx) * ax - 0.5;
                out.at(y, x) = sample_clamped(src, yy, xx);
            }
        return out;
    };
    image = resample(image);
    if (aux) *aux = resample(*aux);
    MaskPlane m(H, W);
    for (int64_t y = 0; y < H; ++y) {
        const auto yy = std::min<int64_t>(win.top + static_cast<int64_t>(std::floor((y + 0.5) * sy)), mask.height() - 1);
        for (int64_t x = 0; x < W; ++x) {
            const auto xx = std::min<int64_t>(win.left + static_cast<int64_t>(std::floor((x + 0.5) * sx)), mask.width() - 1);
            m.at(y, x) = mask.at(yy, xx);
        }
    }
    mask = std::move(m);
}

void rotate(FloatPlane& image, MaskPlane& mask, double degrees, FloatPlane* aux) {
    if (image.height() != mask.height() || image.width() != mask.width())
        throw shape_error("image and mask shapes differ");
    if (degrees == 0.0) return;
    const double th = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    auto rot = [&](const FloatPlane& src) {
        const double cy = (src.height() - 1) / 2.0, cx = (src.width() - 1) / 2.0;
        FloatPlane out(src.height(), src.width());
        for (int64_t y = 0; y < src.height(); ++y)
            for (int64_t x = 0; x < src.width(); ++x) {
                const double dy = y - cy, dx = x - cx;
                out.at(y, x) = sample_zero(src, cy + s * dx + c * dy, cx + c * dx - s * dy);
            }
        return out;
    };
    image = rot(image);
    if (aux) *aux = rot(*aux);
    const double cy = (mask.height() - 1) / 2.0, cx = (mask.width() - 1) / 2.0;
    MaskPlane m(mask.height(), mask.width(), 0);
    for (int64_t y = 0; y < mask.height(); ++y)
        for (int64_t x = 0; x < mask.width(); ++x) {
            const double dy = y - cy, dx = x - cx;
            const auto sy = static_cast<int64_t>(std::lround(cy + s * dx + c * dy));
            const auto sx = static_cast<int64_t>(std::lround(cx + c * dx - s * dy));
            if (sy >= 0 && sx >= 0 && sy < mask.height() && sx < mask.width()) m.at(y, x) = mask.at(sy, sx);
        }
    mask = std::move(m);
}

FloatPlane adjust_sharpness(const FloatPlane& image, double factor) {
    if (factor == 1.0) return image;
    FloatPlane blurred = image;
    for (int64_t y = 1; y + 1 < image.height(); ++y)
        for (int64_t x = 1; x + 1 < image.width(); ++x) {
            double acc = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) acc += image.at(y + dy, x + dx) * ((dy == 0 && dx == 0) ? 5.0 : 1.0);
            blurred.at(y, x) = static_cast<float>(acc / 13.0);
        }
    FloatPlane out(image.height(), image.width());
    for (int64_t i = 0; i < image.size(); ++i) {
        const double v = factor * image.data()[static_cast<size_t>(i)] + (1.0 - factor) * blurred.data()[static_cast<size_t>(i)];
        out.data()[static_cast<size_t>(i)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

FloatPlane equalize(const FloatPlane& image) {
    std::vector<int> q(static_cast<size_t>(image.size()));
    std::array<int64_t, 256> hist{};
    for (size_t i = 0; i < q.size(); ++i) {
        q[i] = static_cast<int>(std::lround(std::clamp(image.data()[i], 0.0f, 1.0f) * 255.0f));
        ++hist[static_cast<size_t>(q[i])];
    }
    int last = 255;
    while (last > 0 && hist[static_cast<size_t>(last)] == 0) --last;
    const int64_t step = (static_cast<int64_t>(q.size()) - hist[static_cast<size_t>(last)]) / 255;
    if (step == 0) return image;
    std::array<int, 256> lut{};
    int64_t cum = 0;
    for (size_t b = 0; b < 256; ++b) {
        lut[b] = static_cast<int>(std::min<int64_t>(255, (cum + step / 2) / step));
        cum += hist[b];
    }
    FloatPlane out(image.height(), image.width());
    for (size_t i = 0; i < q.size(); ++i) out.data()[i] = static_cast<float>(lut[static_cast<size_t>(q[i])]) / 255.0f;
    return out;
}

FloatPlane add_gaussian_noise(const FloatPlane& image, double sigma, Rng& rng) {
    if (sigma <= 0.0) return image;
    std::normal_distribution<double> n(0.0, sigma);
    FloatPlane out = image;
    for (auto& v : out.data()) v = static_cast<float>(v + n(rng));
    return out;
}

FloatPlane rand_gaussian_noise(const FloatPlane& image, Rng& rng, std::array<double, 2> sigma_range) {
    return add_gaussian_noise(image, uniform(rng, sigma_range[0], sigma_range[1]), rng);
}

FloatPlane apply_bias_field(const FloatPlane& image, const BiasCoefficients& coeffs) {
    const int order = coeffs.order;
    if (static_cast<int>(coeffs.values.size()) != (order + 1) * (order + 2) / 2)
        throw invalid_argument("bias field coefficient count does not match order");
    FloatPlane out(image.height(), image.width());
    auto norm = [](int64_t i, int64_t n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
    std::vector<double> xp(static_cast<size_t>(order + 1)), yp(static_cast<size_t>(order + 1));
    for (int64_t y = 0; y < image.height(); ++y) {
        const double yn = norm(y, image.height());
        for (int64_t x = 0; x < image.width(); ++x) {
            const double xn = norm(x, image.width());
            xp[0] = yp[0] = 1.0;
            for (size_t k = 1; k < xp.size(); ++k) {
                xp[k] = xp[k - 1] * xn;
                yp[k] = yp[k - 1] * yn;
            }
            double p = 0.0;
            size_t t = 0;
            for (int i = 0; i <= order; ++i)
                for (int j = 0; i + j <= order; ++j) p += coeffs.values[t++] * xp[static_cast<size_t>(i)] * yp[static_cast<size_t>(j)];
            const double v = image.at(y, x) * std::exp(p);
            out.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

FloatPlane rand_bias_field(const FloatPlane& image, Rng& rng, int order, double magnitude, BiasCoefficients* sampled) {
    if (order < 0) throw invalid_argument("bias field order must be >= 0");
    BiasCoefficients c;
    c.order = order;
    c.values.resize(static_cast<size_t>((order + 1) * (order + 2) / 2));
    for (auto& v : c.values) v = uniform(rng, -magnitude, magnitude);
    if (sampled) *sampled = c;
    return apply_bias_field(image, c);
}

namespace {
std::mutex g_fftw_planner;
}

FloatPlane gibbs_truncate(const FloatPlane& image, double fraction) {
    const int H = static_cast<int>(image.height()), W = static_cast<int>(image.width());
    const size_t n = static_cast<size_t>(H) * static_cast<size_t>(W);
    auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
    fftw_plan fwd, inv;
    {
        std::lock_guard lock(g_fftw_planner);
        fwd = fftw_plan_dft_2d(H, W, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        inv = fftw_plan_dft_2d(H, W, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    for (size_t i = 0; i < n; ++i) {
        buf[i][0] = image.data()[i];
        buf[i][1] = 0.0;
    }
    fftw_execute(fwd);
    auto keep = [fraction](int k, int len) {
        const int f = k <= len / 2 ? k : k - len;  // signed frequency
        return std::abs(f) <= fraction * len / 2.0;
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (!keep(y, H) || !keep(x, W)) {
                buf[static_cast<size_t>(y) * W + x][0] = 0.0;
                buf[static_cast<size_t>(y) * W + x][1] = 0.0;
            }
    fftw_execute(inv);
    FloatPlane out(image.height(), image.width());
    for (size_t i = 0; i < n; ++i) out.data()[i] = static_cast<float>(buf[i][0] / static_cast<double>(n));
    {
        std::lock_guard lock(g_fftw_planner);
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(inv);
    }
    fftw_free(buf);
    return out;
}

FloatPlane rand_gibbs_noise(const FloatPlane& image, Rng& rng, std::array<double, 2> fraction_range) {
    return gibbs_truncate(image, uniform(rng, fraction_range[0], fraction_range[1]));
}

void apply_pipeline(const AugmentPipeline& p, FloatPlane& image, MaskPlane& mask, Rng& rng, FloatPlane* aux) {
    if (image.height() != mask.height() || image.width() != mask.width())
        throw shape_error("image and mask shapes differ");
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (const auto& s : p.steps) {
        if (!(coin(rng) < s.probability)) continue;
        if (s.name == transform::kResizedCrop) {
            resized_crop(image, mask, sample_crop(image.height(), image.width(), s.params, rng), aux);
        } else if (s.name == transform::kRotation) {
            rotate(image, mask, uniform(rng, s.params[0], s.params[1]), aux);
        } else if (s.name == transform::kSharpness) {
            image = adjust_sharpness(image, uniform(rng, s.params[0], s.params[1]));
        } else if (s.name == transform::kEqualize) {
            image = equalize(image);
        } else if (s.name == transform::kGaussianNoise) {
            image = rand_gaussian_noise(image, rng, s.params);
        } else if (s.name == transform::kBiasField) {
            image = rand_bias_field(image, rng, static_cast<int>(s.params[0]), s.params[1]);
        } else if (s.name == transform::kGibbsNoise) {
            image = rand_gibbs_noise(image, rng, s.params);
        } else {
            throw invalid_argument("unknown augmentation '" + s.name + "'");
        }
    }
}

}  // namespace sabone
