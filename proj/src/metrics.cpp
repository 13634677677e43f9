#include "sabone/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sabone/error.hpp"

namespace sabone {

Overlap count_overlap(std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
    if (pred.size() != gt.size()) throw shape_error("prediction and ground truth sizes differ");
    Overlap o;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        o.pred += p;
        o.gt += g;
        o.intersection += p && g;
    }
    return o;
}

double dsc(const Overlap& o) {
    if (o.pred + o.gt == 0) return 1.0;
    return 2.0 * static_cast<double>(o.intersection) / static_cast<double>(o.pred + o.gt);
}

double iou(const Overlap& o) {
    const auto u = o.union_count();
    if (u == 0) return 1.0;
    return static_cast<double>(o.intersection) / static_cast<double>(u);
}

double recall(const Overlap& o) {
    if (o.gt == 0) return 1.0;
    return static_cast<double>(o.intersection) / static_cast<double>(o.gt);
}

double dsc(std::span<const uint8_t> pred, std::span<const uint8_t> gt) { return dsc(count_overlap(pred, gt)); }
double iou(std::span<const uint8_t> pred, std::span<const uint8_t> gt) { return iou(count_overlap(pred, gt)); }

double mean(const std::vector<double>& values) {
    if (values.empty()) throw invalid_argument("mean of an empty sample");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double t = pos - static_cast<double>(lo);
    return sorted[lo] + t * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_mean_ci(const std::vector<double>& values, int resamples, uint64_t seed) {
    if (values.empty()) throw invalid_argument("bootstrap of an empty sample");
    if (resamples < 1) throw invalid_argument("bootstrap needs at least one resample");
    const double m = mean(values);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, values.size() - 1);
    std::vector<double> means(static_cast<size_t>(resamples));
    for (auto& r : means) {
        double s = 0.0;
        for (size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
        r = s / static_cast<double>(values.size());
    }
    std::sort(means.begin(), means.end());
    Interval ci{percentile(means, 0.025), percentile(means, 0.975)};
    ci.lo = std::min(ci.lo, m);
    ci.hi = std::max(ci.hi, m);
    return ci;
}

}  // namespace sabone
