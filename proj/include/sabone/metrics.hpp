#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace sabone {

struct Overlap {
    int64_t intersection = 0;
    int64_t pred = 0;
    int64_t gt = 0;
    int64_t union_count() const { return pred + gt - intersection; }
};

/// Counts over two equally sized {0,1} arrays (nonzero counts as 1).
Overlap count_overlap(std::span<const uint8_t> pred, std::span<const uint8_t> gt);

/// 2|P∩G| / (|P|+|G|); 1.0 when both are empty.
double dsc(const Overlap& o);
double dsc(std::span<const uint8_t> pred, std::span<const uint8_t> gt);
/// |P∩G| / |P∪G|; 1.0 when both are empty.
double iou(const Overlap& o);
double iou(std::span<const uint8_t> pred, std::span<const uint8_t> gt);

/// Sensitivity |P∩G| / |G|; 1.0 when G is empty.
double recall(const Overlap& o);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Percentile bootstrap of the mean: `resamples` draws with replacement,
/// 2.5/97.5 percentiles (linear interpolation). The interval is widened
/// if needed so it contains the sample mean.
Interval bootstrap_mean_ci(const std::vector<double>& values, int resamples, uint64_t seed);

double mean(const std::vector<double>& values);

}  // namespace sabone
