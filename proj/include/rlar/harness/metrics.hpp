#pragma once

#include <array>
#include <span>
#include <vector>

#include "rlar/harness/dataset.hpp"
#include "rlar/image.hpp"

namespace rlar::harness {

// Both empty counts as a perfect match (1).
double dice_score(const Mask& pred, const Mask& truth);
double iou_score(const Mask& pred, const Mask& truth);

// Symmetric 95th percentile (linear interpolation) of the union of both
// directed boundary-to-boundary distance sets. Both empty gives 0; exactly
// one empty gives the image diagonal.
double hd95(const Mask& pred, const Mask& truth);

// Linear-interpolated percentile, position q (n - 1) in the sorted values.
double percentile(std::vector<double> values, double q);

// Exact squared Euclidean distance to the nearest set pixel of `mask`
// (infinity everywhere when the mask is empty).
std::vector<double> squared_distance_transform(const Mask& mask);

struct ClassificationReport {
    std::array<double, kNumClasses> precision{};
    std::array<double, kNumClasses> recall{};
    std::array<double, kNumClasses> f1{};
    std::array<std::size_t, kNumClasses> support{};
    std::array<std::size_t, kNumClasses> predicted{};
    double precision_macro = 0.0;
    double recall_macro = 0.0;
    double f1_macro = 0.0;
};

// Zero denominators count as 0. Macro averages run over the classes that
// occur in the truth or in the predictions.
ClassificationReport classification_report(std::span<const int> truth, std::span<const int> pred);

// Macro-F1 of always predicting `majority_class`.
double majority_baseline_f1(std::span<const int> truth, int majority_class);

}  // namespace rlar::harness
