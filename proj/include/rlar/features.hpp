#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rlar/image.hpp"

// Radiomics-style nodule descriptors computed from an image and its mask.
// Used only as a training-time regression target.
namespace rlar::features {

inline constexpr std::size_t kFeatureCount = 13;
inline constexpr std::size_t kMinForeground = 8;
inline constexpr int kHistogramBins = 32;
inline constexpr int kGlcmLevels = 32;
inline constexpr std::size_t kRingRadius = 5;

// Canonical channel order.
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "circularity",    "ellipticity",  "aspect_ratio",     "edge_sharpness", "edge_intensity",
    "entropy",        "mean",         "kurtosis",         "glcm_contrast",  "glcm_energy",
    "glcm_correlation", "glcm_entropy", "elongation2d",
};

enum Feature : std::size_t {
    kCircularity,
    kEllipticity,
    kAspectRatio,
    kEdgeSharpness,
    kEdgeIntensity,
    kEntropy,
    kMean,
    kKurtosis,
    kGlcmContrast,
    kGlcmEnergy,
    kGlcmCorrelation,
    kGlcmEntropy,
    kElongation2d,
};

using FeatureVector = std::array<double, kFeatureCount>;

// Throws ValidationError when shapes differ or the mask has fewer than
// kMinForeground pixels.
FeatureVector extract_features(const Image& image, const Mask& mask);

// Quantized grid: levels in [0, levels) or kBackground.
inline constexpr int kBackground = -1;
using LevelGrid = Grid<int>;

struct Offset {
    int dr;
    int dc;
};

inline constexpr std::array<Offset, 4> kGlcmOffsets = {{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};

// Symmetric co-occurrence probabilities, row-major levels x levels.
struct Glcm {
    int levels = 0;
    std::vector<double> p;

    double operator()(int i, int j) const { return p[static_cast<std::size_t>(i * levels + j)]; }
};

// Pairs touching a background cell are skipped; both (i,j) and (j,i) are
// counted for every valid pair and all offsets are pooled before
// normalizing. Throws ValidationError when no valid pair exists.
Glcm glcm(const LevelGrid& quantized, int levels, std::span<const Offset> offsets);

struct GlcmStats {
    double contrast = 0.0;
    double energy = 0.0;       // angular second moment
    double correlation = 0.0;  // 0 when either marginal is degenerate
    double entropy = 0.0;      // bits
};

GlcmStats glcm_stats(const Glcm& m);

// Min-max quantization of the masked intensities to `levels` bins; a
// constant region maps to level 0.
LevelGrid quantize(const Image& image, const Mask& mask, int levels);

struct StandardizationStats {
    FeatureVector mean{};
    FeatureVector std{};  // floored at kStdFloor
};

inline constexpr double kStdFloor = 1e-8;

StandardizationStats fit_standardization(std::span<const FeatureVector> rows);
FeatureVector standardize(const FeatureVector& v, const StandardizationStats& stats);
FeatureVector destandardize(const FeatureVector& v, const StandardizationStats& stats);

// Header "filename,<13 canonical names>" then one row per entry.
void write_feature_csv(std::ostream& out,
                       std::span<const std::pair<std::string, FeatureVector>> rows);

}  // namespace rlar::features
