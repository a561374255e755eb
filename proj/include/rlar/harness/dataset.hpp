#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rlar/image.hpp"

namespace rlar::harness {

inline constexpr int kNumClasses = 5;

struct Sample {
    std::string case_id;
    std::string filename;  // e.g. "c00042_0.pgm"
    Image image;           // [0, 1]
    Mask mask;
    int label = 0;  // 0-based; TR1 is 0
};

using Dataset = std::vector<Sample>;

// Binary 8-bit PGM (P5). Values are stored as round(255 v).
Grid<std::uint8_t> read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Grid<std::uint8_t>& pixels);

Image to_image(const Grid<std::uint8_t>& pixels);
Grid<std::uint8_t> from_image(const Image& image);

// <dir>/images/*.pgm, <dir>/masks/*.pgm (0/255), <dir>/labels.csv with
// header "filename,tirads" and tirads in 1..5.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
// Samples come back sorted by (case_id, filename); masks are binarized at 128.
Dataset load_dataset(const std::filesystem::path& dir);

// Cues behind the synthetic labels.
struct NoduleCues {
    double bbox_aspect = 1.0;         // realized mask height / width
    double echo_offset = 0.0;         // nodule mean minus background
    double boundary_amplitude = 0.0;  // relative radial perturbation
    double blur_sigma = 1.0;          // margin blur, pixels
    double texture_std = 0.0;         // internal intensity spread
};

inline constexpr double kHypoechoicBelow = -0.15;
inline constexpr double kIrregularAmplitude = 0.08;
inline constexpr double kSharpBlurBelow = 1.1;
inline constexpr double kHeterogeneousTexture = 0.08;

// +2 taller-than-wide, +2 markedly hypoechoic, +2 irregular margin
// (amplitude above and blur below their thresholds), +1 heterogeneous.
int risk_points(const NoduleCues& cues);
// 0 -> TR1, 1-2 -> TR2, 3 -> TR3, 4-5 -> TR4, >= 6 -> TR5 (0-based result).
int label_from_points(int points);

struct SyntheticSample {
    Sample sample;
    NoduleCues cues;
};

// Speckled background with one perturbed, blurred elliptical nodule per
// image. size must be divisible by 16 and n >= 10.
std::vector<SyntheticSample> gen_synthetic_detailed(std::size_t n, std::size_t size, std::uint64_t seed);
Dataset gen_synthetic(std::size_t n, std::size_t size, std::uint64_t seed);

std::array<std::size_t, kNumClasses> class_counts(std::span<const Sample> samples);
// w_c = N / (C n_c). Throws ValidationError on a zero count.
std::array<double, kNumClasses> class_weights(std::span<const std::size_t> counts);

// Case-level partition into k folds of sizes differing by at most one.
std::map<std::string, int> kfold_split(std::span<const std::string> case_ids, int k, std::uint64_t seed);

}  // namespace rlar::harness
