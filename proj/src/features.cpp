#include "rlar/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "rlar/errors.hpp"

namespace rlar::features {
namespace {

struct Moments {
    double mean = 0.0;
    double variance = 0.0;
    double m4 = 0.0;
};

Moments moments(const std::vector<double>& v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) {
        const double d = x - m.mean;
        m.variance += d * d;
        m.m4 += d * d * d * d;
    }
    m.variance /= static_cast<double>(v.size());
    m.m4 /= static_cast<double>(v.size());
    return m;
}

double entropy_bits(const std::vector<double>& counts, double total) {
    double h = 0.0;
    for (double c : counts) {
        if (c <= 0.0) continue;
        const double p = c / total;
        h -= p * std::log2(p);
    }
    return h;
}

// Bin index of v in [lo, hi] split into n equal bins; hi falls in the last.
int min_max_bin(double v, double lo, double hi, int n) {
    if (hi <= lo) return 0;
    const int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * n));
    return std::clamp(b, 0, n - 1);
}

// 4-neighbour edges between foreground and background (outside counts as
// background).
double crack_perimeter(const Mask& mask) {
    double p = 0.0;
    for (std::size_t r = 0; r < mask.rows; ++r) {
        for (std::size_t c = 0; c < mask.cols; ++c) {
            if (!mask(r, c)) continue;
            p += (r == 0 || !mask(r - 1, c)) ? 1 : 0;
            p += (r + 1 == mask.rows || !mask(r + 1, c)) ? 1 : 0;
            p += (c == 0 || !mask(r, c - 1)) ? 1 : 0;
            p += (c + 1 == mask.cols || !mask(r, c + 1)) ? 1 : 0;
        }
    }
    return p;
}

// sqrt(lambda_min / lambda_max) of the second moments of the foreground,
// with each pixel treated as a unit square (adds 1/12 to each variance).
double covariance_axis_ratio(const Mask& mask) {
    double n = 0.0, sr = 0.0, sc = 0.0;
    for (std::size_t r = 0; r < mask.rows; ++r)
        for (std::size_t c = 0; c < mask.cols; ++c)
            if (mask(r, c)) {
                n += 1.0;
                sr += static_cast<double>(r);
                sc += static_cast<double>(c);
            }
    const double mr = sr / n, mc = sc / n;
    double vrr = 0.0, vcc = 0.0, vrc = 0.0;
    for (std::size_t r = 0; r < mask.rows; ++r)
        for (std::size_t c = 0; c < mask.cols; ++c)
            if (mask(r, c)) {
                const double dr = static_cast<double>(r) - mr;
                const double dc = static_cast<double>(c) - mc;
                vrr += dr * dr;
                vcc += dc * dc;
                vrc += dr * dc;
            }
    vrr = vrr / n + 1.0 / 12.0;
    vcc = vcc / n + 1.0 / 12.0;
    vrc /= n;
    const double half_trace = 0.5 * (vrr + vcc);
    const double disc = std::hypot(0.5 * (vrr - vcc), vrc);
    const double lmax = half_trace + disc;
    const double lmin = std::max(0.0, half_trace - disc);
    return std::sqrt(lmin / lmax);
}

double edge_sharpness(const Image& image, const Mask& mask) {
    const Mask edge = boundary(mask);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < image.rows; ++r) {
        for (std::size_t c = 0; c < image.cols; ++c) {
            if (!edge(r, c)) continue;
            const std::size_t up = r == 0 ? 0 : r - 1;
            const std::size_t down = std::min(image.rows - 1, r + 1);
            const std::size_t left = c == 0 ? 0 : c - 1;
            const std::size_t right = std::min(image.cols - 1, c + 1);
            const double gy = 0.5 * (image(down, c) - image(up, c));
            const double gx = 0.5 * (image(r, right) - image(r, left));
            total += std::hypot(gx, gy);
            ++n;
        }
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double edge_intensity(const Image& image, const Mask& mask, double inside_mean) {
    const Mask grown = dilate(mask, kRingRadius);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        if (grown.data[i] && !mask.data[i]) {
            sum += image.data[i];
            ++n;
        }
    }
    if (n == 0) return 0.0;
    return std::abs(inside_mean - sum / static_cast<double>(n));
}

}  // namespace

LevelGrid quantize(const Image& image, const Mask& mask, int levels) {
    if (!image.same_shape(mask))
        throw ValidationError("quantize: image " + shape_string(image.rows, image.cols) +
                              " and mask " + shape_string(mask.rows, mask.cols) + " differ");
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        if (!mask.data[i]) continue;
        const double v = image.data[i];
        lo = any ? std::min(lo, v) : v;
        hi = any ? std::max(hi, v) : v;
        any = true;
    }
    LevelGrid out(image.rows, image.cols, kBackground);
    for (std::size_t i = 0; i < image.data.size(); ++i)
        if (mask.data[i]) out.data[i] = min_max_bin(image.data[i], lo, hi, levels);
    return out;
}

Glcm glcm(const LevelGrid& quantized, int levels, std::span<const Offset> offsets) {
    if (levels < 2) throw ValidationError("glcm: need at least 2 levels, got " + std::to_string(levels));
    Glcm m{levels, std::vector<double>(static_cast<std::size_t>(levels * levels), 0.0)};
    const auto rows = static_cast<std::ptrdiff_t>(quantized.rows);
    const auto cols = static_cast<std::ptrdiff_t>(quantized.cols);
    double total = 0.0;
    for (const Offset& d : offsets) {
        for (std::ptrdiff_t r = 0; r < rows; ++r) {
            const std::ptrdiff_t r2 = r + d.dr;
            if (r2 < 0 || r2 >= rows) continue;
            for (std::ptrdiff_t c = 0; c < cols; ++c) {
                const std::ptrdiff_t c2 = c + d.dc;
                if (c2 < 0 || c2 >= cols) continue;
                const int a = quantized(r, c);
                const int b = quantized(r2, c2);
                if (a == kBackground || b == kBackground) continue;
                if (a < 0 || b < 0 || a >= levels || b >= levels)
                    throw ValidationError("glcm: level out of range [0, " + std::to_string(levels) + ")");
                m.p[static_cast<std::size_t>(a * levels + b)] += 1.0;
                m.p[static_cast<std::size_t>(b * levels + a)] += 1.0;
                total += 2.0;
            }
        }
    }
    if (total == 0.0) throw ValidationError("glcm: no co-occurring foreground pairs");
    for (double& v : m.p) v /= total;
    return m;
}

GlcmStats glcm_stats(const Glcm& m) {
    GlcmStats s;
    const int n = m.levels;
    double mu_i = 0.0, mu_j = 0.0, sum_ij = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double p = m(i, j);
            if (p == 0.0) continue;
            const double d = i - j;
            s.contrast += d * d * p;
            s.energy += p * p;
            s.entropy -= p * std::log2(p);
            mu_i += i * p;
            mu_j += j * p;
            sum_ij += static_cast<double>(i) * j * p;
        }
    }
    double var_i = 0.0, var_j = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double p = m(i, j);
            var_i += (i - mu_i) * (i - mu_i) * p;
            var_j += (j - mu_j) * (j - mu_j) * p;
        }
    }
    const double sd_i = std::sqrt(var_i), sd_j = std::sqrt(var_j);
    if (sd_i >= 1e-12 && sd_j >= 1e-12)
        s.correlation = std::clamp((sum_ij - mu_i * mu_j) / (sd_i * sd_j), -1.0, 1.0);
    return s;
}

FeatureVector extract_features(const Image& image, const Mask& mask) {
    if (!image.same_shape(mask))
        throw ValidationError("extract_features: image " + shape_string(image.rows, image.cols) +
                              " and mask " + shape_string(mask.rows, mask.cols) + " differ");
    const std::size_t area = count_foreground(mask);
    if (area < kMinForeground)
        throw ValidationError("extract_features: mask has " + std::to_string(area) +
                              " foreground pixels, need at least " + std::to_string(kMinForeground));

    FeatureVector f{};

    std::size_t r0 = mask.rows, r1 = 0, c0 = mask.cols, c1 = 0;
    std::vector<double> inside;
    inside.reserve(area);
    for (std::size_t r = 0; r < mask.rows; ++r) {
        for (std::size_t c = 0; c < mask.cols; ++c) {
            if (!mask(r, c)) continue;
            r0 = std::min(r0, r);
            r1 = std::max(r1, r);
            c0 = std::min(c0, c);
            c1 = std::max(c1, c);
            inside.push_back(image(r, c));
        }
    }

    const double perimeter = crack_perimeter(mask);
    f[kCircularity] = 4.0 * std::numbers::pi * static_cast<double>(area) / (perimeter * perimeter);
    f[kEllipticity] = covariance_axis_ratio(mask);
    f[kElongation2d] = f[kEllipticity];
    f[kAspectRatio] = static_cast<double>(r1 - r0 + 1) / static_cast<double>(c1 - c0 + 1);

    const Moments m = moments(inside);
    f[kMean] = m.mean;
    const double sigma = std::sqrt(m.variance);
    f[kKurtosis] = sigma < 1e-8 ? 0.0 : m.m4 / (m.variance * m.variance);

    f[kEdgeSharpness] = edge_sharpness(image, mask);
    f[kEdgeIntensity] = edge_intensity(image, mask, m.mean);

    const auto [lo, hi] = std::minmax_element(inside.begin(), inside.end());
    std::vector<double> hist(kHistogramBins, 0.0);
    for (double v : inside) hist[static_cast<std::size_t>(min_max_bin(v, *lo, *hi, kHistogramBins))] += 1.0;
    f[kEntropy] = entropy_bits(hist, static_cast<double>(inside.size()));

    const GlcmStats g = glcm_stats(glcm(quantize(image, mask, kGlcmLevels), kGlcmLevels, kGlcmOffsets));
    f[kGlcmContrast] = g.contrast;
    f[kGlcmEnergy] = g.energy;
    f[kGlcmCorrelation] = g.correlation;
    f[kGlcmEntropy] = g.entropy;

    for (std::size_t k = 0; k < kFeatureCount; ++k)
        if (!std::isfinite(f[k]))
            throw NumericalError("extract_features: non-finite " + std::string(kFeatureNames[k]));
    return f;
}

StandardizationStats fit_standardization(std::span<const FeatureVector> rows) {
    if (rows.empty()) throw ValidationError("fit_standardization: no rows");
    StandardizationStats s;
    const double n = static_cast<double>(rows.size());
    for (const auto& row : rows)
        for (std::size_t k = 0; k < kFeatureCount; ++k) s.mean[k] += row[k];
    for (double& v : s.mean) v /= n;
    for (const auto& row : rows)
        for (std::size_t k = 0; k < kFeatureCount; ++k) s.std[k] += (row[k] - s.mean[k]) * (row[k] - s.mean[k]);
    for (double& v : s.std) v = std::max(kStdFloor, std::sqrt(v / n));
    return s;
}

FeatureVector standardize(const FeatureVector& v, const StandardizationStats& stats) {
    FeatureVector out{};
    for (std::size_t k = 0; k < kFeatureCount; ++k)
        out[k] = (v[k] - stats.mean[k]) / std::max(kStdFloor, stats.std[k]);
    return out;
}

FeatureVector destandardize(const FeatureVector& v, const StandardizationStats& stats) {
    FeatureVector out{};
    for (std::size_t k = 0; k < kFeatureCount; ++k)
        out[k] = v[k] * std::max(kStdFloor, stats.std[k]) + stats.mean[k];
    return out;
}

void write_feature_csv(std::ostream& out,
                       std::span<const std::pair<std::string, FeatureVector>> rows) {
    out << "filename";
    for (auto name : kFeatureNames) out << ',' << name;
    out << '\n';
    const auto old_precision = out.precision(17);
    for (const auto& [name, values] : rows) {
        out << name;
        for (double v : values) out << ',' << v;
        out << '\n';
    }
    out.precision(old_precision);
}

}  // namespace rlar::features
