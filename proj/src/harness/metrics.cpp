#include "rlar/harness/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rlar/errors.hpp"

namespace rlar::harness {
namespace {

void require_same_shape(const char* what, const Mask& a, const Mask& b) {
    if (!a.same_shape(b))
        throw ValidationError(std::string(what) + ": prediction " + shape_string(a.rows, a.cols) + " vs truth " +
                              shape_string(b.rows, b.cols));
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform of f (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v, std::vector<double>& z) {
    const std::size_t n = f.size();
    std::size_t k = 0;
    std::size_t first = n;
    for (std::size_t q = 0; q < n; ++q)
        if (f[q] < kInf) {
            first = q;
            break;
        }
    if (first == n) {
        std::fill(d.begin(), d.end(), kInf);
        return;
    }
    v[0] = first;
    z[0] = -kInf;
    z[1] = kInf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double qd = static_cast<double>(q);
        double s;
        while (true) {
            const double vk = static_cast<double>(v[k]);
            s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2.0 * qd - 2.0 * vk);
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

}  // namespace

double dice_score(const Mask& pred, const Mask& truth) {
    require_same_shape("dice", pred, truth);
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        a += pred.data[i] != 0;
        b += truth.data[i] != 0;
        both += pred.data[i] != 0 && truth.data[i] != 0;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double iou_score(const Mask& pred, const Mask& truth) {
    require_same_shape("iou", pred, truth);
    std::size_t either = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        either += pred.data[i] != 0 || truth.data[i] != 0;
        both += pred.data[i] != 0 && truth.data[i] != 0;
    }
    if (either == 0) return 1.0;
    return static_cast<double>(both) / static_cast<double>(either);
}

std::vector<double> squared_distance_transform(const Mask& mask) {
    const std::size_t rows = mask.rows, cols = mask.cols;
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.data[i] ? 0.0 : kInf;
    const std::size_t n = std::max(rows, cols);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<std::size_t> v(n);
    // columns
    f.resize(rows);
    d.resize(rows);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) f[r] = out[r * cols + c];
        edt_1d(f, d, v, z);
        for (std::size_t r = 0; r < rows; ++r) out[r * cols + c] = d[r];
    }
    // rows
    f.resize(cols);
    d.resize(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) f[c] = out[r * cols + c];
        edt_1d(f, d, v, z);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = d[c];
    }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ValidationError("percentile: no values");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

double hd95(const Mask& pred, const Mask& truth) {
    require_same_shape("hd95", pred, truth);
    const Mask edge_p = boundary(pred), edge_t = boundary(truth);
    const bool empty_p = count_foreground(edge_p) == 0, empty_t = count_foreground(edge_t) == 0;
    if (empty_p && empty_t) return 0.0;
    if (empty_p || empty_t) return std::hypot(static_cast<double>(pred.rows), static_cast<double>(pred.cols));
    const auto to_t = squared_distance_transform(edge_t);
    const auto to_p = squared_distance_transform(edge_p);
    std::vector<double> distances;
    for (std::size_t i = 0; i < edge_p.data.size(); ++i) {
        if (edge_p.data[i]) distances.push_back(std::sqrt(to_t[i]));
        if (edge_t.data[i]) distances.push_back(std::sqrt(to_p[i]));
    }
    return percentile(std::move(distances), 0.95);
}

ClassificationReport classification_report(std::span<const int> truth, std::span<const int> pred) {
    if (truth.size() != pred.size())
        throw ValidationError("classification_report: " + std::to_string(truth.size()) + " labels vs " +
                              std::to_string(pred.size()) + " predictions");
    ClassificationReport r;
    std::array<std::size_t, kNumClasses> tp{};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (int v : {truth[i], pred[i]})
            if (v < 0 || v >= kNumClasses) throw ValidationError("classification_report: class " + std::to_string(v) + " out of range");
        r.support[static_cast<std::size_t>(truth[i])]++;
        r.predicted[static_cast<std::size_t>(pred[i])]++;
        if (truth[i] == pred[i]) tp[static_cast<std::size_t>(truth[i])]++;
    }
    std::size_t active = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const double t = static_cast<double>(tp[c]);
        r.precision[c] = r.predicted[c] ? t / static_cast<double>(r.predicted[c]) : 0.0;
        r.recall[c] = r.support[c] ? t / static_cast<double>(r.support[c]) : 0.0;
        const double pr = r.precision[c] + r.recall[c];
        r.f1[c] = pr > 0.0 ? 2.0 * r.precision[c] * r.recall[c] / pr : 0.0;
        if (r.support[c] == 0 && r.predicted[c] == 0) continue;
        ++active;
        r.precision_macro += r.precision[c];
        r.recall_macro += r.recall[c];
        r.f1_macro += r.f1[c];
    }
    if (active > 0) {
        r.precision_macro /= static_cast<double>(active);
        r.recall_macro /= static_cast<double>(active);
        r.f1_macro /= static_cast<double>(active);
    }
    return r;
}

double majority_baseline_f1(std::span<const int> truth, int majority_class) {
    const std::vector<int> pred(truth.size(), majority_class);
    return classification_report(truth, pred).f1_macro;
}

}  // namespace rlar::harness
