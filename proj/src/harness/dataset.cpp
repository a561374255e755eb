#include "rlar/harness/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "rlar/errors.hpp"

namespace rlar::harness {
namespace fs = std::filesystem;

namespace {

// Gamma shape of the multiplicative background speckle (unit mean).
constexpr double kSpeckleLooks = 36.0;

// Next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in, const fs::path& path) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string ignored;
            std::getline(in, ignored);
            if (!tok.empty()) break;
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(ch);
    }
    if (tok.empty()) throw ValidationError(path.string() + ": truncated PGM header");
    return tok;
}

std::size_t pgm_number(std::istream& in, const fs::path& path, const char* what) {
    const std::string tok = pgm_token(in, path);
    std::size_t value = 0;
    try {
        std::size_t used = 0;
        value = std::stoul(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
        throw ValidationError(path.string() + ": malformed PGM " + what + " '" + tok + "'");
    }
    return value;
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    while (!s.empty() && s.front() == ' ') s.erase(s.begin());
    return s;
}

std::string case_id_of(const std::string& filename) {
    const std::string stem = fs::path(filename).stem().string();
    const auto underscore = stem.rfind('_');
    return underscore == std::string::npos ? stem : stem.substr(0, underscore);
}

}  // namespace

Grid<std::uint8_t> read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    if (pgm_token(in, path) != "P5") throw ValidationError(path.string() + ": not a binary PGM (P5)");
    const std::size_t width = pgm_number(in, path, "width");
    const std::size_t height = pgm_number(in, path, "height");
    const std::size_t maxval = pgm_number(in, path, "maxval");
    if (width == 0 || height == 0) throw ValidationError(path.string() + ": empty PGM");
    if (maxval == 0 || maxval > 255) throw ValidationError(path.string() + ": unsupported maxval " + std::to_string(maxval));
    Grid<std::uint8_t> pixels(height, width, 0);
    in.read(reinterpret_cast<char*>(pixels.data.data()), static_cast<std::streamsize>(pixels.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(pixels.data.size()))
        throw ValidationError(path.string() + ": truncated PGM payload");
    if (maxval != 255)
        for (auto& v : pixels.data)
            v = static_cast<std::uint8_t>(std::lround(255.0 * std::min<double>(v, maxval) / static_cast<double>(maxval)));
    return pixels;
}

void write_pgm(const fs::path& path, const Grid<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << "P5\n" << pixels.cols << ' ' << pixels.rows << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data.data()), static_cast<std::streamsize>(pixels.data.size()));
    if (!out) throw ValidationError("failed writing " + path.string());
}

Image to_image(const Grid<std::uint8_t>& pixels) {
    Image img(pixels.rows, pixels.cols);
    for (std::size_t i = 0; i < pixels.data.size(); ++i) img.data[i] = pixels.data[i] / 255.0;
    return img;
}

Grid<std::uint8_t> from_image(const Image& image) {
    Grid<std::uint8_t> px(image.rows, image.cols, 0);
    for (std::size_t i = 0; i < image.data.size(); ++i)
        px.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(image.data[i], 0.0, 1.0)));
    return px;
}

void save_dataset(const fs::path& dir, const Dataset& data) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::ofstream labels(dir / "labels.csv");
    if (!labels) throw ValidationError("cannot write " + (dir / "labels.csv").string());
    labels << "filename,tirads\n";
    for (const auto& s : data) {
        write_pgm(dir / "images" / s.filename, from_image(s.image));
        Grid<std::uint8_t> mask(s.mask.rows, s.mask.cols, 0);
        for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = s.mask.data[i] ? 255 : 0;
        write_pgm(dir / "masks" / s.filename, mask);
        labels << s.filename << ',' << s.label + 1 << '\n';
    }
}

Dataset load_dataset(const fs::path& dir) {
    const fs::path labels_path = dir / "labels.csv";
    std::ifstream labels(labels_path);
    if (!labels) throw ValidationError("missing " + labels_path.string());
    std::string line;
    std::getline(labels, line);
    if (trim(line) != "filename,tirads")
        throw ValidationError(labels_path.string() + ": expected header 'filename,tirads'");
    std::map<std::string, int> label_of;
    std::size_t row = 1;
    while (std::getline(labels, line)) {
        ++row;
        line = trim(line);
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const std::string where = labels_path.string() + " row " + std::to_string(row);
        if (comma == std::string::npos) throw ValidationError(where + ": expected 'filename,tirads'");
        const std::string name = trim(line.substr(0, comma));
        const std::string value = trim(line.substr(comma + 1));
        int tirads = 0;
        try {
            std::size_t used = 0;
            tirads = std::stoi(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
            throw ValidationError(where + ": tirads '" + value + "' is not an integer");
        }
        if (tirads < 1 || tirads > kNumClasses)
            throw ValidationError(where + ": tirads " + std::to_string(tirads) + " outside 1..5");
        if (!label_of.emplace(name, tirads - 1).second) throw ValidationError(where + ": duplicate " + name);
    }

    const fs::path images_dir = dir / "images";
    if (!fs::is_directory(images_dir)) throw ValidationError("missing directory " + images_dir.string());
    std::vector<fs::path> images;
    for (const auto& entry : fs::directory_iterator(images_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm") images.push_back(entry.path());

    Dataset data;
    for (const auto& path : images) {
        Sample s;
        s.filename = path.filename().string();
        s.case_id = case_id_of(s.filename);
        const auto label = label_of.find(s.filename);
        if (label == label_of.end()) throw ValidationError("no label for " + s.filename + " in " + labels_path.string());
        s.label = label->second;
        label_of.erase(label);
        const fs::path mask_path = dir / "masks" / s.filename;
        if (!fs::exists(mask_path)) throw ValidationError("missing mask " + mask_path.string());
        s.image = to_image(read_pgm(path));
        const auto mask = read_pgm(mask_path);
        if (!mask.same_shape(s.image))
            throw ValidationError("mask " + mask_path.string() + " is " + shape_string(mask.rows, mask.cols) +
                                  " but image is " + shape_string(s.image.rows, s.image.cols));
        s.mask = Mask(mask.rows, mask.cols, 0);
        for (std::size_t i = 0; i < mask.data.size(); ++i) s.mask.data[i] = mask.data[i] >= 128 ? 1 : 0;
        data.push_back(std::move(s));
    }
    if (!label_of.empty()) throw ValidationError("label for missing image " + label_of.begin()->first);
    std::sort(data.begin(), data.end(), [](const Sample& a, const Sample& b) {
        return std::tie(a.case_id, a.filename) < std::tie(b.case_id, b.filename);
    });
    return data;
}

int risk_points(const NoduleCues& c) {
    int points = 0;
    if (c.bbox_aspect > 1.0) points += 2;
    if (c.echo_offset < kHypoechoicBelow) points += 2;
    if (c.boundary_amplitude > kIrregularAmplitude && c.blur_sigma < kSharpBlurBelow) points += 2;
    if (c.texture_std > kHeterogeneousTexture) points += 1;
    return points;
}

int label_from_points(int points) {
    if (points <= 0) return 0;
    if (points <= 2) return 1;
    if (points == 3) return 2;
    if (points <= 5) return 3;
    return 4;
}

std::vector<SyntheticSample> gen_synthetic_detailed(std::size_t n, std::size_t size, std::uint64_t seed) {
    if (size == 0 || size % 16 != 0) throw ValidationError("gen_synthetic: size " + std::to_string(size) + " not divisible by 16");
    if (n < 10) throw ValidationError("gen_synthetic: need n >= 10, got " + std::to_string(n));

    std::mt19937_64 rng(seed);
    using U = std::uniform_real_distribution<double>;
    const double s = static_cast<double>(size);
    std::gamma_distribution<double> speckle(kSpeckleLooks, 1.0 / kSpeckleLooks);
    std::normal_distribution<double> unit(0.0, 1.0);

    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t idx = 0; idx < n; ++idx) {
        const double cr = U(0.375 * s, 0.625 * s)(rng);
        const double cc = U(0.375 * s, 0.625 * s)(rng);
        const double semi_v = U(0.16 * s, 0.34 * s)(rng);
        const double semi_h = U(0.16 * s, 0.34 * s)(rng);
        const double theta = U(-0.35, 0.35)(rng);
        NoduleCues cues;
        cues.boundary_amplitude = U(0.0, 0.25)(rng);
        std::array<double, 4> coef{}, phase{};
        double coef_sum = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            coef[k] = U(0.5, 1.0)(rng);
            phase[k] = U(0.0, 2.0 * std::numbers::pi)(rng);
            coef_sum += coef[k];
        }
        cues.blur_sigma = U(0.3, 1.5)(rng);
        const bool hypo = std::bernoulli_distribution(0.6)(rng);
        cues.echo_offset = hypo ? U(-0.35, -0.1)(rng) : U(0.1, 0.25)(rng);
        cues.texture_std = U(0.02, 0.14)(rng);

        const double ct = std::cos(theta), st = std::sin(theta);
        const double mean_radius = std::sqrt(semi_v * semi_h);
        Image image(size, size);
        Mask mask(size, size, 0);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                const double y = static_cast<double>(r) - cr, x = static_cast<double>(c) - cc;
                const double u = (x * ct + y * st) / semi_h;
                const double v = (-x * st + y * ct) / semi_v;
                const double rho = std::hypot(u, v);
                const double phi = std::atan2(v, u);
                double wobble = 0.0;
                for (std::size_t k = 0; k < 4; ++k) wobble += coef[k] * std::cos(static_cast<double>(k + 5) * phi + phase[k]);
                const double edge = 1.0 + cues.boundary_amplitude * wobble / coef_sum;
                mask(r, c) = rho <= edge ? 1 : 0;
                const double weight = 0.5 * std::erfc((rho - edge) * mean_radius / (cues.blur_sigma * std::sqrt(2.0)));
                const double background = 0.45 * speckle(rng);
                const double texture = cues.texture_std * unit(rng);
                image(r, c) = background + weight * (cues.echo_offset + texture);
            }
        }
        image = to_image(from_image(image));

        std::size_t r0 = size, r1 = 0, c0 = size, c1 = 0;
        for (std::size_t r = 0; r < size; ++r)
            for (std::size_t c = 0; c < size; ++c)
                if (mask(r, c)) {
                    r0 = std::min(r0, r);
                    r1 = std::max(r1, r);
                    c0 = std::min(c0, c);
                    c1 = std::max(c1, c);
                }
        cues.bbox_aspect = static_cast<double>(r1 - r0 + 1) / static_cast<double>(c1 - c0 + 1);

        char id[32];
        std::snprintf(id, sizeof id, "c%05zu", idx);
        SyntheticSample item;
        item.sample.case_id = id;
        item.sample.filename = std::string(id) + "_0.pgm";
        item.sample.image = std::move(image);
        item.sample.mask = std::move(mask);
        item.sample.label = label_from_points(risk_points(cues));
        item.cues = cues;
        out.push_back(std::move(item));
    }
    return out;
}

Dataset gen_synthetic(std::size_t n, std::size_t size, std::uint64_t seed) {
    Dataset data;
    for (auto& item : gen_synthetic_detailed(n, size, seed)) data.push_back(std::move(item.sample));
    return data;
}

std::array<std::size_t, kNumClasses> class_counts(std::span<const Sample> samples) {
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto& s : samples) counts.at(static_cast<std::size_t>(s.label))++;
    return counts;
}

std::array<double, kNumClasses> class_weights(std::span<const std::size_t> counts) {
    if (counts.size() != kNumClasses)
        throw ValidationError("class_weights: expected " + std::to_string(kNumClasses) + " counts, got " +
                              std::to_string(counts.size()));
    double total = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) throw ValidationError("class_weights: class TR" + std::to_string(c + 1) + " has no samples");
        total += static_cast<double>(counts[c]);
    }
    std::array<double, kNumClasses> w{};
    for (std::size_t c = 0; c < counts.size(); ++c)
        w[c] = total / (static_cast<double>(kNumClasses) * static_cast<double>(counts[c]));
    return w;
}

std::map<std::string, int> kfold_split(std::span<const std::string> case_ids, int k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("kfold_split: k must be >= 2, got " + std::to_string(k));
    const std::set<std::string> unique(case_ids.begin(), case_ids.end());
    if (unique.size() < static_cast<std::size_t>(k))
        throw ValidationError("kfold_split: " + std::to_string(unique.size()) + " cases for " + std::to_string(k) + " folds");
    std::vector<std::string> ids(unique.begin(), unique.end());
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::map<std::string, int> fold;
    for (std::size_t i = 0; i < ids.size(); ++i) fold[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return fold;
}

}  // namespace rlar::harness
