#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "rlar/ad/ops.hpp"
#include "rlar/errors.hpp"
#include "rlar/features.hpp"
#include "rlar/harness/checkpoint.hpp"
#include "rlar/harness/dataset.hpp"
#include "rlar/harness/metrics.hpp"
#include "rlar/harness/optimizer.hpp"
#include "rlar/harness/train.hpp"

using namespace rlar;
using namespace rlar::harness;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::path(testing::TempDir()) / ("rlar_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

Mask mask_from(std::size_t rows, std::size_t cols, std::initializer_list<std::pair<std::size_t, std::size_t>> on) {
    Mask m(rows, cols, 0);
    for (auto [r, c] : on) m(r, c) = 1;
    return m;
}

// Foreground pixels with a background (or out-of-image) 8-neighbour.
std::vector<std::pair<double, double>> edge_points(const Mask& m) {
    std::vector<std::pair<double, double>> pts;
    const auto rows = static_cast<long>(m.rows), cols = static_cast<long>(m.cols);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) {
            if (!m(r, c)) continue;
            bool edge = false;
            for (long dr = -1; dr <= 1; ++dr)
                for (long dc = -1; dc <= 1; ++dc) {
                    const long rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= rows || cc >= cols || !m(rr, cc)) edge = true;
                }
            if (edge) pts.emplace_back(static_cast<double>(r), static_cast<double>(c));
        }
    return pts;
}

double brute_hd95(const Mask& a, const Mask& b) {
    const auto pa = edge_points(a), pb = edge_points(b);
    std::vector<double> d;
    auto directed = [&](const auto& from, const auto& to) {
        for (auto [r, c] : from) {
            double best = 1e300;
            for (auto [r2, c2] : to) best = std::min(best, std::sqrt((r - r2) * (r - r2) + (c - c2) * (c - c2)));
            d.push_back(best);
        }
    };
    directed(pa, pb);
    directed(pb, pa);
    std::sort(d.begin(), d.end());
    const double pos = 0.95 * static_cast<double>(d.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

Mask random_blob(std::mt19937_64& rng, std::size_t size) {
    std::uniform_int_distribution<std::size_t> pos(0, size - 1);
    std::uniform_int_distribution<int> radius(0, 3);
    Mask m(size, size, 0);
    const int blobs = 1 + static_cast<int>(pos(rng) % 3);
    for (int b = 0; b < blobs; ++b) {
        const auto cr = static_cast<long>(pos(rng)), cc = static_cast<long>(pos(rng));
        const long rad = radius(rng);
        for (long r = 0; r < static_cast<long>(size); ++r)
            for (long c = 0; c < static_cast<long>(size); ++c)
                if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= rad * rad) m(r, c) = 1;
    }
    return m;
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.steps_per_epoch = 3;
    cfg.batch_size = 4;
    cfg.k = 4;
    cfg.seed = 11;
    cfg.lr = 1e-3;
    return cfg;
}

const Dataset& small_data() {
    static const Dataset data = gen_synthetic(80, 16, 21);
    return data;
}

const RunArtifacts& small_run() {
    static const RunArtifacts run = train(small_config(), small_data());
    return run;
}

}  // namespace

// ---- data ----

TEST(Pgm, RoundTripAndComments) {
    const auto dir = scratch("pgm");
    Grid<std::uint8_t> px(3, 4, 0);
    for (std::size_t i = 0; i < px.data.size(); ++i) px.data[i] = static_cast<std::uint8_t>(i * 20);
    write_pgm(dir / "a.pgm", px);
    EXPECT_EQ(read_pgm(dir / "a.pgm"), px);

    std::ofstream(dir / "b.pgm", std::ios::binary) << "P5\n# comment\n2 1\n255\n" << '\x07' << '\xff';
    const auto b = read_pgm(dir / "b.pgm");
    ASSERT_EQ(b.rows, 1u);
    ASSERT_EQ(b.cols, 2u);
    EXPECT_EQ(b.data[0], 7);
    EXPECT_EQ(b.data[1], 255);

    std::ofstream(dir / "c.pgm", std::ios::binary) << "P2\n1 1\n255\n0\n";
    EXPECT_THROW(read_pgm(dir / "c.pgm"), ValidationError);
    std::ofstream(dir / "d.pgm", std::ios::binary) << "P5\n4 4\n255\n" << "abc";
    EXPECT_THROW(read_pgm(dir / "d.pgm"), ValidationError);
}

TEST(Synthetic, Deterministic) {
    const auto a = gen_synthetic(100, 32, 7);
    const auto b = gen_synthetic(100, 32, 7);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].mask, b[i].mask);
        EXPECT_EQ(a[i].label, b[i].label);
        EXPECT_EQ(a[i].case_id, b[i].case_id);
    }
    const auto c = gen_synthetic(100, 32, 8);
    EXPECT_NE(a[0].image, c[0].image);
}

TEST(Synthetic, PointRule) {
    NoduleCues tr5{1.3, -0.3, 0.2, 0.5, 0.12};
    EXPECT_EQ(risk_points(tr5), 7);
    EXPECT_EQ(label_from_points(risk_points(tr5)), 4);
    NoduleCues tr1{0.8, 0.2, 0.02, 1.4, 0.03};
    EXPECT_EQ(label_from_points(risk_points(tr1)), 0);
    // irregular amplitude alone does not count when the margin is blurred
    NoduleCues blurred{0.8, 0.2, 0.2, 1.4, 0.03};
    EXPECT_EQ(risk_points(blurred), 0);
    const int expected[] = {0, 1, 1, 2, 3, 3, 4, 4};
    for (int p = 0; p <= 7; ++p) EXPECT_EQ(label_from_points(p), expected[p]) << p;
}

TEST(Synthetic, LabelsFollowCues) {
    for (const auto& item : gen_synthetic_detailed(200, 32, 4)) {
        EXPECT_EQ(item.sample.label, label_from_points(risk_points(item.cues)));
        EXPECT_GT(count_foreground(item.sample.mask), features::kMinForeground);
        for (double v : item.sample.image.data) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(Synthetic, EveryClassRepresented) {
    const auto data = gen_synthetic(2000, 32, 1);
    const auto counts = class_counts(data);
    for (std::size_t c = 0; c < counts.size(); ++c) EXPECT_GE(counts[c], 100u) << "TR" << c + 1;
}

TEST(Synthetic, RejectsBadArguments) {
    EXPECT_THROW(gen_synthetic(100, 30, 0), ValidationError);
    EXPECT_THROW(gen_synthetic(9, 32, 0), ValidationError);
}

TEST(DatasetIo, RoundTrip) {
    const auto dir = scratch("roundtrip");
    const auto data = gen_synthetic(12, 16, 2);
    save_dataset(dir, data);
    const auto back = load_dataset(dir);
    ASSERT_EQ(back.size(), data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        EXPECT_EQ(back[i].case_id, data[i].case_id);
        EXPECT_EQ(back[i].filename, data[i].filename);
        EXPECT_EQ(back[i].image, data[i].image);
        EXPECT_EQ(back[i].mask, data[i].mask);
        EXPECT_EQ(back[i].label, data[i].label);
    }
}

TEST(DatasetIo, LabelOutOfRangeNamesRow) {
    const auto dir = scratch("badlabel");
    save_dataset(dir, gen_synthetic(10, 16, 2));
    std::ifstream in(dir / "labels.csv");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    in.close();
    lines[3] = lines[3].substr(0, lines[3].find(',')) + ",6";
    std::ofstream out(dir / "labels.csv");
    for (const auto& l : lines) out << l << '\n';
    out.close();
    const auto msg = error_of([&] { load_dataset(dir); });
    EXPECT_NE(msg.find("row 4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("tirads 6"), std::string::npos) << msg;
}

TEST(DatasetIo, MaskShapeMismatchNamesBoth) {
    const auto dir = scratch("badmask");
    const auto data = gen_synthetic(10, 16, 2);
    save_dataset(dir, data);
    write_pgm(dir / "masks" / data[0].filename, Grid<std::uint8_t>(8, 12, 255));
    const auto msg = error_of([&] { load_dataset(dir); });
    EXPECT_NE(msg.find("8x12"), std::string::npos) << msg;
    EXPECT_NE(msg.find("16x16"), std::string::npos) << msg;
}

TEST(DatasetIo, MissingPieces) {
    const auto dir = scratch("missing");
    const auto data = gen_synthetic(10, 16, 2);
    save_dataset(dir, data);
    fs::remove(dir / "masks" / data[1].filename);
    EXPECT_NE(error_of([&] { load_dataset(dir); }).find("missing mask"), std::string::npos);
    save_dataset(dir, data);
    fs::remove(dir / "images" / data[1].filename);
    EXPECT_NE(error_of([&] { load_dataset(dir); }).find(data[1].filename), std::string::npos);
    EXPECT_THROW(load_dataset(dir / "nowhere"), ValidationError);
}

TEST(DatasetIo, MaskBinarizedAt128) {
    const auto dir = scratch("binarize");
    const auto data = gen_synthetic(10, 16, 2);
    save_dataset(dir, data);
    Grid<std::uint8_t> m(16, 16, 127);
    m(0, 0) = 128;
    write_pgm(dir / "masks" / data[0].filename, m);
    const auto back = load_dataset(dir);
    EXPECT_EQ(count_foreground(back[0].mask), 1u);
    EXPECT_EQ(back[0].mask(0, 0), 1);
}

TEST(ClassWeights, Examples) {
    const std::size_t thyroid[] = {70, 942, 3050, 2949, 2530};
    const double expected[] = {27.26, 2.026, 0.6257, 0.6471, 0.7543};
    const auto w = class_weights(thyroid);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(w[c], expected[c], 1e-3);

    const std::size_t skewed[] = {1, 1, 1, 1, 96};
    const auto w2 = class_weights(skewed);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(w2[c], 20.0, 1e-4);
    EXPECT_NEAR(w2[4], 0.2083, 1e-4);

    const std::size_t equal[] = {7, 7, 7, 7, 7};
    for (double v : class_weights(equal)) EXPECT_EQ(v, 1.0);

    const std::size_t zero[] = {1, 0, 1, 1, 1};
    EXPECT_THROW(class_weights(zero), ValidationError);
}

TEST(Kfold, SizesPartitionDeterminism) {
    std::vector<std::string> ids;
    for (int i = 0; i < 9; ++i) ids.push_back("case" + std::to_string(i));
    const auto a = kfold_split(ids, 3, 5);
    EXPECT_EQ(a, kfold_split(ids, 3, 5));
    std::array<int, 3> sizes{};
    for (const auto& [id, f] : a) sizes.at(static_cast<std::size_t>(f))++;
    EXPECT_EQ(sizes, (std::array<int, 3>{3, 3, 3}));
    EXPECT_EQ(a.size(), 9u);

    ids.push_back("case0");  // repeated images of one case stay together
    ids.push_back("case9");
    const auto b = kfold_split(ids, 4, 1);
    EXPECT_EQ(b.size(), 10u);
    std::array<int, 4> s4{};
    for (const auto& [id, f] : b) s4.at(static_cast<std::size_t>(f))++;
    EXPECT_LE(*std::max_element(s4.begin(), s4.end()) - *std::min_element(s4.begin(), s4.end()), 1);

    EXPECT_THROW(kfold_split(std::span(ids).first(2), 3, 0), ValidationError);
    EXPECT_THROW(kfold_split(ids, 1, 0), ValidationError);
}

// ---- metrics ----

TEST(Metrics, PerfectPrediction) {
    const auto m = mask_from(8, 8, {{2, 2}, {2, 3}, {3, 2}, {3, 3}, {4, 4}});
    EXPECT_EQ(dice_score(m, m), 1.0);
    EXPECT_EQ(iou_score(m, m), 1.0);
    EXPECT_EQ(hd95(m, m), 0.0);
    const std::vector<int> labels = {0, 1, 2, 3, 4, 2, 1};
    const auto r = classification_report(labels, labels);
    EXPECT_EQ(r.precision_macro, 1.0);
    EXPECT_EQ(r.recall_macro, 1.0);
    EXPECT_EQ(r.f1_macro, 1.0);
}

TEST(Metrics, TwoPixelsFiveApart) {
    const auto a = mask_from(12, 12, {{3, 2}});
    const auto b = mask_from(12, 12, {{3, 7}});
    EXPECT_EQ(hd95(a, b), 5.0);
    EXPECT_EQ(hd95(b, a), 5.0);
}

TEST(Metrics, Hd95MatchesBruteForce) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const Mask a = random_blob(rng, 12), b = random_blob(rng, 12);
        EXPECT_NEAR(hd95(a, b), brute_hd95(a, b), 1e-9) << trial;
    }
}

TEST(Metrics, Hd95EmptyConventions) {
    const Mask empty(6, 8, 0);
    const auto one = mask_from(6, 8, {{1, 1}});
    EXPECT_EQ(hd95(empty, empty), 0.0);
    EXPECT_EQ(hd95(empty, one), 10.0);
    EXPECT_EQ(hd95(one, empty), 10.0);
}

TEST(Metrics, DiceIouExamples) {
    const auto a = mask_from(4, 4, {{0, 0}, {0, 1}});
    const auto b = mask_from(4, 4, {{0, 1}, {0, 2}});
    EXPECT_DOUBLE_EQ(dice_score(a, b), 0.5);
    EXPECT_DOUBLE_EQ(iou_score(a, b), 1.0 / 3.0);
    EXPECT_THROW(dice_score(a, Mask(3, 4, 0)), ValidationError);
}

TEST(Metrics, EdtMatchesBruteForce) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Mask m = random_blob(rng, 10);
        const auto d = squared_distance_transform(m);
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 10; ++c) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t r2 = 0; r2 < 10; ++r2)
                    for (std::size_t c2 = 0; c2 < 10; ++c2)
                        if (m(r2, c2)) {
                            const double dr = double(r) - double(r2), dc = double(c) - double(c2);
                            best = std::min(best, dr * dr + dc * dc);
                        }
                ASSERT_EQ(d[r * 10 + c], best);
            }
    }
}

TEST(Metrics, PercentileInterpolates) {
    EXPECT_DOUBLE_EQ(percentile({4.0, 1.0, 3.0, 2.0}, 0.5), 2.5);
    EXPECT_DOUBLE_EQ(percentile({0.0, 10.0}, 0.95), 9.5);
    EXPECT_DOUBLE_EQ(percentile({7.0}, 0.95), 7.0);
}

TEST(Metrics, ClassificationHand) {
    const std::vector<int> truth = {0, 0, 1, 1, 2};
    const std::vector<int> pred = {0, 1, 1, 1, 0};
    const auto r = classification_report(truth, pred);
    EXPECT_DOUBLE_EQ(r.precision[0], 0.5);
    EXPECT_DOUBLE_EQ(r.recall[0], 0.5);
    EXPECT_DOUBLE_EQ(r.precision[1], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.recall[1], 1.0);
    EXPECT_DOUBLE_EQ(r.f1[1], 0.8);
    EXPECT_EQ(r.f1[2], 0.0);
    EXPECT_EQ(r.support[1], 2u);
    EXPECT_DOUBLE_EQ(r.f1_macro, (0.5 + 0.8 + 0.0) / 3.0);
    // always TR2: P = 2/5, R = 1 for class 1, zero elsewhere
    EXPECT_DOUBLE_EQ(majority_baseline_f1(truth, 1), (4.0 / 7.0) / 3.0);
}

// ---- optimizer and checkpoint ----

TEST(AdamW, MatchesHandComputation) {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    std::vector<Tensor> p = {Tensor({2}, {1.0, -2.0})};
    AdamW opt(cfg, p);
    const double g1[] = {0.5, -1.0}, g2[] = {0.2, 0.3};
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
    for (int t = 1; t <= 2; ++t) {
        const double* g = t == 1 ? g1 : g2;
        std::vector<Tensor> grads = {Tensor({2}, {g[0], g[1]})};
        opt.step(p, grads);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * x[i]);
            EXPECT_NEAR(p[0][static_cast<std::size_t>(i)], x[i], 1e-15);
        }
    }
    std::vector<Tensor> bad = {Tensor({2}, {std::nan(""), 0.0})};
    EXPECT_THROW(opt.step(p, bad), NumericalError);
}

TEST(Checkpoint, RoundTripIsFloat32) {
    const auto dir = scratch("ckpt");
    const Tensor a({2, 3}, {0.1, -1.5, 3.0, 1e-3, 7.25, -0.3});
    const Tensor b({4}, {1.0, 2.0, 3.0, 4.0});
    write_checkpoint(dir / "c.bin", {{"a", a}, {"bee", b}});
    const auto back = read_checkpoint(dir / "c.bin");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].name, "a");
    EXPECT_EQ(back[0].value.shape(), a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(back[0].value[i], static_cast<double>(static_cast<float>(a[i])));
    EXPECT_EQ(back[1].name, "bee");
    EXPECT_EQ(back[1].value[3], 4.0);

    std::ifstream in(dir / "c.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    EXPECT_EQ(bytes.substr(0, 9), "RLARCKPT1");
    EXPECT_EQ(bytes.size(), 9u + 4 + (2 + 1 + 1 + 8 + 24) + (2 + 3 + 1 + 4 + 16));

    std::ofstream(dir / "bad.bin", std::ios::binary) << "NOTACKPT1" << bytes.substr(9);
    EXPECT_NE(error_of([&] { read_checkpoint(dir / "bad.bin"); }).find("magic"), std::string::npos);
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    EXPECT_NE(error_of([&] { read_checkpoint(dir / "short.bin"); }).find("truncated"), std::string::npos);
}

// ---- config ----

TEST(TrainConfigText, ParseFormatRoundTrip) {
    TrainConfig cfg;
    cfg.lambda_clin = 0.25;
    cfg.rlar.lambda_adv = 0.0;
    cfg.rlar.tasks = {regularizer::Task::seg, regularizer::Task::clin};
    cfg.rlar.hook = regularizer::HookMode::mean_last3;
    cfg.rlar_create_graph = false;
    cfg.epochs = 7;
    cfg.seed = 99;
    cfg.data = "some/dir";
    const TrainConfig back = parse_config(format_config(cfg));
    EXPECT_EQ(format_config(back), format_config(cfg));
    EXPECT_EQ(back.rlar.tasks, cfg.rlar.tasks);
    EXPECT_EQ(back.lambda_clin, 0.25);
}

TEST(TrainConfigText, CommentsAndErrors) {
    const auto cfg = parse_config("# header\n\nepochs = 4   # trailing\n  lr=0.5\n");
    EXPECT_EQ(cfg.epochs, 4u);
    EXPECT_EQ(cfg.lr, 0.5);
    auto msg = error_of([] { parse_config("epochs = 4\nbogus = 1\n"); });
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("bogus"), std::string::npos) << msg;
    EXPECT_THROW(parse_config("epochs = four\n"), ValidationError);
    EXPECT_THROW(parse_config("epochs = 4\nepochs = 5\n"), ValidationError);
    EXPECT_THROW(parse_config("just words\n"), ValidationError);
    EXPECT_THROW(parse_config("rlar_create_graph = maybe\n"), ValidationError);
    EXPECT_NE(error_of([] { load_config("/nonexistent/cfg.txt"); }).find("/nonexistent/cfg.txt"), std::string::npos);
}

TEST(TrainConfigText, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.lambda_cls = -1.0;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.rlar.tasks = {regularizer::Task::seg};
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = TrainConfig{};
    cfg.fold = 5;
    EXPECT_THROW(cfg.validate(), ValidationError);
}

// ---- training ----

TEST(Training, LogShapeAndDecomposition) {
    const auto& run = small_run();
    const auto& cfg = run.config;
    ASSERT_EQ(run.log.size(), cfg.epochs);
    ASSERT_EQ(run.steps.size(), cfg.epochs * cfg.steps_per_epoch);
    for (const auto& s : run.steps) {
        const double sum = cfg.lambda_seg * s.l_seg + cfg.lambda_cls * s.l_cls + cfg.lambda_clin * s.l_clin + s.l_rlar;
        EXPECT_NEAR(s.l_total, sum, 1e-9);
        EXPECT_GE(s.l_rlar, 0.0);
        EXPECT_LE(s.l_rlar, cfg.rlar.lambda_adv);
        for (double c : s.cos) {
            EXPECT_GE(c, 0.0);
            EXPECT_LE(c, 1.0);
        }
    }
    EXPECT_GE(run.best_epoch, 1u);
    EXPECT_LE(run.best_epoch, cfg.epochs);
    const auto& best = run.selection[run.best_epoch - 1];
    for (const auto& e : run.selection) {
        EXPECT_LE(e.score, best.score);
        EXPECT_EQ(e.score, 0.5 * (e.val_dice + e.val_macro_f1));
    }
}

TEST(Training, DegenerateWeightsGiveSegOnly) {
    TrainConfig cfg = small_config();
    cfg.epochs = 1;
    cfg.lambda_cls = 0.0;
    cfg.lambda_clin = 0.0;
    cfg.rlar.lambda_adv = 0.0;
    const auto run = train(cfg, small_data());
    for (const auto& s : run.steps) {
        EXPECT_EQ(s.l_total, s.l_seg);
        EXPECT_EQ(s.l_rlar, 0.0);
        // diagnostics are populated even without the penalty
        for (double c : s.cos) EXPECT_GT(c, 0.0);
    }
}

TEST(Training, Deterministic) {
    TrainConfig cfg = small_config();
    cfg.epochs = 2;
    const auto a = train(cfg, small_data());
    const auto b = train(cfg, small_data());
    std::ostringstream la, lb;
    write_train_log(la, a.log);
    write_train_log(lb, b.log);
    EXPECT_EQ(la.str(), lb.str());
    EXPECT_EQ(metrics_json(a.val_metrics), metrics_json(b.val_metrics));
    for (std::size_t i = 0; i < a.state.params.size(); ++i) {
        const auto va = a.state.params[i].values(), vb = b.state.params[i].values();
        ASSERT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
    }
}

TEST(Training, CreateGraphOffMatchesPenaltyFreeUpdates) {
    // detached directions: the penalty is logged but moves no parameter
    TrainConfig on = small_config(), off = small_config(), none = small_config();
    on.epochs = off.epochs = none.epochs = 1;
    off.rlar_create_graph = false;
    none.rlar.lambda_adv = 0.0;
    const auto r_off = train(off, small_data());
    const auto r_none = train(none, small_data());
    const auto r_on = train(on, small_data());
    EXPECT_GT(r_off.steps.back().l_rlar, 0.0);
    double diff_off = 0.0, diff_on = 0.0;
    for (std::size_t i = 0; i < r_none.state.params.size(); ++i)
        for (std::size_t j = 0; j < r_none.state.params[i].size(); ++j) {
            diff_off = std::max(diff_off, std::abs(r_off.state.params[i][j] - r_none.state.params[i][j]));
            diff_on = std::max(diff_on, std::abs(r_on.state.params[i][j] - r_none.state.params[i][j]));
        }
    EXPECT_LT(diff_off, 1e-12);
    EXPECT_GT(diff_on, 1e-9);
}

TEST(Training, StandardizationUsesTrainSplitOnly) {
    const auto& run = small_run();
    const auto split = split_by_fold(small_data(), run.folds, run.config.fold);
    Dataset train_only, everything = small_data();
    for (auto i : split.train) train_only.push_back(small_data()[i]);
    const auto st_train = clinical_stats(train_only);
    const auto st_all = clinical_stats(everything);
    bool differs = false;
    for (std::size_t k = 0; k < features::kFeatureCount; ++k) {
        EXPECT_EQ(run.state.clinical_stats.mean[k], static_cast<double>(static_cast<float>(st_train.mean[k])));
        EXPECT_EQ(run.state.clinical_stats.std[k], static_cast<double>(static_cast<float>(st_train.std[k])));
        differs = differs || st_train.mean[k] != st_all.mean[k];
    }
    EXPECT_TRUE(differs);
}

TEST(Training, SplitAndBaseline) {
    const auto& run = small_run();
    const auto split = split_by_fold(small_data(), run.folds, run.config.fold);
    EXPECT_EQ(split.train.size() + split.val.size(), small_data().size());
    std::set<std::string> val_ids;
    for (auto i : split.val) val_ids.insert(small_data()[i].case_id);
    EXPECT_EQ(std::vector<std::string>(val_ids.begin(), val_ids.end()), run.val_cases);
    Dataset train_only;
    for (auto i : split.train) train_only.push_back(small_data()[i]);
    EXPECT_EQ(run.class_counts, class_counts(train_only));
    const auto expected_w = class_weights(run.class_counts);
    EXPECT_EQ(run.class_weights, expected_w);
    std::vector<int> val_labels;
    for (auto i : split.val) val_labels.push_back(small_data()[i].label);
    EXPECT_EQ(run.majority_baseline_f1, majority_baseline_f1(val_labels, run.majority_class));
}

TEST(Training, RejectsBadInput) {
    TrainConfig cfg = small_config();
    cfg.image_size = 32;
    EXPECT_THROW(train(cfg, small_data()), ValidationError);
    Dataset data = small_data();
    for (auto& smp : data) smp.mask = Mask(16, 16, 0);
    cfg = small_config();
    const auto msg = error_of([&] { train(cfg, data); });
    EXPECT_NE(msg.find("foreground"), std::string::npos) << msg;
}

TEST(Persistence, SaveLoadEvaluateBitIdentical) {
    const auto dir = scratch("run");
    const auto& run = small_run();
    save_run(dir, run);
    for (const char* f : {"checkpoint.bin", "run.json", "train_log.csv", "conflict.csv", "val_metrics.json"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto loaded = load_run(dir);
    EXPECT_EQ(format_config(loaded.config), format_config(run.config));
    EXPECT_EQ(loaded.class_weights[0], static_cast<double>(static_cast<float>(run.class_weights[0])));
    EXPECT_EQ(loaded.val_cases, run.val_cases);

    Dataset val;
    const std::set<std::string> keep(run.val_cases.begin(), run.val_cases.end());
    for (const auto& s : small_data())
        if (keep.count(s.case_id)) val.push_back(s);
    EXPECT_EQ(metrics_json(evaluate(loaded.state, val)), metrics_json(run.val_metrics));

    std::ifstream log_in(dir / "train_log.csv");
    const auto log = read_train_log(log_in);
    ASSERT_EQ(log.size(), run.log.size());
    for (std::size_t e = 0; e < log.size(); ++e) {
        EXPECT_EQ(log[e].l_total, run.log[e].l_total);
        EXPECT_EQ(log[e].cos, run.log[e].cos);
        EXPECT_EQ(log[e].val_macro_f1, run.log[e].val_macro_f1);
    }
}

TEST(Persistence, LogHeaderAndConflictFile) {
    std::vector<EpochLog> log(2);
    log[0].epoch = 1;
    log[1].epoch = 2;
    log[1].cos = {0.1, 0.2, 0.3};
    std::ostringstream out;
    write_train_log(out, log);
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')),
              "epoch,L_total,L_seg,L_cls,L_clin,L_rlar,cos_seg_cls,cos_seg_clin,cos_cls_clin,val_dice,val_macro_f1");
    std::ostringstream conflict;
    write_conflict_log(conflict, log);
    EXPECT_NE(conflict.str().find("2,cls_clin,0.29999999999999999"), std::string::npos) << conflict.str();
    std::istringstream bad("epoch,L_total\n1,2\n");
    EXPECT_THROW(read_train_log(bad), ValidationError);
}

TEST(Persistence, LoadRunErrors) {
    const auto dir = scratch("emptyrun");
    EXPECT_NE(error_of([&] { load_run(dir); }).find("run.json"), std::string::npos);
}

// ---- ablation ----

TEST(Ablation, HandCase) {
    model::ModelState st;
    st.names = {"classifier.weight"};
    st.params = {Tensor({2, 2}, {1, 2, 3, 4})};
    const auto zeroed = zero_feature_column(st, 0);
    const Tensor h({1, 2}, {0.5, 1.0});
    const Tensor before = ad::matmul(h, ad::transpose(st.params[0]));
    const Tensor after = ad::matmul(h, ad::transpose(zeroed.params[0]));
    EXPECT_EQ(after[0] - before[0], -0.5);
    EXPECT_EQ(after[1] - before[1], -1.5);
    // the original is untouched
    EXPECT_EQ(st.params[0][0], 1.0);
    EXPECT_THROW(zero_feature_column(st, 2), ValidationError);
}

TEST(Ablation, DeadChannelHasZeroDeltas) {
    model::ModelState st = small_run().state;
    const std::size_t k = 4;
    Tensor& w2 = st.at("head2.weight");
    Tensor& b2 = st.at("head2.bias");
    std::vector<double> wv(w2.values().begin(), w2.values().end()), bv(b2.values().begin(), b2.values().end());
    for (std::size_t j = 0; j < w2.dim(1); ++j) wv[k * w2.dim(1) + j] = 0.0;
    bv[k] = 0.0;
    w2 = Tensor(w2.shape(), wv);
    b2 = Tensor(b2.shape(), bv);
    const auto rows = ablate_features(st, small_data());
    ASSERT_EQ(rows.size(), features::kFeatureCount);
    EXPECT_EQ(rows[k].feature, std::string(features::kFeatureNames[k]));
    EXPECT_EQ(rows[k].delta_precision, 0.0);
    EXPECT_EQ(rows[k].delta_recall, 0.0);
    EXPECT_EQ(rows[k].delta_f1, 0.0);
    std::ostringstream out;
    write_ablation_csv(out, rows);
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "feature,delta_precision,delta_recall,delta_f1");
}

TEST(Ablation, LogitShiftIdentity) {
    const auto& st = small_run().state;
    const auto x = image_batch(std::span(small_data()).first(10));
    const auto full = model::predict(st, x);
    const Tensor& w = st.params[st.index_of("classifier.weight")];
    for (std::size_t k : {0u, 6u, 12u}) {
        const auto abl = model::predict(zero_feature_column(st, k), x);
        for (std::size_t b = 0; b < 10; ++b)
            for (std::size_t c = 0; c < 5; ++c) {
                const double expected = -w[c * model::kEmbeddingSize + k] * full.embedding[b * model::kEmbeddingSize + k];
                EXPECT_NEAR(abl.logits[b * 5 + c] - full.logits[b * 5 + c], expected, 1e-9);
            }
    }
}
