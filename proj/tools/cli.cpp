#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rlar/ad/gradcheck.hpp"
#include "rlar/errors.hpp"
#include "rlar/features.hpp"
#include "rlar/harness/dataset.hpp"
#include "rlar/harness/train.hpp"

namespace rlar::cli {
namespace fs = std::filesystem;
using namespace rlar::harness;

namespace {

constexpr std::size_t kConflictTail = 10;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Mask read_mask(const fs::path& path) {
    const auto px = read_pgm(path);
    Mask m(px.rows, px.cols, 0);
    for (std::size_t i = 0; i < px.data.size(); ++i) m.data[i] = px.data[i] >= 128 ? 1 : 0;
    return m;
}

// Samples of `data` restricted to the run's validation cases.
Dataset select_split(const Dataset& data, const LoadedRun& run, const std::string& split) {
    if (split == "all") return data;
    const std::set<std::string> keep(run.val_cases.begin(), run.val_cases.end());
    Dataset out;
    for (const auto& s : data)
        if (keep.count(s.case_id)) out.push_back(s);
    if (out.empty()) throw ValidationError("no validation cases of the run were found in the dataset");
    return out;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw ValidationError("cannot write " + path.string());
    return f;
}

struct GenArgs {
    std::string out;
    std::size_t n = 640;
    std::size_t size = 32;
    std::uint64_t seed = 0;
};

struct FeatureArgs {
    std::string image, mask;
    bool json = false;
};

struct TrainArgs {
    std::string config, out, data;
    std::size_t jobs = 1;
    std::vector<int> folds;
    std::optional<std::uint64_t> seed;
};

struct RunArgs {
    std::string run, data, out, split = "all";
};

struct GradcheckArgs {
    std::uint64_t seed = 0;
    int trials = 20;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    const Dataset data = gen_synthetic(a.n, a.size, a.seed);
    save_dataset(a.out, data);
    const auto counts = class_counts(data);
    out << "wrote " << data.size() << " samples (" << a.size << "x" << a.size << ") to " << a.out << "; class counts";
    for (auto c : counts) out << ' ' << c;
    out << '\n';
    return 0;
}

int cmd_features(const FeatureArgs& a, std::ostream& out) {
    const Image img = to_image(read_pgm(a.image));
    const Mask mask = read_mask(a.mask);
    const auto f = features::extract_features(img, mask);
    if (a.json) {
        nlohmann::ordered_json j;
        for (std::size_t k = 0; k < features::kFeatureCount; ++k) j[std::string(features::kFeatureNames[k])] = f[k];
        out << j.dump(2) << '\n';
    } else {
        const std::pair<std::string, features::FeatureVector> row{fs::path(a.image).filename().string(), f};
        features::write_feature_csv(out, std::span(&row, 1));
    }
    return 0;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    std::string data_dir = a.data.empty() ? cfg.data : a.data;
    if (data_dir.empty()) throw ValidationError("train: no dataset; pass --data or set data in the config");
    cfg.data = data_dir;
    cfg.validate();
    const Dataset data = load_dataset(data_dir);
    std::vector<int> folds = a.folds.empty() ? std::vector<int>{cfg.fold} : a.folds;
    const auto runs = train_folds(cfg, data, folds, a.jobs);
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const fs::path dir = folds.size() == 1 ? fs::path(a.out) : fs::path(a.out) / ("fold_" + std::to_string(folds[i]));
        save_run(dir, runs[i]);
        const auto& r = runs[i];
        out << "fold " << folds[i] << ": best epoch " << r.best_epoch << ", val dice " << fmt(r.val_metrics.dice)
            << ", val macro-F1 " << fmt(r.val_metrics.classification.f1_macro) << ", majority baseline "
            << fmt(r.majority_baseline_f1) << " -> " << dir.string() << '\n';
    }
    return 0;
}

int cmd_eval(const RunArgs& a, std::ostream& out) {
    const LoadedRun run = load_run(a.run);
    const Dataset data = select_split(load_dataset(a.data), run, a.split);
    const MetricsReport report = evaluate(run.state, data);
    const fs::path dest = a.out.empty() ? fs::path(a.run) / "metrics.json" : fs::path(a.out);
    open_out(dest) << metrics_json(report);
    out << "dice " << fmt(report.dice) << ", iou " << fmt(report.iou) << ", hd95 " << fmt(report.hd95) << ", macro-F1 "
        << fmt(report.classification.f1_macro) << " on " << report.samples << " samples -> " << dest.string() << '\n';
    return 0;
}

int cmd_ablate(const RunArgs& a, std::ostream& out) {
    const LoadedRun run = load_run(a.run);
    const Dataset data = select_split(load_dataset(a.data), run, a.split);
    const auto rows = ablate_features(run.state, data);
    const fs::path dest = a.out.empty() ? fs::path(a.run) / "ablation.csv" : fs::path(a.out);
    auto f = open_out(dest);
    write_ablation_csv(f, rows);
    write_ablation_csv(out, rows);
    return 0;
}

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
    ad::GradcheckOptions opts;
    opts.seed = a.seed;
    opts.trials = a.trials;
    const auto checks = ad::run_gradcheck_suite(opts);
    bool ok = true;
    for (const auto& c : checks) {
        out << c.name << " max_err=" << fmt(c.max_error) << " tol=" << fmt(c.tolerance) << (c.passed ? " ok" : " FAIL") << '\n';
        ok = ok && c.passed;
    }
    if (!ok) {
        err << "gradcheck: failures detected\n";
        return 2;
    }
    return 0;
}

int cmd_conflict(const RunArgs& a, std::ostream& out) {
    const fs::path path = fs::path(a.run) / "train_log.csv";
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    const auto log = read_train_log(in);
    if (log.empty()) throw ValidationError(path.string() + ": no epochs");
    out << "epoch,cos_seg_cls,cos_seg_clin,cos_cls_clin,mean\n";
    for (const auto& r : log)
        out << r.epoch << ',' << fmt(r.cos[0]) << ',' << fmt(r.cos[1]) << ',' << fmt(r.cos[2]) << ','
            << fmt((r.cos[0] + r.cos[1] + r.cos[2]) / 3.0) << '\n';
    const std::size_t tail = std::min(kConflictTail, log.size());
    std::array<double, 3> m{};
    for (std::size_t i = log.size() - tail; i < log.size(); ++i)
        for (std::size_t p = 0; p < 3; ++p) m[p] += log[i].cos[p] / static_cast<double>(tail);
    out << "final " << tail << " epochs:";
    for (std::size_t p = 0; p < 3; ++p) out << ' ' << kPairNames[p] << '=' << fmt(m[p]);
    out << " mean=" << fmt((m[0] + m[1] + m[2]) / 3.0) << '\n';
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multitask nodule segmentation and risk grading with representation-level gradient alignment", "rlar"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--n", gen.n, "Number of samples")->check(CLI::Range(10, 1000000));
    gen_cmd->add_option("--size", gen.size, "Image side in pixels (multiple of 16)");
    gen_cmd->add_option("--seed", gen.seed, "Random seed");

    FeatureArgs feat;
    auto* feat_cmd = app.add_subcommand("features", "Print the 13 clinical features of one image");
    feat_cmd->add_option("--image", feat.image, "Image PGM")->required();
    feat_cmd->add_option("--mask", feat.mask, "Mask PGM")->required();
    feat_cmd->add_flag("--json", feat.json, "Print JSON instead of CSV");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", tr.config, "key = value config file")->required();
    train_cmd->add_option("--out", tr.out, "Run directory")->required();
    train_cmd->add_option("--data", tr.data, "Dataset directory (overrides the config)");
    train_cmd->add_option("--jobs", tr.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);
    train_cmd->add_option("--folds", tr.folds, "Folds to train (default: the config's fold)")->delimiter(',');
    train_cmd->add_option("--seed", tr.seed, "Override the config seed");

    RunArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run");
    eval_cmd->add_option("--run", ev.run, "Run directory")->required();
    eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
    eval_cmd->add_option("--split", ev.split, "all or val (the run's validation cases)")
        ->check(CLI::IsMember({"all", "val"}));
    eval_cmd->add_option("--out", ev.out, "Output path (default RUN/metrics.json)");

    RunArgs ab;
    auto* ablate_cmd = app.add_subcommand("ablate-features", "Zero each clinical classifier column in turn");
    ablate_cmd->add_option("--run", ab.run, "Run directory")->required();
    ablate_cmd->add_option("--data", ab.data, "Dataset directory")->required();
    ablate_cmd->add_option("--split", ab.split, "all or val")->check(CLI::IsMember({"all", "val"}));
    ablate_cmd->add_option("--out", ab.out, "Output path (default RUN/ablation.csv)");

    GradcheckArgs gc;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference and double-backward checks of every op");
    grad_cmd->add_option("--seed", gc.seed, "Random seed");
    grad_cmd->add_option("--trials", gc.trials, "Random inputs per op")->check(CLI::Range(1, 100000));

    RunArgs cr;
    auto* conflict_cmd = app.add_subcommand("conflict-report", "Per-epoch pairwise |cos| at the bottleneck");
    conflict_cmd->add_option("--run", cr.run, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (*gen_cmd) return cmd_gen(gen, out);
        if (*feat_cmd) return cmd_features(feat, out);
        if (*train_cmd) return cmd_train(tr, out);
        if (*eval_cmd) return cmd_eval(ev, out);
        if (*ablate_cmd) return cmd_ablate(ab, out);
        if (*grad_cmd) return cmd_gradcheck(gc, out, err);
        if (*conflict_cmd) return cmd_conflict(cr, out);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

}  // namespace rlar::cli
