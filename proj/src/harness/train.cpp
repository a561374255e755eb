#include "rlar/harness/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rlar/ad/graph.hpp"
#include "rlar/ad/ops.hpp"
#include "rlar/errors.hpp"
#include "rlar/features.hpp"
#include "rlar/harness/checkpoint.hpp"
#include "rlar/harness/optimizer.hpp"

namespace rlar::harness {
namespace fs = std::filesystem;
using ad::Tensor;
using json = nlohmann::json;
using regularizer::Task;

namespace {

constexpr std::size_t kEvalChunk = 32;

std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

template <class T>
T parse_number(const std::string& key, const std::string& value, const std::string& where) {
    T out{};
    const char* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end || value.empty())
        throw ValidationError(where + ": invalid value '" + value + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& value, const std::string& where) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ValidationError(where + ": invalid value '" + value + "' for " + key + " (expected true or false)");
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Index of the unordered pair {a, b} in kPairNames order.
std::size_t pair_slot(Task a, Task b) {
    if (a > b) std::swap(a, b);
    if (a == Task::seg && b == Task::cls) return 0;
    if (a == Task::seg && b == Task::clin) return 1;
    return 2;
}

struct Batch {
    Tensor images;
    Tensor masks;
    Tensor targets;
    std::vector<int> labels;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> idx,
                 const std::vector<features::FeatureVector>& targets) {
    const std::size_t h = data[idx[0]].image.rows, w = data[idx[0]].image.cols;
    std::vector<double> img, msk, tgt;
    img.reserve(idx.size() * h * w);
    msk.reserve(idx.size() * h * w);
    Batch b;
    for (std::size_t i : idx) {
        const Sample& s = data[i];
        img.insert(img.end(), s.image.data.begin(), s.image.data.end());
        for (auto m : s.mask.data) msk.push_back(m ? 1.0 : 0.0);
        tgt.insert(tgt.end(), targets[i].begin(), targets[i].end());
        b.labels.push_back(s.label);
    }
    const std::size_t n = idx.size();
    b.images = Tensor({n, 1, h, w}, std::move(img));
    b.masks = Tensor({n, h, w}, std::move(msk));
    b.targets = Tensor({n, features::kFeatureCount}, std::move(tgt));
    return b;
}

StepRecord train_step(const TrainConfig& cfg, model::ModelState& state, AdamW& opt, const Batch& batch,
                      std::span<const double> class_weights, std::size_t epoch, std::size_t step) {
    ad::Graph graph;
    const model::ModelState leaves = model::attach(graph, state);
    const model::ForwardOutputs out = model::forward(leaves, batch.images);
    const regularizer::TaskLoss losses[] = {
        {Task::seg, model::dice_loss(out.segmentation, batch.masks)},
        {Task::cls, model::weighted_ce(out.logits, batch.labels, class_weights)},
        {Task::clin, model::clin_loss(out.clinical(), batch.targets)},
    };

    StepRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.l_seg = losses[0].loss.item();
    rec.l_cls = losses[1].loss.item();
    rec.l_clin = losses[2].loss.item();

    Tensor total = ad::add(ad::add(ad::scale(losses[0].loss, cfg.lambda_seg), ad::scale(losses[1].loss, cfg.lambda_cls)),
                           ad::scale(losses[2].loss, cfg.lambda_clin));

    const regularizer::ConflictReport* diagnostics = nullptr;
    regularizer::RlarResult penalty;
    if (cfg.rlar.lambda_adv > 0.0) {
        penalty = regularizer::rlar_penalty(graph, out, losses, cfg.rlar, cfg.rlar_create_graph);
        rec.l_rlar = penalty.penalty.item();
        total = ad::add(total, penalty.penalty);
        if (cfg.rlar.hook == regularizer::HookMode::bottleneck && cfg.rlar.tasks.size() == 3)
            diagnostics = &penalty.reports[0];
    }
    regularizer::ConflictReport probe;
    if (diagnostics == nullptr) {
        const auto dirs = regularizer::adversarial_directions(graph, losses, out.bottleneck, cfg.rlar.epsilon,
                                                              cfg.rlar.norm_guard, false);
        probe = regularizer::pairwise_abs_cos(dirs);
        diagnostics = &probe;
    }
    for (const auto& p : diagnostics->pairs) rec.cos[pair_slot(p.first, p.second)] = p.batch_mean();

    rec.l_total = total.item();
    const std::pair<const char*, double> components[] = {
        {"L_seg", rec.l_seg}, {"L_cls", rec.l_cls}, {"L_clin", rec.l_clin}, {"L_rlar", rec.l_rlar}, {"L_total", rec.l_total}};
    for (const auto& [name, value] : components)
        if (!std::isfinite(value))
            throw NumericalError(std::string("non-finite ") + name + " at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(step));

    const auto grads = graph.grad(total, leaves.params, false);
    opt.step(state.params, grads.grads);
    return rec;
}

int argmax_class(const std::array<std::size_t, kNumClasses>& counts) {
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

model::ModelState rounded(const model::ModelState& state) {
    model::ModelState out = state;
    for (auto& p : out.params) p = round_to_float(p);
    auto& st = out.clinical_stats;
    const Tensor mean = round_to_float(Tensor({st.mean.size()}, std::vector<double>(st.mean.begin(), st.mean.end())));
    const Tensor sd = round_to_float(Tensor({st.std.size()}, std::vector<double>(st.std.begin(), st.std.end())));
    std::copy(mean.values().begin(), mean.values().end(), st.mean.begin());
    std::copy(sd.values().begin(), sd.values().end(), st.std.begin());
    return out;
}

json config_json(const TrainConfig& cfg) {
    json j = json::object();
    std::istringstream lines(format_config(cfg));
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        j[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return j;
}

}  // namespace

void TrainConfig::validate() const {
    for (const auto& [name, v] : {std::pair{"lambda_seg", lambda_seg}, {"lambda_cls", lambda_cls}, {"lambda_clin", lambda_clin}})
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be a finite value >= 0");
    rlar.validate();
    if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (image_size % model::kSpatialDivisor != 0) throw ValidationError("image_size must be divisible by 16");
    if (k < 2) throw ValidationError("k must be >= 2");
    if (fold < 0 || fold >= k) throw ValidationError("fold must be in [0, k)");
    if (selection != "mean_f1_dice") throw ValidationError("unknown selection metric '" + selection + "'");
}

TrainConfig parse_config(std::string_view text) {
    TrainConfig cfg;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError(where + ": expected key = value");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (!seen.insert(key).second) throw ValidationError(where + ": repeated key '" + key + "'");
        auto real = [&] { return parse_number<double>(key, value, where); };
        auto count = [&] { return parse_number<std::size_t>(key, value, where); };
        if (key == "lambda_seg") cfg.lambda_seg = real();
        else if (key == "lambda_cls") cfg.lambda_cls = real();
        else if (key == "lambda_clin") cfg.lambda_clin = real();
        else if (key == "lambda_adv") cfg.rlar.lambda_adv = real();
        else if (key == "epsilon") cfg.rlar.epsilon = real();
        else if (key == "norm_guard") cfg.rlar.norm_guard = real();
        else if (key == "tasks") cfg.rlar.tasks = regularizer::parse_task_list(value);
        else if (key == "hook") cfg.rlar.hook = regularizer::parse_hook_mode(value);
        else if (key == "rlar_create_graph") cfg.rlar_create_graph = parse_bool(key, value, where);
        else if (key == "lr") cfg.lr = real();
        else if (key == "weight_decay") cfg.weight_decay = real();
        else if (key == "batch_size") cfg.batch_size = count();
        else if (key == "epochs") cfg.epochs = count();
        else if (key == "steps_per_epoch") cfg.steps_per_epoch = count();
        else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value, where);
        else if (key == "image_size") cfg.image_size = count();
        else if (key == "k") cfg.k = parse_number<int>(key, value, where);
        else if (key == "fold") cfg.fold = parse_number<int>(key, value, where);
        else if (key == "selection") cfg.selection = value;
        else if (key == "data") cfg.data = value;
        else throw ValidationError(where + ": unknown key '" + key + "'");
    }
    return cfg;
}

TrainConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

std::string format_config(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "lambda_seg = " << format_double(cfg.lambda_seg) << '\n'
        << "lambda_cls = " << format_double(cfg.lambda_cls) << '\n'
        << "lambda_clin = " << format_double(cfg.lambda_clin) << '\n'
        << "lambda_adv = " << format_double(cfg.rlar.lambda_adv) << '\n'
        << "epsilon = " << format_double(cfg.rlar.epsilon) << '\n'
        << "norm_guard = " << format_double(cfg.rlar.norm_guard) << '\n'
        << "tasks = " << regularizer::format_task_list(cfg.rlar.tasks) << '\n'
        << "hook = " << regularizer::hook_mode_name(cfg.rlar.hook) << '\n'
        << "rlar_create_graph = " << (cfg.rlar_create_graph ? "true" : "false") << '\n'
        << "lr = " << format_double(cfg.lr) << '\n'
        << "weight_decay = " << format_double(cfg.weight_decay) << '\n'
        << "batch_size = " << cfg.batch_size << '\n'
        << "epochs = " << cfg.epochs << '\n'
        << "steps_per_epoch = " << cfg.steps_per_epoch << '\n'
        << "seed = " << cfg.seed << '\n'
        << "image_size = " << cfg.image_size << '\n'
        << "k = " << cfg.k << '\n'
        << "fold = " << cfg.fold << '\n'
        << "selection = " << cfg.selection << '\n';
    if (!cfg.data.empty()) out << "data = " << cfg.data << '\n';
    return out.str();
}

Split split_by_fold(const Dataset& data, const std::map<std::string, int>& folds, int fold) {
    Split split;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto it = folds.find(data[i].case_id);
        if (it == folds.end()) throw ValidationError("case " + data[i].case_id + " has no fold");
        (it->second == fold ? split.val : split.train).push_back(i);
    }
    return split;
}

features::StandardizationStats clinical_stats(std::span<const Sample> samples) {
    std::vector<features::FeatureVector> rows;
    for (const auto& s : samples) rows.push_back(features::extract_features(s.image, s.mask));
    return features::fit_standardization(rows);
}

Tensor image_batch(std::span<const Sample> samples) {
    if (samples.empty()) throw ValidationError("image_batch: no samples");
    const std::size_t h = samples[0].image.rows, w = samples[0].image.cols;
    std::vector<double> v;
    v.reserve(samples.size() * h * w);
    for (const auto& s : samples) {
        if (s.image.rows != h || s.image.cols != w)
            throw ValidationError("image_batch: " + s.filename + " is " + shape_string(s.image.rows, s.image.cols) +
                                  ", expected " + shape_string(h, w));
        v.insert(v.end(), s.image.data.begin(), s.image.data.end());
    }
    return Tensor({samples.size(), 1, h, w}, std::move(v));
}

MetricsReport evaluate(const model::ModelState& state, std::span<const Sample> samples) {
    if (samples.empty()) throw ValidationError("evaluate: no samples");
    MetricsReport report;
    report.samples = samples.size();
    std::vector<int> truth, pred;
    for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
        const auto chunk = samples.subspan(start, std::min(kEvalChunk, samples.size() - start));
        const model::Prediction p = model::predict(state, image_batch(chunk));
        const std::size_t hw = chunk[0].image.rows * chunk[0].image.cols;
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            Mask m(chunk[i].image.rows, chunk[i].image.cols, 0);
            for (std::size_t j = 0; j < hw; ++j) m.data[j] = p.segmentation[i * hw + j] >= 0.5 ? 1 : 0;
            report.dice += dice_score(m, chunk[i].mask);
            report.iou += iou_score(m, chunk[i].mask);
            report.hd95 += hd95(m, chunk[i].mask);
            truth.push_back(chunk[i].label);
            pred.push_back(p.labels[i]);
        }
    }
    const double n = static_cast<double>(samples.size());
    report.dice /= n;
    report.iou /= n;
    report.hd95 /= n;
    report.classification = classification_report(truth, pred);
    return report;
}

std::string metrics_json(const MetricsReport& r) {
    const auto& c = r.classification;
    json j;
    j["samples"] = r.samples;
    j["dice"] = r.dice;
    j["iou"] = r.iou;
    j["hd95"] = r.hd95;
    j["precision_macro"] = c.precision_macro;
    j["recall_macro"] = c.recall_macro;
    j["f1_macro"] = c.f1_macro;
    j["per_class"] = {{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
    return j.dump(2) + "\n";
}

RunArtifacts train(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.empty()) throw ValidationError("train: empty dataset");
    const std::size_t h = data[0].image.rows, w = data[0].image.cols;
    for (const auto& s : data) {
        if (s.image.rows != h || s.image.cols != w)
            throw ValidationError("train: " + s.filename + " is " + shape_string(s.image.rows, s.image.cols) +
                                  ", expected " + shape_string(h, w));
        if (s.label < 0 || s.label >= kNumClasses) throw ValidationError("train: " + s.filename + " has an invalid label");
    }
    if (cfg.image_size != 0 && (h != cfg.image_size || w != cfg.image_size))
        throw ValidationError("train: dataset images are " + shape_string(h, w) + " but image_size is " +
                              std::to_string(cfg.image_size));

    RunArtifacts run;
    run.config = cfg;
    std::vector<std::string> ids;
    for (const auto& s : data) ids.push_back(s.case_id);
    run.folds = kfold_split(ids, cfg.k, cfg.seed);
    const Split split = split_by_fold(data, run.folds, cfg.fold);
    if (split.train.empty() || split.val.empty()) throw ValidationError("train: empty train or validation split");

    Dataset train_set, val_set;
    for (std::size_t i : split.train) train_set.push_back(data[i]);
    for (std::size_t i : split.val) val_set.push_back(data[i]);
    std::set<std::string> val_ids;
    for (const auto& s : val_set) val_ids.insert(s.case_id);
    run.val_cases.assign(val_ids.begin(), val_ids.end());

    std::vector<features::FeatureVector> raw(data.size());
    for (std::size_t i : split.train) {
        try {
            raw[i] = features::extract_features(data[i].image, data[i].mask);
        } catch (const ValidationError& e) {
            throw ValidationError("train: sample " + data[i].filename + ": " + e.what());
        }
    }
    std::vector<features::FeatureVector> train_rows;
    for (std::size_t i : split.train) train_rows.push_back(raw[i]);
    const auto stats = features::fit_standardization(train_rows);
    std::vector<features::FeatureVector> targets(data.size());
    for (std::size_t i : split.train) targets[i] = features::standardize(raw[i], stats);

    run.class_counts = class_counts(train_set);
    run.class_weights = class_weights(run.class_counts);
    run.majority_class = argmax_class(run.class_counts);
    std::vector<int> val_labels;
    for (const auto& s : val_set) val_labels.push_back(s.label);
    run.majority_baseline_f1 = majority_baseline_f1(val_labels, run.majority_class);

    model::ModelState state = model::init_params(cfg.seed);
    state.clinical_stats = stats;
    AdamW opt({cfg.lr, cfg.weight_decay}, state.params);
    std::mt19937_64 shuffle_rng(cfg.seed + 0x5eed);

    const std::size_t full_pass = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : full_pass;
    double best_score = -1.0;
    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochLog row;
        row.epoch = epoch;
        std::size_t cursor = 0;
        for (std::size_t step = 0; step < steps; ++step) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            const std::size_t take = std::min(cfg.batch_size, order.size() - cursor);
            const Batch batch = make_batch(data, std::span(order).subspan(cursor, take), targets);
            cursor += take;
            const StepRecord rec = train_step(cfg, state, opt, batch, run.class_weights, epoch, step);
            row.l_total += rec.l_total;
            row.l_seg += rec.l_seg;
            row.l_cls += rec.l_cls;
            row.l_clin += rec.l_clin;
            row.l_rlar += rec.l_rlar;
            for (std::size_t p = 0; p < 3; ++p) row.cos[p] += rec.cos[p];
            run.steps.push_back(rec);
        }
        const double n = static_cast<double>(steps);
        row.l_total /= n;
        row.l_seg /= n;
        row.l_cls /= n;
        row.l_clin /= n;
        row.l_rlar /= n;
        for (double& c : row.cos) c /= n;

        const model::ModelState candidate = rounded(state);
        const MetricsReport val = evaluate(candidate, val_set);
        row.val_dice = val.dice;
        row.val_macro_f1 = val.classification.f1_macro;
        run.log.push_back(row);
        const double score = 0.5 * (row.val_macro_f1 + row.val_dice);
        run.selection.push_back({epoch, row.val_dice, row.val_macro_f1, score});
        if (score > best_score) {
            best_score = score;
            run.best_epoch = epoch;
            run.state = candidate;
            run.val_metrics = val;
        }
    }
    return run;
}

std::vector<RunArtifacts> train_folds(const TrainConfig& cfg, const Dataset& data, std::span<const int> folds,
                                      std::size_t jobs) {
    jobs = std::max<std::size_t>(1, jobs);
    std::vector<RunArtifacts> runs(folds.size());
    for (std::size_t start = 0; start < folds.size(); start += jobs) {
        std::vector<std::future<RunArtifacts>> pending;
        for (std::size_t i = start; i < std::min(folds.size(), start + jobs); ++i) {
            TrainConfig fold_cfg = cfg;
            fold_cfg.fold = folds[i];
            pending.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async,
                                         [fold_cfg, &data] { return train(fold_cfg, data); }));
        }
        for (std::size_t i = 0; i < pending.size(); ++i) runs[start + i] = pending[i].get();
    }
    return runs;
}

void write_train_log(std::ostream& out, std::span<const EpochLog> log) {
    out << "epoch,L_total,L_seg,L_cls,L_clin,L_rlar,cos_seg_cls,cos_seg_clin,cos_cls_clin,val_dice,val_macro_f1\n";
    for (const auto& r : log) {
        out << r.epoch;
        for (double v : {r.l_total, r.l_seg, r.l_cls, r.l_clin, r.l_rlar, r.cos[0], r.cos[1], r.cos[2], r.val_dice,
                         r.val_macro_f1})
            out << ',' << format_double(v);
        out << '\n';
    }
}

std::vector<EpochLog> read_train_log(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || trim(line).rfind("epoch,L_total", 0) != 0)
        throw ValidationError("train log: missing header");
    std::vector<EpochLog> log;
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(trim(line));
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        const std::string where = "train log row " + std::to_string(row_no);
        if (cells.size() != 11) throw ValidationError(where + ": expected 11 columns, got " + std::to_string(cells.size()));
        EpochLog r;
        r.epoch = parse_number<std::size_t>("epoch", cells[0], where);
        double* fields[] = {&r.l_total, &r.l_seg, &r.l_cls, &r.l_clin, &r.l_rlar, &r.cos[0], &r.cos[1], &r.cos[2],
                            &r.val_dice, &r.val_macro_f1};
        for (std::size_t i = 0; i < 10; ++i) *fields[i] = parse_number<double>("column " + std::to_string(i + 2), cells[i + 1], where);
        log.push_back(r);
    }
    return log;
}

void write_conflict_log(std::ostream& out, std::span<const EpochLog> log) {
    out << "epoch,pair,mean_abs_cos\n";
    for (const auto& r : log)
        for (std::size_t p = 0; p < 3; ++p) out << r.epoch << ',' << kPairNames[p] << ',' << format_double(r.cos[p]) << '\n';
}

void save_run(const fs::path& dir, const RunArtifacts& run) {
    fs::create_directories(dir);
    std::vector<NamedArray> arrays;
    for (std::size_t i = 0; i < run.state.params.size(); ++i) arrays.push_back({run.state.names[i], run.state.params[i]});
    const auto& st = run.state.clinical_stats;
    arrays.push_back({"clinical_stats.mean", Tensor({st.mean.size()}, std::vector<double>(st.mean.begin(), st.mean.end()))});
    arrays.push_back({"clinical_stats.std", Tensor({st.std.size()}, std::vector<double>(st.std.begin(), st.std.end()))});
    arrays.push_back({"class_weights", Tensor({kNumClasses}, std::vector<double>(run.class_weights.begin(), run.class_weights.end()))});
    write_checkpoint(dir / "checkpoint.bin", arrays);

    json j;
    j["config"] = config_json(run.config);
    j["class_counts"] = run.class_counts;
    j["class_weights"] = run.class_weights;
    j["standardization"] = {{"features", std::vector<std::string>(features::kFeatureNames.begin(), features::kFeatureNames.end())},
                            {"mean", st.mean},
                            {"std", st.std}};
    json history = json::array();
    for (const auto& e : run.selection)
        history.push_back({{"epoch", e.epoch}, {"val_dice", e.val_dice}, {"val_macro_f1", e.val_macro_f1}, {"score", e.score}});
    j["selection"] = {{"metric", run.config.selection}, {"best_epoch", run.best_epoch}, {"history", history}};
    j["folds"] = {{"k", run.config.k}, {"fold", run.config.fold}, {"assignment", run.folds}};
    j["val_cases"] = run.val_cases;
    j["majority_baseline"] = {{"class", run.majority_class}, {"f1_macro", run.majority_baseline_f1}};
    std::ofstream(dir / "run.json") << j.dump(2) << '\n';

    std::ofstream log(dir / "train_log.csv");
    write_train_log(log, run.log);
    std::ofstream conflict(dir / "conflict.csv");
    write_conflict_log(conflict, run.log);
    std::ofstream(dir / "val_metrics.json") << metrics_json(run.val_metrics);
}

LoadedRun load_run(const fs::path& dir) {
    const fs::path meta_path = dir / "run.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw ValidationError("missing " + meta_path.string());
    json meta;
    try {
        meta = json::parse(meta_in);
    } catch (const json::exception& e) {
        throw ValidationError(meta_path.string() + ": " + e.what());
    }
    LoadedRun run;
    try {
        std::string cfg_text;
        for (const auto& [key, value] : meta.at("config").items()) cfg_text += key + " = " + value.get<std::string>() + "\n";
        run.config = parse_config(cfg_text);
        run.val_cases = meta.at("val_cases").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ValidationError(meta_path.string() + ": " + e.what());
    }

    const auto arrays = read_checkpoint(dir / "checkpoint.bin");
    std::map<std::string, Tensor> by_name;
    for (const auto& a : arrays) by_name[a.name] = a.value;
    auto take = [&](const std::string& name, const ad::Shape& shape) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw ValidationError("checkpoint is missing '" + name + "'");
        if (it->second.shape() != shape)
            throw ValidationError("checkpoint array '" + name + "' has shape " + ad::to_string(it->second.shape()) +
                                  ", expected " + ad::to_string(shape));
        return it->second;
    };
    for (const auto& name : model::parameter_names()) {
        run.state.names.push_back(name);
        run.state.params.push_back(take(name, model::parameter_shape(name)));
    }
    const Tensor mean = take("clinical_stats.mean", {features::kFeatureCount});
    const Tensor sd = take("clinical_stats.std", {features::kFeatureCount});
    const Tensor cw = take("class_weights", {kNumClasses});
    for (std::size_t k = 0; k < features::kFeatureCount; ++k) {
        run.state.clinical_stats.mean[k] = mean[k];
        run.state.clinical_stats.std[k] = sd[k];
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) run.class_weights[c] = cw[c];
    return run;
}

model::ModelState zero_feature_column(const model::ModelState& state, std::size_t k) {
    model::ModelState out = state;
    Tensor& w = out.at("classifier.weight");
    if (w.rank() != 2 || k >= w.dim(1))
        throw ValidationError("zero_feature_column: column " + std::to_string(k) + " out of range for " + ad::to_string(w.shape()));
    std::vector<double> v(w.values().begin(), w.values().end());
    for (std::size_t c = 0; c < w.dim(0); ++c) v[c * w.dim(1) + k] = 0.0;
    w = Tensor(w.shape(), std::move(v));
    return out;
}

std::vector<AblationRow> ablate_features(const model::ModelState& state, std::span<const Sample> samples) {
    if (samples.empty()) throw ValidationError("ablate_features: no samples");
    auto classify = [&](const model::ModelState& s) {
        std::vector<int> pred;
        for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
            const auto chunk = samples.subspan(start, std::min(kEvalChunk, samples.size() - start));
            const auto p = model::predict(s, image_batch(chunk));
            pred.insert(pred.end(), p.labels.begin(), p.labels.end());
        }
        return pred;
    };
    std::vector<int> truth;
    for (const auto& s : samples) truth.push_back(s.label);
    const auto full = classification_report(truth, classify(state));
    std::vector<AblationRow> rows;
    for (std::size_t k = 0; k < features::kFeatureCount; ++k) {
        const auto ablated = classification_report(truth, classify(zero_feature_column(state, k)));
        rows.push_back({std::string(features::kFeatureNames[k]), ablated.precision_macro - full.precision_macro,
                        ablated.recall_macro - full.recall_macro, ablated.f1_macro - full.f1_macro});
    }
    return rows;
}

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
    out << "feature,delta_precision,delta_recall,delta_f1\n";
    for (const auto& r : rows)
        out << r.feature << ',' << format_double(r.delta_precision) << ',' << format_double(r.delta_recall) << ','
            << format_double(r.delta_f1) << '\n';
}

}  // namespace rlar::harness
