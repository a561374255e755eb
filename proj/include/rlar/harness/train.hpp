#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlar/harness/dataset.hpp"
#include "rlar/harness/metrics.hpp"
#include "rlar/model.hpp"
#include "rlar/regularizer.hpp"

namespace rlar::harness {

struct TrainConfig {
    double lambda_seg = 1.0;
    double lambda_cls = 1.0;
    double lambda_clin = 0.1;
    regularizer::RlarConfig rlar{};
    // Off: directions are detached and the penalty contributes no gradient.
    bool rlar_create_graph = true;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 30;
    std::size_t steps_per_epoch = 0;  // 0: one full pass over the training split
    std::uint64_t seed = 0;
    std::size_t image_size = 0;  // 0: accept the dataset's size
    int k = 5;
    int fold = 0;
    std::string selection = "mean_f1_dice";
    std::string data;  // dataset directory, optional

    void validate() const;
};

// Flat "key = value" lines; '#' starts a comment. Unknown keys, repeated
// keys and malformed values raise ValidationError naming the line.
TrainConfig parse_config(std::string_view text);
TrainConfig load_config(const std::filesystem::path& path);
// Every key, one per line, readable by parse_config.
std::string format_config(const TrainConfig& cfg);

struct StepRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double l_total = 0.0;
    double l_seg = 0.0;
    double l_cls = 0.0;
    double l_clin = 0.0;
    double l_rlar = 0.0;
    std::array<double, 3> cos{};  // seg_cls, seg_clin, cls_clin at the bottleneck
};

inline constexpr std::array<std::string_view, 3> kPairNames = {"seg_cls", "seg_clin", "cls_clin"};

struct EpochLog {
    std::size_t epoch = 0;
    double l_total = 0.0;
    double l_seg = 0.0;
    double l_cls = 0.0;
    double l_clin = 0.0;
    double l_rlar = 0.0;
    std::array<double, 3> cos{};
    double val_dice = 0.0;
    double val_macro_f1 = 0.0;
};

struct MetricsReport {
    std::size_t samples = 0;
    double dice = 0.0;
    double iou = 0.0;
    double hd95 = 0.0;
    ClassificationReport classification;
};

struct SelectionEntry {
    std::size_t epoch = 0;
    double val_dice = 0.0;
    double val_macro_f1 = 0.0;
    double score = 0.0;
};

struct RunArtifacts {
    TrainConfig config;
    model::ModelState state;  // selected checkpoint, float32-exact
    std::array<std::size_t, kNumClasses> class_counts{};
    std::array<double, kNumClasses> class_weights{};
    std::vector<EpochLog> log;
    std::vector<StepRecord> steps;
    std::vector<SelectionEntry> selection;
    std::size_t best_epoch = 0;
    std::map<std::string, int> folds;
    std::vector<std::string> val_cases;
    MetricsReport val_metrics;
    int majority_class = 0;
    double majority_baseline_f1 = 0.0;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

Split split_by_fold(const Dataset& data, const std::map<std::string, int>& folds, int fold);

// Standardization statistics of the clinical features of the given samples.
features::StandardizationStats clinical_stats(std::span<const Sample> samples);

RunArtifacts train(const TrainConfig& cfg, const Dataset& data);

// Trains the given folds, running up to `jobs` of them concurrently.
std::vector<RunArtifacts> train_folds(const TrainConfig& cfg, const Dataset& data, std::span<const int> folds,
                                      std::size_t jobs);

// Image-only inference; masks are read only to score segmentation.
MetricsReport evaluate(const model::ModelState& state, std::span<const Sample> samples);

std::string metrics_json(const MetricsReport& report);

void write_train_log(std::ostream& out, std::span<const EpochLog> log);
std::vector<EpochLog> read_train_log(std::istream& in);
void write_conflict_log(std::ostream& out, std::span<const EpochLog> log);

// checkpoint.bin, run.json, train_log.csv, conflict.csv, val_metrics.json
void save_run(const std::filesystem::path& dir, const RunArtifacts& run);

struct LoadedRun {
    TrainConfig config;
    model::ModelState state;
    std::array<double, kNumClasses> class_weights{};
    std::vector<std::string> val_cases;
};

LoadedRun load_run(const std::filesystem::path& dir);

// Copy of state with column k of the classifier weight set to zero.
model::ModelState zero_feature_column(const model::ModelState& state, std::size_t k);

struct AblationRow {
    std::string feature;
    double delta_precision = 0.0;
    double delta_recall = 0.0;
    double delta_f1 = 0.0;
};

// One row per clinical embedding channel: metric after zeroing that
// channel's classifier column minus the metric of the intact model.
std::vector<AblationRow> ablate_features(const model::ModelState& state, std::span<const Sample> samples);
void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows);

// Stacks images into B x 1 x H x W.
ad::Tensor image_batch(std::span<const Sample> samples);

}  // namespace rlar::harness
