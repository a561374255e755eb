#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlar/ad/graph.hpp"
#include "rlar/model.hpp"

// Representation-level adversarial alignment penalty. Each task's loss
// gradient w.r.t. a shared representation is normalized into a probe
// direction; the penalty is the mean absolute cosine between the probes of
// every unordered task pair.
namespace rlar::regularizer {

enum class Task { seg, cls, clin };
inline constexpr std::array<Task, 3> kAllTasks = {Task::seg, Task::cls, Task::clin};

std::string_view task_name(Task t);
Task parse_task(std::string_view name);
// Comma-separated list, e.g. "seg,cls,clin".
std::vector<Task> parse_task_list(std::string_view list);
std::string format_task_list(std::span<const Task> tasks);

enum class HookMode { bottleneck, last_encoder, mid_encoder, mean_last3 };

HookMode parse_hook_mode(std::string_view tag);
std::string_view hook_mode_name(HookMode mode);

struct RlarConfig {
    double epsilon = 1.0;
    double norm_guard = 1e-8;
    double lambda_adv = 0.1;
    std::vector<Task> tasks{kAllTasks.begin(), kAllTasks.end()};
    HookMode hook = HookMode::bottleneck;

    // epsilon > 0, norm_guard > 0, lambda_adv >= 0, at least two distinct tasks.
    void validate() const;
};

struct TaskLoss {
    Task task;
    ad::Tensor loss;
};

struct TaskDirection {
    Task task;
    ad::Tensor delta;  // shaped like the representation
};

// delta_t = epsilon * g_t / (||g_t|| + norm_guard) with g_t the gradient of
// loss_t w.r.t. rep and ||.|| the norm over the whole batch tensor. With
// create_graph the directions stay differentiable w.r.t. everything rep
// depends on. Throws ValidationError if a loss does not depend on rep and
// NumericalError on a non-finite gradient norm.
std::vector<TaskDirection> adversarial_directions(ad::Graph& graph, std::span<const TaskLoss> losses,
                                                  const ad::Tensor& rep, double epsilon, double norm_guard,
                                                  bool create_graph);

struct PairCosine {
    Task first;
    Task second;
    ad::Tensor abs_cos;  // {B}, per-sample |cos|

    std::string name() const;  // e.g. "seg_cls"
    double batch_mean() const;
};

struct ConflictReport {
    std::vector<PairCosine> pairs;  // unordered pairs in input order

    double mean() const;  // over pairs and samples
};

// Per sample i and unordered pair {t, t'}: |f_t . f_t'| / (|f_t| |f_t'|),
// taken as 0 when either vector is zero.
ConflictReport pairwise_abs_cos(std::span<const TaskDirection> dirs);

// lambda_adv * mean over samples of the mean over pairs of |cos|.
ad::Tensor rlar_loss(const ConflictReport& report, double lambda_adv);

struct RlarResult {
    ad::Tensor penalty;
    std::vector<ConflictReport> reports;  // one per probed layer
};

// Probes the layer(s) selected by cfg.hook; mean_last3 averages the
// per-layer penalties over the last three encoder stages.
RlarResult rlar_penalty(ad::Graph& graph, const model::ForwardOutputs& out, std::span<const TaskLoss> losses,
                        const RlarConfig& cfg, bool create_graph);

}  // namespace rlar::regularizer
