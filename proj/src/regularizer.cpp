#include "rlar/regularizer.hpp"

#include <algorithm>
#include <cmath>

#include "rlar/ad/ops.hpp"
#include "rlar/errors.hpp"

namespace rlar::regularizer {

using ad::Tensor;

std::string_view task_name(Task t) {
    switch (t) {
        case Task::seg: return "seg";
        case Task::cls: return "cls";
        case Task::clin: return "clin";
    }
    return "seg";
}

Task parse_task(std::string_view name) {
    for (Task t : kAllTasks)
        if (task_name(t) == name) return t;
    throw ValidationError("unknown task '" + std::string(name) + "' (expected seg, cls or clin)");
}

std::vector<Task> parse_task_list(std::string_view list) {
    std::vector<Task> tasks;
    while (!list.empty()) {
        const auto comma = list.find(',');
        std::string_view item = list.substr(0, comma);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        tasks.push_back(parse_task(item));
        if (comma == std::string_view::npos) break;
        list.remove_prefix(comma + 1);
    }
    return tasks;
}

std::string format_task_list(std::span<const Task> tasks) {
    std::string out;
    for (Task t : tasks) {
        if (!out.empty()) out += ',';
        out += task_name(t);
    }
    return out;
}

HookMode parse_hook_mode(std::string_view tag) {
    if (tag == "bottleneck") return HookMode::bottleneck;
    if (tag == "last" || tag == "last_encoder") return HookMode::last_encoder;
    if (tag == "mid" || tag == "mid_encoder") return HookMode::mid_encoder;
    if (tag == "mean_last3") return HookMode::mean_last3;
    throw ValidationError("unknown hook '" + std::string(tag) + "'");
}

std::string_view hook_mode_name(HookMode mode) {
    switch (mode) {
        case HookMode::bottleneck: return "bottleneck";
        case HookMode::last_encoder: return "last_encoder";
        case HookMode::mid_encoder: return "mid_encoder";
        case HookMode::mean_last3: return "mean_last3";
    }
    return "bottleneck";
}

void RlarConfig::validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be > 0");
    if (!(norm_guard > 0.0) || !std::isfinite(norm_guard)) throw ValidationError("norm_guard must be > 0");
    if (!(lambda_adv >= 0.0) || !std::isfinite(lambda_adv)) throw ValidationError("lambda_adv must be >= 0");
    std::vector<Task> sorted = tasks;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ValidationError("duplicate task in '" + format_task_list(tasks) + "'");
    if (tasks.size() < 2) throw ValidationError("need at least two tasks, got '" + format_task_list(tasks) + "'");
}

std::vector<TaskDirection> adversarial_directions(ad::Graph& graph, std::span<const TaskLoss> losses,
                                                  const Tensor& rep, double epsilon, double norm_guard,
                                                  bool create_graph) {
    if (!(epsilon > 0.0)) throw ValidationError("adversarial_directions: epsilon must be > 0");
    if (!(norm_guard >= 0.0)) throw ValidationError("adversarial_directions: norm_guard must be >= 0");
    std::vector<TaskDirection> dirs;
    const Tensor wrt[] = {rep};
    for (const auto& [task, loss] : losses) {
        auto r = graph.grad(loss, wrt, create_graph);
        if (!r.reachable[0])
            throw ValidationError("adversarial_directions: " + std::string(task_name(task)) +
                                  " loss does not depend on the representation");
        const Tensor& g = r.grads[0];
        const Tensor norm = ad::l2norm(g);
        if (!std::isfinite(norm.item()))
            throw NumericalError("adversarial_directions: non-finite gradient norm for " +
                                 std::string(task_name(task)));
        Tensor delta = ad::scale(ad::div(g, ad::expand_scalar(norm, g.shape()), norm_guard), epsilon);
        dirs.push_back({task, std::move(delta)});
    }
    return dirs;
}

std::string PairCosine::name() const {
    return std::string(task_name(first)) + "_" + std::string(task_name(second));
}

double PairCosine::batch_mean() const { return ad::mean(abs_cos.detach()).item(); }

double ConflictReport::mean() const {
    if (pairs.empty()) return 0.0;
    double total = 0.0;
    for (const auto& p : pairs) total += p.batch_mean();
    return total / static_cast<double>(pairs.size());
}

ConflictReport pairwise_abs_cos(std::span<const TaskDirection> dirs) {
    if (dirs.size() < 2) throw ValidationError("pairwise_abs_cos: need at least two directions");
    ConflictReport report;
    std::vector<Tensor> norms;
    for (const auto& d : dirs) {
        if (d.delta.shape() != dirs[0].delta.shape())
            throw ad::ShapeError("pairwise_abs_cos", dirs[0].delta.shape(), d.delta.shape());
        norms.push_back(ad::l2norm_per_sample(d.delta));
    }
    for (std::size_t a = 0; a < dirs.size(); ++a) {
        for (std::size_t b = a + 1; b < dirs.size(); ++b) {
            const Tensor dot = ad::sum_per_sample(ad::mul(dirs[a].delta, dirs[b].delta));
            const Tensor cos = ad::mul(dot, ad::recip_nonzero(ad::mul(norms[a], norms[b])));
            report.pairs.push_back({dirs[a].task, dirs[b].task, ad::abs(cos)});
        }
    }
    return report;
}

Tensor rlar_loss(const ConflictReport& report, double lambda_adv) {
    if (report.pairs.empty()) throw ValidationError("rlar_loss: empty report");
    Tensor total = report.pairs[0].abs_cos;
    for (std::size_t i = 1; i < report.pairs.size(); ++i) total = ad::add(total, report.pairs[i].abs_cos);
    const double per_pair = 1.0 / static_cast<double>(report.pairs.size());
    return ad::scale(ad::mean(total), lambda_adv * per_pair);
}

RlarResult rlar_penalty(ad::Graph& graph, const model::ForwardOutputs& out, std::span<const TaskLoss> losses,
                        const RlarConfig& cfg, bool create_graph) {
    std::vector<const Tensor*> layers;
    switch (cfg.hook) {
        case HookMode::bottleneck: layers = {&out.bottleneck}; break;
        case HookMode::last_encoder: layers = {&out.encoder[3]}; break;
        case HookMode::mid_encoder: layers = {&out.encoder[1]}; break;
        case HookMode::mean_last3: layers = {&out.encoder[1], &out.encoder[2], &out.encoder[3]}; break;
    }
    std::vector<TaskLoss> selected;
    for (Task t : cfg.tasks) {
        const auto it = std::find_if(losses.begin(), losses.end(), [&](const TaskLoss& l) { return l.task == t; });
        if (it == losses.end()) throw ValidationError("rlar_penalty: no loss for task " + std::string(task_name(t)));
        selected.push_back(*it);
    }
    RlarResult result;
    Tensor total;
    for (const Tensor* rep : layers) {
        const auto dirs = adversarial_directions(graph, selected, *rep, cfg.epsilon, cfg.norm_guard, create_graph);
        result.reports.push_back(pairwise_abs_cos(dirs));
        const Tensor layer_penalty = rlar_loss(result.reports.back(), cfg.lambda_adv);
        total = total.defined() ? ad::add(total, layer_penalty) : layer_penalty;
    }
    result.penalty = ad::scale(total, 1.0 / static_cast<double>(layers.size()));
    return result;
}

}  // namespace rlar::regularizer
