#include "rlar/ad/graph.hpp"

#include <algorithm>

#include "rlar/ad/ops.hpp"

namespace rlar::ad {

bool GradResult::all_reachable() const {
    return std::all_of(reachable.begin(), reachable.end(), [](bool r) { return r; });
}

Tensor Graph::leaf(const Tensor& value) {
    if (!value.defined()) throw ValidationError("leaf: undefined tensor");
    Tensor out = value.detach();
    out.graph_ = this;
    out.node_ = nodes_.size();
    nodes_.push_back(Node{"leaf", {}, nullptr, out});
    return out;
}

Tensor Graph::record(std::string_view op, Tensor out, const std::vector<Tensor>& inputs,
                     BackwardFn backward) {
    Node node{op, {}, std::move(backward), {}};
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
        node.inputs.push_back(in.graph() == this ? static_cast<std::ptrdiff_t>(in.node()) : -1);
    }
    out.graph_ = this;
    out.node_ = nodes_.size();
    node.value = out;
    nodes_.push_back(std::move(node));
    return out;
}

namespace {

class RecordingScope {
public:
    RecordingScope(bool& flag, bool value) : flag_(flag), saved_(flag) { flag_ = value; }
    ~RecordingScope() { flag_ = saved_; }
    RecordingScope(const RecordingScope&) = delete;
    RecordingScope& operator=(const RecordingScope&) = delete;

private:
    bool& flag_;
    bool saved_;
};

}  // namespace

GradResult Graph::grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("grad", "loss must be a scalar, got shape " +
                                     (loss.defined() ? to_string(loss.shape()) : "undefined"));
    }
    GradResult result;
    result.grads.reserve(wrt.size());
    result.reachable.assign(wrt.size(), false);
    for (const auto& w : wrt) result.grads.push_back(Tensor::zeros(w.shape()));

    if (loss.graph() != this) {
        ++generation_;
        return result;
    }

    const std::size_t top = loss.node();
    std::size_t low = top + 1;
    std::vector<char> relevant(top + 1, 0);
    std::vector<char> target(top + 1, 0);
    for (const auto& w : wrt) {
        if (w.graph() == this && w.node() <= top) {
            relevant[w.node()] = 1;
            target[w.node()] = 1;
            low = std::min(low, w.node());
        }
    }
    for (std::size_t id = low; id <= top; ++id) {
        if (relevant[id]) continue;
        for (auto in : nodes_[id].inputs) {
            if (in >= 0 && relevant[static_cast<std::size_t>(in)]) {
                relevant[id] = 1;
                break;
            }
        }
    }

    std::vector<Tensor> adjoint(top + 1);
    if (low <= top && relevant[top]) {
        RecordingScope scope(recording_, create_graph);
        adjoint[top] = Tensor::full(loss.shape(), 1.0);
        for (std::size_t id = top + 1; id-- > low;) {
            if (!relevant[id] || !adjoint[id].defined()) continue;
            const Node& node = nodes_[id];
            if (!node.backward) continue;
            std::vector<bool> needs(node.inputs.size());
            bool any = false;
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                auto in = node.inputs[i];
                needs[i] = in >= 0 && relevant[static_cast<std::size_t>(in)];
                any = any || needs[i];
            }
            if (!any) continue;
            // deque::push_back keeps references to existing nodes valid
            const auto& inputs = node.inputs;
            auto grads = node.backward(adjoint[id], node.value, needs);
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                if (!needs[i]) continue;
                auto in = static_cast<std::size_t>(inputs[i]);
                if (grads.at(i).shape() != nodes_[in].value.shape()) {
                    throw ShapeError(std::string("backward of ") + std::string(nodes_[id].op),
                                     grads[i].shape(), nodes_[in].value.shape());
                }
                adjoint[in] = adjoint[in].defined() ? add(adjoint[in], grads[i]) : grads[i];
            }
            if (!create_graph && !target[id]) adjoint[id] = Tensor();
        }
    }

    for (std::size_t i = 0; i < wrt.size(); ++i) {
        const auto& w = wrt[i];
        if (w.graph() != this || w.node() > top) continue;
        const Tensor& g = adjoint[w.node()];
        if (!g.defined()) continue;
        result.grads[i] = create_graph ? g : g.detach();
        result.reachable[i] = true;
    }
    ++generation_;
    return result;
}

}  // namespace rlar::ad
