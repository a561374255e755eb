#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "rlar/ad/tensor.hpp"

namespace rlar::ad {

// Vector-Jacobian product of one recorded op. Receives the incoming
// adjoint, the op's own output and a mask of which inputs need gradients;
// returns one tensor per input (undefined where not needed). Backward
// functions are written with the public ops, so when the graph is recording
// they extend the graph and can be differentiated again.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad_out, const Tensor& out, const std::vector<bool>& needs)>;

struct GradResult {
    std::vector<Tensor> grads;
    // False where the wrt tensor does not influence the loss; the matching
    // gradient is then an explicit zero tensor.
    std::vector<bool> reachable;

    bool all_reachable() const;
};

// Append-only tape. Node ids are assigned in creation order, so inputs
// always precede outputs and reverse id order is a valid backward order.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Tensor leaf(const Tensor& value);

    // Gradients of a scalar loss. With create_graph the returned tensors are
    // graph nodes themselves; otherwise they are detached constants.
    GradResult grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph);

    std::size_t size() const { return nodes_.size(); }
    std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
    bool recording() const { return recording_; }
    // Number of completed grad() calls.
    std::uint64_t generation() const { return generation_; }

    // Used by the op library; callers normally go through rlar::ad ops.
    Tensor record(std::string_view op, Tensor out, const std::vector<Tensor>& inputs,
                  BackwardFn backward);

private:
    struct Node {
        std::string_view op;
        std::vector<std::ptrdiff_t> inputs;  // -1 for constant inputs
        BackwardFn backward;
        Tensor value;
    };

    // deque: backward functions may append nodes while a node is in use
    std::deque<Node> nodes_;
    bool recording_ = true;
    std::uint64_t generation_ = 0;
};

}  // namespace rlar::ad
