#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rlar/errors.hpp"

namespace rlar::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Graph;

// Immutable dense float64 array, row-major. A tensor that carries a node
// belongs to exactly one Graph; copies share storage and the node.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    std::span<const double> values() const { return {data_->data(), data_->size()}; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const;

    // True when the tensor is a node of a graph (gradients can flow to it).
    bool has_node() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    std::size_t node() const { return node_; }

    // Same values, no graph membership.
    Tensor detach() const;

private:
    friend class Graph;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Graph* graph_ = nullptr;
    std::size_t node_ = 0;
};

class ShapeError : public ValidationError {
public:
    ShapeError(const std::string& op, const Shape& a, const Shape& b);
    ShapeError(const std::string& op, const std::string& message);
};

}  // namespace rlar::ad
