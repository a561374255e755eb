#include "rlar/ad/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

namespace rlar::ad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    for (auto extent : shape_) {
        if (extent == 0) throw ShapeError("tensor", "zero extent in shape " + to_string(shape_));
    }
    if (numel(shape_) != values.size()) {
        throw ShapeError("tensor", "shape " + to_string(shape_) + " holds " +
                                       std::to_string(numel(shape_)) + " values, got " +
                                       std::to_string(values.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item", "expected one element, shape " + to_string(shape_));
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor t = *this;
    t.graph_ = nullptr;
    t.node_ = 0;
    return t;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : ValidationError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& message)
    : ValidationError(op + ": " + message) {}

}  // namespace rlar::ad
