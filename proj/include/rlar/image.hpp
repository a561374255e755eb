#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace rlar {

// Row-major 2-D grid.
template <class T>
struct Grid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    template <class U>
    bool same_shape(const Grid<U>& other) const {
        return rows == other.rows && cols == other.cols;
    }

    bool operator==(const Grid&) const = default;
};

using Image = Grid<double>;  // intensities in [0, 1]
using Mask = Grid<std::uint8_t>;  // 0 or 1

std::string shape_string(std::size_t rows, std::size_t cols);

std::size_t count_foreground(const Mask& mask);

// Foreground pixels with at least one 8-neighbour in the background.
// Pixels outside the grid count as background.
Mask boundary(const Mask& mask);

// Dilation with a (2r+1) x (2r+1) square, i.e. 8-connected radius r.
Mask dilate(const Mask& mask, std::size_t radius);

}  // namespace rlar
