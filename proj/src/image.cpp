#include "rlar/image.hpp"

#include <algorithm>

namespace rlar {

std::string shape_string(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

std::size_t count_foreground(const Mask& mask) {
    return static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

Mask boundary(const Mask& mask) {
    Mask out(mask.rows, mask.cols, 0);
    const auto rows = static_cast<std::ptrdiff_t>(mask.rows);
    const auto cols = static_cast<std::ptrdiff_t>(mask.cols);
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        for (std::ptrdiff_t c = 0; c < cols; ++c) {
            if (!mask(r, c)) continue;
            bool edge = false;
            for (std::ptrdiff_t dr = -1; dr <= 1 && !edge; ++dr) {
                for (std::ptrdiff_t dc = -1; dc <= 1 && !edge; ++dc) {
                    const auto nr = r + dr, nc = c + dc;
                    edge = nr < 0 || nc < 0 || nr >= rows || nc >= cols || !mask(nr, nc);
                }
            }
            out(r, c) = edge ? 1 : 0;
        }
    }
    return out;
}

Mask dilate(const Mask& mask, std::size_t radius) {
    Mask out(mask.rows, mask.cols, 0);
    for (std::size_t r = 0; r < mask.rows; ++r) {
        for (std::size_t c = 0; c < mask.cols; ++c) {
            if (!mask(r, c)) continue;
            const std::size_t r0 = r > radius ? r - radius : 0;
            const std::size_t c0 = c > radius ? c - radius : 0;
            const std::size_t r1 = std::min(mask.rows - 1, r + radius);
            const std::size_t c1 = std::min(mask.cols - 1, c + radius);
            for (std::size_t i = r0; i <= r1; ++i)
                for (std::size_t j = c0; j <= c1; ++j) out(i, j) = 1;
        }
    }
    return out;
}

}  // namespace rlar
