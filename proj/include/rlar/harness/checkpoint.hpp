#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rlar/ad/tensor.hpp"

namespace rlar::harness {

struct NamedArray {
    std::string name;
    ad::Tensor value;
};

// Binary layout (all integers little-endian):
//   "RLARCKPT1"
//   u32 array count
//   per array: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//              float32 payload
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

// Rounds every value to the nearest float32.
ad::Tensor round_to_float(const ad::Tensor& t);

}  // namespace rlar::harness
