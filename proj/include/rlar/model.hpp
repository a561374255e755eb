#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlar/ad/graph.hpp"
#include "rlar/ad/tensor.hpp"
#include "rlar/features.hpp"

// Multitask network: a shared strided-conv encoder feeding a skip-connected
// segmentation decoder and a classification head whose embedding reserves
// its first 13 channels for the clinical feature targets.
namespace rlar::model {

inline constexpr std::size_t kNumClasses = 5;
inline constexpr std::size_t kEmbeddingSize = 64;
inline constexpr std::size_t kClinicalSize = features::kFeatureCount;
inline constexpr std::array<std::size_t, 4> kEncoderChannels = {8, 16, 32, 64};
inline constexpr std::size_t kSpatialDivisor = 16;

static_assert(kEmbeddingSize > kClinicalSize);

struct ModelState {
    std::vector<std::string> names;
    std::vector<ad::Tensor> params;
    features::StandardizationStats clinical_stats{};

    const ad::Tensor& at(std::string_view name) const;
    ad::Tensor& at(std::string_view name);
    std::size_t index_of(std::string_view name) const;
    std::size_t parameter_count() const;
};

// Parameter names in storage order.
const std::vector<std::string>& parameter_names();
// Expected shape of every named parameter.
ad::Shape parameter_shape(std::string_view name);
bool is_decoder_param(std::string_view name);

// Conv and linear weights uniform in +-sqrt(6 / fan_in); biases zero.
// Standardization stats start as mean 0, std 1.
ModelState init_params(std::uint64_t seed);

// Copy of state whose parameters are leaves of graph.
ModelState attach(ad::Graph& graph, const ModelState& state);

// Representation taps available to the regularizer.
enum class HookLayer { bottleneck, last_encoder, mid_encoder };

HookLayer parse_hook_layer(std::string_view tag);
std::string_view hook_tag(HookLayer layer);

struct ForwardOutputs {
    ad::Tensor segmentation;  // B x H x W, sigmoid probabilities
    ad::Tensor logits;        // B x C
    ad::Tensor embedding;     // B x K
    // Encoder stage outputs at H/2, H/4, H/8, H/16, then the bottleneck at H/16.
    std::array<ad::Tensor, 4> encoder;
    ad::Tensor bottleneck;

    const ad::Tensor& hook(HookLayer layer) const;
    ad::Tensor clinical() const;  // embedding channels [0, 13)
};

// x: B x 1 x H x W with H and W divisible by 16. Parameters that are leaves
// of a graph make every output a node of that graph.
ForwardOutputs forward(const ModelState& state, const ad::Tensor& x);

// 1 - (2 sum(S*M) + 1) / (sum S + sum M + 1), averaged over the batch.
ad::Tensor dice_loss(const ad::Tensor& pred, const ad::Tensor& target);
inline constexpr double kDiceSmoothing = 1.0;

// Class-weighted NLL normalized by the sum of the weights actually applied.
ad::Tensor weighted_ce(const ad::Tensor& logits, std::span<const int> labels,
                       std::span<const double> class_weights);

// Batch mean of the squared L2 distance between rows.
ad::Tensor clin_loss(const ad::Tensor& clinical, const ad::Tensor& targets);

struct Prediction {
    ad::Tensor segmentation;  // B x H x W probabilities
    ad::Tensor logits;
    ad::Tensor embedding;
    std::vector<int> labels;  // argmax of logits
};

// Image-only inference; no masks or clinical features involved.
Prediction predict(const ModelState& state, const ad::Tensor& images);

}  // namespace rlar::model
