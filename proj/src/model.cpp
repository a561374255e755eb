#include "rlar/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rlar/ad/ops.hpp"
#include "rlar/errors.hpp"

namespace rlar::model {
namespace {

using ad::Shape;
using ad::Tensor;

struct ParamSpec {
    std::string name;
    Shape shape;
};

std::vector<ParamSpec> build_specs() {
    std::vector<ParamSpec> specs;
    auto conv = [&](const std::string& layer, std::size_t out, std::size_t in, std::size_t k) {
        specs.push_back({layer + ".weight", {out, in, k, k}});
        specs.push_back({layer + ".bias", {out}});
    };
    auto dense = [&](const std::string& layer, std::size_t out, std::size_t in) {
        specs.push_back({layer + ".weight", {out, in}});
        specs.push_back({layer + ".bias", {out}});
    };
    const auto& ch = kEncoderChannels;
    conv("enc1", ch[0], 1, 3);
    conv("enc2", ch[1], ch[0], 3);
    conv("enc3", ch[2], ch[1], 3);
    conv("enc4", ch[3], ch[2], 3);
    conv("bottleneck", ch[3], ch[3], 3);
    conv("dec3", ch[2], ch[3] + ch[2], 3);
    conv("dec2", ch[1], ch[2] + ch[1], 3);
    conv("dec1", ch[0], ch[1] + ch[0], 3);
    conv("dec0", ch[0], ch[0] + 1, 3);
    conv("seg", 1, ch[0], 1);
    dense("head1", kEmbeddingSize, ch[3]);
    dense("head2", kEmbeddingSize, kEmbeddingSize);
    dense("classifier", kNumClasses, kEmbeddingSize);
    return specs;
}

const std::vector<ParamSpec>& specs() {
    static const std::vector<ParamSpec> s = build_specs();
    return s;
}

Tensor conv_block(const ModelState& s, const std::string& layer, const Tensor& x, std::size_t stride) {
    const Tensor& w = s.at(layer + ".weight");
    const std::size_t pad = w.dim(2) / 2;
    return ad::add_bias(ad::conv2d(x, w, stride, pad), s.at(layer + ".bias"));
}

Tensor dense(const ModelState& s, const std::string& layer, const Tensor& x) {
    return ad::linear(x, s.at(layer + ".weight"), s.at(layer + ".bias"));
}

Tensor up_and_join(const Tensor& deep, const Tensor& skip) {
    const Tensor parts[] = {ad::upsample2x(deep), skip};
    return ad::concat_channels(parts);
}

}  // namespace

const std::vector<std::string>& parameter_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& s : specs()) n.push_back(s.name);
        return n;
    }();
    return names;
}

Shape parameter_shape(std::string_view name) {
    for (const auto& s : specs())
        if (s.name == name) return s.shape;
    throw ValidationError("unknown parameter '" + std::string(name) + "'");
}

bool is_decoder_param(std::string_view name) {
    return name.starts_with("dec") || name.starts_with("seg.");
}

std::size_t ModelState::index_of(std::string_view name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError("model has no parameter '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - names.begin());
}

const Tensor& ModelState::at(std::string_view name) const { return params[index_of(name)]; }
Tensor& ModelState::at(std::string_view name) { return params[index_of(name)]; }

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

ModelState init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelState state;
    for (const auto& spec : specs()) {
        state.names.push_back(spec.name);
        if (spec.shape.size() == 1) {
            state.params.push_back(Tensor::zeros(spec.shape));
            continue;
        }
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < spec.shape.size(); ++d) fan_in *= spec.shape[d];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> v(ad::numel(spec.shape));
        for (double& e : v) e = u(rng);
        state.params.emplace_back(spec.shape, std::move(v));
    }
    state.clinical_stats.mean.fill(0.0);
    state.clinical_stats.std.fill(1.0);
    return state;
}

ModelState attach(ad::Graph& graph, const ModelState& state) {
    ModelState out = state;
    for (auto& p : out.params) p = graph.leaf(p.detach());
    return out;
}

HookLayer parse_hook_layer(std::string_view tag) {
    if (tag == "bottleneck") return HookLayer::bottleneck;
    if (tag == "last" || tag == "last_encoder") return HookLayer::last_encoder;
    if (tag == "mid" || tag == "mid_encoder") return HookLayer::mid_encoder;
    throw ValidationError("unknown hook layer '" + std::string(tag) + "'");
}

std::string_view hook_tag(HookLayer layer) {
    switch (layer) {
        case HookLayer::bottleneck: return "bottleneck";
        case HookLayer::last_encoder: return "last";
        case HookLayer::mid_encoder: return "mid";
    }
    return "bottleneck";
}

const Tensor& ForwardOutputs::hook(HookLayer layer) const {
    switch (layer) {
        case HookLayer::last_encoder: return encoder[3];
        case HookLayer::mid_encoder: return encoder[1];
        case HookLayer::bottleneck: break;
    }
    return bottleneck;
}

Tensor ForwardOutputs::clinical() const { return ad::narrow(embedding, 0, kClinicalSize); }

ForwardOutputs forward(const ModelState& state, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(0) == 0)
        throw ad::ShapeError("forward", "expected B x 1 x H x W input, got " + ad::to_string(x.shape()));
    const std::size_t height = x.dim(2), width = x.dim(3);
    if (height == 0 || width == 0 || height % kSpatialDivisor || width % kSpatialDivisor)
        throw ad::ShapeError("forward", "spatial size " + ad::to_string(x.shape()) + " not divisible by " +
                                            std::to_string(kSpatialDivisor));

    ForwardOutputs out;
    Tensor h = x;
    const char* stages[] = {"enc1", "enc2", "enc3", "enc4"};
    for (std::size_t i = 0; i < 4; ++i) {
        h = ad::relu(conv_block(state, stages[i], h, 2));
        out.encoder[i] = h;
    }
    out.bottleneck = ad::relu(conv_block(state, "bottleneck", h, 1));

    Tensor d = ad::relu(conv_block(state, "dec3", up_and_join(out.bottleneck, out.encoder[2]), 1));
    d = ad::relu(conv_block(state, "dec2", up_and_join(d, out.encoder[1]), 1));
    d = ad::relu(conv_block(state, "dec1", up_and_join(d, out.encoder[0]), 1));
    d = ad::relu(conv_block(state, "dec0", up_and_join(d, x), 1));
    out.segmentation = ad::reshape(ad::sigmoid(conv_block(state, "seg", d, 1)), {x.dim(0), height, width});

    Tensor pooled = ad::global_avg_pool(out.bottleneck);
    out.embedding = dense(state, "head2", ad::relu(dense(state, "head1", pooled)));
    out.logits = dense(state, "classifier", out.embedding);
    return out;
}

Tensor dice_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ad::ShapeError("dice_loss", pred.shape(), target.shape());
    Tensor inter = ad::sum_per_sample(ad::mul(pred, target));
    Tensor num = ad::add_scalar(ad::scale(inter, 2.0), kDiceSmoothing);
    Tensor den = ad::add_scalar(ad::add(ad::sum_per_sample(pred), ad::sum_per_sample(target)), kDiceSmoothing);
    return ad::add_scalar(ad::scale(ad::mean(ad::div(num, den, 0.0)), -1.0), 1.0);
}

Tensor weighted_ce(const Tensor& logits, std::span<const int> labels, std::span<const double> class_weights) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ad::ShapeError("weighted_ce", "logits " + ad::to_string(logits.shape()) + " vs " +
                                                std::to_string(labels.size()) + " labels");
    const std::size_t classes = logits.dim(1);
    if (class_weights.size() != classes)
        throw ad::ShapeError("weighted_ce", std::to_string(class_weights.size()) + " weights for " +
                                                std::to_string(classes) + " classes");
    double total = 0.0;
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ValidationError("weighted_ce: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(classes) + ")");
        const double w = class_weights[static_cast<std::size_t>(y)];
        if (!(w > 0.0)) throw ValidationError("weighted_ce: class weights must be positive");
        total += w;
    }
    std::vector<double> select(logits.size(), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        select[i * classes + y] = class_weights[y] / total;
    }
    return ad::scale(ad::sum(ad::mul(ad::log_softmax(logits), Tensor(logits.shape(), std::move(select)))), -1.0);
}

Tensor clin_loss(const Tensor& clinical, const Tensor& targets) {
    if (clinical.shape() != targets.shape() || clinical.rank() != 2)
        throw ad::ShapeError("clin_loss", clinical.shape(), targets.shape());
    return ad::scale(ad::sum(ad::square(ad::sub(clinical, targets))), 1.0 / static_cast<double>(clinical.dim(0)));
}

Prediction predict(const ModelState& state, const Tensor& images) {
    const Tensor x = images.detach();
    ModelState constants = state;
    for (auto& p : constants.params) p = p.detach();
    ForwardOutputs out = forward(constants, x);
    Prediction pred{out.segmentation, out.logits, out.embedding, {}};
    const std::size_t classes = out.logits.dim(1);
    for (std::size_t i = 0; i < out.logits.dim(0); ++i) {
        const auto row = out.logits.values().subspan(i * classes, classes);
        pred.labels.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return pred;
}

}  // namespace rlar::model
