#pragma once

// Toy single-stage detector: a five-block convolutional backbone with feature
// taps, a 1x1-convolution grid head, and its training targets and loss.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "ssada/align.hpp"
#include "ssada/boxes.hpp"
#include "ssada/layers.hpp"

namespace ssada {

inline constexpr int kNumClasses = 3;
inline constexpr std::int64_t kImageSize = 64;
inline constexpr int kNumBlocks = 5;

/// Input channels followed by the output channels of blocks 1..5.
using ChannelPlan = std::array<std::int64_t, kNumBlocks + 1>;
inline constexpr ChannelPlan kDefaultChannelPlan{3, 16, 32, 64, 96, 128};

/// Produces the attention map for a block output (normally an AttentionNet).
using AttentionHook = std::function<AttentionMap(const FeatureMap&)>;
using AttentionHooks = std::map<int, AttentionHook>;

struct BackboneOutput {
    std::map<int, FeatureMap> raw;       // Z^l for l = 1..5
    std::map<int, FeatureMap> attended;  // Z^l_phi for blocks with an attention hook
    std::map<int, AttentionMap> maps;
    FeatureMap final;                    // Z^5_phi if block 5 is attended, else Z^5
};

/// Block l: conv3x3 -> relu -> conv3x3 -> relu -> maxpool 2. With an attention
/// hook on block l, Z^l_phi replaces Z^l as the input of block l+1.
class Backbone {
public:
    Backbone() = default;
    Backbone(std::uint64_t seed, const ChannelPlan& plan = kDefaultChannelPlan);

    /// image: [3, H, W] with H, W multiples of 32.
    BackboneOutput forward(const Tensor& image, const AttentionHooks& hooks = {}) const;
    std::int64_t channels(int block) const { return plan_.at(static_cast<std::size_t>(block)); }
    ParameterList parameters() const;

private:
    ChannelPlan plan_{};
    std::array<Conv, 2 * kNumBlocks> convs_;
};

/// Head output channel layout: [objectness, class logits (K), tx, ty, tw, th].
inline constexpr std::int64_t kHeadChannels = 1 + kNumClasses + 4;

class DetectionHead {
public:
    DetectionHead() = default;
    DetectionHead(std::int64_t in_channels, std::uint64_t seed);

    /// [C, G, G] -> [kHeadChannels, G, G].
    Tensor forward(const Tensor& features) const;
    ParameterList parameters() const;

private:
    Conv conv_;
};

/// Cell-relative box parameterisation: centre offset in cell units from the
/// cell's top-left corner, log of width/height over the cell size.
struct BoxEncoding {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

BoxEncoding encode_box(const BoundingBox& box, int row, int col, double cell_size);
/// Inverse of encode_box, clipped to [0, image_width] x [0, image_height].
BoundingBox decode_box(const BoxEncoding& code, int row, int col, double cell_size, double image_width,
                       double image_height);

struct GridTargets {
    int grid = 0;
    std::vector<double> objectness;  // [G*G]
    std::vector<int> labels;         // [G*G], -1 on negative cells
    std::vector<double> box;         // [4, G, G], channel-major like the head
    std::vector<double> box_weight;  // [4, G, G], 1/positives on positive cells
    int positives = 0;
};

/// Each box goes to the cell containing its centre; when several share a cell
/// the largest area wins (earliest on equal areas).
GridTargets assign_targets(const std::vector<BoundingBox>& boxes, int grid, double image_size = kImageSize);

/// Relative weight of the box term; offsets are in cell units, so a few pixels
/// of error would otherwise barely register against the classification terms.
inline constexpr double kBoxLossWeight = 10.0;

/// mean-over-cells objectness BCE + class cross-entropy over positive cells
/// + box_weight * smooth-L1 box loss averaged over positive cells.
Tensor detection_loss(const Tensor& head_out, const GridTargets& targets, double box_weight = kBoxLossWeight);

/// One box per (cell, class) scored sigmoid(objectness) * softmax(class).
std::vector<BoundingBox> decode_detections(const Tensor& head_out, double image_width = kImageSize,
                                           double image_height = kImageSize);

}  // namespace ssada
