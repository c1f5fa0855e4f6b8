#include "ssada/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ssada/ops.hpp"
#include "ssada/random.hpp"

namespace ssada {

Backbone::Backbone(std::uint64_t seed, const ChannelPlan& plan) : plan_(plan) {
    for (int block = 1; block <= kNumBlocks; ++block) {
        const auto in = plan_[static_cast<std::size_t>(block - 1)];
        const auto out = plan_[static_cast<std::size_t>(block)];
        const std::string name = "backbone.block" + std::to_string(block);
        convs_[static_cast<std::size_t>(2 * block - 2)] = Conv(in, out, 3, derive_seed(seed, name + ".conv1"));
        convs_[static_cast<std::size_t>(2 * block - 1)] = Conv(out, out, 3, derive_seed(seed, name + ".conv2"));
    }
}

BackboneOutput Backbone::forward(const Tensor& image, const AttentionHooks& hooks) const {
    if (image.rank() != 3 || image.dim(0) != plan_[0] || image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
        throw ShapeError("backbone expects [" + std::to_string(plan_[0]) +
                         ",H,W] with H and W multiples of 32, got " + shape_string(image.shape()));
    }
    BackboneOutput out;
    Tensor x = image;
    for (int block = 1; block <= kNumBlocks; ++block) {
        x = relu(convs_[static_cast<std::size_t>(2 * block - 2)](x));
        x = relu(convs_[static_cast<std::size_t>(2 * block - 1)](x));
        x = max_pool2d(x, 2, 2);
        FeatureMap z(x, block);
        out.raw.emplace(block, z);
        if (const auto hook = hooks.find(block); hook != hooks.end()) {
            AttentionMap phi = hook->second(z);
            FeatureMap attended = attention_apply(phi, z);
            x = attended.z;
            out.maps.emplace(block, std::move(phi));
            out.attended.emplace(block, std::move(attended));
        }
    }
    out.final = FeatureMap(x, kNumBlocks);
    return out;
}

ParameterList Backbone::parameters() const {
    ParameterList out;
    for (int block = 1; block <= kNumBlocks; ++block) {
        const std::string name = "backbone.block" + std::to_string(block);
        convs_[static_cast<std::size_t>(2 * block - 2)].collect(name + ".conv1", out);
        convs_[static_cast<std::size_t>(2 * block - 1)].collect(name + ".conv2", out);
    }
    return out;
}

DetectionHead::DetectionHead(std::int64_t in_channels, std::uint64_t seed)
    : conv_(in_channels, kHeadChannels, 1, derive_seed(seed, "head.conv")) {}

Tensor DetectionHead::forward(const Tensor& features) const { return conv_(features); }

ParameterList DetectionHead::parameters() const {
    ParameterList out;
    conv_.collect("head.conv", out);
    return out;
}

BoxEncoding encode_box(const BoundingBox& box, int row, int col, double cell_size) {
    require_valid(box);
    return {box.center_x() / cell_size - col, box.center_y() / cell_size - row, std::log(box.width() / cell_size),
            std::log(box.height() / cell_size)};
}

BoundingBox decode_box(const BoxEncoding& code, int row, int col, double cell_size, double image_width,
                       double image_height) {
    const double cx = (col + code.tx) * cell_size;
    const double cy = (row + code.ty) * cell_size;
    const double half_w = 0.5 * cell_size * std::exp(code.tw);
    const double half_h = 0.5 * cell_size * std::exp(code.th);
    BoundingBox box;
    box.x1 = std::clamp(cx - half_w, 0.0, image_width);
    box.y1 = std::clamp(cy - half_h, 0.0, image_height);
    box.x2 = std::clamp(cx + half_w, 0.0, image_width);
    box.y2 = std::clamp(cy + half_h, 0.0, image_height);
    return box;
}

GridTargets assign_targets(const std::vector<BoundingBox>& boxes, int grid, double image_size) {
    GridTargets t;
    t.grid = grid;
    const auto cells = static_cast<std::size_t>(grid * grid);
    t.objectness.assign(cells, 0.0);
    t.labels.assign(cells, -1);
    t.box.assign(4 * cells, 0.0);
    t.box_weight.assign(4 * cells, 0.0);

    const double cell_size = image_size / grid;
    std::vector<const BoundingBox*> owner(cells, nullptr);
    for (const auto& b : boxes) {
        require_valid(b);
        const int col = std::clamp(static_cast<int>(std::floor(b.center_x() / cell_size)), 0, grid - 1);
        const int row = std::clamp(static_cast<int>(std::floor(b.center_y() / cell_size)), 0, grid - 1);
        auto& slot = owner[static_cast<std::size_t>(row * grid + col)];
        if (!slot || b.area() > slot->area()) slot = &b;
    }
    for (const auto* b : owner) t.positives += b ? 1 : 0;
    for (int row = 0; row < grid; ++row) {
        for (int col = 0; col < grid; ++col) {
            const auto cell = static_cast<std::size_t>(row * grid + col);
            const BoundingBox* b = owner[cell];
            if (!b) continue;
            t.objectness[cell] = 1.0;
            t.labels[cell] = b->cls;
            const BoxEncoding code = encode_box(*b, row, col, cell_size);
            const double values[4] = {code.tx, code.ty, code.tw, code.th};
            for (std::size_t k = 0; k < 4; ++k) {
                t.box[k * cells + cell] = values[k];
                t.box_weight[k * cells + cell] = 1.0 / t.positives;
            }
        }
    }
    return t;
}

Tensor detection_loss(const Tensor& head_out, const GridTargets& targets, double box_weight) {
    if (head_out.rank() != 3 || head_out.dim(0) != kHeadChannels || head_out.dim(1) != targets.grid ||
        head_out.dim(2) != targets.grid) {
        throw ShapeError("detection_loss: head output " + shape_string(head_out.shape()) + " does not match a " +
                         std::to_string(targets.grid) + "x" + std::to_string(targets.grid) + " target grid");
    }
    const Tensor objectness = bce_with_logits(slice(head_out, 0, 1), targets.objectness);
    if (targets.positives == 0) return objectness;
    const Tensor classes = softmax_cross_entropy(slice(head_out, 1, kNumClasses), targets.labels);
    const Tensor boxes = scale(smooth_l1(slice(head_out, 1 + kNumClasses, 4), targets.box, targets.box_weight), box_weight);
    return add(add(objectness, classes), boxes);
}

std::vector<BoundingBox> decode_detections(const Tensor& head_out, double image_width, double image_height) {
    if (head_out.rank() != 3 || head_out.dim(0) != kHeadChannels) {
        throw ShapeError("decode_detections: unexpected head output " + shape_string(head_out.shape()));
    }
    const auto rows = head_out.dim(1);
    const auto cols = head_out.dim(2);
    const auto cells = static_cast<std::size_t>(rows * cols);
    const double cell_size = image_width / static_cast<double>(cols);
    const auto v = head_out.values();
    auto channel = [&](std::size_t ch, std::size_t cell) { return v[ch * cells + cell]; };

    std::vector<BoundingBox> out;
    for (std::int64_t row = 0; row < rows; ++row) {
        for (std::int64_t col = 0; col < cols; ++col) {
            const auto cell = static_cast<std::size_t>(row * cols + col);
            const BoxEncoding code{channel(1 + kNumClasses, cell), channel(2 + kNumClasses, cell),
                                   channel(3 + kNumClasses, cell), channel(4 + kNumClasses, cell)};
            BoundingBox box = decode_box(code, static_cast<int>(row), static_cast<int>(col), cell_size, image_width,
                                         image_height);
            if (!box.valid()) continue;
            const double objectness = 1.0 / (1.0 + std::exp(-channel(0, cell)));
            double top = channel(1, cell);
            for (int k = 1; k < kNumClasses; ++k) top = std::max(top, channel(1 + k, cell));
            double denom = 0.0;
            for (int k = 0; k < kNumClasses; ++k) denom += std::exp(channel(1 + k, cell) - top);
            for (int k = 0; k < kNumClasses; ++k) {
                box.cls = k;
                box.score = objectness * std::exp(channel(1 + k, cell) - top) / denom;
                out.push_back(box);
            }
        }
    }
    return out;
}

}  // namespace ssada
