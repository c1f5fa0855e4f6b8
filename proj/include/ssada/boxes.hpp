#pragma once

// Box geometry and mAP@0.5 evaluation.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ssada/tensor.hpp"

namespace ssada {

class InvalidBoxError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Pixel-space box with x1 < x2, y1 < y2. score is meaningful for predictions only.
struct BoundingBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int cls = 0;
    double score = 1.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x1 < x2 && y1 < y2; }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

void require_valid(const BoundingBox& box);

/// Intersection over union; throws InvalidBoxError for degenerate boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy per-class suppression in descending score order (lower index first on
/// equal scores). A box is dropped when its IoU with a kept box exceeds the threshold.
std::vector<BoundingBox> nms(std::vector<BoundingBox> detections, double iou_threshold = 0.5);

struct ApResult {
    double ap = 0.0;
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::size_t ground_truths = 0;
};

/// All-point interpolated average precision for one class over a set of images.
/// Detections are visited by descending score; each one claims the unmatched
/// ground truth of its image with the highest IoU, if that IoU reaches the
/// threshold. Returns nullopt when the class has no ground truth.
std::optional<ApResult> average_precision(std::span<const std::vector<BoundingBox>> detections,
                                          std::span<const std::vector<BoundingBox>> ground_truths, int cls,
                                          double iou_threshold = 0.5);

struct EvalResult {
    /// nullopt for classes without ground truth (excluded from mAP).
    std::vector<std::optional<double>> per_class_ap;
    double map = 0.0;
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::size_t false_negatives = 0;

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

struct DetectionSample {
    Tensor image;  // [3, H, W] in [0, 1]
    std::vector<BoundingBox> boxes;
};

/// Raw (pre-threshold, pre-NMS) detections for one image of the evaluated set.
using Predictor = std::function<std::vector<BoundingBox>(std::size_t index, const Tensor& image)>;

/// predict -> score threshold -> NMS -> per-class AP -> mAP. Throws on an empty dataset.
EvalResult evaluate(const Predictor& predict, std::span<const DetectionSample> dataset, int num_classes,
                    double score_threshold = 0.05, double iou_threshold = 0.5);

}  // namespace ssada
