#include "ssada/boxes.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace ssada {

void require_valid(const BoundingBox& box) {
    if (!box.valid()) {
        throw InvalidBoxError("degenerate box (" + std::to_string(box.x1) + ", " + std::to_string(box.y1) + ", " +
                              std::to_string(box.x2) + ", " + std::to_string(box.y2) + ")");
    }
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    require_valid(a);
    require_valid(b);
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    // canonical order: FMA contraction would otherwise make the union depend on argument order
    const double area_a = a.area(), area_b = b.area();
    return inter / (std::min(area_a, area_b) + std::max(area_a, area_b) - inter);
}

std::vector<BoundingBox> nms(std::vector<BoundingBox> detections, double iou_threshold) {
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    std::vector<bool> suppressed(detections.size(), false);
    std::vector<BoundingBox> kept;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& candidate = detections[order[i]];
        if (suppressed[order[i]]) continue;
        kept.push_back(candidate);
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            const auto& other = detections[order[j]];
            if (!suppressed[order[j]] && other.cls == candidate.cls && iou(candidate, other) > iou_threshold) {
                suppressed[order[j]] = true;
            }
        }
    }
    return kept;
}

std::optional<ApResult> average_precision(std::span<const std::vector<BoundingBox>> detections,
                                          std::span<const std::vector<BoundingBox>> ground_truths, int cls,
                                          double iou_threshold) {
    if (detections.size() != ground_truths.size()) {
        throw std::invalid_argument("average_precision: detections and ground truths cover different image counts");
    }
    ApResult result;
    std::vector<std::vector<bool>> matched(ground_truths.size());
    for (std::size_t img = 0; img < ground_truths.size(); ++img) {
        matched[img].assign(ground_truths[img].size(), false);
        for (const auto& gt : ground_truths[img]) result.ground_truths += gt.cls == cls ? 1 : 0;
    }
    if (result.ground_truths == 0) return std::nullopt;

    struct Ranked {
        double score;
        std::size_t image;
        std::size_t index;
    };
    std::vector<Ranked> ranked;
    for (std::size_t img = 0; img < detections.size(); ++img) {
        for (std::size_t k = 0; k < detections[img].size(); ++k) {
            if (detections[img][k].cls == cls) ranked.push_back({detections[img][k].score, img, k});
        }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::vector<double> precision(ranked.size());
    std::vector<double> recall(ranked.size());
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        const auto& det = detections[ranked[r].image][ranked[r].index];
        const auto& gts = ground_truths[ranked[r].image];
        double best = -1.0;
        std::size_t best_index = 0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gts[g].cls != cls || matched[ranked[r].image][g]) continue;
            const double overlap = iou(det, gts[g]);
            if (overlap > best) {
                best = overlap;
                best_index = g;
            }
        }
        if (best >= iou_threshold) {
            matched[ranked[r].image][best_index] = true;
            ++result.true_positives;
        } else {
            ++result.false_positives;
        }
        precision[r] = static_cast<double>(result.true_positives) / static_cast<double>(r + 1);
        recall[r] = static_cast<double>(result.true_positives) / static_cast<double>(result.ground_truths);
    }

    // Area under the monotone precision envelope.
    for (std::size_t r = ranked.size(); r-- > 1;) precision[r - 1] = std::max(precision[r - 1], precision[r]);
    double previous_recall = 0.0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        result.ap += (recall[r] - previous_recall) * precision[r];
        previous_recall = recall[r];
    }
    return result;
}

EvalResult evaluate(const Predictor& predict, std::span<const DetectionSample> dataset, int num_classes,
                    double score_threshold, double iou_threshold) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<std::vector<BoundingBox>> detections(dataset.size());
    std::vector<std::vector<BoundingBox>> truths(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::vector<BoundingBox> raw = predict(i, dataset[i].image);
        std::erase_if(raw, [&](const BoundingBox& b) { return b.score < score_threshold; });
        detections[i] = nms(std::move(raw), iou_threshold);
        truths[i] = dataset[i].boxes;
    }

    EvalResult result;
    result.per_class_ap.resize(static_cast<std::size_t>(num_classes));
    double ap_sum = 0.0;
    int counted = 0;
    std::size_t total_gt = 0;
    for (int c = 0; c < num_classes; ++c) {
        const auto ap = average_precision(detections, truths, c, iou_threshold);
        if (!ap) {
            for (const auto& dets : detections)
                result.false_positives += static_cast<std::size_t>(std::count_if(
                    dets.begin(), dets.end(), [c](const BoundingBox& b) { return b.cls == c; }));
            continue;
        }
        result.per_class_ap[static_cast<std::size_t>(c)] = ap->ap;
        ap_sum += ap->ap;
        ++counted;
        result.true_positives += ap->true_positives;
        result.false_positives += ap->false_positives;
        total_gt += ap->ground_truths;
    }
    result.false_negatives = total_gt - result.true_positives;
    result.map = counted ? ap_sum / counted : 0.0;
    return result;
}

}  // namespace ssada
