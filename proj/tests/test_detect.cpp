#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssada/boxes.hpp"
#include "ssada/detector.hpp"
#include "ssada/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ssada;
using testutil::random_tensor;
using testutil::to_vector;

namespace {

BoundingBox box(double x1, double y1, double x2, double y2, int cls = 0, double score = 1.0) {
    return {x1, y1, x2, y2, cls, score};
}

BoundingBox random_box(SplitMix64& rng, int classes = 1) {
    const double x1 = rng.uniform(0, 50), y1 = rng.uniform(0, 50);
    return box(x1, y1, x1 + rng.uniform(2, 14), y1 + rng.uniform(2, 14), static_cast<int>(rng.uniform_int(0, classes - 1)),
               rng.next_unit());
}

}  // namespace

TEST_CASE("iou examples and errors") {
    const auto a = box(0, 0, 2, 2);
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, box(3, 3, 4, 4)) == 0.0);
    CHECK(iou(a, box(2, 0, 4, 2)) == 0.0);
    CHECK(iou(a, box(1, 1, 3, 3)) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK_THROWS_AS(iou(a, box(1, 1, 1, 3)), InvalidBoxError);
    CHECK_THROWS_AS(iou(box(2, 0, 1, 1), a), InvalidBoxError);
}

TEST_CASE("iou is symmetric and bounded") {
    SplitMix64 rng(1);
    for (int i = 0; i < 500; ++i) {
        const auto a = random_box(rng), b = random_box(rng);
        CHECK(iou(a, b) == iou(b, a));
        CHECK((iou(a, b) >= 0.0 && iou(a, b) <= 1.0));
    }
}

TEST_CASE("nms examples") {
    const auto kept = nms({box(0, 0, 10, 10, 0, 0.8), box(0, 0, 10, 10, 0, 0.9)});
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
    CHECK(nms({box(0, 0, 5, 5), box(10, 10, 15, 15), box(20, 20, 25, 25)}).size() == 3);
    // other classes are never suppressed
    CHECK(nms({box(0, 0, 10, 10, 0, 0.9), box(0, 0, 10, 10, 1, 0.8)}).size() == 2);
    // equal scores: lower index wins
    const auto tie = nms({box(0, 0, 10, 10, 0, 0.5), box(1, 0, 11, 10, 0, 0.5)});
    REQUIRE(tie.size() == 1);
    CHECK(tie[0].x1 == 0.0);
}

TEST_CASE("nms equals the exhaustive oracle") {
    SplitMix64 rng(2);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<BoundingBox> boxes;
        const auto n = rng.uniform_int(0, 8);
        for (int i = 0; i < n; ++i) {
            auto b = random_box(rng, 2);
            b.x1 = rng.uniform(0, 12);  // crowd them so suppression chains occur
            b.y1 = rng.uniform(0, 12);
            b.x2 = b.x1 + rng.uniform(6, 14);
            b.y2 = b.y1 + rng.uniform(6, 14);
            if (trial % 5 == 0) b.score = static_cast<double>(rng.uniform_int(0, 2)) / 2.0;  // ties
            boxes.push_back(b);
        }
        CHECK(nms(boxes, 0.5) == testutil::nms_oracle(boxes, 0.5));
        CHECK(nms(boxes, 0.3) == testutil::nms_oracle(boxes, 0.3));
    }
}

TEST_CASE("average precision examples") {
    const std::vector<std::vector<BoundingBox>> gt{{box(0, 0, 10, 10)}};
    const std::vector<std::vector<BoundingBox>> one{{box(0, 0, 10, 10, 0, 0.9)}};
    CHECK(average_precision(one, gt, 0)->ap == 1.0);
    const std::vector<std::vector<BoundingBox>> fp_first{{box(30, 30, 40, 40, 0, 0.9), box(0, 0, 10, 10, 0, 0.8)}};
    CHECK(average_precision(fp_first, gt, 0)->ap == doctest::Approx(0.5));
    const std::vector<std::vector<BoundingBox>> tp_first{{box(0, 0, 10, 10, 0, 0.9), box(30, 30, 40, 40, 0, 0.8)}};
    CHECK(average_precision(tp_first, gt, 0)->ap == doctest::Approx(1.0));
    CHECK_FALSE(average_precision(one, gt, 1).has_value());
    CHECK(average_precision(std::vector<std::vector<BoundingBox>>{{}}, gt, 0)->ap == 0.0);
    CHECK_THROWS(average_precision(one, std::vector<std::vector<BoundingBox>>{}, 0));
}

TEST_CASE("average precision equals brute-force enumeration") {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const auto images = static_cast<std::size_t>(rng.uniform_int(1, 3));
        std::vector<std::vector<BoundingBox>> dets(images), gts(images);
        for (std::size_t i = 0; i < images; ++i) {
            const auto ng = rng.uniform_int(0, 3);
            for (int g = 0; g < ng; ++g) gts[i].push_back(random_box(rng, 2));
        }
        const auto nd = rng.uniform_int(0, 10);
        for (int d = 0; d < nd; ++d) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images) - 1));
            BoundingBox b = random_box(rng, 2);
            if (!gts[i].empty() && rng.next_unit() < 0.6) {  // jitter a ground truth
                b = gts[i][static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(gts[i].size()) - 1))];
                const double dx = rng.uniform(-3, 3), dy = rng.uniform(-3, 3);
                b.x1 += dx;
                b.x2 += dx;
                b.y1 += dy;
                b.y2 += dy;
                b.score = rng.next_unit();
            }
            dets[i].push_back(b);
        }
        for (int cls = 0; cls < 2; ++cls) {
            const auto ap = average_precision(dets, gts, cls);
            std::size_t total = 0;
            for (const auto& g : gts)
                for (const auto& b : g) total += b.cls == cls;
            if (total == 0) {
                CHECK_FALSE(ap.has_value());
                continue;
            }
            REQUIRE(ap.has_value());
            CHECK(ap->ap == doctest::Approx(testutil::ap_oracle(dets, gts, cls, 0.5)).epsilon(1e-12));
            CHECK((ap->ap >= 0.0 && ap->ap <= 1.0));
        }
    }
}

TEST_CASE("average precision is invariant to order-preserving score transforms") {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<BoundingBox>> dets(1), gts(1);
        for (int g = 0; g < 3; ++g) gts[0].push_back(random_box(rng));
        for (int d = 0; d < 8; ++d) dets[0].push_back(random_box(rng));
        auto squashed = dets;
        for (auto& b : squashed[0]) b.score = std::pow(b.score, 3.0) * 0.5;
        CHECK(average_precision(dets, gts, 0)->ap == average_precision(squashed, gts, 0)->ap);
    }
}

TEST_CASE("evaluate") {
    std::vector<DetectionSample> data;
    data.push_back({Tensor::construct({3, 64, 64}), {box(0, 0, 10, 10, 0), box(20, 20, 40, 40, 2)}});
    data.push_back({Tensor::construct({3, 64, 64}), {box(5, 5, 25, 25, 1)}});
    const Predictor nothing = [](std::size_t, const Tensor&) { return std::vector<BoundingBox>{}; };
    const auto empty = evaluate(nothing, data, 3);
    CHECK(empty.map == 0.0);
    CHECK(empty.false_negatives == 3);
    CHECK(empty.true_positives == 0);

    const Predictor oracle = [&](std::size_t i, const Tensor&) { return data[i].boxes; };
    const auto perfect = evaluate(oracle, data, 3);
    CHECK(perfect.map == 1.0);
    CHECK(perfect.true_positives == 3);
    CHECK(perfect.false_negatives == 0);
    CHECK(evaluate(oracle, data, 3) == perfect);

    // a duplicate of a box that NMS removes never changes the result
    const Predictor duplicated = [&](std::size_t i, const Tensor&) {
        auto out = data[i].boxes;
        auto dup = out[0];
        dup.score = 0.5;
        out.push_back(dup);
        return out;
    };
    CHECK(evaluate(duplicated, data, 3) == perfect);

    // classes without ground truth are excluded from mAP
    std::vector<DetectionSample> single{{Tensor::construct({3, 64, 64}), {box(0, 0, 10, 10, 0)}}};
    const auto r = evaluate([&](std::size_t, const Tensor&) { return single[0].boxes; }, single, 3);
    CHECK(r.map == 1.0);
    CHECK_FALSE(r.per_class_ap[1].has_value());

    // detections below the score threshold are dropped
    const auto low = evaluate(
        [&](std::size_t, const Tensor&) { return std::vector<BoundingBox>{box(0, 0, 10, 10, 0, 0.01)}; }, single, 3);
    CHECK(low.map == 0.0);
    CHECK_THROWS(evaluate(oracle, std::vector<DetectionSample>{}, 3));
}

TEST_CASE("backbone shapes and attention hooks") {
    const Backbone backbone(5);
    const auto image = random_tensor({3, 64, 64}, 10, 0, 1);
    const auto out = backbone.forward(image);
    CHECK(out.raw.at(3).z.shape() == Shape{64, 8, 8});
    CHECK(out.raw.at(4).z.shape() == Shape{96, 4, 4});
    CHECK(out.raw.at(5).z.shape() == Shape{128, 2, 2});
    CHECK(out.final.z.same_node(out.raw.at(5).z));
    CHECK(out.attended.empty());
    CHECK_THROWS_AS(backbone.forward(random_tensor({3, 60, 64}, 1)), ShapeError);
    CHECK_THROWS_AS(backbone.forward(random_tensor({1, 64, 64}, 1)), ShapeError);
    CHECK(backbone.parameters().size() == 20);

    // phi == 1 on every block reproduces the plain forward exactly
    AttentionHooks ones;
    for (int block : {3, 4, 5}) {
        ones.emplace(block, [](const FeatureMap& z) {
            return AttentionMap{Tensor::construct({1, z.height(), z.width()}, init::Constant{1.0}), z.block};
        });
    }
    const auto same = backbone.forward(image, ones);
    CHECK(to_vector(same.final.z) == to_vector(out.final.z));
    CHECK(same.attended.size() == 3);

    // a real attention hook changes what the next block sees
    AttentionNet net(4, 3);
    AttentionHooks hooks{{4, [&](const FeatureMap& z) { return attention_map(z, net); }}};
    const auto attended = backbone.forward(image, hooks);
    CHECK(to_vector(attended.raw.at(4).z) == to_vector(out.raw.at(4).z));
    CHECK(to_vector(attended.raw.at(5).z) != to_vector(out.raw.at(5).z));
    CHECK(attended.maps.at(4).phi.shape() == Shape{1, 4, 4});
}

TEST_CASE("assign_targets") {
    auto t = assign_targets({box(4, 4, 20, 20, 2)}, 2);
    CHECK(t.positives == 1);
    CHECK(t.objectness == std::vector<double>{1, 0, 0, 0});
    CHECK(t.labels == std::vector<int>{2, -1, -1, -1});

    t = assign_targets({box(2, 2, 10, 10, 0), box(0, 0, 30, 30, 1), box(40, 40, 60, 60, 2)}, 2);
    CHECK(t.positives == 2);
    CHECK(t.labels == std::vector<int>{1, -1, -1, 2});
    CHECK(t.box_weight[0] == 0.5);

    t = assign_targets({box(0, 0, 10, 10, 0), box(5, 5, 15, 15, 1)}, 2);  // equal areas: first wins
    CHECK(t.labels[0] == 0);

    t = assign_targets({}, 2);
    CHECK(t.positives == 0);
    CHECK(t.objectness == std::vector<double>(4, 0.0));
}

TEST_CASE("box encoding round-trips") {
    SplitMix64 rng(6);
    for (int i = 0; i < 200; ++i) {
        const double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
        const auto b = box(x1, y1, x1 + rng.uniform(1, 24), y1 + rng.uniform(1, 24));
        const int col = static_cast<int>(b.center_x() / 32), row = static_cast<int>(b.center_y() / 32);
        const auto back = decode_box(encode_box(b, row, col, 32.0), row, col, 32.0, 64, 64);
        CHECK(std::abs(back.x1 - b.x1) <= 1e-9);
        CHECK(std::abs(back.y1 - b.y1) <= 1e-9);
        CHECK(std::abs(back.x2 - b.x2) <= 1e-9);
        CHECK(std::abs(back.y2 - b.y2) <= 1e-9);
    }
    // decoding clips to the image
    const auto clipped = decode_box({0.5, 0.5, 3.0, 3.0}, 0, 0, 32.0, 64, 64);
    CHECK(clipped.x1 == 0.0);
    CHECK(clipped.x2 == 64.0);
}

TEST_CASE("detection loss") {
    const std::vector<BoundingBox> boxes{box(4, 4, 20, 28, 1)};
    const auto targets = assign_targets(boxes, 2);
    // saturated-correct logits
    std::vector<double> v(static_cast<std::size_t>(kHeadChannels * 4), 0.0);
    for (int cell = 0; cell < 4; ++cell) v[static_cast<std::size_t>(cell)] = cell == 0 ? 40.0 : -40.0;
    v[static_cast<std::size_t>((1 + 1) * 4)] = 40.0;  // class 1 logit at cell 0
    for (std::size_t k = 0; k < 4; ++k) v[(1 + kNumClasses + k) * 4] = targets.box[k * 4];
    const auto perfect = detection_loss(Tensor::from_values({kHeadChannels, 2, 2}, v), targets);
    CHECK(perfect.item() < 1e-3);
    CHECK(perfect.item() >= 0.0);

    const auto head = random_tensor({kHeadChannels, 2, 2}, 20);
    CHECK(detection_loss(head, targets).item() > 0.0);
    const auto none = assign_targets({}, 2);
    CHECK(detection_loss(head, none).item() ==
          bce_with_logits(slice(head, 0, 1), std::vector<double>(4, 0.0)).item());
    CHECK_THROWS_AS(detection_loss(random_tensor({kHeadChannels, 4, 4}, 1), targets), ShapeError);

    testutil::require_gradcheck([&](const Tensor& h) { return detection_loss(h, targets); }, head);
    const auto many = assign_targets({box(4, 4, 20, 28, 1), box(40, 36, 60, 60, 2), box(34, 2, 50, 20, 0)}, 2);
    testutil::require_gradcheck([&](const Tensor& h) { return detection_loss(h, many); }, head);
}

TEST_CASE("decode_detections") {
    const auto head = random_tensor({kHeadChannels, 2, 2}, 30, -1, 1);
    const auto dets = decode_detections(head);
    CHECK(dets.size() == 12);
    for (const auto& d : dets) {
        CHECK(d.valid());
        CHECK((d.x1 >= 0 && d.y1 >= 0 && d.x2 <= 64 && d.y2 <= 64));
        CHECK((d.score > 0 && d.score < 1));
    }
    // per cell, class scores sum to sigmoid(objectness)
    double total = 0.0;
    for (int k = 0; k < 3; ++k) total += dets[static_cast<std::size_t>(k)].score;
    CHECK(total == doctest::Approx(1.0 / (1.0 + std::exp(-head.at(0)))).epsilon(1e-12));
}

TEST_CASE("detector gradients through the backbone") {
    const Backbone backbone(7);
    const DetectionHead head(128, 7);
    const auto image = random_tensor({3, 64, 64}, 40, 0, 1);
    const auto targets = assign_targets({box(4, 4, 20, 28, 1), box(40, 36, 60, 60, 2)}, 2);
    auto loss = [&] { return detection_loss(head.forward(backbone.forward(image).final.z), targets); };
    for (const auto& p : head.parameters()) testutil::require_param_gradcheck(loss, p.tensor, 12);
    const auto params = backbone.parameters();
    for (std::size_t i : {0u, 5u, 10u, 18u}) {
        CAPTURE(params[i].name);
        testutil::require_param_gradcheck(loss, params[i].tensor, 8);
    }
}
