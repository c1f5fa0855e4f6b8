#include <chrono>
#include <fstream>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "ssada/harness.hpp"
#include "ssada/ops.hpp"
#include "ssada/random.hpp"

namespace ssada {

Tensor total_loss(const Tensor& det, const Tensor& style, const Tensor& att, double lambda, double mu) {
    Tensor out = det;
    if (style.defined()) out = add(out, scale(style, lambda));
    if (att.defined()) out = add(out, scale(att, mu));
    return out;
}

void sgd_step(const ParameterList& params, OptimizerState& state, double lr, double momentum, double weight_decay) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
            throw ConsistencyError("parameter '" + p.name + "' has no gradient at optimizer step " +
                                   std::to_string(state.steps));
        }
    }
    for (const auto& p : params) {
        Tensor w = p.tensor;
        auto [it, fresh] = state.velocity.try_emplace(p.name);
        if (fresh) it->second.assign(w.numel(), 0.0);
        if (it->second.size() != w.numel()) {
            throw ConsistencyError("velocity buffer of '" + p.name + "' does not match the parameter shape");
        }
        auto& v = it->second;
        const auto g = w.grad();
        const auto values = w.mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = momentum * v[i] + g[i] + weight_decay * values[i];
            values[i] -= lr * v[i];
        }
        w.clear_grad();
    }
    ++state.steps;
}

Model::Model(const TrainConfig& config, LossPath path) {
    const std::uint64_t seed = derive_seed(config.seed, "init");
    backbone = Backbone(seed);
    head = DetectionHead(backbone.channels(kNumBlocks), seed);
    for (int block : config.sa_blocks) attention.emplace(block, AttentionNet(block, seed));
    if (path == LossPath::Full) {
        for (int block : config.sd_blocks) {
            style_discriminators.emplace(block, Discriminator::style(block, backbone.channels(block), seed));
        }
        for (int block : config.sa_blocks) {
            attention_discriminators.emplace(block, Discriminator::attention(block, backbone.channels(block), seed));
        }
    }
}

AttentionHooks Model::hooks() const {
    AttentionHooks out;
    for (const auto& [block, net] : attention) {
        const AttentionNet* n = &net;
        out.emplace(block, [n](const FeatureMap& z) { return attention_map(z, *n); });
    }
    return out;
}

ParameterList Model::detector_parameters() const {
    ParameterList out = backbone.parameters();
    for (const auto& [block, net] : attention) {
        for (auto& p : net.parameters()) out.push_back(std::move(p));
    }
    for (auto& p : head.parameters()) out.push_back(std::move(p));
    return out;
}

ParameterList Model::parameters() const {
    ParameterList out = detector_parameters();
    for (const auto* set : {&style_discriminators, &attention_discriminators}) {
        for (const auto& [block, d] : *set) {
            for (auto& p : d.parameters()) out.push_back(std::move(p));
        }
    }
    return out;
}

Tensor Model::head_output(const Tensor& image) const { return head.forward(backbone.forward(image, hooks()).final.z); }

std::vector<BoundingBox> Model::predict(const Tensor& image) const {
    NoGradGuard no_grad;
    return decode_detections(head_output(image));
}

namespace {

std::vector<BlockPair> pairs_for(const BlockSet& blocks, const std::map<int, FeatureMap>& source,
                                 const std::map<int, FeatureMap>& target) {
    std::vector<BlockPair> out;
    for (int block : blocks) out.push_back({source.at(block), target.at(block)});
    return out;
}

void append(ParameterList& into, const DiscriminatorSet& set, const BlockSet& blocks) {
    for (int block : blocks) {
        for (auto& p : set.at(block).parameters()) into.push_back(std::move(p));
    }
}

template <LossPath Path>
JointLoss build_loss(const Model& model, const DetectionSample& source, const DetectionSample& target,
                     const TrainConfig& config, bool reverse_gradient) {
    if (!target.boxes.empty()) {
        throw ConsistencyError("target sample carries " + std::to_string(target.boxes.size()) +
                               " annotations; target labels must never reach a loss");
    }
    JointLoss out;
    const AttentionHooks hooks = model.hooks();
    const BackboneOutput src = model.backbone.forward(source.image, hooks);
    const Tensor head_out = model.head.forward(src.final.z);
    out.det = detection_loss(head_out, assign_targets(source.boxes, static_cast<int>(head_out.dim(1))));
    out.active = model.detector_parameters();

    if constexpr (Path == LossPath::Full) {
        if (config.style_active() || config.attention_active()) {
            const BackboneOutput tgt = model.backbone.forward(target.image, hooks);
            if (config.style_active()) {
                const auto pairs = pairs_for(config.sd_blocks, src.raw, tgt.raw);
                out.style = multi_level_style_loss(pairs, model.style_discriminators, config.gamma, reverse_gradient);
                append(out.active, model.style_discriminators, config.sd_blocks);
            }
            if (config.attention_active()) {
                const auto pairs = pairs_for(config.sa_blocks, src.attended, tgt.attended);
                out.att = multi_level_attention_loss(pairs, model.attention_discriminators, config.epsilon,
                                                     reverse_gradient);
                append(out.active, model.attention_discriminators, config.sa_blocks);
            }
        }
    }
    out.all = total_loss(out.det, out.style, out.att, config.lambda, config.mu);
    return out;
}

template <LossPath Path>
StepLosses step(Model& model, OptimizerState& optimizer, const DetectionSample& source, const DetectionSample& target,
                const TrainConfig& config) {
    const JointLoss loss = build_loss<Path>(model, source, target, config, true);
    const Tensor &det = loss.det, &style = loss.style, &att = loss.att, &all = loss.all;

    StepLosses losses;
    losses.det = det.item();
    losses.style = style.defined() ? style.item() : 0.0;
    losses.att = att.defined() ? att.item() : 0.0;
    losses.all = all.item();
    if (std::isfinite(losses.all) &&
        std::abs(losses.all - total_loss(losses.det, losses.style, losses.att, config.lambda, config.mu)) > 1e-12) {
        throw ConsistencyError("logged loss components do not add up to L_all");
    }
    if (!std::isfinite(losses.all)) return losses;

    backward(all);
    sgd_step(loss.active, optimizer, config.lr, config.momentum, config.weight_decay);
    return losses;
}

std::vector<std::size_t> permutation(std::size_t n, SplitMix64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

// Cycles a dataset in reshuffled passes, independently of any other stream.
class Cursor {
public:
    Cursor(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}

    std::size_t next() {
        if (pos_ == order_.size()) {
            order_ = permutation(n_, rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::size_t n_;
    SplitMix64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

void emit(const TrainOptions& options, const std::string& message) {
    if (options.log) options.log(message);
}

nlohmann::json eval_json(const EvalResult& e) {
    nlohmann::json ap = nlohmann::json::array();
    for (const auto& a : e.per_class_ap) ap.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
    return {{"map", e.map},
            {"per_class_ap", ap},
            {"true_positives", e.true_positives},
            {"false_positives", e.false_positives},
            {"false_negatives", e.false_negatives}};
}

nlohmann::json losses_json(const StepLosses& l) {
    return {{"L_det", l.det}, {"L_style", l.style}, {"L_att", l.att}, {"L_all", l.all}};
}

nlohmann::json config_json(const TrainConfig& c) {
    nlohmann::json eps = nlohmann::json::object();
    for (const auto& [block, value] : c.epsilon) eps[std::to_string(block)] = value;
    return {{"lambda", c.lambda},   {"mu", c.mu},
            {"gamma", c.gamma},     {"epsilon", eps},
            {"lr", c.lr},           {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},   {"sd_blocks", std::vector<int>(c.sd_blocks.begin(), c.sd_blocks.end())},
            {"sa_blocks", std::vector<int>(c.sa_blocks.begin(), c.sa_blocks.end())},
            {"seed", c.seed}};
}

bool same_losses(const StepLosses& a, const StepLosses& b) {
    return a.det == b.det && a.style == b.style && a.att == b.att && a.all == b.all;
}

}  // namespace

JointLoss joint_loss(const Model& model, const DetectionSample& source, const DetectionSample& target,
                     const TrainConfig& config, LossPath path, bool reverse_gradient) {
    return path == LossPath::Full ? build_loss<LossPath::Full>(model, source, target, config, reverse_gradient)
                                  : build_loss<LossPath::DetectionOnly>(model, source, target, config, reverse_gradient);
}

StepLosses train_step(Model& model, OptimizerState& optimizer, const DetectionSample& source,
                      const DetectionSample& target, const TrainConfig& config, LossPath path) {
    return path == LossPath::Full ? step<LossPath::Full>(model, optimizer, source, target, config)
                                  : step<LossPath::DetectionOnly>(model, optimizer, source, target, config);
}

TrainData load_train_data(const std::filesystem::path& root) {
    TrainData data;
    data.source = load_dataset(root, kSourceTrain).samples;
    data.target_train = load_dataset(root, kTargetTrain).samples;
    for (auto& s : data.target_train) s.boxes.clear();
    data.target_test = load_dataset(root, kTargetTest).samples;
    return data;
}

EvalResult evaluate_model(const Model& model, const std::vector<DetectionSample>& dataset) {
    return evaluate([&model](std::size_t, const Tensor& image) { return model.predict(image); }, dataset, kNumClasses);
}

bool metrics_equal(const RunRecord& a, const RunRecord& b) {
    if (!(a.initial == b.initial && a.final_eval == b.final_eval && a.best_eval == b.best_eval &&
          a.best_epoch == b.best_epoch && a.epochs.size() == b.epochs.size())) {
        return false;
    }
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
        if (a.epochs[i].epoch != b.epochs[i].epoch || !same_losses(a.epochs[i].mean_losses, b.epochs[i].mean_losses) ||
            !(a.epochs[i].eval == b.epochs[i].eval)) {
            return false;
        }
    }
    return true;
}

std::string run_record_json(const RunRecord& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"losses", losses_json(e.mean_losses)}, {"eval", eval_json(e.eval)}});
    }
    const nlohmann::json j = {{"config", config_json(r.config)},
                              {"seed", r.config.seed},
                              {"initial_eval", eval_json(r.initial)},
                              {"epochs", epochs},
                              {"final_eval", eval_json(r.final_eval)},
                              {"best_eval", eval_json(r.best_eval)},
                              {"best_epoch", r.best_epoch},
                              {"wall_seconds", r.wall_seconds},
                              {"last_checkpoint", r.last_checkpoint}};
    return j.dump(2) + "\n";
}

RunRecord train(const TrainConfig& config, const TrainData& data, const TrainOptions& options) {
    config.validate();
    if (data.source.empty() || data.target_train.empty() || data.target_test.empty()) {
        throw std::invalid_argument("train: every split needs at least one image");
    }
    for (const auto& t : data.target_train) {
        if (!t.boxes.empty()) throw ConsistencyError("target-train split still carries annotations");
    }
    const auto start = std::chrono::steady_clock::now();
    RunRecord record;
    record.config = config;

    Model model(config, options.path);
    OptimizerState optimizer;
    SplitMix64 source_rng(derive_seed(config.seed, "source_order"));
    Cursor target_cursor(data.target_train.size(), derive_seed(config.seed, "target_order"));

    if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
    const auto checkpoint_path = options.out_dir ? *options.out_dir / "last_good.ckpt" : std::filesystem::path();

    record.initial = evaluate_model(model, data.target_test);
    record.final_eval = record.best_eval = record.initial;
    emit(options, "epoch 0: mAP " + std::to_string(record.initial.map));

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        StepLosses sum;
        const auto order = permutation(data.source.size(), source_rng);
        for (std::size_t i = 0; i < order.size(); ++i) {
            const auto& target = data.target_train[target_cursor.next()];
            const auto diverged = [&](const std::string& what) {
                return TrainingDiverged(what + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(i) +
                                        "; last good checkpoint: " +
                                        (record.last_checkpoint.empty() ? "none" : record.last_checkpoint));
            };
            StepLosses l;
            try {
                l = train_step(model, optimizer, data.source[order[i]], target, config, options.path);
            } catch (const DomainError& e) {
                // non-finite weights surface as a domain error in the next forward pass
                throw diverged(std::string("forward pass failed (") + e.what() + ")");
            }
            if (!std::isfinite(l.all)) {
                throw diverged("non-finite loss (L_det=" + std::to_string(l.det) + ", L_style=" +
                               std::to_string(l.style) + ", L_att=" + std::to_string(l.att) + ")");
            }
            sum.det += l.det;
            sum.style += l.style;
            sum.att += l.att;
            sum.all += l.all;
        }
        const double n = static_cast<double>(order.size());
        EpochLog log{epoch, {sum.det / n, sum.style / n, sum.att / n, sum.all / n}, evaluate_model(model, data.target_test)};
        if (epoch == 1 || log.eval.map > record.best_eval.map) {
            record.best_eval = log.eval;
            record.best_epoch = epoch;
        }
        record.final_eval = log.eval;
        emit(options, "epoch " + std::to_string(epoch) + ": L_all " + std::to_string(log.mean_losses.all) + " (det " +
                          std::to_string(log.mean_losses.det) + ", style " + std::to_string(log.mean_losses.style) +
                          ", att " + std::to_string(log.mean_losses.att) + "), mAP " + std::to_string(log.eval.map));
        record.epochs.push_back(std::move(log));
        if (options.out_dir) {
            save_checkpoint(checkpoint_path, config, model.parameters());
            record.last_checkpoint = checkpoint_path.string();
        }
    }
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (options.out_dir) {
        std::ofstream out(*options.out_dir / "record.json");
        out << run_record_json(record);
        if (!out) throw std::runtime_error("failed writing " + (*options.out_dir / "record.json").string());
    }
    return record;
}

}  // namespace ssada
