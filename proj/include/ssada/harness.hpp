#pragma once

// Training loop, optimizer, checkpoints, and the ablation / sweep runners.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssada/align.hpp"
#include "ssada/boxes.hpp"
#include "ssada/data.hpp"
#include "ssada/detector.hpp"
#include "ssada/layers.hpp"

namespace ssada {

/// Raised when a run's internal invariants break (target labels reaching a loss,
/// missing gradients, non-finite losses).
class ConsistencyError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using BlockSet = std::set<int>;

struct TrainConfig {
    double lambda = 1.0;
    double mu = 0.5;
    double gamma = 5.0;
    std::map<int, double> epsilon{{3, 4.0}, {4, 4.0}, {5, 5.0}};
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int epochs = 20;
    BlockSet sd_blocks{3, 4, 5};
    BlockSet sa_blocks{4, 5};
    std::uint64_t seed = 1;

    /// Throws ConfigError on any violated invariant.
    void validate() const;
    bool style_active() const { return lambda > 0.0 && !sd_blocks.empty(); }
    bool attention_active() const { return mu > 0.0 && !sa_blocks.empty(); }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Flat key=value text; '#' starts a comment. Unknown keys are rejected.
/// Block sets are comma-separated ("3,4,5"); "none" or an empty value means the empty set.
TrainConfig parse_config(const std::string& text);
std::string format_config(const TrainConfig& config);
TrainConfig load_config(const std::filesystem::path& path);

/// L_det + lambda * L_style + mu * L_att.
double total_loss(double det, double style, double att, double lambda, double mu);
/// Undefined style/att tensors are treated as absent terms.
Tensor total_loss(const Tensor& det, const Tensor& style, const Tensor& att, double lambda, double mu);

struct OptimizerState {
    std::map<std::string, std::vector<double>> velocity;
    std::int64_t steps = 0;
};

/// v <- momentum*v + g + weight_decay*w; w <- w - lr*v; gradients cleared.
/// Throws ConsistencyError if a parameter carries no gradient.
void sgd_step(const ParameterList& params, OptimizerState& state, double lr, double momentum, double weight_decay);

/// Which loss terms the training step is built with. DetectionOnly has the
/// alignment losses and discriminators removed at compile time.
enum class LossPath { Full, DetectionOnly };

class Model {
public:
    explicit Model(const TrainConfig& config, LossPath path = LossPath::Full);

    Backbone backbone;
    DetectionHead head;
    std::map<int, AttentionNet> attention;
    DiscriminatorSet style_discriminators;
    DiscriminatorSet attention_discriminators;

    AttentionHooks hooks() const;
    /// Backbone, attention nets and head.
    ParameterList detector_parameters() const;
    /// Everything, discriminators included, in a fixed order.
    ParameterList parameters() const;

    Tensor head_output(const Tensor& image) const;
    std::vector<BoundingBox> predict(const Tensor& image) const;
};

struct StepLosses {
    double det = 0.0;
    double style = 0.0;
    double att = 0.0;
    double all = 0.0;
};

/// The joint objective's graph for one (source, target) pair, without the update.
/// Undefined style/att tensors mark inactive terms; `active` lists the parameters
/// the update would touch.
struct JointLoss {
    Tensor det, style, att, all;
    ParameterList active;
};

/// reverse_gradient=false drops the gradient reversal so the extractor gradient
/// matches a finite difference of `all`.
JointLoss joint_loss(const Model& model, const DetectionSample& source, const DetectionSample& target,
                     const TrainConfig& config, LossPath path = LossPath::Full, bool reverse_gradient = true);

/// One joint update on a (labelled source, unlabelled target) pair. The target
/// sample must carry no boxes. Parameters of inactive loss terms are not touched.
StepLosses train_step(Model& model, OptimizerState& optimizer, const DetectionSample& source,
                      const DetectionSample& target, const TrainConfig& config, LossPath path = LossPath::Full);

struct TrainData {
    std::vector<DetectionSample> source;        // labelled
    std::vector<DetectionSample> target_train;  // boxes stripped
    std::vector<DetectionSample> target_test;   // labelled, evaluation only
};

/// Loads the three splits and withholds the target-train labels.
TrainData load_train_data(const std::filesystem::path& root);

EvalResult evaluate_model(const Model& model, const std::vector<DetectionSample>& dataset);

struct EpochLog {
    int epoch = 0;
    StepLosses mean_losses;
    EvalResult eval;
};

struct RunRecord {
    TrainConfig config;
    EvalResult initial;
    std::vector<EpochLog> epochs;
    EvalResult final_eval;
    EvalResult best_eval;
    int best_epoch = 0;
    double wall_seconds = 0.0;
    std::string last_checkpoint;
};

/// Compares every logged loss and evaluation metric bit for bit.
bool metrics_equal(const RunRecord& a, const RunRecord& b);

std::string run_record_json(const RunRecord& record);

struct TrainOptions {
    LossPath path = LossPath::Full;
    /// When set, a last-good checkpoint is written here after every epoch and
    /// record.json at the end.
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const std::string&)> log;
};

/// Evaluates once before training, then after every epoch. best_eval is taken
/// over trained epochs (the initial evaluation when epochs == 0).
RunRecord train(const TrainConfig& config, const TrainData& data, const TrainOptions& options = {});

// Checkpoint layout, all integers little-endian:
//   "SSADACKP" | u32 version | u64 config length | config text (format_config)
//   u32 parameter count | per parameter:
//     u32 name length | name | u32 ndim | u64 extents[ndim] | f64 values[numel]
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    std::map<std::string, std::pair<Shape, std::vector<double>>> parameters;
};

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const ParameterList& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into the model's parameters; every model parameter must be present.
void restore_parameters(const Checkpoint& checkpoint, const ParameterList& params);

struct RunnerOptions {
    int jobs = 1;
    std::function<void(const std::string&)> log;
};

struct AblationRow {
    std::string variant;
    TrainConfig config;
    RunRecord record;
};

/// Component rows (source_only, sd_only, sa_only, sd_sa) followed by the block
/// subset rows sd_{3}, sd_{3,4}, sd_{3,4,5}, sa_{5}, sa_{4,5}, sa_{3,4,5}.
std::vector<std::pair<std::string, TrainConfig>> ablation_plan(const TrainConfig& base);
std::vector<AblationRow> ablate(const TrainConfig& base, const TrainData& data, const RunnerOptions& options = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Config for one sweep value: gamma varies the SD-only model, epsilon5 the SA
/// model on block 5, epsilon4 the SA model on blocks {4,5} with epsilon5 = 5,
/// lambda the full model with mu = 0.5, mu the full model with lambda = 1.
TrainConfig sweep_config(const TrainConfig& base, const std::string& param, double value);

struct SweepRow {
    std::string param;
    double value = 0.0;
    RunRecord record;
};

std::vector<SweepRow> sweep(const std::string& param, const std::vector<double>& values, const TrainConfig& base,
                            const TrainData& data, const RunnerOptions& options = {});
std::string sweep_csv(const std::vector<SweepRow>& rows);

std::string block_set_string(const BlockSet& blocks);

}  // namespace ssada
