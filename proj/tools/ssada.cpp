#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "ssada/data.hpp"
#include "ssada/harness.hpp"

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw ssada::ConfigError("bad sweep value '" + item + "'");
        values.push_back(v);
    }
    return values;
}

void log_line(const std::string& message) { std::cerr << message << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Style and spatial-attention domain adaptation on a synthetic fog detection task"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string out_dir, data_dir, config_path, checkpoint_path, param, values;
    int n_source = 400, n_target = 400, n_test = 100, jobs = 1;
    bool no_fog = false;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic source/target dataset");
    gen->add_option("--seed", seed, "Generator seed")->required();
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--n-source", n_source, "Source-train images")->check(CLI::PositiveNumber);
    gen->add_option("--n-target", n_target, "Target-train images")->check(CLI::PositiveNumber);
    gen->add_option("--n-test", n_test, "Target-test images")->check(CLI::PositiveNumber);
    gen->add_flag("--no-fog", no_fog, "Render target splits without fog");

    auto* train = app.add_subcommand("train", "Train one configuration");
    train->add_option("--config", config_path, "key=value config file (defaults when omitted)");
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", out_dir, "Run directory (checkpoint and record.json)")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the target-test split");
    eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();

    auto* ablate = app.add_subcommand("ablate", "Component and block-subset ablation");
    ablate->add_option("--config", config_path, "Base config file");
    ablate->add_option("--data", data_dir, "Dataset directory")->required();
    ablate->add_option("--out", out_dir, "Output directory")->required();
    ablate->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

    auto* sweep = app.add_subcommand("sweep", "Hyperparameter sensitivity sweep");
    sweep->add_option("--param", param, "gamma, epsilon5, epsilon4, lambda or mu")->required();
    sweep->add_option("--values", values, "Comma-separated values")->required();
    sweep->add_option("--config", config_path, "Base config file");
    sweep->add_option("--data", data_dir, "Dataset directory")->required();
    sweep->add_option("--out", out_dir, "Output directory")->required();
    sweep->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto base = config_path.empty() ? ssada::TrainConfig{} : ssada::load_config(config_path);
        if (*gen) {
            ssada::GenerateOptions options;
            options.n_source_train = n_source;
            options.n_target_train = n_target;
            options.n_target_test = n_test;
            options.fog = !no_fog;
            ssada::generate_dataset(out_dir, seed, options);
            std::cout << "wrote dataset to " << out_dir << "\n";
        } else if (*train) {
            ssada::TrainOptions options;
            options.out_dir = out_dir;
            options.log = log_line;
            const auto record = ssada::train(base, ssada::load_train_data(data_dir), options);
            std::cout << "best mAP " << record.best_eval.map << " (epoch " << record.best_epoch << "), final mAP "
                      << record.final_eval.map << "\n";
        } else if (*eval) {
            const auto checkpoint = ssada::load_checkpoint(checkpoint_path);
            ssada::Model model(checkpoint.config);
            ssada::restore_parameters(checkpoint, model.parameters());
            const auto test = ssada::load_dataset(data_dir, ssada::kTargetTest);
            const auto result = ssada::evaluate_model(model, test.samples);
            std::cout << "mAP " << result.map << "\n";
            for (std::size_t c = 0; c < result.per_class_ap.size(); ++c) {
                std::cout << "  " << ssada::shape_class_name(static_cast<ssada::ShapeClass>(c)) << ": ";
                if (result.per_class_ap[c]) std::cout << *result.per_class_ap[c] << "\n";
                else std::cout << "n/a\n";
            }
            std::cout << "TP " << result.true_positives << " FP " << result.false_positives << " FN "
                      << result.false_negatives << "\n";
        } else if (*ablate) {
            const auto rows = ssada::ablate(base, ssada::load_train_data(data_dir), {jobs, log_line});
            const std::filesystem::path out(out_dir);
            write_file(out / "ablation.csv", ssada::ablation_csv(rows));
            for (const auto& row : rows) write_file(out / (row.variant + ".json"), ssada::run_record_json(row.record));
            std::cout << ssada::ablation_csv(rows);
        } else if (*sweep) {
            const auto rows = ssada::sweep(param, parse_values(values), base, ssada::load_train_data(data_dir),
                                           {jobs, log_line});
            const std::filesystem::path out(out_dir);
            write_file(out / ("sweep_" + param + ".csv"), ssada::sweep_csv(rows));
            std::cout << ssada::sweep_csv(rows);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
