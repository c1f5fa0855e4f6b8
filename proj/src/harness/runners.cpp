#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include "ssada/harness.hpp"

namespace ssada {

namespace {

// Runs every config on up to `jobs` threads; each run is single-threaded and owns its state.
std::vector<RunRecord> run_all(const std::vector<TrainConfig>& configs, const std::vector<std::string>& labels,
                               const TrainData& data, const RunnerOptions& options) {
    std::vector<RunRecord> records(configs.size());
    std::vector<std::exception_ptr> errors(configs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto log = [&](const std::string& message) {
        if (!options.log) return;
        std::lock_guard lock(log_mutex);
        options.log(message);
    };
    auto worker = [&]() {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                TrainOptions train_options;
                train_options.log = [&, i](const std::string& m) { log(labels[i] + ": " + m); };
                records[i] = train(configs[i], data, train_options);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto jobs = static_cast<std::size_t>(std::max(1, options.jobs));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < std::min(jobs, configs.size()); ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return records;
}

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string quoted_blocks(const BlockSet& blocks) {
    const std::string s = block_set_string(blocks);
    return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
}

}  // namespace

std::vector<std::pair<std::string, TrainConfig>> ablation_plan(const TrainConfig& base) {
    auto source_only = base;
    source_only.lambda = source_only.mu = 0.0;
    source_only.sd_blocks.clear();
    source_only.sa_blocks.clear();

    auto sd_only = base;
    sd_only.mu = 0.0;
    sd_only.sa_blocks.clear();
    if (sd_only.sd_blocks.empty()) sd_only.sd_blocks = {3, 4, 5};

    auto sa_only = base;
    sa_only.lambda = 0.0;
    sa_only.sd_blocks.clear();
    if (sa_only.sa_blocks.empty()) sa_only.sa_blocks = {4, 5};

    std::vector<std::pair<std::string, TrainConfig>> plan = {
        {"source_only", source_only}, {"sd_only", sd_only}, {"sa_only", sa_only}, {"sd_sa", base}};
    for (const BlockSet& blocks : {BlockSet{3}, BlockSet{3, 4}, BlockSet{3, 4, 5}}) {
        auto c = sd_only;
        c.sd_blocks = blocks;
        plan.emplace_back("sd_{" + block_set_string(blocks) + "}", c);
    }
    for (const BlockSet& blocks : {BlockSet{5}, BlockSet{4, 5}, BlockSet{3, 4, 5}}) {
        auto c = sa_only;
        c.sa_blocks = blocks;
        plan.emplace_back("sa_{" + block_set_string(blocks) + "}", c);
    }
    return plan;
}

std::vector<AblationRow> ablate(const TrainConfig& base, const TrainData& data, const RunnerOptions& options) {
    const auto plan = ablation_plan(base);
    // Identical configs (e.g. sd_only and sd_{3,4,5}) are trained once.
    std::vector<TrainConfig> unique;
    std::vector<std::string> labels;
    std::vector<std::size_t> slot(plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) {
        std::size_t j = 0;
        while (j < unique.size() && !(unique[j] == plan[i].second)) ++j;
        if (j == unique.size()) {
            unique.push_back(plan[i].second);
            labels.push_back(plan[i].first);
        }
        slot[i] = j;
    }
    const auto records = run_all(unique, labels, data, options);
    std::vector<AblationRow> rows;
    for (std::size_t i = 0; i < plan.size(); ++i) rows.push_back({plan[i].first, plan[i].second, records[slot[i]]});
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "variant,lambda,mu,sd_blocks,sa_blocks,seed,best_map,final_map,best_epoch\n";
    for (const auto& r : rows) {
        out += r.variant + "," + real(r.config.lambda) + "," + real(r.config.mu) + "," +
               quoted_blocks(r.config.sd_blocks) + "," + quoted_blocks(r.config.sa_blocks) + "," +
               std::to_string(r.config.seed) + "," + real(r.record.best_eval.map) + "," +
               real(r.record.final_eval.map) + "," + std::to_string(r.record.best_epoch) + "\n";
    }
    return out;
}

TrainConfig sweep_config(const TrainConfig& base, const std::string& param, double value) {
    TrainConfig c = base;
    if (param == "gamma") {
        c.gamma = value;
        c.mu = 0.0;
        c.sa_blocks.clear();
        if (c.sd_blocks.empty()) c.sd_blocks = {3, 4, 5};
    } else if (param == "epsilon5") {
        c.lambda = 0.0;
        c.sd_blocks.clear();
        c.sa_blocks = {5};
        c.epsilon[5] = value;
    } else if (param == "epsilon4") {
        c.lambda = 0.0;
        c.sd_blocks.clear();
        c.sa_blocks = {4, 5};
        c.epsilon[4] = value;
        c.epsilon[5] = 5.0;
    } else if (param == "lambda") {
        c.lambda = value;
        c.mu = 0.5;
    } else if (param == "mu") {
        c.mu = value;
        c.lambda = 1.0;
    } else {
        throw ConfigError("unknown sweep parameter '" + param + "' (expected gamma, epsilon5, epsilon4, lambda or mu)");
    }
    c.validate();
    return c;
}

std::vector<SweepRow> sweep(const std::string& param, const std::vector<double>& values, const TrainConfig& base,
                            const TrainData& data, const RunnerOptions& options) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<TrainConfig> configs;
    std::vector<std::string> labels;
    for (double v : values) {
        configs.push_back(sweep_config(base, param, v));
        labels.push_back(param + "=" + real(v));
    }
    const auto records = run_all(configs, labels, data, options);
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < values.size(); ++i) rows.push_back({param, values[i], records[i]});
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "param,value,best_map,final_map\n";
    for (const auto& r : rows) {
        out += r.param + "," + real(r.value) + "," + real(r.record.best_eval.map) + "," + real(r.record.final_eval.map) +
               "\n";
    }
    return out;
}

}  // namespace ssada
