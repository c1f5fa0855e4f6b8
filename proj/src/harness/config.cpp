#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ssada/harness.hpp"

namespace ssada {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

double parse_real(const std::string& key, const std::string& value) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(out)) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a finite number");
    }
    return out;
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& value) {
    Int out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not an integer");
    }
    return out;
}

BlockSet parse_blocks(const std::string& key, const std::string& value) {
    BlockSet blocks;
    if (value.empty() || value == "none") return blocks;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) blocks.insert(parse_integer<int>(key, trim(item)));
    return blocks;
}

std::string real_string(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void check_blocks(const char* name, const BlockSet& blocks) {
    for (int b : blocks) {
        if (b < 3 || b > 5) throw ConfigError(std::string(name) + " may only contain blocks 3, 4, 5; got " + std::to_string(b));
    }
}

}  // namespace

std::string block_set_string(const BlockSet& blocks) {
    if (blocks.empty()) return "none";
    std::string out;
    for (int b : blocks) out += (out.empty() ? "" : ",") + std::to_string(b);
    return out;
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(mu >= 0.0)) throw ConfigError("mu must be >= 0");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    for (const auto& [block, eps] : epsilon) {
        if (!(eps >= 0.0)) throw ConfigError("epsilon" + std::to_string(block) + " must be >= 0");
    }
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    check_blocks("sd_blocks", sd_blocks);
    check_blocks("sa_blocks", sa_blocks);
    for (int b : sa_blocks) {
        if (!epsilon.contains(b)) throw ConfigError("sa_blocks contains " + std::to_string(b) + " but no epsilon is set");
    }
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::stringstream in(text);
    std::string line;
    int line_no = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" + stripped + "'");
        }
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");

        if (key == "lambda") c.lambda = parse_real(key, value);
        else if (key == "mu") c.mu = parse_real(key, value);
        else if (key == "gamma") c.gamma = parse_real(key, value);
        else if (key == "epsilon3") c.epsilon[3] = parse_real(key, value);
        else if (key == "epsilon4") c.epsilon[4] = parse_real(key, value);
        else if (key == "epsilon5") c.epsilon[5] = parse_real(key, value);
        else if (key == "lr") c.lr = parse_real(key, value);
        else if (key == "momentum") c.momentum = parse_real(key, value);
        else if (key == "weight_decay") c.weight_decay = parse_real(key, value);
        else if (key == "epochs") c.epochs = parse_integer<int>(key, value);
        else if (key == "sd_blocks") c.sd_blocks = parse_blocks(key, value);
        else if (key == "sa_blocks") c.sa_blocks = parse_blocks(key, value);
        else if (key == "seed") c.seed = parse_integer<std::uint64_t>(key, value);
        else throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(line_no));
    }
    c.validate();
    return c;
}

std::string format_config(const TrainConfig& c) {
    std::string out;
    out += "lambda=" + real_string(c.lambda) + "\n";
    out += "mu=" + real_string(c.mu) + "\n";
    out += "gamma=" + real_string(c.gamma) + "\n";
    for (const auto& [block, eps] : c.epsilon) out += "epsilon" + std::to_string(block) + "=" + real_string(eps) + "\n";
    out += "lr=" + real_string(c.lr) + "\n";
    out += "momentum=" + real_string(c.momentum) + "\n";
    out += "weight_decay=" + real_string(c.weight_decay) + "\n";
    out += "epochs=" + std::to_string(c.epochs) + "\n";
    out += "sd_blocks=" + block_set_string(c.sd_blocks) + "\n";
    out += "sa_blocks=" + block_set_string(c.sa_blocks) + "\n";
    out += "seed=" + std::to_string(c.seed) + "\n";
    return out;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

double total_loss(double det, double style, double att, double lambda, double mu) {
    return det + lambda * style + mu * att;
}

}  // namespace ssada
