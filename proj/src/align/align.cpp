#include "ssada/align.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "ssada/ops.hpp"
#include "ssada/random.hpp"

namespace ssada {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_modulation(double mod) {
    if (!(mod >= 0.0)) throw ConfigError("focal modulation factor must be >= 0, got " + std::to_string(mod));
}

std::string block_prefix(const char* kind, int block) { return std::string(kind) + std::to_string(block); }

}  // namespace

const char* domain_name(Domain domain) { return domain == Domain::Source ? "source" : "target"; }

FeatureMap::FeatureMap(Tensor map, int block_index) : z(std::move(map)), block(block_index) {
    if (z.rank() != 3) throw ShapeError("feature map must be [C,H,W], got " + shape_string(z.shape()));
}

GramStyle gram(const Tensor& f, int block) {
    if (f.rank() != 2) throw ShapeError("gram expects a [C, M] matrix, got " + shape_string(f.shape()));
    const auto c = f.dim(0);
    const auto m = f.dim(1);
    const auto fv = f.values();
    const double divisor = static_cast<double>(m);
    std::vector<double> g(static_cast<std::size_t>(c * c));
    for (std::int64_t i = 0; i < c; ++i) {
        const double* fi = fv.data() + i * m;
        for (std::int64_t j = i; j < c; ++j) {
            const double* fj = fv.data() + j * m;
            double acc = 0.0;
            for (std::int64_t k = 0; k < m; ++k) acc += fi[k] * fj[k];
            g[static_cast<std::size_t>(i * c + j)] = acc / divisor;
            g[static_cast<std::size_t>(j * c + i)] = acc / divisor;
        }
    }
    Tensor matrix = make_op("gram", {c, c}, std::move(g), {f},
                            [f, c, m, divisor](std::span<const double> dg, std::span<double* const> pg) {
                                if (!pg[0]) return;
                                Eigen::Map<const RowMatrix> upstream(dg.data(), c, c);
                                Eigen::Map<const RowMatrix> fm(f.values().data(), c, m);
                                const RowMatrix sym = (upstream + upstream.transpose()) / divisor;
                                Eigen::Map<RowMatrix>(pg[0], c, m).noalias() += sym * fm;
                            });
    GramStyle style;
    style.vector = reshape(matrix, {1, c * c});
    style.matrix = std::move(matrix);
    style.divisor = divisor;
    style.block = block;
    return style;
}

GramStyle style_forward(const FeatureMap& z) {
    const Tensor f = reshape(z.z, {z.channels(), z.height() * z.width()});
    return gram(f, z.block);
}

double focal_domain_loss(double p, Domain domain, double mod) {
    check_modulation(mod);
    const double q = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    if (domain == Domain::Source) return std::pow(1.0 - q, mod) * -std::log(q);
    return std::pow(q, mod) * -std::log(1.0 - q);
}

Tensor focal_domain_loss(const Tensor& p, Domain domain, double mod) {
    check_modulation(mod);
    const Tensor q = clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const Tensor one_minus_q = add_scalar(neg(q), 1.0);
    const Tensor loss = domain == Domain::Source ? mul(pow_scalar(one_minus_q, mod), neg(log(q)))
                                                 : mul(pow_scalar(q, mod), neg(log(one_minus_q)));
    return mean(loss);
}

Discriminator Discriminator::style(int block, std::int64_t channels, std::uint64_t seed,
                                   const DiscriminatorWidths& widths) {
    Discriminator d;
    d.kind_ = DiscriminatorKind::Style;
    d.block_ = block;
    d.channels_ = channels;
    const std::string name = block_prefix("style_d", block);
    d.hidden1_ = Linear(channels * channels, widths.style_hidden1, derive_seed(seed, name + ".fc1"));
    d.hidden2_ = Linear(widths.style_hidden1, widths.style_hidden2, derive_seed(seed, name + ".fc2"));
    d.out_ = Linear(widths.style_hidden2, 1, derive_seed(seed, name + ".out"));
    return d;
}

Discriminator Discriminator::attention(int block, std::int64_t channels, std::uint64_t seed,
                                       const DiscriminatorWidths& widths) {
    Discriminator d;
    d.kind_ = DiscriminatorKind::Attention;
    d.block_ = block;
    d.channels_ = channels;
    const std::string name = block_prefix("att_d", block);
    d.reduce_ = Conv(channels, widths.attention_conv, 1, derive_seed(seed, name + ".conv"));
    d.hidden1_ = Linear(widths.attention_conv, widths.attention_hidden, derive_seed(seed, name + ".fc1"));
    d.out_ = Linear(widths.attention_hidden, 1, derive_seed(seed, name + ".out"));
    return d;
}

Tensor Discriminator::forward(const Tensor& input) const {
    if (kind_ == DiscriminatorKind::Style) {
        if (input.rank() != 2 || input.dim(1) != channels_ * channels_) {
            throw ShapeError("style discriminator for block " + std::to_string(block_) + " expects [N, " +
                             std::to_string(channels_ * channels_) + "], got " + shape_string(input.shape()));
        }
        return sigmoid(out_(relu(hidden2_(relu(hidden1_(input))))));
    }
    if (input.rank() != 3 || input.dim(0) != channels_) {
        throw ShapeError("attention discriminator for block " + std::to_string(block_) + " expects [" +
                         std::to_string(channels_) + ",H,W], got " + shape_string(input.shape()));
    }
    const Tensor pooled = global_avg_pool(relu(reduce_(input)));
    return sigmoid(out_(relu(hidden1_(pooled))));
}

ParameterList Discriminator::parameters() const {
    ParameterList out;
    if (kind_ == DiscriminatorKind::Style) {
        const std::string name = block_prefix("style_d", block_);
        hidden1_.collect(name + ".fc1", out);
        hidden2_.collect(name + ".fc2", out);
        out_.collect(name + ".out", out);
    } else {
        const std::string name = block_prefix("att_d", block_);
        reduce_.collect(name + ".conv", out);
        hidden1_.collect(name + ".fc1", out);
        out_.collect(name + ".out", out);
    }
    return out;
}

AttentionNet::AttentionNet(int block, std::uint64_t seed)
    : block_(block), conv_(2, 1, 7, derive_seed(seed, block_prefix("attention", block) + ".conv")) {
    conv_.bias = Tensor::construct({1}, init::Constant{kInitialBias}, true);
}

ParameterList AttentionNet::parameters() const {
    ParameterList out;
    conv_.collect(block_prefix("attention", block_) + ".conv", out);
    return out;
}

AttentionMap attention_map(const FeatureMap& z, const AttentionNet& net) {
    const Tensor descriptor = concat(channel_mean(z.z), channel_max(z.z));
    return {sigmoid(net.conv()(descriptor)), z.block};
}

FeatureMap attention_apply(const AttentionMap& phi, const FeatureMap& z) {
    if (phi.phi.rank() != 3 || phi.phi.dim(0) != 1 || phi.phi.dim(1) != z.height() || phi.phi.dim(2) != z.width()) {
        throw ShapeError("attention map " + shape_string(phi.phi.shape()) + " does not match feature map " +
                         shape_string(z.z.shape()));
    }
    return FeatureMap(mul(z.z, phi.phi), z.block);
}

Tensor style_alignment_loss(const GramStyle& source, const GramStyle& target, const Discriminator& d, double gamma,
                            bool reverse_gradient) {
    check_modulation(gamma);
    if (d.kind() != DiscriminatorKind::Style) throw ConfigError("style alignment needs a style discriminator");
    if (source.block != d.block() || target.block != d.block()) {
        throw ConfigError("style features from blocks " + std::to_string(source.block) + "/" +
                          std::to_string(target.block) + " given to the block " + std::to_string(d.block()) +
                          " discriminator");
    }
    Tensor pair = concat(source.vector, target.vector);
    if (reverse_gradient) pair = grad_reverse(pair);
    const Tensor p = d.forward(pair);
    const Tensor ls = focal_domain_loss(slice(p, 0, 1), Domain::Source, gamma);
    const Tensor lt = focal_domain_loss(slice(p, 1, 1), Domain::Target, gamma);
    return scale(add(ls, lt), 0.5);
}

Tensor attention_alignment_loss(const FeatureMap& source, const FeatureMap& target, const Discriminator& d,
                                double epsilon, bool reverse_gradient) {
    check_modulation(epsilon);
    if (d.kind() != DiscriminatorKind::Attention) {
        throw ConfigError("attention alignment needs an attention discriminator");
    }
    if (source.block != d.block() || target.block != d.block()) {
        throw ConfigError("attended features from blocks " + std::to_string(source.block) + "/" +
                          std::to_string(target.block) + " given to the block " + std::to_string(d.block()) +
                          " discriminator");
    }
    const Tensor zs = reverse_gradient ? grad_reverse(source.z) : source.z;
    const Tensor zt = reverse_gradient ? grad_reverse(target.z) : target.z;
    const Tensor ls = focal_domain_loss(d.forward(zs), Domain::Source, epsilon);
    const Tensor lt = focal_domain_loss(d.forward(zt), Domain::Target, epsilon);
    return scale(add(ls, lt), 0.5);
}

namespace {

const Discriminator& lookup(const DiscriminatorSet& set, int block, const char* what) {
    const auto it = set.find(block);
    if (it == set.end()) throw ConfigError(std::string("no ") + what + " discriminator for block " + std::to_string(block));
    return it->second;
}

}  // namespace

Tensor multi_level_style_loss(std::span<const BlockPair> blocks, const DiscriminatorSet& discriminators, double gamma,
                              bool reverse_gradient) {
    if (blocks.empty()) throw ConfigError("style alignment enabled with an empty block set");
    Tensor total;
    for (const auto& pair : blocks) {
        const Tensor loss = style_alignment_loss(style_forward(pair.source), style_forward(pair.target),
                                                 lookup(discriminators, pair.source.block, "style"), gamma,
                                                 reverse_gradient);
        total = total.defined() ? add(total, loss) : loss;
    }
    return total;
}

Tensor multi_level_attention_loss(std::span<const BlockPair> blocks, const DiscriminatorSet& discriminators,
                                  const std::map<int, double>& epsilon, bool reverse_gradient) {
    Tensor total = Tensor::scalar(0.0);
    bool first = true;
    for (const auto& pair : blocks) {
        const auto eps = epsilon.find(pair.source.block);
        if (eps == epsilon.end()) {
            throw ConfigError("no epsilon configured for block " + std::to_string(pair.source.block));
        }
        const Tensor loss = attention_alignment_loss(pair.source, pair.target,
                                                     lookup(discriminators, pair.source.block, "attention"),
                                                     eps->second, reverse_gradient);
        total = first ? loss : add(total, loss);
        first = false;
    }
    return total;
}

}  // namespace ssada
