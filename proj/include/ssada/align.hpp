#pragma once

// Cross-domain feature alignment in two directions:
//  * depthwise: Gram-matrix style features of a block output, aligned by a
//    style discriminator through gradient reversal;
//  * spatial: a 7x7 attention network re-weights every channel of a block
//    output, and the attended map is aligned by an attention discriminator.
// Both adversarial games use a focal modulation of the domain log-loss.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>

#include "ssada/layers.hpp"
#include "ssada/tensor.hpp"

namespace ssada {

enum class Domain { Source, Target };

const char* domain_name(Domain domain);

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Output Z of backbone block `block` (1..5), shape [C, H, W].
struct FeatureMap {
    Tensor z;
    int block = 0;

    FeatureMap() = default;
    FeatureMap(Tensor z, int block);

    std::int64_t channels() const { return z.dim(0); }
    std::int64_t height() const { return z.dim(1); }
    std::int64_t width() const { return z.dim(2); }
};

/// Inter-channel correlations of a feature matrix.
struct GramStyle {
    Tensor matrix;  // [C, C], symmetric
    Tensor vector;  // [1, C*C], row-major flattening of matrix
    double divisor = 1.0;
    int block = 0;
};

/// G = f f^T / M for f [C, M]. Only the upper triangle is computed; the lower
/// triangle is its mirror, so G is symmetric bit for bit.
GramStyle gram(const Tensor& f, int block = 0);

/// Reshapes Z [C,H,W] to [C, H*W] and takes its Gram matrix.
GramStyle style_forward(const FeatureMap& z);

inline constexpr double kProbabilityClamp = 1e-7;

/// Focal domain loss of one source-probability p:
///   source: (1-p)^mod * -log p        target: p^mod * -log(1-p)
/// p is clamped to [1e-7, 1-1e-7] first. Throws ConfigError when mod < 0.
double focal_domain_loss(double p, Domain domain, double mod);

/// Differentiable version, averaged over the elements of p.
Tensor focal_domain_loss(const Tensor& p, Domain domain, double mod);

enum class DiscriminatorKind { Style, Attention };

struct DiscriminatorWidths {
    std::int64_t style_hidden1 = 256;
    std::int64_t style_hidden2 = 128;
    std::int64_t attention_conv = 64;
    std::int64_t attention_hidden = 64;
};

/// Domain classifier emitting the probability that its input came from the source domain.
///  style:     FC(C*C -> 256) relu FC(256 -> 128) relu FC(128 -> 1) sigmoid, input [N, C*C] -> [N, 1]
///  attention: conv1x1(C -> 64) relu, global average pool, FC(64 -> 64) relu FC(64 -> 1) sigmoid,
///             input [C, H, W] -> [1, 1]
class Discriminator {
public:
    static Discriminator style(int block, std::int64_t channels, std::uint64_t seed,
                               const DiscriminatorWidths& widths = {});
    static Discriminator attention(int block, std::int64_t channels, std::uint64_t seed,
                                   const DiscriminatorWidths& widths = {});

    DiscriminatorKind kind() const { return kind_; }
    int block() const { return block_; }
    std::int64_t channels() const { return channels_; }

    Tensor forward(const Tensor& input) const;
    ParameterList parameters() const;
    /// Mutable access for tests that need a fixed output (e.g. zero final layer).
    Linear& output_layer() { return out_; }

private:
    DiscriminatorKind kind_ = DiscriminatorKind::Style;
    int block_ = 0;
    std::int64_t channels_ = 0;
    Conv reduce_;  // attention kind only
    Linear hidden1_;
    Linear hidden2_;  // style kind only
    Linear out_;
};

using DiscriminatorSet = std::map<int, Discriminator>;

/// Single-channel spatial attention map with entries in (0,1).
struct AttentionMap {
    Tensor phi;  // [1, H, W]
    int block = 0;
};

/// A = sigmoid(conv7x7([channel mean; channel max] of Z)), padding 3.
class AttentionNet {
public:
    AttentionNet() = default;
    AttentionNet(int block, std::uint64_t seed);

    // sigmoid(3) ~ 0.95: the map starts close to a pass-through instead of halving the block
    static constexpr double kInitialBias = 3.0;

    int block() const { return block_; }
    const Conv& conv() const { return conv_; }
    Conv& conv() { return conv_; }
    ParameterList parameters() const;

private:
    int block_ = 0;
    Conv conv_;
};

AttentionMap attention_map(const FeatureMap& z, const AttentionNet& net);

/// Z_phi[c,h,w] = phi[0,h,w] * Z[c,h,w].
FeatureMap attention_apply(const AttentionMap& phi, const FeatureMap& z);

/// 1/2 [focal(D(R(g_s)), source, gamma) + focal(D(R(g_t)), target, gamma)] where R is
/// gradient reversal (identity when reverse_gradient is false).
Tensor style_alignment_loss(const GramStyle& source, const GramStyle& target, const Discriminator& d, double gamma,
                            bool reverse_gradient = true);

/// Same adversarial form over attended feature maps with modulation epsilon.
Tensor attention_alignment_loss(const FeatureMap& source, const FeatureMap& target, const Discriminator& d,
                                double epsilon, bool reverse_gradient = true);

struct BlockPair {
    FeatureMap source;
    FeatureMap target;
};

/// Sum of per-block style alignment losses; throws ConfigError on an empty block list.
Tensor multi_level_style_loss(std::span<const BlockPair> blocks, const DiscriminatorSet& discriminators, double gamma,
                              bool reverse_gradient = true);

/// Sum of per-block attention alignment losses (zero for an empty block list).
Tensor multi_level_attention_loss(std::span<const BlockPair> blocks, const DiscriminatorSet& discriminators,
                                  const std::map<int, double>& epsilon, bool reverse_gradient = true);

}  // namespace ssada
