#pragma once

#include <utility>
#include <vector>

#include "bestta/tensor.hpp"

namespace bestta {

// Shared floor for standard deviations in all normalization forwards.
inline constexpr double kStatEps = 1e-5;

// Guard for the target-std estimator denominator. A value at or below this
// is treated as degenerate and the step is skipped upstream.
inline constexpr double kDenEps = 1e-6;

/// Batch normalization with statistics and affines frozen at their
/// pretraining values.
struct FrozenBatchNorm {
    ChannelVector alpha;   // affine scale
    ChannelVector beta;    // affine shift
    ChannelVector mu_s;    // running mean
    ChannelVector sigma_s; // running std, strictly positive

    int channels() const { return static_cast<int>(alpha.size()); }
    void validate() const;
};

/// alpha * (x - mu_s) / sigma_s + beta, per channel.
FeatureMap bn_forward(const FeatureMap& x, const FrozenBatchNorm& p);

/// Normalization by the sample statistics of x itself, with replacement
/// affines: alpha_p * (x - mean(x)) / std(x) + beta_p.
FeatureMap tent_forward(const FeatureMap& x, const ChannelVector& alpha_p, const ChannelVector& beta_p,
                        double eps);

/// Adaptive instance normalization: re-styles x to the given per-channel
/// statistics, style_sigma * (x - mean(x)) / std(x) + style_mu.
FeatureMap adain(const FeatureMap& x, const ChannelVector& style_mu, const ChannelVector& style_sigma,
                 double eps);

/// The inserted adaptation layer. Re-normalizes an incoming feature map to
/// the source anchor statistics using estimated target statistics blended
/// from the sample statistics and the anchor, with learnable corrections.
///
/// gamma_sigma/gamma_mu hold either a single shared scalar (the default,
/// size 1) or one entry per channel (the per-channel variant).
struct BeINLayer {
    std::vector<double> gamma_sigma{0.0};
    std::vector<double> gamma_mu{0.0};
    double rho = 0.7;           // blend ratio between anchor and sample stats
    ChannelVector anchor_mu;    // source anchor mean
    ChannelVector anchor_sigma; // source anchor std, strictly positive

    int channels() const { return static_cast<int>(anchor_mu.size()); }
    bool per_channel() const { return gamma_sigma.size() > 1; }
    double gsigma(int c) const { return gamma_sigma.size() == 1 ? gamma_sigma[0] : gamma_sigma[c]; }
    double gmu(int c) const { return gamma_mu.size() == 1 ? gamma_mu[0] : gamma_mu[c]; }
    void validate() const;
};

/// Intermediates retained by bein_forward for the backward pass.
struct BeINCache {
    int channels = 0;
    int height = 0;
    int width = 0;
    ChannelVector sample_mu;    // per-channel mean of the layer input
    ChannelVector sample_sigma; // per-channel std of the layer input
    ChannelVector target_sigma; // estimated target std
    ChannelVector target_mu;    // estimated target mean
    std::vector<double> input;  // layer input, row-major
    // Layer parameters at forward time, needed to assemble the backward.
    double rho = 0.0;
    ChannelVector anchor_mu;
    ChannelVector anchor_sigma;
    size_t gamma_size = 1;
};

/// Estimated target std per channel:
///   anchor_sigma * sample_sigma / (rho*anchor_sigma + (1-rho)*sample_sigma + gamma_sigma)
/// Throws DegenerateDenominator when the denominator of any channel falls to
/// kDenEps or below.
ChannelVector bein_estimate_sigma(const ChannelVector& sample_sigma, const BeINLayer& layer);

/// Estimated target mean per channel:
///   rho*(target_sigma/sample_sigma)*sample_mu
///   + (1-rho)*(target_sigma/anchor_sigma)*anchor_mu + gamma_mu
ChannelVector bein_estimate_mu(const ChannelVector& sample_mu, const ChannelVector& sample_sigma,
                               const ChannelVector& target_sigma, const BeINLayer& layer);

/// anchor_sigma * (x - target_mu) / target_sigma + anchor_mu, per channel.
std::pair<FeatureMap, BeINCache> bein_forward(const FeatureMap& x, const BeINLayer& layer,
                                              double eps = kStatEps);

/// Gradients of a scalar loss with respect to the layer's learnable
/// corrections, laid out like the layer's gamma vectors (one entry in shared
/// mode, one per channel otherwise).
struct BeINGrad {
    std::vector<double> gamma_sigma;
    std::vector<double> gamma_mu;
};

/// Exact partial derivatives through the forward above, accumulated over all
/// channels and spatial positions. `upstream` is d(loss)/d(output).
BeINGrad bein_backward(const BeINCache& cache, const FeatureMap& upstream);

} // namespace bestta
