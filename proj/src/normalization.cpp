#include "bestta/normalization.hpp"

#include <cmath>

#include "bestta/errors.hpp"

namespace bestta {

namespace {

void require_channels(const FeatureMap& x, size_t n, const char* who) {
    if (static_cast<size_t>(x.channels) != n)
        throw DimensionMismatch(std::string(who) + ": channel count mismatch");
}

} // namespace

void FrozenBatchNorm::validate() const {
    const size_t n = alpha.size();
    if (beta.size() != n || mu_s.size() != n || sigma_s.size() != n)
        throw DimensionMismatch("FrozenBatchNorm: field lengths differ");
    for (double s : sigma_s)
        if (!(s > 0.0)) throw InvalidShape("FrozenBatchNorm: sigma_s must be strictly positive");
}

FeatureMap bn_forward(const FeatureMap& x, const FrozenBatchNorm& p) {
    require_channels(x, p.alpha.size(), "bn_forward");
    FeatureMap out(x.channels, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
        const double scale = p.alpha[c] / p.sigma_s[c];
        const double shift = p.beta[c] - scale * p.mu_s[c];
        auto src = x.channel(c);
        auto dst = out.channel(c);
        for (size_t i = 0; i < src.size(); ++i) dst[i] = scale * src[i] + shift;
    }
    return out;
}

FeatureMap tent_forward(const FeatureMap& x, const ChannelVector& alpha_p, const ChannelVector& beta_p,
                        double eps) {
    require_channels(x, alpha_p.size(), "tent_forward");
    if (beta_p.size() != alpha_p.size())
        throw DimensionMismatch("tent_forward: affine lengths differ");
    const ChannelVector mu = channel_mean(x);
    const ChannelVector sigma = channel_std(x, eps);
    FeatureMap out(x.channels, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
        const double scale = alpha_p[c] / sigma[c];
        const double shift = beta_p[c] - scale * mu[c];
        auto src = x.channel(c);
        auto dst = out.channel(c);
        for (size_t i = 0; i < src.size(); ++i) dst[i] = scale * src[i] + shift;
    }
    return out;
}

FeatureMap adain(const FeatureMap& x, const ChannelVector& style_mu, const ChannelVector& style_sigma,
                 double eps) {
    require_channels(x, style_mu.size(), "adain");
    if (style_sigma.size() != style_mu.size())
        throw DimensionMismatch("adain: style vectors differ in length");
    for (double s : style_sigma)
        if (!(s > 0.0)) throw NonPositiveStyleSigma("adain: style sigma must be strictly positive");
    const ChannelVector mu = channel_mean(x);
    const ChannelVector sigma = channel_std(x, eps);
    FeatureMap out(x.channels, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
        const double scale = style_sigma[c] / sigma[c];
        const double shift = style_mu[c] - scale * mu[c];
        auto src = x.channel(c);
        auto dst = out.channel(c);
        for (size_t i = 0; i < src.size(); ++i) dst[i] = scale * src[i] + shift;
    }
    return out;
}

void BeINLayer::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidShape("BeINLayer: rho must lie in [0,1]");
    if (anchor_mu.size() != anchor_sigma.size())
        throw DimensionMismatch("BeINLayer: anchor lengths differ");
    for (double s : anchor_sigma)
        if (!(s > 0.0)) throw InvalidShape("BeINLayer: anchor_sigma must be strictly positive");
    const size_t c = anchor_mu.size();
    if (gamma_sigma.size() != gamma_mu.size())
        throw DimensionMismatch("BeINLayer: gamma vectors differ in length");
    if (gamma_sigma.size() != 1 && gamma_sigma.size() != c)
        throw DimensionMismatch("BeINLayer: gamma must be shared (size 1) or per-channel");
    for (size_t i = 0; i < gamma_sigma.size(); ++i)
        if (!std::isfinite(gamma_sigma[i]) || !std::isfinite(gamma_mu[i]))
            throw InvalidShape("BeINLayer: gamma must be finite");
}

ChannelVector bein_estimate_sigma(const ChannelVector& sample_sigma, const BeINLayer& layer) {
    if (sample_sigma.size() != layer.anchor_sigma.size())
        throw DimensionMismatch("bein_estimate_sigma: channel count mismatch");
    ChannelVector out(sample_sigma.size());
    for (size_t c = 0; c < sample_sigma.size(); ++c) {
        const double a = layer.anchor_sigma[c];
        const double den = layer.rho * a + (1.0 - layer.rho) * sample_sigma[c] + layer.gsigma(static_cast<int>(c));
        if (den <= kDenEps)
            throw DegenerateDenominator("bein_estimate_sigma: blend denominator collapsed");
        out[c] = a * sample_sigma[c] / den;
    }
    return out;
}

ChannelVector bein_estimate_mu(const ChannelVector& sample_mu, const ChannelVector& sample_sigma,
                               const ChannelVector& target_sigma, const BeINLayer& layer) {
    const size_t n = layer.anchor_mu.size();
    if (sample_mu.size() != n || sample_sigma.size() != n || target_sigma.size() != n)
        throw DimensionMismatch("bein_estimate_mu: channel count mismatch");
    ChannelVector out(n);
    for (size_t c = 0; c < n; ++c) {
        out[c] = layer.rho * (target_sigma[c] / sample_sigma[c]) * sample_mu[c] +
                 (1.0 - layer.rho) * (target_sigma[c] / layer.anchor_sigma[c]) * layer.anchor_mu[c] +
                 layer.gmu(static_cast<int>(c));
    }
    return out;
}

std::pair<FeatureMap, BeINCache> bein_forward(const FeatureMap& x, const BeINLayer& layer, double eps) {
    layer.validate();
    require_channels(x, layer.anchor_mu.size(), "bein_forward");

    BeINCache cache;
    cache.channels = x.channels;
    cache.height = x.height;
    cache.width = x.width;
    cache.sample_mu = channel_mean(x);
    cache.sample_sigma = channel_std(x, eps);
    cache.target_sigma = bein_estimate_sigma(cache.sample_sigma, layer);
    cache.target_mu = bein_estimate_mu(cache.sample_mu, cache.sample_sigma, cache.target_sigma, layer);
    cache.input = x.data;
    cache.rho = layer.rho;
    cache.anchor_mu = layer.anchor_mu;
    cache.anchor_sigma = layer.anchor_sigma;
    cache.gamma_size = layer.gamma_sigma.size();

    FeatureMap out(x.channels, x.height, x.width);
    for (int c = 0; c < x.channels; ++c) {
        const double scale = layer.anchor_sigma[c] / cache.target_sigma[c];
        const double shift = layer.anchor_mu[c] - scale * cache.target_mu[c];
        auto src = x.channel(c);
        auto dst = out.channel(c);
        for (size_t i = 0; i < src.size(); ++i) dst[i] = scale * src[i] + shift;
    }
    return {std::move(out), std::move(cache)};
}

BeINGrad bein_backward(const BeINCache& cache, const FeatureMap& upstream) {
    if (upstream.channels != cache.channels || upstream.height != cache.height ||
        upstream.width != cache.width)
        throw StaleCache("bein_backward: upstream shape does not match the cached forward");

    BeINGrad g;
    g.gamma_sigma.assign(cache.gamma_size, 0.0);
    g.gamma_mu.assign(cache.gamma_size, 0.0);

    const int plane = cache.height * cache.width;
    for (int c = 0; c < cache.channels; ++c) {
        const double a = cache.anchor_sigma[c];
        const double st = cache.target_sigma[c];
        const double mt = cache.target_mu[c];
        const double sx = cache.sample_sigma[c];
        const double mx = cache.sample_mu[c];

        // Accumulate upstream sums against the output's dependence on the
        // two estimated statistics.
        double sum_u = 0.0;
        double sum_u_centered = 0.0;
        const double* in = cache.input.data() + static_cast<size_t>(c) * plane;
        auto up = upstream.channel(c);
        for (int i = 0; i < plane; ++i) {
            sum_u += up[i];
            sum_u_centered += up[i] * (in[i] - mt);
        }

        const double d_target_mu = -(a / st) * sum_u;
        const double d_target_sigma = -(a / (st * st)) * sum_u_centered;
        // target_sigma shrinks as gamma_sigma grows the denominator.
        const double dsig_dgamma = -(st * st) / (a * sx);
        // target_mu also moves with target_sigma through both blend terms.
        const double mu_per_sigma = cache.rho * mx / sx + (1.0 - cache.rho) * cache.anchor_mu[c] / a;

        const double dgs = dsig_dgamma * (d_target_sigma + mu_per_sigma * d_target_mu);
        const double dgm = d_target_mu;
        const size_t slot = cache.gamma_size == 1 ? 0 : static_cast<size_t>(c);
        g.gamma_sigma[slot] += dgs;
        g.gamma_mu[slot] += dgm;
    }
    return g;
}

} // namespace bestta
