#include "bestta/losses.hpp"

#include <algorithm>
#include <cmath>

#include "bestta/errors.hpp"

namespace bestta {

void LossWeights::validate() const {
    for (double w : {style, content, entropy, l2})
        if (!std::isfinite(w) || w < 0.0) throw InvalidShape("LossWeights: weights must be finite and >= 0");
}

void EmbeddingContext::validate() const {
    const size_t n = e_unadapted.size();
    if (e_adapted.size() != n || e_source_mean.size() != n || e_ema.size() != n)
        throw DimensionMismatch("EmbeddingContext: embedding dimensions differ");
}

namespace {

// 1 - cos(reference, moving) with gradient through `moving` only.
LossTerm one_minus_cos(const EmbeddingVector& reference, const EmbeddingVector& moving) {
    const CosineResult c = cosine_similarity(moving, reference);
    LossTerm t;
    if (c.degenerate) {
        t.grad.assign(moving.size(), 0.0);
        t.skipped = true;
        return t;
    }
    t.value = 1.0 - c.value;
    t.grad.resize(moving.size());
    for (size_t i = 0; i < moving.size(); ++i) t.grad[i] = -c.grad_a[i];
    return t;
}

} // namespace

LossTerm style_loss_directional(const EmbeddingContext& ctx) {
    ctx.validate();
    const std::vector<double> ref = vec_sub(ctx.e_source_mean, ctx.e_ema);
    const std::vector<double> mov = vec_sub(ctx.e_adapted, ctx.e_unadapted);
    // d(moving)/d(e_adapted) is the identity, so the gradient carries over.
    return one_minus_cos(ref, mov);
}

LossTerm style_loss_direct(const EmbeddingContext& ctx) {
    ctx.validate();
    return one_minus_cos(ctx.e_source_mean, ctx.e_adapted);
}

LossTerm content_loss(const EmbeddingContext& ctx) {
    ctx.validate();
    return one_minus_cos(ctx.e_unadapted, ctx.e_adapted);
}

LossTerm entropy_loss(const std::vector<double>& logits, int positions, int classes,
                      EntropyReduction reduction) {
    if (positions < 1 || classes < 2 ||
        logits.size() != static_cast<size_t>(positions) * static_cast<size_t>(classes))
        throw InvalidShape("entropy_loss: need positions >= 1, classes >= 2, matching buffer");

    LossTerm t;
    t.grad.assign(logits.size(), 0.0);
    const double scale = reduction == EntropyReduction::kMean ? 1.0 / positions : 1.0;
    std::vector<double> p(classes);
    for (int pos = 0; pos < positions; ++pos) {
        const double* z = logits.data() + static_cast<size_t>(pos) * classes;
        const double zmax = *std::max_element(z, z + classes);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
        double h = 0.0;
        for (int c = 0; c < classes; ++c) {
            p[c] = std::exp(z[c] - zmax) / denom;
            if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
        }
        t.value += scale * h;
        double* g = t.grad.data() + static_cast<size_t>(pos) * classes;
        for (int c = 0; c < classes; ++c)
            g[c] = p[c] > 0.0 ? -scale * p[c] * (std::log(p[c]) + h) : 0.0;
    }
    return t;
}

L2Term l2_reg(const std::vector<double>& gamma_sigma, const std::vector<double>& gamma_mu,
              bool squared) {
    L2Term t;
    t.grad_sigma.assign(gamma_sigma.size(), 0.0);
    t.grad_mu.assign(gamma_mu.size(), 0.0);
    auto add = [&](const std::vector<double>& g, std::vector<double>& grad) {
        if (squared) {
            for (size_t i = 0; i < g.size(); ++i) {
                t.value += g[i] * g[i];
                grad[i] = 2.0 * g[i];
            }
            return;
        }
        const double n = vec_norm(g);
        t.value += n;
        if (n > 0.0)
            for (size_t i = 0; i < g.size(); ++i) grad[i] = g[i] / n;
    };
    add(gamma_sigma, t.grad_sigma);
    add(gamma_mu, t.grad_mu);
    return t;
}

LossReport total_loss(const LossTerm& style, const LossTerm& content, const LossTerm& entropy,
                      const LossTerm& l2, const LossWeights& w) {
    w.validate();
    LossReport r;
    auto fold = [&](const LossTerm& term, double weight, const char* name) {
        if (term.skipped) {
            r.skipped_terms.emplace_back(name);
            return 0.0;
        }
        return weight * term.value;
    };
    r.style = style.skipped ? 0.0 : style.value;
    r.content = content.skipped ? 0.0 : content.value;
    r.entropy = entropy.skipped ? 0.0 : entropy.value;
    r.l2 = l2.skipped ? 0.0 : l2.value;
    r.total = fold(style, w.style, "style") + fold(content, w.content, "content") +
              fold(entropy, w.entropy, "entropy") + fold(l2, w.l2, "l2");
    return r;
}

} // namespace bestta
