#pragma once

#include <string>
#include <vector>

#include "bestta/tensor.hpp"

namespace bestta {

/// Weights of the four-term adaptation objective.
struct LossWeights {
    double style = 0.3;
    double content = 1.0;
    double entropy = 0.3;
    double l2 = 0.04;

    void validate() const;
};

/// The embeddings a single adaptation step compares: the unadapted and
/// adapted descriptors of the current image, the mean source embedding, and
/// the running average of past target embeddings.
struct EmbeddingContext {
    EmbeddingVector e_unadapted;   // E(x)
    EmbeddingVector e_adapted;     // E'(x)
    EmbeddingVector e_source_mean; // mean source embedding
    EmbeddingVector e_ema;         // EMA of target embeddings

    void validate() const;
};

/// One loss component: value, gradient with respect to whatever the term is
/// differentiated against, and whether a degenerate direction dropped it.
struct LossTerm {
    double value = 0.0;
    std::vector<double> grad;
    bool skipped = false;
};

/// All components plus the weighted total for one step.
struct LossReport {
    double style = 0.0;
    double content = 0.0;
    double entropy = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    std::vector<std::string> skipped_terms;
};

/// 1 - cos(e_source_mean - e_ema, e_adapted - e_unadapted). Gradient flows
/// only through e_adapted. Either difference collapsing below kVecEps skips
/// the term (value 0, zero gradient).
LossTerm style_loss_directional(const EmbeddingContext& ctx);

/// 1 - cos(e_source_mean, e_adapted); the non-directional variant.
LossTerm style_loss_direct(const EmbeddingContext& ctx);

/// 1 - cos(e_unadapted, e_adapted); keeps the adapted embedding pointing
/// where the unadapted one does. Gradient through e_adapted.
LossTerm content_loss(const EmbeddingContext& ctx);

enum class EntropyReduction {
    kMean, // average over positions so the weight is resolution-independent
    kSum,
};

/// Softmax Shannon entropy of per-position class logits (row-major,
/// positions x classes). Gradient is with respect to the logits.
LossTerm entropy_loss(const std::vector<double>& logits, int positions, int classes,
                      EntropyReduction reduction = EntropyReduction::kMean);

/// Norm penalty on the learnable corrections, with subgradients laid out
/// like the inputs. Default is the plain 2-norm of each vector (absolute
/// value for the shared scalars, subgradient 0 at the origin); `squared`
/// selects the squared-norm variant.
struct L2Term {
    double value = 0.0;
    std::vector<double> grad_sigma;
    std::vector<double> grad_mu;
};
L2Term l2_reg(const std::vector<double>& gamma_sigma, const std::vector<double>& gamma_mu,
              bool squared = false);

/// Weighted sum of the components; skipped terms contribute zero but their
/// names are recorded.
LossReport total_loss(const LossTerm& style, const LossTerm& content, const LossTerm& entropy,
                      const LossTerm& l2, const LossWeights& w);

} // namespace bestta
