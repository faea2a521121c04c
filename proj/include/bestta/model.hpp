#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bestta/normalization.hpp"
#include "bestta/simulator.hpp"
#include "bestta/tensor.hpp"

namespace bestta {

/// 3x3 convolution, padding 1, configurable stride.
struct ConvLayer {
    int in_ch = 0;
    int out_ch = 0;
    int stride = 1;
    std::vector<double> weight; // [out][in][3][3]
    std::vector<double> bias;   // [out]

    void validate() const;
};

FeatureMap conv_forward(const FeatureMap& x, const ConvLayer& conv);

/// d(loss)/d(input) for the convolution, given d(loss)/d(output).
FeatureMap conv_backward_input(const FeatureMap& dout, const ConvLayer& conv, int in_h, int in_w);

/// Accumulates parameter gradients into wgrad/bgrad (conv layout).
void conv_backward_params(const FeatureMap& x, const FeatureMap& dout, const ConvLayer& conv,
                          std::vector<double>& wgrad, std::vector<double>& bgrad);

struct Block {
    ConvLayer conv;
    FrozenBatchNorm bn;
    // ReLU follows the normalization.
};

struct LinearHead {
    int in_dim = 0;
    int classes = 0;
    std::vector<double> weight; // [classes][in_dim]
    std::vector<double> bias;   // [classes]

    void validate() const;
};

/// Frozen encoder/classifier: conv+BN+ReLU blocks, global average pool,
/// linear head. insertion_index names the block (1-based) after whose output
/// the adaptation layer sits.
struct ToyModel {
    int in_channels = 3;
    int in_height = 16;
    int in_width = 16;
    std::vector<Block> blocks;
    LinearHead head;
    int insertion_index = 3;

    void validate() const;
};

/// How BN layers consume statistics at inference.
enum class BnMode {
    kFrozen,   // running stats from pretraining
    kInstance, // this image's own sample stats
};

struct ForwardOptions {
    BnMode bn_mode = BnMode::kFrozen;
    // Replacement affines per block (trainable copies used by the
    // entropy-only baseline); null means each block's own frozen pair.
    const std::vector<ChannelVector>* alpha_override = nullptr;
    const std::vector<ChannelVector>* beta_override = nullptr;
};

/// Per-block intermediates for the backward passes.
struct BlockCache {
    int in_h = 0, in_w = 0;
    FeatureMap conv_in;
    ChannelVector bn_mu, bn_sigma;  // the stats the forward actually used
    std::vector<bool> sigma_clamped; // per channel: sample std hit the floor
    FeatureMap normalized;          // (conv_out - mu) / sigma
    FeatureMap post;                // after affine + ReLU
};

struct ForwardCache {
    std::vector<BlockCache> blocks;
    EmbeddingVector pooled;
    std::vector<double> logits;
};

/// Plain forward through every block. Fills `cache` when non-null.
std::vector<double> model_forward(const ToyModel& m, const FeatureMap& x, const ForwardOptions& opt,
                                  ForwardCache* cache = nullptr);

int argmax_class(const std::vector<double>& logits);

/// Forward with the adaptation layer spliced in after block
/// `insertion_index`, capturing the pooled embeddings on both sides of it.
struct BeINForward {
    std::vector<double> logits;
    EmbeddingVector e_unadapted; // pooled block-k output
    EmbeddingVector e_adapted;   // pooled adaptation-layer output
    FeatureMap bein_out;
    BeINCache bein_cache;
    // Caches for the post-insertion blocks only (index 0 is block k+1).
    std::vector<BlockCache> post_blocks;
};
BeINForward forward_with_bein(const ToyModel& m, const BeINLayer& bein, const FeatureMap& x);

/// Reverse-mode gradient from d(loss)/d(logits) back to the adaptation
/// layer's output, through the frozen head and post-insertion blocks.
FeatureMap entropy_input_gradient(const ToyModel& m, const BeINForward& fwd,
                                  const std::vector<double>& dlogits);

/// Entropy-only gradients with respect to the replacement BN affines of
/// every block, with instance statistics (through-stats backward).
struct TentGrads {
    std::vector<ChannelVector> d_alpha;
    std::vector<ChannelVector> d_beta;
};
TentGrads tent_backward(const ToyModel& m, const ForwardCache& cache,
                        const std::vector<double>& dlogits,
                        const std::vector<ChannelVector>& alpha);

struct PretrainOptions {
    int epochs = 40;
    int batch = 32;
    double lr = 0.1;
    double momentum = 0.9;
    int train_n = 512;
    int holdout_n = 256;
    double target_accuracy = 0.90; // required on held-out data
    double stop_accuracy = 0.985;  // early stop once reached
    double bn_momentum = 0.9;      // running-stat EMA
    // Fraction of batches normalized with per-sample statistics instead of
    // batch statistics. Keeps single-image normalization functional (the
    // regime every stat-replacing method runs in) without letting it match
    // the frozen path. Running stats always come from batch statistics.
    double instance_stat_prob = 0.35;
    // Fraction of batches whose insertion-block output gets a random shared
    // affine perturbation (shift ~ U(-shift, shift), scale = exp(U(-ls, ls))).
    // The downstream blocks then tolerate the moderate shift/scale errors an
    // adaptive normalization layer introduces while its corrections are
    // still training, instead of collapsing on the first mis-estimate. The
    // scale range is kept narrower than the shift range on purpose: outside
    // it, over-amplified features still collapse the classifier, which is
    // what separates guided corrections from runaway confidence-seeking.
    double insert_jitter_prob = 0.5;
    double insert_jitter_shift = 0.3;
    double insert_jitter_logscale = 0.2;
};

/// Frozen model plus everything needed to reproduce it.
struct ModelFixture {
    ToyModel model;
    SourceSpec source;
    std::uint64_t seed = 0;
    double train_accuracy = 0.0;
    double holdout_accuracy = 0.0;
};

/// Trains on procedural source data with batch-statistics BN, freezes
/// weights and running stats, and returns the fixture. Deterministic in the
/// seed. Throws ConvergenceFailure if the held-out target is not met.
ModelFixture pretrain(const SourceSpec& spec, std::uint64_t seed, const PretrainOptions& opt = {});

std::string fixture_to_string(const ModelFixture& fixture);
void save_fixture(const ModelFixture& fixture, const std::string& path);
ModelFixture load_fixture(const std::string& path);

} // namespace bestta
