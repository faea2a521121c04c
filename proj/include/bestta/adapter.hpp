#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bestta/losses.hpp"
#include "bestta/model.hpp"
#include "bestta/normalization.hpp"
#include "bestta/simulator.hpp"

namespace bestta {

/// Source-side statistics collected once before deployment: the anchor the
/// adaptation layer re-normalizes toward, plus the mean source embedding the
/// style loss compares against.
struct SourceCalibration {
    ChannelVector anchor_mu;
    ChannelVector anchor_sigma; // strictly positive
    EmbeddingVector source_embedding_mean;
    int sample_count = 0;

    void validate() const;
};

/// Per-sample channel stats and pooled embeddings of the block-k output,
/// running-averaged over the source samples. Deterministic in sample order.
SourceCalibration calibrate_source(const ToyModel& model, const std::vector<LabeledSample>& samples,
                                   int insertion_index);

enum class StyleVariant {
    kDirectional, // 1 - cos(source_mean - ema, adapted - unadapted)
    kDirect,      // 1 - cos(source_mean, adapted)
};

enum class L2Variant {
    kNorm,
    kSquared,
};

/// Everything a deployment run needs beyond the fixture: optimizer and blend
/// settings, loss weights and variants, and where the layer is inserted.
struct AdapterConfig {
    double rho = 0.7;
    double lr = 0.001;
    double momentum = 0.9;
    LossWeights weights;
    double ema_momentum = 0.99;
    int insertion_index = 3;
    StyleVariant style_variant = StyleVariant::kDirectional;
    EntropyReduction entropy_reduction = EntropyReduction::kMean;
    L2Variant l2_variant = L2Variant::kNorm;
    bool per_channel_gamma = false;
    // Per-component ceiling on the correction gradient. The cosine losses
    // produce occasional large kicks (their magnitude scales with the inverse
    // of the embedding displacement); clamping each component keeps a single
    // bad image from throwing the corrections far from the anchor while
    // leaving the other parameter's in-range signal untouched. 0 disables
    // clipping.
    double grad_clip = 0.4;

    void validate() const;

    /// Higher blend ratio and learning rate, direct style loss, no L2; the
    /// settings that favor fast per-class adaptation over stability.
    static AdapterConfig classification_preset();
};

/// Pretty-printed JSON object mirroring the field names above; what
/// save_config writes and the run reports embed.
std::string config_to_json_text(const AdapterConfig& cfg);

void save_config(const AdapterConfig& cfg, const std::string& path);
AdapterConfig load_config(const std::string& path);

/// One diagnostics record per adaptation step (the per-step CSV row).
struct StepDiag {
    long step = 0; // 0-based position in the stream
    std::string domain;
    int severity = 0;
    double style = 0.0;
    double content = 0.0;
    double entropy = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    double dir_sim = 0.0; // cos(source_mean - ema, adapted - unadapted)
    double tgt_sim = 0.0; // cos(ema, adapted)
    double src_sim = 0.0; // cos(source_mean, adapted)
    double gamma_sigma = 0.0; // pre-update, averaged over slots
    double gamma_mu = 0.0;    // pre-update, averaged over slots
    int label = -1;
    int prediction = -1;
    bool correct = false;
    bool skipped = false;      // optimizer step was skipped
    std::string skip_reason;   // empty unless skipped
    int segment_index = -1;    // filled by run_stream
};

/// Everything that mutates while adapting: the layer itself, the optimizer's
/// momentum buffers, the embedding EMA, and the step log.
struct AdaptationState {
    BeINLayer bein;
    std::vector<double> buf_sigma;
    std::vector<double> buf_mu;
    std::optional<EmbeddingVector> ema;
    long step_count = 0;
    std::vector<StepDiag> diagnostics;
};

/// Zeroed corrections and buffers around the calibrated anchors; the layer
/// starts at the pure blend of source and sample statistics.
AdaptationState init_adaptation_state(const SourceCalibration& calib, const AdapterConfig& cfg);

/// buf = momentum*buf + grad; param -= lr*buf, elementwise. Throws
/// NonFiniteGradient before touching anything if any grad entry is not
/// finite, so a failed step leaves param and buf bit-identical.
void sgd_momentum_step(std::vector<double>& param, const std::vector<double>& grad,
                       std::vector<double>& buf, double lr, double momentum);

struct AdaptOutcome {
    int prediction = -1;
    LossReport losses;
    StepDiag diag;
};

/// One online step: forward with the current corrections, losses against the
/// calibration anchors and the embedding EMA, one SGD step on the
/// corrections, then an EMA update with the unadapted embedding. The
/// returned prediction always comes from the pre-update corrections. A
/// degenerate estimator denominator or a non-finite gradient skips the
/// optimizer step (state bit-identical) but still yields a prediction.
/// Requires model.insertion_index == cfg.insertion_index.
AdaptOutcome adapt_step(const ToyModel& model, AdaptationState& state, const SourceCalibration& calib,
                        const AdapterConfig& cfg, const LabeledSample& sample);

struct SegmentResult {
    int segment_index = 0;
    std::string domain;
    int severity = 0;
    int round = 1;
    int count = 0;
    int correct = 0;
    double accuracy = 0.0;
};

/// Outcome of one full pass over a stream, shared by the adaptation engine
/// and the baselines so reports can be emitted uniformly.
struct RunReport {
    std::string method = "bestta";
    std::vector<SegmentResult> segments;
    std::vector<double> round_mean;      // mean segment accuracy per round, index = round-1
    std::vector<double> source_accuracy; // after each round, when a holdout is given
    std::vector<StepDiag> diagnostics;
    AdapterConfig config;
    std::uint64_t fixture_seed = 0;
    std::uint64_t stream_seed = 0;
    std::uint64_t stream_hash = 0;
    long skipped_steps = 0;
    double wall_seconds = 0.0;
};

/// Sequential adapt_step over the expanded stream (batch size 1, state
/// carried across segments and rounds, never reset). After each round's last
/// segment the current corrections are evaluated on `source_holdout` when
/// provided. Per-step errors are absorbed into skipped steps; fixture and
/// shape errors propagate.
RunReport run_stream(const ModelFixture& fixture, const SourceCalibration& calib,
                     const AdapterConfig& cfg, const StreamSchedule& schedule,
                     const std::vector<LabeledSample>* source_holdout = nullptr);

} // namespace bestta
