#include "bestta/adapter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "bestta/errors.hpp"

namespace bestta {

namespace {

using nlohmann::json;

bool all_finite_vec(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double slot_mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

void zero_corrections(BeINLayer& layer) {
    std::fill(layer.gamma_sigma.begin(), layer.gamma_sigma.end(), 0.0);
    std::fill(layer.gamma_mu.begin(), layer.gamma_mu.end(), 0.0);
}

/// Prediction with a fallback chain: live corrections, then zeroed
/// corrections, then the plain frozen model. The last rung cannot throw a
/// DegenerateDenominator because it never runs the estimator.
int predict_guarded(const ToyModel& model, const BeINLayer& bein, const FeatureMap& x) {
    try {
        return argmax_class(forward_with_bein(model, bein, x).logits);
    } catch (const DegenerateDenominator&) {
    }
    BeINLayer zeroed = bein;
    zero_corrections(zeroed);
    try {
        return argmax_class(forward_with_bein(model, zeroed, x).logits);
    } catch (const DegenerateDenominator&) {
    }
    return argmax_class(model_forward(model, x, {}, nullptr));
}

std::string style_name(StyleVariant v) {
    return v == StyleVariant::kDirectional ? "directional" : "direct";
}

std::string reduction_name(EntropyReduction r) {
    return r == EntropyReduction::kMean ? "mean" : "sum";
}

std::string l2_name(L2Variant v) { return v == L2Variant::kNorm ? "norm" : "squared"; }

} // namespace

void SourceCalibration::validate() const {
    if (anchor_mu.empty() || anchor_mu.size() != anchor_sigma.size() ||
        anchor_mu.size() != source_embedding_mean.size())
        throw InvalidShape("SourceCalibration: inconsistent vector sizes");
    if (sample_count < 1) throw EmptySource("SourceCalibration: sample_count < 1");
    for (double s : anchor_sigma)
        if (!(s > 0.0)) throw NonPositiveStyleSigma("SourceCalibration: anchor_sigma must be positive");
}

SourceCalibration calibrate_source(const ToyModel& model, const std::vector<LabeledSample>& samples,
                                   int insertion_index) {
    model.validate();
    if (samples.empty()) throw EmptySource("calibrate_source: no source samples");
    if (insertion_index < 1 || insertion_index > static_cast<int>(model.blocks.size()))
        throw InvalidShape("calibrate_source: insertion_index out of range");

    SourceCalibration calib;
    int n = 0;
    for (const LabeledSample& s : samples) {
        ForwardCache cache;
        model_forward(model, s.input, {}, &cache);
        const FeatureMap& feat = cache.blocks[insertion_index - 1].post;
        const ChannelVector mu = channel_mean(feat);
        const ChannelVector sd = channel_std(feat, kStatEps);
        const EmbeddingVector emb = global_average_pool(feat);
        ++n;
        if (n == 1) {
            calib.anchor_mu = mu;
            calib.anchor_sigma = sd;
            calib.source_embedding_mean = emb;
            continue;
        }
        // Incremental mean: repeated identical samples leave it exactly fixed.
        const double inv = 1.0 / n;
        for (size_t c = 0; c < mu.size(); ++c) {
            calib.anchor_mu[c] += (mu[c] - calib.anchor_mu[c]) * inv;
            calib.anchor_sigma[c] += (sd[c] - calib.anchor_sigma[c]) * inv;
            calib.source_embedding_mean[c] += (emb[c] - calib.source_embedding_mean[c]) * inv;
        }
    }
    calib.sample_count = n;
    calib.validate();
    return calib;
}

void AdapterConfig::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidShape("AdapterConfig: rho outside [0,1]");
    if (!(lr > 0.0)) throw InvalidShape("AdapterConfig: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidShape("AdapterConfig: momentum outside [0,1)");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0))
        throw InvalidShape("AdapterConfig: ema_momentum outside [0,1)");
    if (insertion_index < 1) throw InvalidShape("AdapterConfig: insertion_index must be >= 1");
    if (!(grad_clip >= 0.0)) throw InvalidShape("AdapterConfig: grad_clip must be >= 0");
    weights.validate();
}

AdapterConfig AdapterConfig::classification_preset() {
    AdapterConfig cfg;
    cfg.rho = 0.9;
    cfg.lr = 0.1;
    cfg.weights = {1.0, 0.0, 1.0, 0.0};
    cfg.style_variant = StyleVariant::kDirect;
    return cfg;
}

std::string config_to_json_text(const AdapterConfig& cfg) {
    json j;
    j["rho"] = cfg.rho;
    j["lr"] = cfg.lr;
    j["momentum"] = cfg.momentum;
    j["weights"] = json{{"style", cfg.weights.style},
                        {"content", cfg.weights.content},
                        {"entropy", cfg.weights.entropy},
                        {"l2", cfg.weights.l2}};
    j["ema_momentum"] = cfg.ema_momentum;
    j["insertion_index"] = cfg.insertion_index;
    j["style_variant"] = style_name(cfg.style_variant);
    j["entropy_reduction"] = reduction_name(cfg.entropy_reduction);
    j["l2_variant"] = l2_name(cfg.l2_variant);
    j["per_channel_gamma"] = cfg.per_channel_gamma;
    j["grad_clip"] = cfg.grad_clip;
    return j.dump(2);
}

void save_config(const AdapterConfig& cfg, const std::string& path) {
    cfg.validate();
    std::ofstream out(path);
    if (!out) throw IoFailure("save_config: cannot open " + path);
    out << config_to_json_text(cfg) << "\n";
    if (!out) throw IoFailure("save_config: write failed for " + path);
}

AdapterConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("load_config: cannot open " + path);
    json j = json::parse(in, nullptr, true);

    AdapterConfig cfg;
    cfg.rho = j.at("rho").get<double>();
    cfg.lr = j.at("lr").get<double>();
    cfg.momentum = j.at("momentum").get<double>();
    const json& w = j.at("weights");
    cfg.weights.style = w.at("style").get<double>();
    cfg.weights.content = w.at("content").get<double>();
    cfg.weights.entropy = w.at("entropy").get<double>();
    cfg.weights.l2 = w.at("l2").get<double>();
    cfg.ema_momentum = j.at("ema_momentum").get<double>();
    cfg.insertion_index = j.at("insertion_index").get<int>();

    const std::string style = j.at("style_variant").get<std::string>();
    if (style == "directional") cfg.style_variant = StyleVariant::kDirectional;
    else if (style == "direct") cfg.style_variant = StyleVariant::kDirect;
    else throw IoFailure("load_config: unknown style_variant \"" + style + "\"");

    const std::string reduction = j.at("entropy_reduction").get<std::string>();
    if (reduction == "mean") cfg.entropy_reduction = EntropyReduction::kMean;
    else if (reduction == "sum") cfg.entropy_reduction = EntropyReduction::kSum;
    else throw IoFailure("load_config: unknown entropy_reduction \"" + reduction + "\"");

    const std::string l2 = j.at("l2_variant").get<std::string>();
    if (l2 == "norm") cfg.l2_variant = L2Variant::kNorm;
    else if (l2 == "squared") cfg.l2_variant = L2Variant::kSquared;
    else throw IoFailure("load_config: unknown l2_variant \"" + l2 + "\"");

    cfg.per_channel_gamma = j.at("per_channel_gamma").get<bool>();
    cfg.grad_clip = j.at("grad_clip").get<double>();
    cfg.validate();
    return cfg;
}

AdaptationState init_adaptation_state(const SourceCalibration& calib, const AdapterConfig& cfg) {
    calib.validate();
    cfg.validate();
    AdaptationState state;
    state.bein.rho = cfg.rho;
    state.bein.anchor_mu = calib.anchor_mu;
    state.bein.anchor_sigma = calib.anchor_sigma;
    const size_t slots = cfg.per_channel_gamma ? calib.anchor_mu.size() : 1;
    state.bein.gamma_sigma.assign(slots, 0.0);
    state.bein.gamma_mu.assign(slots, 0.0);
    state.buf_sigma.assign(slots, 0.0);
    state.buf_mu.assign(slots, 0.0);
    state.bein.validate();
    return state;
}

void sgd_momentum_step(std::vector<double>& param, const std::vector<double>& grad,
                       std::vector<double>& buf, double lr, double momentum) {
    if (param.size() != grad.size() || param.size() != buf.size())
        throw DimensionMismatch("sgd_momentum_step: param/grad/buf sizes differ");
    if (!all_finite_vec(grad)) throw NonFiniteGradient("sgd_momentum_step: gradient not finite");
    for (size_t i = 0; i < param.size(); ++i) {
        buf[i] = momentum * buf[i] + grad[i];
        param[i] -= lr * buf[i];
    }
}

AdaptOutcome adapt_step(const ToyModel& model, AdaptationState& state, const SourceCalibration& calib,
                        const AdapterConfig& cfg, const LabeledSample& sample) {
    cfg.validate();
    calib.validate();
    if (model.insertion_index != cfg.insertion_index)
        throw DimensionMismatch("adapt_step: model insertion_index " +
                                std::to_string(model.insertion_index) + " != config " +
                                std::to_string(cfg.insertion_index));

    StepDiag diag;
    diag.step = state.step_count;
    diag.domain = sample.domain;
    diag.severity = sample.severity;
    diag.label = sample.label;
    // The corrections the prediction is made with, before this step's update.
    diag.gamma_sigma = slot_mean(state.bein.gamma_sigma);
    diag.gamma_mu = slot_mean(state.bein.gamma_mu);

    BeINForward fwd;
    bool live = false;
    try {
        fwd = forward_with_bein(model, state.bein, sample.input);
        live = true;
    } catch (const DegenerateDenominator&) {
        diag.skipped = true;
        diag.skip_reason = "degenerate_denominator";
    }

    int prediction = -1;
    EmbeddingVector e_x; // this image's unadapted embedding, feeds the EMA
    LossReport report;

    if (live) {
        prediction = argmax_class(fwd.logits);
        e_x = fwd.e_unadapted;
    } else {
        // Fallback chain for the prediction only; no losses, no update.
        BeINLayer zeroed = state.bein;
        zero_corrections(zeroed);
        try {
            const BeINForward fb = forward_with_bein(model, zeroed, sample.input);
            prediction = argmax_class(fb.logits);
            e_x = fb.e_unadapted;
        } catch (const DegenerateDenominator&) {
            ForwardCache cache;
            prediction = argmax_class(model_forward(model, sample.input, {}, &cache));
            e_x = global_average_pool(cache.blocks[model.insertion_index - 1].post);
        }
    }

    if (live) {
        // An uninitialized EMA adopts this embedding and the style term sits
        // out for the step; there is no meaningful direction yet.
        const bool init_step = !state.ema.has_value();
        if (init_step) state.ema = fwd.e_unadapted;

        EmbeddingContext ctx;
        ctx.e_unadapted = fwd.e_unadapted;
        ctx.e_adapted = fwd.e_adapted;
        ctx.e_source_mean = calib.source_embedding_mean;
        ctx.e_ema = *state.ema;

        LossTerm style;
        if (init_step) {
            style.skipped = true;
        } else {
            style = cfg.style_variant == StyleVariant::kDirectional ? style_loss_directional(ctx)
                                                                    : style_loss_direct(ctx);
        }
        const LossTerm content = content_loss(ctx);
        const LossTerm entropy = entropy_loss(fwd.logits, 1, model.head.classes, cfg.entropy_reduction);
        const L2Term l2 = l2_reg(state.bein.gamma_sigma, state.bein.gamma_mu,
                                 cfg.l2_variant == L2Variant::kSquared);
        LossTerm l2_term;
        l2_term.value = l2.value;
        report = total_loss(style, content, entropy, l2_term, cfg.weights);

        // Assemble d(total)/d(layer output). The pooled style/content
        // gradients spread uniformly over each channel plane; the entropy
        // gradient comes back through the head and post-insertion blocks.
        // All paths sum.
        const int channels = fwd.bein_out.channels;
        const double plane = static_cast<double>(fwd.bein_out.plane());
        std::vector<double> g_embed(channels, 0.0);
        bool any_embed = false;
        if (cfg.weights.style != 0.0 && !style.skipped) {
            for (int c = 0; c < channels; ++c) g_embed[c] += cfg.weights.style * style.grad[c];
            any_embed = true;
        }
        if (cfg.weights.content != 0.0 && !content.skipped) {
            for (int c = 0; c < channels; ++c) g_embed[c] += cfg.weights.content * content.grad[c];
            any_embed = true;
        }
        FeatureMap upstream(channels, fwd.bein_out.height, fwd.bein_out.width, 0.0);
        if (any_embed) {
            for (int c = 0; c < channels; ++c) {
                const double g = g_embed[c] / plane;
                for (double& v : upstream.channel(c)) v += g;
            }
        }
        if (cfg.weights.entropy != 0.0 && !entropy.skipped) {
            std::vector<double> dlogits(entropy.grad.size());
            for (size_t i = 0; i < dlogits.size(); ++i) dlogits[i] = cfg.weights.entropy * entropy.grad[i];
            const FeatureMap g_ent = entropy_input_gradient(model, fwd, dlogits);
            for (int i = 0; i < upstream.size(); ++i) upstream.data[i] += g_ent.data[i];
        }

        BeINGrad grads = bein_backward(fwd.bein_cache, upstream);
        if (cfg.weights.l2 != 0.0) {
            for (size_t i = 0; i < grads.gamma_sigma.size(); ++i)
                grads.gamma_sigma[i] += cfg.weights.l2 * l2.grad_sigma[i];
            for (size_t i = 0; i < grads.gamma_mu.size(); ++i)
                grads.gamma_mu[i] += cfg.weights.l2 * l2.grad_mu[i];
        }

        if (cfg.grad_clip > 0.0) {
            // Clamp per component, not by joint norm: a blown-up kick on one
            // parameter must not rescale the other parameter's healthy signal
            // away in the same step.
            for (double& g : grads.gamma_sigma)
                g = std::clamp(g, -cfg.grad_clip, cfg.grad_clip);
            for (double& g : grads.gamma_mu)
                g = std::clamp(g, -cfg.grad_clip, cfg.grad_clip);
        }

        // Vet both gradient vectors before either parameter moves so a
        // rejected step cannot leave the state half-updated.
        if (all_finite_vec(grads.gamma_sigma) && all_finite_vec(grads.gamma_mu)) {
            sgd_momentum_step(state.bein.gamma_sigma, grads.gamma_sigma, state.buf_sigma, cfg.lr,
                              cfg.momentum);
            sgd_momentum_step(state.bein.gamma_mu, grads.gamma_mu, state.buf_mu, cfg.lr, cfg.momentum);
        } else {
            diag.skipped = true;
            diag.skip_reason = "non_finite_gradient";
        }

        diag.style = report.style;
        diag.content = report.content;
        diag.entropy = report.entropy;
        diag.l2 = report.l2;
        diag.total = report.total;
        diag.dir_sim = cosine_similarity(vec_sub(ctx.e_source_mean, ctx.e_ema),
                                         vec_sub(ctx.e_adapted, ctx.e_unadapted))
                           .value;
        diag.tgt_sim = cosine_similarity(ctx.e_ema, ctx.e_adapted).value;
        diag.src_sim = cosine_similarity(ctx.e_source_mean, ctx.e_adapted).value;
    }

    // The EMA tracks the stream's unadapted embeddings even when the
    // optimizer step was skipped; it is a description of the data, not part
    // of the optimizer state. On the init step this blend is an identity.
    state.ema = ema_update(state.ema, e_x, cfg.ema_momentum);

    diag.prediction = prediction;
    diag.correct = prediction == sample.label;
    state.step_count += 1;
    state.diagnostics.push_back(diag);

    AdaptOutcome out;
    out.prediction = prediction;
    out.losses = report;
    out.diag = diag;
    return out;
}

RunReport run_stream(const ModelFixture& fixture, const SourceCalibration& calib,
                     const AdapterConfig& cfg, const StreamSchedule& schedule,
                     const std::vector<LabeledSample>* source_holdout) {
    cfg.validate();
    schedule.validate();
    const auto t0 = std::chrono::steady_clock::now();

    ToyModel model = fixture.model;
    model.insertion_index = cfg.insertion_index;
    model.validate();

    const ExpandedStream stream = expand_stream(schedule, fixture.source);
    AdaptationState state = init_adaptation_state(calib, cfg);

    RunReport report;
    report.config = cfg;
    report.fixture_seed = fixture.seed;
    report.stream_seed = schedule.seed;
    report.stream_hash = stream.content_hash;

    report.segments.resize(schedule.segments.size());
    int max_round = 0;
    for (size_t i = 0; i < schedule.segments.size(); ++i) {
        const StreamSegment& seg = schedule.segments[i];
        SegmentResult& r = report.segments[i];
        r.segment_index = static_cast<int>(i);
        r.domain = schedule.domains[seg.domain_index].name;
        r.severity = seg.severity;
        r.round = seg.round;
        max_round = std::max(max_round, seg.round);
    }

    for (size_t i = 0; i < stream.items.size(); ++i) {
        const StreamItem& item = stream.items[i];
        const AdaptOutcome out = adapt_step(model, state, calib, cfg, item.corrupted);
        state.diagnostics.back().segment_index = item.segment_index;
        SegmentResult& r = report.segments[item.segment_index];
        r.count += 1;
        if (out.diag.correct) r.correct += 1;
        if (out.diag.skipped) report.skipped_steps += 1;

        // Source re-evaluation fires after each round's last sample, with
        // whatever corrections the stream has trained by then.
        const int round = schedule.segments[item.segment_index].round;
        const bool round_ends = i + 1 == stream.items.size() ||
                                schedule.segments[stream.items[i + 1].segment_index].round != round;
        if (round_ends && source_holdout != nullptr && !source_holdout->empty()) {
            int good = 0;
            for (const LabeledSample& s : *source_holdout)
                if (predict_guarded(model, state.bein, s.input) == s.label) ++good;
            report.source_accuracy.push_back(static_cast<double>(good) /
                                             static_cast<double>(source_holdout->size()));
        }
    }

    std::vector<double> round_sum(max_round, 0.0);
    std::vector<int> round_segments(max_round, 0);
    for (SegmentResult& r : report.segments) {
        r.accuracy = r.count > 0 ? static_cast<double>(r.correct) / r.count : 0.0;
        round_sum[r.round - 1] += r.accuracy;
        round_segments[r.round - 1] += 1;
    }
    report.round_mean.resize(max_round, 0.0);
    for (int r = 0; r < max_round; ++r)
        if (round_segments[r] > 0) report.round_mean[r] = round_sum[r] / round_segments[r];

    report.diagnostics = std::move(state.diagnostics);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace bestta
