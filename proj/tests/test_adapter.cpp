#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "bestta/adapter.hpp"
#include "bestta/errors.hpp"
#include "bestta/losses.hpp"
#include "bestta/model.hpp"
#include "bestta/rng.hpp"
#include "bestta/simulator.hpp"
#include "support.hpp"

using namespace bestta;
using namespace bestta::testing;

namespace {

std::string data_path(const char* file) {
    return std::string(BESTTA_TEST_DATA_DIR) + "/" + file;
}

const ModelFixture& fixture() {
    static ModelFixture fx = load_fixture(data_path("fixture_default.json"));
    return fx;
}

// A mild corrupted sample from the stock domains; severity 2 keeps the
// activations well away from ReLU kinks for the finite-difference cases.
LabeledSample corrupted_sample(std::uint64_t seed, int label, int domain = 1, int severity = 2) {
    const auto domains = default_domains();
    LabeledSample s = make_sample(seed, label, fixture().source);
    return apply_corruption(s, domains[domain], severity, seed + 900);
}

SourceCalibration default_calibration() {
    const auto src = make_source_dataset(5, 16, fixture().source);
    return calibrate_source(fixture().model, src, fixture().model.insertion_index);
}

// Block-k channel statistics of the frozen forward, the quantities
// calibration averages.
struct FeatStats {
    ChannelVector mu;
    ChannelVector sigma;
    EmbeddingVector emb;
};

FeatStats block_stats(const ToyModel& m, const FeatureMap& x, int insertion) {
    ForwardCache cache;
    model_forward(m, x, {}, &cache);
    const FeatureMap& feat = cache.blocks[insertion - 1].post;
    return {channel_mean(feat), channel_std(feat, kStatEps), global_average_pool(feat)};
}

} // namespace

TEST_CASE("calibration averages per-sample feature statistics") {
    const ToyModel& m = fixture().model;
    const int k = m.insertion_index;
    const auto a = corrupted_sample(11, 0);
    const auto b = corrupted_sample(12, 2);

    const FeatStats sa = block_stats(m, a.input, k);
    const FeatStats sb = block_stats(m, b.input, k);

    // One sample: the average of one is the sample itself.
    const SourceCalibration one = calibrate_source(m, {a}, k);
    CHECK(one.sample_count == 1);
    CHECK(one.anchor_mu == sa.mu);
    CHECK(one.anchor_sigma == sa.sigma);
    CHECK(one.source_embedding_mean == sa.emb);

    // Repeating the same sample is a fixed point of the running average.
    const SourceCalibration rep = calibrate_source(m, {a, a, a, a}, k);
    CHECK(rep.sample_count == 4);
    CHECK(rep.anchor_mu == sa.mu);
    CHECK(rep.anchor_sigma == sa.sigma);

    // Two distinct samples: plain two-point average per channel.
    const SourceCalibration two = calibrate_source(m, {a, b}, k);
    for (size_t c = 0; c < sa.mu.size(); ++c) {
        CHECK(two.anchor_mu[c] == doctest::Approx(0.5 * (sa.mu[c] + sb.mu[c])).epsilon(1e-12));
        CHECK(two.anchor_sigma[c] == doctest::Approx(0.5 * (sa.sigma[c] + sb.sigma[c])).epsilon(1e-12));
        CHECK(two.source_embedding_mean[c] == doctest::Approx(0.5 * (sa.emb[c] + sb.emb[c])).epsilon(1e-12));
    }

    // Same list twice gives bit-identical calibrations.
    const SourceCalibration again = calibrate_source(m, {a, b}, k);
    CHECK(again.anchor_mu == two.anchor_mu);
    CHECK(again.anchor_sigma == two.anchor_sigma);
}

TEST_CASE("calibration rejects empty input and bad insertion points") {
    const ToyModel& m = fixture().model;
    const auto a = corrupted_sample(21, 1);
    CHECK_THROWS_AS((void)calibrate_source(m, {}, m.insertion_index), EmptySource);
    CHECK_THROWS_AS((void)calibrate_source(m, {a}, 0), InvalidShape);
    CHECK_THROWS_AS((void)calibrate_source(m, {a}, static_cast<int>(m.blocks.size()) + 1),
                    InvalidShape);
}

TEST_CASE("momentum step matches hand arithmetic") {
    std::vector<double> param{1.0}, grad{1.0}, buf{1.0};
    sgd_momentum_step(param, grad, buf, 0.1, 0.9);
    CHECK(buf[0] == 1.9);
    CHECK(param[0] == doctest::Approx(0.81).epsilon(1e-15));

    // Zero momentum reduces to plain SGD.
    param = {2.0};
    buf = {0.0};
    grad = {0.5};
    sgd_momentum_step(param, grad, buf, 0.2, 0.0);
    CHECK(param[0] == doctest::Approx(1.9).epsilon(1e-15));
    CHECK(buf[0] == 0.5);

    // Zero gradient with an empty buffer is a no-op.
    param = {3.0};
    buf = {0.0};
    grad = {0.0};
    sgd_momentum_step(param, grad, buf, 0.1, 0.9);
    CHECK(param[0] == 3.0);
    CHECK(buf[0] == 0.0);
}

TEST_CASE("momentum step rejects bad inputs without touching state") {
    std::vector<double> param{1.0, 2.0}, buf{0.25, -0.5};
    const std::vector<double> param_before = param, buf_before = buf;

    std::vector<double> short_grad{1.0};
    CHECK_THROWS_AS(sgd_momentum_step(param, short_grad, buf, 0.1, 0.9), DimensionMismatch);
    CHECK(param == param_before);
    CHECK(buf == buf_before);

    std::vector<double> nan_grad{1.0, std::nan("")};
    CHECK_THROWS_AS(sgd_momentum_step(param, nan_grad, buf, 0.1, 0.9), NonFiniteGradient);
    CHECK(param == param_before);
    CHECK(buf == buf_before);
}

TEST_CASE("config validation bounds every field") {
    AdapterConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    auto bad = cfg;
    bad.rho = 1.5;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.ema_momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.insertion_index = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.grad_clip = -0.1;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);
    bad = cfg;
    bad.weights.entropy = -1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidShape);

    const AdapterConfig preset = AdapterConfig::classification_preset();
    CHECK(preset.rho == 0.9);
    CHECK(preset.style_variant == StyleVariant::kDirect);
    CHECK(preset.weights.content == 0.0);
    CHECK(preset.weights.l2 == 0.0);
    CHECK_NOTHROW(preset.validate());
}

TEST_CASE("config survives a JSON round trip") {
    AdapterConfig cfg;
    cfg.rho = 0.55;
    cfg.lr = 0.0025;
    cfg.momentum = 0.8;
    cfg.weights = {0.1, 0.9, 0.2, 0.01};
    cfg.ema_momentum = 0.95;
    cfg.insertion_index = 2;
    cfg.style_variant = StyleVariant::kDirect;
    cfg.entropy_reduction = EntropyReduction::kSum;
    cfg.l2_variant = L2Variant::kSquared;
    cfg.per_channel_gamma = true;
    cfg.grad_clip = 0.75;

    const std::string path = (std::filesystem::temp_directory_path() / "bestta_cfg.json").string();
    save_config(cfg, path);
    const AdapterConfig back = load_config(path);
    CHECK(back.rho == cfg.rho);
    CHECK(back.lr == cfg.lr);
    CHECK(back.momentum == cfg.momentum);
    CHECK(back.weights.style == cfg.weights.style);
    CHECK(back.weights.content == cfg.weights.content);
    CHECK(back.weights.entropy == cfg.weights.entropy);
    CHECK(back.weights.l2 == cfg.weights.l2);
    CHECK(back.ema_momentum == cfg.ema_momentum);
    CHECK(back.insertion_index == cfg.insertion_index);
    CHECK(back.style_variant == cfg.style_variant);
    CHECK(back.entropy_reduction == cfg.entropy_reduction);
    CHECK(back.l2_variant == cfg.l2_variant);
    CHECK(back.per_channel_gamma == cfg.per_channel_gamma);
    CHECK(back.grad_clip == cfg.grad_clip);
    std::filesystem::remove(path);

    CHECK_THROWS_AS((void)load_config("/nonexistent/cfg.json"), IoFailure);

    // Unknown enum strings are rejected, not silently defaulted.
    const std::string bad_path = (std::filesystem::temp_directory_path() / "bestta_bad_cfg.json").string();
    {
        std::string text = config_to_json_text(cfg);
        const auto pos = text.find("direct");
        text.replace(pos, 6, "mystery");
        std::ofstream out(bad_path);
        out << text;
    }
    CHECK_THROWS_AS((void)load_config(bad_path), IoFailure);
    std::filesystem::remove(bad_path);
}

TEST_CASE("initial state starts at the pure blend") {
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;

    AdaptationState st = init_adaptation_state(calib, cfg);
    CHECK(st.bein.anchor_mu == calib.anchor_mu);
    CHECK(st.bein.anchor_sigma == calib.anchor_sigma);
    CHECK(st.bein.rho == cfg.rho);
    REQUIRE(st.bein.gamma_sigma.size() == 1);
    CHECK(st.bein.gamma_sigma[0] == 0.0);
    CHECK(st.bein.gamma_mu[0] == 0.0);
    CHECK(st.buf_sigma == std::vector<double>{0.0});
    CHECK(st.buf_mu == std::vector<double>{0.0});
    CHECK_FALSE(st.ema.has_value());
    CHECK(st.step_count == 0);

    cfg.per_channel_gamma = true;
    AdaptationState wide = init_adaptation_state(calib, cfg);
    CHECK(wide.bein.gamma_sigma.size() == calib.anchor_mu.size());
    CHECK(wide.buf_mu.size() == calib.anchor_mu.size());
}

TEST_CASE("zero loss weights leave corrections untouched") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;
    cfg.weights = {0.0, 0.0, 0.0, 0.0};

    AdaptationState st = init_adaptation_state(calib, cfg);
    for (int i = 0; i < 5; ++i) {
        const LabeledSample x = corrupted_sample(40 + i, i % 4, i % 4, 3);

        // The prediction must match the forward with the corrections the
        // step started from (still zero here, the pure blend).
        BeINLayer snapshot = st.bein;
        const int want = argmax_class(forward_with_bein(m, snapshot, x.input).logits);

        const AdaptOutcome out = adapt_step(m, st, calib, cfg, x);
        CHECK(out.prediction == want);
        CHECK(out.losses.total == 0.0);
        CHECK(st.bein.gamma_sigma[0] == 0.0);
        CHECK(st.bein.gamma_mu[0] == 0.0);
        CHECK(st.buf_sigma[0] == 0.0);
        CHECK_FALSE(out.diag.skipped);
    }
    CHECK(st.step_count == 5);
}

TEST_CASE("pure norm penalty walks the corrections toward zero") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;
    cfg.weights = {0.0, 0.0, 0.0, 1.0};
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    cfg.grad_clip = 0.0; // keep the unit subgradient unclipped
    cfg.l2_variant = L2Variant::kNorm;

    AdaptationState st = init_adaptation_state(calib, cfg);
    st.bein.gamma_sigma[0] = 3.0;
    st.bein.gamma_mu[0] = 4.0;

    const LabeledSample x = corrupted_sample(77, 2);
    adapt_step(m, st, calib, cfg, x);
    // Subgradient of |.| is the sign, so one step moves each by lr.
    CHECK(st.bein.gamma_sigma[0] == doctest::Approx(2.9).epsilon(1e-12));
    CHECK(st.bein.gamma_mu[0] == doctest::Approx(3.9).epsilon(1e-12));

    double prev_s = std::fabs(st.bein.gamma_sigma[0]);
    double prev_m = std::fabs(st.bein.gamma_mu[0]);
    for (int i = 0; i < 20; ++i) {
        adapt_step(m, st, calib, cfg, x);
        const double cur_s = std::fabs(st.bein.gamma_sigma[0]);
        const double cur_m = std::fabs(st.bein.gamma_mu[0]);
        CHECK(cur_s < prev_s);
        CHECK(cur_m < prev_m);
        prev_s = cur_s;
        prev_m = cur_m;
    }
}

TEST_CASE("first step adopts the embedding average and sits the style term out") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    const AdapterConfig cfg;

    AdaptationState st = init_adaptation_state(calib, cfg);
    const LabeledSample x0 = corrupted_sample(91, 3);

    // Expected first embedding: the unadapted pooled block output under the
    // starting (zero-correction) layer.
    const EmbeddingVector e0 = forward_with_bein(m, st.bein, x0.input).e_unadapted;

    const AdaptOutcome first = adapt_step(m, st, calib, cfg, x0);
    CHECK(first.diag.style == 0.0);
    bool style_skipped = false;
    for (const auto& name : first.losses.skipped_terms) style_skipped |= name == "style";
    CHECK(style_skipped);

    REQUIRE(st.ema.has_value());
    REQUIRE(st.ema->size() == e0.size());
    for (size_t c = 0; c < e0.size(); ++c)
        CHECK((*st.ema)[c] == doctest::Approx(e0[c]).epsilon(1e-12));

    // From the second step on the style term participates.
    const AdaptOutcome second = adapt_step(m, st, calib, cfg, corrupted_sample(92, 1));
    bool style_skipped_again = false;
    for (const auto& name : second.losses.skipped_terms) style_skipped_again |= name == "style";
    CHECK_FALSE(style_skipped_again);
}

TEST_CASE("prediction uses the corrections from before the update") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    const AdapterConfig cfg;

    AdaptationState st = init_adaptation_state(calib, cfg);
    for (int i = 0; i < 3; ++i) adapt_step(m, st, calib, cfg, corrupted_sample(120 + i, i % 4, 2, 4));

    const LabeledSample x = corrupted_sample(130, 2, 2, 4);
    const BeINLayer snapshot = st.bein;
    const int want = argmax_class(forward_with_bein(m, snapshot, x.input).logits);

    const AdaptOutcome out = adapt_step(m, st, calib, cfg, x);
    CHECK(out.prediction == want);
    CHECK(out.diag.gamma_sigma == snapshot.gamma_sigma[0]);
    CHECK(out.diag.gamma_mu == snapshot.gamma_mu[0]);
    // The update itself did land.
    const bool moved = st.bein.gamma_sigma[0] != snapshot.gamma_sigma[0] ||
                       st.bein.gamma_mu[0] != snapshot.gamma_mu[0];
    CHECK(moved);
}

TEST_CASE("one step moves the corrections along the measured loss slope") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;
    cfg.momentum = 0.0; // makes the move exactly -lr * gradient
    cfg.grad_clip = 0.0;

    AdaptationState st = init_adaptation_state(calib, cfg);
    adapt_step(m, st, calib, cfg, corrupted_sample(200, 0, 1, 2));

    // Total loss as a function of the corrections, with the EMA frozen at
    // its current value; replicates the step's own loss assembly.
    const LabeledSample x = corrupted_sample(201, 3, 1, 2);
    const EmbeddingVector ema = *st.ema;
    const auto loss_at = [&](double gs, double gm) {
        BeINLayer layer = st.bein;
        layer.gamma_sigma[0] = gs;
        layer.gamma_mu[0] = gm;
        const BeINForward fwd = forward_with_bein(m, layer, x.input);
        EmbeddingContext ctx;
        ctx.e_unadapted = fwd.e_unadapted;
        ctx.e_adapted = fwd.e_adapted;
        ctx.e_source_mean = calib.source_embedding_mean;
        ctx.e_ema = ema;
        const LossTerm style = style_loss_directional(ctx);
        const LossTerm content = content_loss(ctx);
        const LossTerm entropy = entropy_loss(fwd.logits, 1, m.head.classes);
        const L2Term l2 = l2_reg(layer.gamma_sigma, layer.gamma_mu, false);
        return cfg.weights.style * style.value + cfg.weights.content * content.value +
               cfg.weights.entropy * entropy.value + cfg.weights.l2 * l2.value;
    };

    const double gs0 = st.bein.gamma_sigma[0];
    const double gm0 = st.bein.gamma_mu[0];
    const double h = 1e-4;
    const double want_ds = central_diff([&](double v) { return loss_at(v, gm0); }, gs0, h);
    const double want_dm = central_diff([&](double v) { return loss_at(gs0, v); }, gm0, h);

    adapt_step(m, st, calib, cfg, x);
    const double got_ds = (gs0 - st.bein.gamma_sigma[0]) / cfg.lr;
    const double got_dm = (gm0 - st.bein.gamma_mu[0]) / cfg.lr;
    CHECK(rel_err(got_ds, want_ds) < 1e-3);
    CHECK(rel_err(got_dm, want_dm) < 1e-3);
}

TEST_CASE("a degenerate denominator skips the update but not the stream") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;

    const LabeledSample x = corrupted_sample(300, 1);
    // Steer the shared correction so channel 0's estimator denominator
    // cancels exactly: rho*anchor + (1-rho)*sample + gamma = 0.
    ForwardCache cache;
    model_forward(m, x.input, {}, &cache);
    const ChannelVector sx = channel_std(cache.blocks[m.insertion_index - 1].post, kStatEps);

    AdaptationState st = init_adaptation_state(calib, cfg);
    st.bein.gamma_sigma[0] = -(cfg.rho * calib.anchor_sigma[0] + (1.0 - cfg.rho) * sx[0]);
    st.buf_sigma[0] = 0.125; // sentinel: must survive untouched
    const AdaptationState before = st;

    // The fallback prediction comes from the zero-correction layer.
    BeINLayer zeroed = st.bein;
    zeroed.gamma_sigma[0] = 0.0;
    zeroed.gamma_mu[0] = 0.0;
    const int want = argmax_class(forward_with_bein(m, zeroed, x.input).logits);

    const AdaptOutcome out = adapt_step(m, st, calib, cfg, x);
    CHECK(out.diag.skipped);
    CHECK(out.diag.skip_reason == "degenerate_denominator");
    CHECK(out.prediction == want);
    CHECK(st.bein.gamma_sigma == before.bein.gamma_sigma);
    CHECK(st.bein.gamma_mu == before.bein.gamma_mu);
    CHECK(st.buf_sigma == before.buf_sigma);
    CHECK(st.buf_mu == before.buf_mu);
    CHECK(st.step_count == before.step_count + 1);
    // The embedding average still tracks the stream on skipped steps.
    CHECK(st.ema.has_value());
    CHECK_FALSE(before.ema.has_value());
}

TEST_CASE("mismatched insertion points are rejected") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    AdapterConfig cfg;
    cfg.insertion_index = m.insertion_index + 1;

    AdaptationState st = init_adaptation_state(calib, cfg);
    CHECK_THROWS_AS((void)adapt_step(m, st, calib, cfg, corrupted_sample(310, 0)), DimensionMismatch);
}

TEST_CASE("a four-domain ten-round schedule yields forty segments") {
    const ModelFixture& fx = fixture();
    const SourceCalibration calib = default_calibration();
    const AdapterConfig cfg;

    const StreamSchedule sched = continual_schedule(default_domains(), 10, 4, 3, 99);
    const auto holdout = make_source_dataset(17, 16, fx.source);
    const RunReport rep = run_stream(fx, calib, cfg, sched, &holdout);

    REQUIRE(rep.segments.size() == 40);
    REQUIRE(rep.round_mean.size() == 10);
    REQUIRE(rep.source_accuracy.size() == 10);
    CHECK(rep.diagnostics.size() == 160);
    CHECK(rep.stream_hash != 0);

    const auto domains = default_domains();
    for (size_t i = 0; i < rep.segments.size(); ++i) {
        const SegmentResult& seg = rep.segments[i];
        CHECK(seg.domain == domains[i % 4].name);
        CHECK(seg.round == static_cast<int>(i / 4) + 1);
        CHECK(seg.count == 4);
        CHECK(seg.accuracy == static_cast<double>(seg.correct) / seg.count);
    }

    // Round means must be recomputable from their segments.
    for (int r = 0; r < 10; ++r) {
        double sum = 0.0;
        for (int d = 0; d < 4; ++d) sum += rep.segments[r * 4 + d].accuracy;
        CHECK(rep.round_mean[r] == doctest::Approx(sum / 4.0).epsilon(1e-15));
    }

    // Diagnostics carry their segment assignment.
    for (const StepDiag& d : rep.diagnostics) {
        REQUIRE(d.segment_index >= 0);
        REQUIRE(d.segment_index < 40);
        CHECK(d.domain == rep.segments[d.segment_index].domain);
    }

    // Without a holdout no source curve is recorded.
    const RunReport bare = run_stream(fx, calib, cfg, sched, nullptr);
    CHECK(bare.source_accuracy.empty());
}

TEST_CASE("identical runs reproduce every number bitwise") {
    const ModelFixture& fx = fixture();
    const SourceCalibration calib = default_calibration();
    const AdapterConfig cfg;

    const StreamSchedule sched = continual_schedule(default_domains(), 3, 6, 4, 7);
    const auto holdout = make_source_dataset(17, 12, fx.source);

    const RunReport a = run_stream(fx, calib, cfg, sched, &holdout);
    const RunReport b = run_stream(fx, calib, cfg, sched, &holdout);

    REQUIRE(a.segments.size() == b.segments.size());
    for (size_t i = 0; i < a.segments.size(); ++i)
        CHECK(a.segments[i].correct == b.segments[i].correct);
    CHECK(a.round_mean == b.round_mean);
    CHECK(a.source_accuracy == b.source_accuracy);
    CHECK(a.stream_hash == b.stream_hash);
    CHECK(a.skipped_steps == b.skipped_steps);

    REQUIRE(a.diagnostics.size() == b.diagnostics.size());
    for (size_t i = 0; i < a.diagnostics.size(); ++i) {
        CHECK(a.diagnostics[i].gamma_sigma == b.diagnostics[i].gamma_sigma);
        CHECK(a.diagnostics[i].gamma_mu == b.diagnostics[i].gamma_mu);
        CHECK(a.diagnostics[i].total == b.diagnostics[i].total);
        CHECK(a.diagnostics[i].prediction == b.diagnostics[i].prediction);
    }
}

TEST_CASE("repeated identical input settles the corrections") {
    const ToyModel& m = fixture().model;
    const SourceCalibration calib = default_calibration();
    const AdapterConfig cfg;

    const LabeledSample x = corrupted_sample(400, 2, 0, 4);
    AdaptationState st = init_adaptation_state(calib, cfg);

    double delta = 1.0;
    int step = 0;
    for (; step < 500; ++step) {
        const double gs = st.bein.gamma_sigma[0];
        const double gm = st.bein.gamma_mu[0];
        adapt_step(m, st, calib, cfg, x);
        delta = std::fabs(st.bein.gamma_sigma[0] - gs) + std::fabs(st.bein.gamma_mu[0] - gm);
        if (delta < 1e-6) break;
    }
    INFO("converged after ", step, " steps, last delta ", delta);
    CHECK(delta < 1e-6);
    CHECK(step < 500);
}
