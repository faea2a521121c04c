#include "bestta/simulator.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "bestta/errors.hpp"
#include "bestta/rng.hpp"

namespace bestta {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// Fixed per-channel mixing so channels carry the shared pattern at
// different gains and offsets.
constexpr double kChannelGain[3] = {1.0, 0.8, 0.65};
constexpr double kChannelBias[3] = {0.10, 0.0, -0.10};

// Class identity is carried by pattern shape (orientation, sparsity,
// frequency) rather than by magnitude, so a per-sample scale nuisance cannot
// erase it: 0/1 are orthogonal stripes, 2 is a sparse blob field, 3 is a
// dense high-frequency checker.
double class_pattern(int label, double u, double v, double phase_a, double phase_b) {
    switch (label % 4) {
        case 0: return std::sin(kTau * (u + phase_a));
        case 1: return std::sin(kTau * (v + phase_a));
        case 2: {
            double p = 0.0;
            for (int j = 0; j < 3; ++j) {
                const double cx = 0.15 + 0.7 * std::fmod(phase_a + 0.37 * j, 1.0);
                const double cy = 0.15 + 0.7 * std::fmod(phase_b + 0.41 * j, 1.0);
                const double d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                p += std::exp(-d2 / (2.0 * 0.08 * 0.08));
            }
            return p - 0.12; // rough zero-centering; RMS normalization follows
        }
        default: return std::sin(kTau * (2.0 * u + phase_a)) * std::sin(kTau * (2.0 * v + phase_b));
    }
}

double signed_pow(double x, double p) { return x < 0.0 ? -std::pow(-x, p) : std::pow(x, p); }

std::uint64_t fnv1a_init() { return 1469598103934665603ull; }

void fnv1a_mix(std::uint64_t& h, const void* bytes, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
}

} // namespace

void SourceSpec::validate() const {
    if (channels < 1 || channels > 3 || height < 2 || width < 2 || classes < 2)
        throw InvalidShape("SourceSpec: need 1..3 channels, >=2x2 maps, >=2 classes");
    if (texture_noise < 0.0 || amplitude_base <= 0.0)
        throw InvalidShape("SourceSpec: texture_noise >= 0 and amplitude_base > 0 required");
}

LabeledSample make_sample(std::uint64_t seed, int label, const SourceSpec& spec) {
    spec.validate();
    if (label < 0 || label >= spec.classes)
        throw InvalidShape("make_sample: label outside class range");
    Rng rng(seed);
    const double amp = spec.amplitude_base + spec.amplitude_step * label;
    // Wide per-sample gain: a nuisance dimension every method must cope with,
    // and the reason single-image statistics are unreliable here.
    const double jitter = rng.uniform(0.7, 1.4);
    const double phase_a = rng.uniform();
    const double phase_b = rng.uniform();

    // Build the pattern once and normalize it to unit RMS so the class
    // amplitude is a clean global cue regardless of pattern shape.
    std::vector<double> pattern(static_cast<size_t>(spec.height) * spec.width);
    double rms = 0.0;
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const double u = (x + 0.5) / spec.width;
            const double v = (y + 0.5) / spec.height;
            const double p = class_pattern(label, u, v, phase_a, phase_b);
            pattern[static_cast<size_t>(y) * spec.width + x] = p;
            rms += p * p;
        }
    }
    rms = std::sqrt(rms / pattern.size());
    if (rms < 1e-6) rms = 1e-6;

    LabeledSample s;
    s.label = label;
    s.input = FeatureMap(spec.channels, spec.height, spec.width);
    for (int c = 0; c < spec.channels; ++c) {
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                const double p = pattern[static_cast<size_t>(y) * spec.width + x] / rms;
                s.input.at(c, y, x) = amp * jitter * p * kChannelGain[c] + kChannelBias[c] +
                                      spec.texture_noise * rng.normal();
            }
        }
    }
    return s;
}

std::vector<LabeledSample> make_source_dataset(std::uint64_t seed, int n, const SourceSpec& spec) {
    spec.validate();
    if (n < 1) throw EmptyDataset("make_source_dataset: n must be >= 1");
    std::vector<LabeledSample> out;
    out.reserve(n);
    // Per-sample seeds so datasets of different sizes share a prefix.
    for (int i = 0; i < n; ++i)
        out.push_back(make_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), i % spec.classes, spec));
    return out;
}

namespace {

void check_severity(int severity) {
    if (severity < 1 || severity > 5)
        throw InvalidSeverity("severity must lie in 1..5");
}

} // namespace

double DomainSpec::bias_at(int severity) const {
    check_severity(severity);
    return additive_bias * severity;
}

double DomainSpec::contrast_at(int severity) const {
    check_severity(severity);
    return std::pow(contrast_scale, severity);
}

double DomainSpec::noise_at(int severity) const {
    check_severity(severity);
    return noise_std * severity;
}

double DomainSpec::warp_at(int severity) const {
    check_severity(severity);
    return std::pow(gamma_warp, severity);
}

void DomainSpec::validate() const {
    if (name.empty()) throw InvalidShape("DomainSpec: name required");
    if (!(contrast_scale > 0.0) || !(gamma_warp > 0.0) || noise_std < 0.0)
        throw InvalidShape("DomainSpec: contrast_scale and gamma_warp must be > 0, noise_std >= 0");
    for (double v : {additive_bias, contrast_scale, noise_std, gamma_warp})
        if (!std::isfinite(v)) throw InvalidShape("DomainSpec: parameters must be finite");
}

LabeledSample apply_corruption(const LabeledSample& x, const DomainSpec& d, int severity,
                               std::uint64_t seed) {
    d.validate();
    const double bias = d.bias_at(severity);
    const double contrast = d.contrast_at(severity);
    const double noise = d.noise_at(severity);
    const double warp = d.warp_at(severity);

    Rng rng(seed);
    LabeledSample out = x;
    out.domain = d.name;
    out.severity = severity;
    for (double& v : out.input.data)
        v = contrast * signed_pow(v, warp) + bias + (noise > 0.0 ? noise * rng.normal() : 0.0);
    return out;
}

std::vector<DomainSpec> default_domains() {
    // Two opposite-signed pairs: blurish compresses variance while noisy adds
    // it, dark shifts the mean down while bright pushes it up. Paired signs
    // mean no single fixed correction helps all four at once; an adapter has
    // to track the active domain to win. The bright shift is smaller than the
    // dark one because positive shifts survive the ReLUs (activating noise
    // evidence everywhere) where negative shifts merely sparsify.
    return {
        DomainSpec{"blurish", 0.0, 0.90, 0.0, 1.0},
        DomainSpec{"dark", -0.30, 1.0, 0.0, 1.0},
        DomainSpec{"noisy", 0.0, 1.0, 0.30, 1.0},
        DomainSpec{"bright", 0.22, 1.0, 0.0, 1.0},
    };
}

int StreamSchedule::total_samples() const {
    int total = 0;
    for (const StreamSegment& s : segments) total += s.count;
    return total;
}

void StreamSchedule::validate() const {
    if (domains.empty() || segments.empty())
        throw InvalidShape("StreamSchedule: needs domains and segments");
    for (const DomainSpec& d : domains) d.validate();
    for (const StreamSegment& s : segments) {
        if (s.domain_index < 0 || s.domain_index >= static_cast<int>(domains.size()))
            throw InvalidShape("StreamSchedule: segment references missing domain");
        check_severity(s.severity);
        if (s.count < 1 || s.round < 1)
            throw InvalidShape("StreamSchedule: segment count and round must be >= 1");
    }
}

StreamSchedule continual_schedule(std::vector<DomainSpec> domains, int rounds,
                                  int samples_per_domain, int severity, std::uint64_t seed) {
    if (domains.empty() || rounds < 1 || samples_per_domain < 1)
        throw InvalidShape("continual_schedule: empty domains or non-positive sizes");
    check_severity(severity);
    StreamSchedule sched;
    sched.domains = std::move(domains);
    sched.seed = seed;
    for (int r = 1; r <= rounds; ++r)
        for (int d = 0; d < static_cast<int>(sched.domains.size()); ++d)
            sched.segments.push_back({d, severity, samples_per_domain, r});
    return sched;
}

StreamSchedule gradual_schedule(std::vector<DomainSpec> domains, int samples_per_step,
                                std::uint64_t seed) {
    if (domains.empty() || samples_per_step < 1)
        throw InvalidShape("gradual_schedule: empty domains or non-positive step size");
    StreamSchedule sched;
    sched.domains = std::move(domains);
    sched.seed = seed;
    static constexpr int kSweep[9] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
    for (int d = 0; d < static_cast<int>(sched.domains.size()); ++d)
        for (int s : kSweep) sched.segments.push_back({d, s, samples_per_step, d + 1});
    return sched;
}

namespace {

using nlohmann::json;

json domain_to_json(const DomainSpec& d) {
    return json{{"name", d.name},
                {"additive_bias", d.additive_bias},
                {"contrast_scale", d.contrast_scale},
                {"noise_std", d.noise_std},
                {"gamma_warp", d.gamma_warp}};
}

DomainSpec domain_from_json(const json& j) {
    DomainSpec d;
    d.name = j.at("name").get<std::string>();
    d.additive_bias = j.at("additive_bias").get<double>();
    d.contrast_scale = j.at("contrast_scale").get<double>();
    d.noise_std = j.at("noise_std").get<double>();
    d.gamma_warp = j.at("gamma_warp").get<double>();
    return d;
}

} // namespace

void save_schedule(const StreamSchedule& sched, const std::string& path) {
    sched.validate();
    json j;
    j["version"] = 1;
    j["seed"] = sched.seed;
    j["domains"] = json::array();
    for (const DomainSpec& d : sched.domains) j["domains"].push_back(domain_to_json(d));
    j["segments"] = json::array();
    for (const StreamSegment& s : sched.segments)
        j["segments"].push_back(json{{"domain_index", s.domain_index},
                                     {"severity", s.severity},
                                     {"count", s.count},
                                     {"round", s.round}});
    std::ofstream out(path);
    if (!out) throw IoFailure("save_schedule: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoFailure("save_schedule: write failed for " + path);
}

StreamSchedule load_schedule(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("load_schedule: cannot open " + path);
    json j = json::parse(in, nullptr, true);
    StreamSchedule sched;
    sched.seed = j.at("seed").get<std::uint64_t>();
    for (const json& dj : j.at("domains")) sched.domains.push_back(domain_from_json(dj));
    for (const json& sj : j.at("segments"))
        sched.segments.push_back({sj.at("domain_index").get<int>(), sj.at("severity").get<int>(),
                                  sj.at("count").get<int>(), sj.at("round").get<int>()});
    sched.validate();
    return sched;
}

ExpandedStream expand_stream(const StreamSchedule& sched, const SourceSpec& spec) {
    sched.validate();
    spec.validate();

    ExpandedStream stream;
    stream.items.reserve(sched.total_samples());
    std::uint64_t hash = fnv1a_init();

    // Sample identity is keyed to (domain, severity, position within the
    // segment), not to the stream-wide index: when a schedule revisits the
    // same condition in a later round it replays the same images, like the
    // fixed corruption sets the continual protocol cycles over. Cross-round
    // metric differences are then attributable to adaptation state alone.
    for (int seg = 0; seg < static_cast<int>(sched.segments.size()); ++seg) {
        const StreamSegment& s = sched.segments[seg];
        const DomainSpec& d = sched.domains[s.domain_index];

        ChannelVector sum(spec.channels, 0.0), sumsq(spec.channels, 0.0);
        const int plane = spec.height * spec.width;

        for (int i = 0; i < s.count; ++i) {
            const std::uint64_t key = (static_cast<std::uint64_t>(s.domain_index) << 40) ^
                                      (static_cast<std::uint64_t>(s.severity) << 32) ^
                                      static_cast<std::uint64_t>(i);
            StreamItem item;
            // Labels are balanced within every segment.
            item.clean = make_sample(mix_seed(sched.seed, key), i % spec.classes, spec);
            item.segment_index = seg;
            item.corrupted = apply_corruption(item.clean, d, s.severity,
                                              mix_seed(sched.seed ^ 0x9e37u, key));

            for (int c = 0; c < spec.channels; ++c) {
                for (double v : item.corrupted.input.channel(c)) {
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            fnv1a_mix(hash, item.corrupted.input.data.data(),
                      item.corrupted.input.data.size() * sizeof(double));
            const std::int32_t label32 = item.corrupted.label;
            fnv1a_mix(hash, &label32, sizeof(label32));
            stream.items.push_back(std::move(item));
        }

        ChannelVector mean(spec.channels), stddev(spec.channels);
        const double n = static_cast<double>(s.count) * plane;
        for (int c = 0; c < spec.channels; ++c) {
            mean[c] = sum[c] / n;
            const double var = std::max(0.0, sumsq[c] / n - mean[c] * mean[c]);
            stddev[c] = std::sqrt(var);
        }
        stream.segment_mean.push_back(std::move(mean));
        stream.segment_std.push_back(std::move(stddev));
    }
    stream.content_hash = hash;
    return stream;
}

} // namespace bestta
