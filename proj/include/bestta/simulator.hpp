#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bestta/tensor.hpp"

namespace bestta {

/// Parameters of the procedural source classification task. Classes differ
/// in spatial pattern and in global amplitude, so both shape and statistics
/// carry label information.
struct SourceSpec {
    int channels = 3;
    int height = 16;
    int width = 16;
    int classes = 4;
    double texture_noise = 0.12; // per-pixel gaussian texture
    // Class-k amplitude = base + step*k, with per-sample jitter wide enough
    // that amplitude alone cannot separate neighbouring classes; the spatial
    // pattern carries the rest of the label information.
    double amplitude_base = 0.8;
    double amplitude_step = 0.1;

    void validate() const;
};

struct LabeledSample {
    FeatureMap input;
    int label = 0;
    std::string domain = "clean";
    int severity = 0; // 0 for uncorrupted samples
};

/// One clean sample of the requested class, deterministic in the seed.
LabeledSample make_sample(std::uint64_t seed, int label, const SourceSpec& spec);

/// Deterministic, class-balanced synthetic dataset. Labels are assigned
/// round-robin so any n divisible by the class count splits exactly evenly.
std::vector<LabeledSample> make_source_dataset(std::uint64_t seed, int n, const SourceSpec& spec);

/// One corruption family. Base parameters describe severity 1; the
/// per-severity accessors scale them so strength grows monotonically:
/// bias and noise linearly, contrast and warp geometrically.
struct DomainSpec {
    std::string name;
    double additive_bias = 0.0;
    double contrast_scale = 1.0; // must stay > 0
    double noise_std = 0.0;
    double gamma_warp = 1.0; // signed power exponent, must stay > 0

    double bias_at(int severity) const;
    double contrast_at(int severity) const;
    double noise_at(int severity) const;
    double warp_at(int severity) const;
    void validate() const;
};

/// x' = contrast * sign(x)|x|^warp + bias + gaussian(noise), parameters
/// looked up at the given severity. Label and shape are preserved.
LabeledSample apply_corruption(const LabeledSample& x, const DomainSpec& d, int severity,
                               std::uint64_t seed);

/// The four stock corruption families. Each stresses a different statistic:
/// variance shrink, mean shift, additive noise, contrast compression.
std::vector<DomainSpec> default_domains();

struct StreamSegment {
    int domain_index = 0; // into StreamSchedule::domains
    int severity = 1;
    int count = 0;
    int round = 1; // 1-based round for per-round aggregation
};

struct StreamSchedule {
    std::vector<DomainSpec> domains;
    std::vector<StreamSegment> segments;
    std::uint64_t seed = 0;

    int total_samples() const;
    void validate() const;
};

/// Round-robin over the domains, `rounds` times, at a fixed severity.
StreamSchedule continual_schedule(std::vector<DomainSpec> domains, int rounds,
                                  int samples_per_domain, int severity, std::uint64_t seed);

/// Per domain: severities 1,2,3,4,5,4,3,2,1, then the next domain. Each
/// domain's sweep counts as one round.
StreamSchedule gradual_schedule(std::vector<DomainSpec> domains, int samples_per_step,
                                std::uint64_t seed);

void save_schedule(const StreamSchedule& sched, const std::string& path);
StreamSchedule load_schedule(const std::string& path);

struct StreamItem {
    LabeledSample corrupted;
    LabeledSample clean; // uncorrupted twin, for clean-accuracy comparisons
    int segment_index = 0;
};

/// A schedule realized into concrete samples, with per-segment input-space
/// statistics (the ground truth the estimators are judged against) and a
/// content hash so comparison runs can assert they consumed the same bytes.
struct ExpandedStream {
    std::vector<StreamItem> items;
    std::vector<ChannelVector> segment_mean; // realized per-channel mean
    std::vector<ChannelVector> segment_std;  // realized per-channel std
    std::uint64_t content_hash = 0;
};

ExpandedStream expand_stream(const StreamSchedule& sched, const SourceSpec& spec);

} // namespace bestta
