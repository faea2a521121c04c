#pragma once

#include <optional>
#include <span>
#include <vector>

namespace bestta {

/// One value per channel (sample means, stds, norm parameters, ...).
using ChannelVector = std::vector<double>;

/// Spatially pooled feature descriptor; same layout as a ChannelVector but
/// used where a whole feature map has been reduced to one vector.
using EmbeddingVector = std::vector<double>;

// Norm threshold below which a direction is treated as degenerate.
inline constexpr double kVecEps = 1e-12;

/// Dense C x H x W activation array, row-major, 64-bit floats.
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(int c, int h, int w, double fill = 0.0);
    static FeatureMap from_values(int c, int h, int w, std::vector<double> values);

    int plane() const { return height * width; }
    int size() const { return channels * height * width; }

    double& at(int c, int y, int x) { return data[(c * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(c * height + y) * width + x]; }

    std::span<double> channel(int c) { return {data.data() + c * plane(), static_cast<size_t>(plane())}; }
    std::span<const double> channel(int c) const {
        return {data.data() + c * plane(), static_cast<size_t>(plane())};
    }

    bool same_shape(const FeatureMap& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool all_finite() const;

    // Throws InvalidShape unless C,H,W >= 1 and every element is finite.
    void validate() const;
};

/// Arithmetic mean over the H*W elements of each channel.
ChannelVector channel_mean(const FeatureMap& x);

/// Population (divide-by-N) standard deviation per channel, clamped from
/// below by eps so near-constant channels never divide to infinity.
ChannelVector channel_std(const FeatureMap& x, double eps);

/// channel_mean retyped as an embedding: the resolution-independent
/// descriptor all cosine losses operate on.
EmbeddingVector global_average_pool(const FeatureMap& x);

/// Cosine similarity plus the analytic gradient with respect to the first
/// argument. When either vector has norm <= kVecEps the direction carries no
/// information: `degenerate` is set and value/grad are zeroed so callers can
/// drop the term deterministically.
struct CosineResult {
    double value = 0.0;
    std::vector<double> grad_a;
    bool degenerate = false;
};
CosineResult cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

/// m*a + (1-m)*e; an uninitialized accumulator adopts e directly.
EmbeddingVector ema_update(const std::optional<EmbeddingVector>& a, const EmbeddingVector& e, double m);

// Small vector helpers shared by the loss and adapter code.
double vec_dot(std::span<const double> a, std::span<const double> b);
double vec_norm(std::span<const double> a);
std::vector<double> vec_sub(std::span<const double> a, std::span<const double> b);

} // namespace bestta
