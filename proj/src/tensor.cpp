#include "bestta/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "bestta/errors.hpp"

namespace bestta {

FeatureMap::FeatureMap(int c, int h, int w, double fill)
    : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, fill) {}

FeatureMap FeatureMap::from_values(int c, int h, int w, std::vector<double> values) {
    if (static_cast<size_t>(c) * h * w != values.size())
        throw InvalidShape("FeatureMap::from_values: element count does not match shape");
    FeatureMap m;
    m.channels = c;
    m.height = h;
    m.width = w;
    m.data = std::move(values);
    return m;
}

bool FeatureMap::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void FeatureMap::validate() const {
    if (channels < 1 || height < 1 || width < 1)
        throw InvalidShape("FeatureMap: all dimensions must be >= 1");
    if (data.size() != static_cast<size_t>(size()))
        throw InvalidShape("FeatureMap: data size does not match shape");
    if (!all_finite()) throw InvalidShape("FeatureMap: non-finite element");
}

ChannelVector channel_mean(const FeatureMap& x) {
    ChannelVector out(x.channels);
    const double inv = 1.0 / x.plane();
    for (int c = 0; c < x.channels; ++c) {
        double s = 0.0;
        for (double v : x.channel(c)) s += v;
        out[c] = s * inv;
    }
    return out;
}

ChannelVector channel_std(const FeatureMap& x, double eps) {
    const ChannelVector mu = channel_mean(x);
    ChannelVector out(x.channels);
    const double inv = 1.0 / x.plane();
    for (int c = 0; c < x.channels; ++c) {
        double s = 0.0;
        for (double v : x.channel(c)) {
            const double d = v - mu[c];
            s += d * d;
        }
        out[c] = std::max(std::sqrt(s * inv), eps);
    }
    return out;
}

EmbeddingVector global_average_pool(const FeatureMap& x) { return channel_mean(x); }

CosineResult cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size())
        throw DimensionMismatch("cosine_similarity: vectors differ in length");
    CosineResult r;
    const double na = vec_norm(a);
    const double nb = vec_norm(b);
    if (na <= kVecEps || nb <= kVecEps) {
        r.degenerate = true;
        return r;
    }
    const double d = vec_dot(a, b);
    r.value = d / (na * nb);
    r.grad_a.resize(a.size());
    // d cos / d a = b/(|a||b|) - cos * a/|a|^2
    const double s1 = 1.0 / (na * nb);
    const double s2 = r.value / (na * na);
    for (size_t i = 0; i < a.size(); ++i) r.grad_a[i] = b[i] * s1 - a[i] * s2;
    return r;
}

EmbeddingVector ema_update(const std::optional<EmbeddingVector>& a, const EmbeddingVector& e, double m) {
    if (!a) return e;
    if (a->size() != e.size()) throw DimensionMismatch("ema_update: vectors differ in length");
    EmbeddingVector out(e.size());
    for (size_t i = 0; i < e.size(); ++i) out[i] = m * (*a)[i] + (1.0 - m) * e[i];
    return out;
}

double vec_dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double vec_norm(std::span<const double> a) { return std::sqrt(vec_dot(a, a)); }

std::vector<double> vec_sub(std::span<const double> a, std::span<const double> b) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

} // namespace bestta
