#include "bestta/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "bestta/errors.hpp"
#include "bestta/rng.hpp"

namespace bestta {

namespace {

// Variance floor inside sqrt for trainable batch normalization; keeps the
// through-stats backward smooth, unlike the hard clamp used at inference.
constexpr double kBnVarEps = 1e-5;

int conv_out_extent(int in, int stride) { return (in - 1) / stride + 1; }

} // namespace

void ConvLayer::validate() const {
    if (in_ch < 1 || out_ch < 1 || (stride != 1 && stride != 2))
        throw InvalidShape("ConvLayer: bad channel counts or stride");
    if (weight.size() != static_cast<size_t>(out_ch) * in_ch * 9 ||
        bias.size() != static_cast<size_t>(out_ch))
        throw InvalidShape("ConvLayer: parameter buffer sizes do not match shape");
}

void LinearHead::validate() const {
    if (in_dim < 1 || classes < 2) throw InvalidShape("LinearHead: bad dimensions");
    if (weight.size() != static_cast<size_t>(classes) * in_dim ||
        bias.size() != static_cast<size_t>(classes))
        throw InvalidShape("LinearHead: parameter buffer sizes do not match shape");
}

void ToyModel::validate() const {
    if (blocks.empty()) throw InvalidShape("ToyModel: no blocks");
    if (insertion_index < 1 || insertion_index > static_cast<int>(blocks.size()))
        throw InvalidShape("ToyModel: insertion_index out of range");
    int ch = in_channels;
    for (const Block& b : blocks) {
        b.conv.validate();
        if (b.conv.in_ch != ch) throw InvalidShape("ToyModel: block channel chain broken");
        b.bn.validate();
        if (b.bn.channels() != b.conv.out_ch)
            throw InvalidShape("ToyModel: BN width does not match its conv");
        ch = b.conv.out_ch;
    }
    head.validate();
    if (head.in_dim != ch) throw InvalidShape("ToyModel: head width does not match final block");
}

FeatureMap conv_forward(const FeatureMap& x, const ConvLayer& conv) {
    if (x.channels != conv.in_ch) throw DimensionMismatch("conv_forward: channel mismatch");
    const int oh = conv_out_extent(x.height, conv.stride);
    const int ow = conv_out_extent(x.width, conv.stride);
    FeatureMap out(conv.out_ch, oh, ow);
    for (int o = 0; o < conv.out_ch; ++o) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = conv.bias[o];
                for (int i = 0; i < conv.in_ch; ++i) {
                    const double* w = conv.weight.data() + ((static_cast<size_t>(o) * conv.in_ch) + i) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int y = oy * conv.stride + ky - 1;
                        if (y < 0 || y >= x.height) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = ox * conv.stride + kx - 1;
                            if (xx < 0 || xx >= x.width) continue;
                            acc += w[ky * 3 + kx] * x.at(i, y, xx);
                        }
                    }
                }
                out.at(o, oy, ox) = acc;
            }
        }
    }
    return out;
}

FeatureMap conv_backward_input(const FeatureMap& dout, const ConvLayer& conv, int in_h, int in_w) {
    if (dout.channels != conv.out_ch) throw DimensionMismatch("conv_backward_input: channel mismatch");
    FeatureMap dx(conv.in_ch, in_h, in_w);
    for (int o = 0; o < conv.out_ch; ++o) {
        for (int oy = 0; oy < dout.height; ++oy) {
            for (int ox = 0; ox < dout.width; ++ox) {
                const double g = dout.at(o, oy, ox);
                if (g == 0.0) continue;
                for (int i = 0; i < conv.in_ch; ++i) {
                    const double* w = conv.weight.data() + ((static_cast<size_t>(o) * conv.in_ch) + i) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int y = oy * conv.stride + ky - 1;
                        if (y < 0 || y >= in_h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = ox * conv.stride + kx - 1;
                            if (xx < 0 || xx >= in_w) continue;
                            dx.at(i, y, xx) += w[ky * 3 + kx] * g;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

void conv_backward_params(const FeatureMap& x, const FeatureMap& dout, const ConvLayer& conv,
                          std::vector<double>& wgrad, std::vector<double>& bgrad) {
    if (wgrad.size() != conv.weight.size() || bgrad.size() != conv.bias.size())
        throw DimensionMismatch("conv_backward_params: gradient buffer sizes");
    for (int o = 0; o < conv.out_ch; ++o) {
        for (int oy = 0; oy < dout.height; ++oy) {
            for (int ox = 0; ox < dout.width; ++ox) {
                const double g = dout.at(o, oy, ox);
                if (g == 0.0) continue;
                bgrad[o] += g;
                for (int i = 0; i < conv.in_ch; ++i) {
                    double* w = wgrad.data() + ((static_cast<size_t>(o) * conv.in_ch) + i) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int y = oy * conv.stride + ky - 1;
                        if (y < 0 || y >= x.height) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = ox * conv.stride + kx - 1;
                            if (xx < 0 || xx >= x.width) continue;
                            w[ky * 3 + kx] += g * x.at(i, y, xx);
                        }
                    }
                }
            }
        }
    }
}

namespace {

// One block forward shared by every inference path.
BlockCache block_forward(const Block& block, const FeatureMap& in, BnMode mode,
                         const ChannelVector* alpha, const ChannelVector* beta) {
    BlockCache cache;
    cache.in_h = in.height;
    cache.in_w = in.width;
    cache.conv_in = in;
    FeatureMap z = conv_forward(in, block.conv);

    const int c_out = block.conv.out_ch;
    cache.sigma_clamped.assign(c_out, false);
    if (mode == BnMode::kFrozen) {
        cache.bn_mu = block.bn.mu_s;
        cache.bn_sigma = block.bn.sigma_s;
    } else {
        cache.bn_mu = channel_mean(z);
        cache.bn_sigma.resize(c_out);
        const ChannelVector raw = channel_std(z, 0.0);
        for (int c = 0; c < c_out; ++c) {
            cache.sigma_clamped[c] = raw[c] < kStatEps;
            cache.bn_sigma[c] = std::max(raw[c], kStatEps);
        }
    }

    const ChannelVector& a = alpha ? *alpha : block.bn.alpha;
    const ChannelVector& b = beta ? *beta : block.bn.beta;
    cache.normalized = FeatureMap(c_out, z.height, z.width);
    cache.post = FeatureMap(c_out, z.height, z.width);
    for (int c = 0; c < c_out; ++c) {
        auto zc = z.channel(c);
        auto nc = cache.normalized.channel(c);
        auto pc = cache.post.channel(c);
        for (size_t i = 0; i < zc.size(); ++i) {
            nc[i] = (zc[i] - cache.bn_mu[c]) / cache.bn_sigma[c];
            pc[i] = std::max(0.0, a[c] * nc[i] + b[c]);
        }
    }
    return cache;
}

std::vector<double> head_forward(const LinearHead& head, const EmbeddingVector& pooled) {
    std::vector<double> logits(head.classes);
    for (int k = 0; k < head.classes; ++k) {
        double acc = head.bias[k];
        const double* w = head.weight.data() + static_cast<size_t>(k) * head.in_dim;
        for (int j = 0; j < head.in_dim; ++j) acc += w[j] * pooled[j];
        logits[k] = acc;
    }
    return logits;
}

// d(loss)/d(final feature map) from d(loss)/d(logits): head transpose, then
// the pooled gradient spread uniformly over each channel plane.
FeatureMap head_backward_to_map(const LinearHead& head, const std::vector<double>& dlogits,
                                int h, int w) {
    std::vector<double> d_pooled(head.in_dim, 0.0);
    for (int k = 0; k < head.classes; ++k) {
        const double* wrow = head.weight.data() + static_cast<size_t>(k) * head.in_dim;
        for (int j = 0; j < head.in_dim; ++j) d_pooled[j] += dlogits[k] * wrow[j];
    }
    FeatureMap g(head.in_dim, h, w);
    const double inv_plane = 1.0 / (h * w);
    for (int c = 0; c < head.in_dim; ++c) {
        auto gc = g.channel(c);
        for (size_t i = 0; i < gc.size(); ++i) gc[i] = d_pooled[c] * inv_plane;
    }
    return g;
}

void relu_backward_inplace(FeatureMap& g, const FeatureMap& post) {
    for (int i = 0; i < g.size(); ++i)
        if (post.data[i] <= 0.0) g.data[i] = 0.0;
}

// Through-stats backward of instance normalization for one channel:
// dz_j = (1/(N*sigma)) * (N*g_j - S0 - nrm_j*S1) with g already scaled by
// the affine alpha. A clamped sigma is a constant, leaving only the mean
// dependence.
void instance_bn_backward_channel(std::span<double> g, std::span<const double> nrm, double sigma,
                                  bool clamped) {
    const double n = static_cast<double>(g.size());
    double s0 = 0.0, s1 = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        s0 += g[i];
        s1 += g[i] * nrm[i];
    }
    if (clamped) s1 = 0.0;
    for (size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - s0 / n - nrm[i] * s1 / n) / sigma;
}

} // namespace

std::vector<double> model_forward(const ToyModel& m, const FeatureMap& x, const ForwardOptions& opt,
                                  ForwardCache* cache) {
    if (x.channels != m.in_channels || x.height != m.in_height || x.width != m.in_width)
        throw DimensionMismatch("model_forward: input shape mismatch");
    if (cache) cache->blocks.clear();

    FeatureMap current = x;
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        const ChannelVector* a = opt.alpha_override ? &(*opt.alpha_override)[b] : nullptr;
        const ChannelVector* be = opt.beta_override ? &(*opt.beta_override)[b] : nullptr;
        BlockCache bc = block_forward(m.blocks[b], current, opt.bn_mode, a, be);
        current = bc.post;
        if (cache) cache->blocks.push_back(std::move(bc));
    }
    const EmbeddingVector pooled = global_average_pool(current);
    std::vector<double> logits = head_forward(m.head, pooled);
    if (cache) {
        cache->pooled = pooled;
        cache->logits = logits;
    }
    return logits;
}

int argmax_class(const std::vector<double>& logits) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

BeINForward forward_with_bein(const ToyModel& m, const BeINLayer& bein, const FeatureMap& x) {
    m.validate();
    BeINForward fwd;

    FeatureMap current = x;
    for (int b = 0; b < m.insertion_index; ++b)
        current = block_forward(m.blocks[b], current, BnMode::kFrozen, nullptr, nullptr).post;

    fwd.e_unadapted = global_average_pool(current);
    auto [bein_out, bein_cache] = bein_forward(current, bein);
    fwd.bein_out = bein_out;
    fwd.bein_cache = std::move(bein_cache);
    fwd.e_adapted = global_average_pool(fwd.bein_out);

    current = fwd.bein_out;
    for (size_t b = m.insertion_index; b < m.blocks.size(); ++b) {
        BlockCache bc = block_forward(m.blocks[b], current, BnMode::kFrozen, nullptr, nullptr);
        current = bc.post;
        fwd.post_blocks.push_back(std::move(bc));
    }
    fwd.logits = head_forward(m.head, global_average_pool(current));
    return fwd;
}

FeatureMap entropy_input_gradient(const ToyModel& m, const BeINForward& fwd,
                                  const std::vector<double>& dlogits) {
    if (dlogits.size() != static_cast<size_t>(m.head.classes))
        throw StaleCache("entropy_input_gradient: logits gradient width mismatch");
    if (fwd.post_blocks.size() != m.blocks.size() - static_cast<size_t>(m.insertion_index))
        throw StaleCache("entropy_input_gradient: cache does not match the model's insertion point");

    const FeatureMap& last =
        fwd.post_blocks.empty() ? fwd.bein_out : fwd.post_blocks.back().post;
    FeatureMap g = head_backward_to_map(m.head, dlogits, last.height, last.width);

    for (int b = static_cast<int>(fwd.post_blocks.size()) - 1; b >= 0; --b) {
        const BlockCache& bc = fwd.post_blocks[b];
        const Block& block = m.blocks[m.insertion_index + b];
        relu_backward_inplace(g, bc.post);
        // Frozen statistics: the normalization is a fixed affine map.
        for (int c = 0; c < block.conv.out_ch; ++c) {
            const double scale = block.bn.alpha[c] / bc.bn_sigma[c];
            for (double& v : g.channel(c)) v *= scale;
        }
        g = conv_backward_input(g, block.conv, bc.in_h, bc.in_w);
    }
    return g;
}

TentGrads tent_backward(const ToyModel& m, const ForwardCache& cache,
                        const std::vector<double>& dlogits,
                        const std::vector<ChannelVector>& alpha) {
    if (cache.blocks.size() != m.blocks.size() || alpha.size() != m.blocks.size())
        throw StaleCache("tent_backward: cache/affine layout does not match the model");
    if (dlogits.size() != static_cast<size_t>(m.head.classes))
        throw StaleCache("tent_backward: logits gradient width mismatch");

    TentGrads grads;
    grads.d_alpha.resize(m.blocks.size());
    grads.d_beta.resize(m.blocks.size());

    const FeatureMap& last = cache.blocks.back().post;
    FeatureMap g = head_backward_to_map(m.head, dlogits, last.height, last.width);

    for (int b = static_cast<int>(m.blocks.size()) - 1; b >= 0; --b) {
        const BlockCache& bc = cache.blocks[b];
        const Block& block = m.blocks[b];
        relu_backward_inplace(g, bc.post);

        const int c_out = block.conv.out_ch;
        grads.d_alpha[b].assign(c_out, 0.0);
        grads.d_beta[b].assign(c_out, 0.0);
        for (int c = 0; c < c_out; ++c) {
            auto gc = g.channel(c);
            auto nc = bc.normalized.channel(c);
            double da = 0.0, db = 0.0;
            for (size_t i = 0; i < gc.size(); ++i) {
                da += gc[i] * nc[i];
                db += gc[i];
            }
            grads.d_alpha[b][c] = da;
            grads.d_beta[b][c] = db;
            for (size_t i = 0; i < gc.size(); ++i) gc[i] *= alpha[b][c];
            instance_bn_backward_channel(gc, nc, bc.bn_sigma[c], bc.sigma_clamped[c]);
        }
        if (b > 0) g = conv_backward_input(g, block.conv, bc.in_h, bc.in_w);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Pretraining: batched BN over B*H*W, full backward, SGD with momentum.

namespace {

struct ParamTensor {
    std::vector<double>* value = nullptr;
    std::vector<double> grad;
    std::vector<double> buf;
};

struct Trainer {
    ToyModel* model;
    std::vector<ParamTensor> params;
    // per-block running statistics (mean, population variance)
    std::vector<ChannelVector> running_mean;
    std::vector<ChannelVector> running_var;

    void attach(std::vector<double>& v) {
        params.push_back({&v, std::vector<double>(v.size(), 0.0), std::vector<double>(v.size(), 0.0)});
    }
    void zero_grads() {
        for (ParamTensor& p : params) std::fill(p.grad.begin(), p.grad.end(), 0.0);
    }
    void step(double lr, double momentum) {
        for (ParamTensor& p : params) {
            for (size_t i = 0; i < p.grad.size(); ++i) {
                p.buf[i] = momentum * p.buf[i] + p.grad[i];
                (*p.value)[i] -= lr * p.buf[i];
            }
        }
    }
};

// Per-sample, per-block intermediates of a batched forward pass. sigma_used
// holds the normalizing std per sample: shared batch statistics normally,
// per-sample statistics on instance-stat batches.
struct BatchBlockCache {
    std::vector<FeatureMap> conv_in;
    std::vector<FeatureMap> normalized;
    std::vector<FeatureMap> post;
    std::vector<ChannelVector> sigma_used;
    bool instance = false;
};

ToyModel build_architecture(const SourceSpec& spec, std::uint64_t seed) {
    // Four blocks mirroring a four-stage backbone; widths and strides keep
    // the final map at 4x4 for a 16x16 input.
    const int widths[4] = {8, 12, 16, 16};
    const int strides[4] = {1, 2, 1, 2};

    ToyModel m;
    m.in_channels = spec.channels;
    m.in_height = spec.height;
    m.in_width = spec.width;
    m.insertion_index = 3;

    Rng rng(mix_seed(seed, 0x1717));
    int ch = spec.channels;
    for (int b = 0; b < 4; ++b) {
        Block block;
        block.conv.in_ch = ch;
        block.conv.out_ch = widths[b];
        block.conv.stride = strides[b];
        block.conv.weight.resize(static_cast<size_t>(widths[b]) * ch * 9);
        const double std_w = std::sqrt(2.0 / (ch * 9.0));
        for (double& w : block.conv.weight) w = std_w * rng.normal();
        block.conv.bias.assign(widths[b], 0.0);
        block.bn.alpha.assign(widths[b], 1.0);
        block.bn.beta.assign(widths[b], 0.0);
        block.bn.mu_s.assign(widths[b], 0.0);
        block.bn.sigma_s.assign(widths[b], 1.0);
        m.blocks.push_back(std::move(block));
        ch = widths[b];
    }
    m.head.in_dim = ch;
    m.head.classes = spec.classes;
    m.head.weight.resize(static_cast<size_t>(spec.classes) * ch);
    const double std_h = std::sqrt(1.0 / ch);
    for (double& w : m.head.weight) w = std_h * rng.normal();
    m.head.bias.assign(spec.classes, 0.0);
    return m;
}

double evaluate_frozen(const ToyModel& m, const std::vector<LabeledSample>& data) {
    int correct = 0;
    for (const LabeledSample& s : data)
        if (argmax_class(model_forward(m, s.input, {})) == s.label) ++correct;
    return static_cast<double>(correct) / data.size();
}

} // namespace

ModelFixture pretrain(const SourceSpec& spec, std::uint64_t seed, const PretrainOptions& opt) {
    spec.validate();
    ModelFixture fixture;
    fixture.seed = seed;
    fixture.source = spec;
    fixture.model = build_architecture(spec, seed);
    ToyModel& m = fixture.model;

    const auto all = make_source_dataset(mix_seed(seed, 0xDA7A), opt.train_n + opt.holdout_n, spec);
    std::vector<LabeledSample> train(all.begin(), all.begin() + opt.train_n);
    std::vector<LabeledSample> holdout(all.begin() + opt.train_n, all.end());

    Trainer tr;
    tr.model = &m;
    for (Block& b : m.blocks) {
        tr.attach(b.conv.weight);
        tr.attach(b.conv.bias);
        tr.attach(b.bn.alpha);
        tr.attach(b.bn.beta);
        tr.running_mean.emplace_back(b.conv.out_ch, 0.0);
        tr.running_var.emplace_back(b.conv.out_ch, 1.0);
    }
    tr.attach(m.head.weight);
    tr.attach(m.head.bias);

    auto freeze_stats = [&] {
        for (size_t b = 0; b < m.blocks.size(); ++b) {
            m.blocks[b].bn.mu_s = tr.running_mean[b];
            for (int c = 0; c < m.blocks[b].conv.out_ch; ++c)
                m.blocks[b].bn.sigma_s[c] = std::sqrt(tr.running_var[b][c] + kBnVarEps);
        }
    };

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    double holdout_acc = 0.0;
    Rng mode_rng(mix_seed(seed, 0x10DE));
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(seed, 0x5efful + static_cast<std::uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        for (size_t start = 0; start < order.size(); start += opt.batch) {
            const int bsz = static_cast<int>(std::min<size_t>(opt.batch, order.size() - start));
            tr.zero_grads();

            // Forward, block by block across the whole batch so joint
            // statistics exist before the affine is applied.
            std::vector<BatchBlockCache> caches(m.blocks.size());
            std::vector<FeatureMap> current(bsz);
            for (int i = 0; i < bsz; ++i) current[i] = train[order[start + i]].input;

            const bool instance_batch = mode_rng.uniform() < opt.instance_stat_prob;
            const bool jitter_batch = mode_rng.uniform() < opt.insert_jitter_prob;
            const double jit_shift = mode_rng.uniform(-opt.insert_jitter_shift, opt.insert_jitter_shift);
            const double jit_scale =
                std::exp(mode_rng.uniform(-opt.insert_jitter_logscale, opt.insert_jitter_logscale));
            const size_t jitter_block = static_cast<size_t>(m.insertion_index) - 1;

            for (size_t b = 0; b < m.blocks.size(); ++b) {
                BatchBlockCache& bc = caches[b];
                bc.conv_in = current;
                bc.instance = instance_batch;
                std::vector<FeatureMap> z(bsz);
                for (int i = 0; i < bsz; ++i) z[i] = conv_forward(current[i], m.blocks[b].conv);

                const int c_out = m.blocks[b].conv.out_ch;
                const double n = static_cast<double>(bsz) * z[0].plane();

                // Batch statistics always feed the running stats, whichever
                // statistics this batch normalizes with.
                ChannelVector batch_mu(c_out, 0.0), batch_sigma(c_out, 0.0);
                for (int c = 0; c < c_out; ++c) {
                    double sum = 0.0, sumsq = 0.0;
                    for (int i = 0; i < bsz; ++i)
                        for (double v : z[i].channel(c)) {
                            sum += v;
                            sumsq += v * v;
                        }
                    const double mean = sum / n;
                    const double var = std::max(0.0, sumsq / n - mean * mean);
                    batch_mu[c] = mean;
                    batch_sigma[c] = std::sqrt(var + kBnVarEps);
                    tr.running_mean[b][c] =
                        opt.bn_momentum * tr.running_mean[b][c] + (1.0 - opt.bn_momentum) * mean;
                    tr.running_var[b][c] =
                        opt.bn_momentum * tr.running_var[b][c] + (1.0 - opt.bn_momentum) * var;
                }

                bc.normalized.resize(bsz);
                bc.post.resize(bsz);
                bc.sigma_used.resize(bsz);
                for (int i = 0; i < bsz; ++i) {
                    ChannelVector mu_i = batch_mu;
                    ChannelVector sigma_i = batch_sigma;
                    if (instance_batch) {
                        mu_i = channel_mean(z[i]);
                        const ChannelVector raw = channel_std(z[i], 0.0);
                        for (int c = 0; c < c_out; ++c)
                            sigma_i[c] = std::sqrt(raw[c] * raw[c] + kBnVarEps);
                    }
                    bc.normalized[i] = FeatureMap(c_out, z[i].height, z[i].width);
                    bc.post[i] = FeatureMap(c_out, z[i].height, z[i].width);
                    for (int c = 0; c < c_out; ++c) {
                        auto zc = z[i].channel(c);
                        auto nc = bc.normalized[i].channel(c);
                        auto pc = bc.post[i].channel(c);
                        for (size_t k = 0; k < zc.size(); ++k) {
                            nc[k] = (zc[k] - mu_i[c]) / sigma_i[c];
                            pc[k] = std::max(0.0, m.blocks[b].bn.alpha[c] * nc[k] + m.blocks[b].bn.beta[c]);
                        }
                    }
                    bc.sigma_used[i] = std::move(sigma_i);
                    current[i] = bc.post[i];
                    // Shared affine jitter where the adaptation layer will
                    // sit; bc.post keeps the true output for the ReLU mask.
                    if (jitter_batch && b == jitter_block)
                        for (double& v : current[i].data) v = jit_scale * v + jit_shift;
                }
            }

            // Head + cross-entropy (mean over the batch).
            const size_t head_w = tr.params.size() - 2;
            std::vector<FeatureMap> g(bsz);
            for (int i = 0; i < bsz; ++i) {
                const EmbeddingVector pooled = global_average_pool(current[i]);
                std::vector<double> logits = head_forward(m.head, pooled);
                const double zmax = *std::max_element(logits.begin(), logits.end());
                double denom = 0.0;
                for (double v : logits) denom += std::exp(v - zmax);
                std::vector<double> dlogits(logits.size());
                for (size_t k = 0; k < logits.size(); ++k)
                    dlogits[k] = std::exp(logits[k] - zmax) / denom;
                dlogits[train[order[start + i]].label] -= 1.0;
                for (double& v : dlogits) v /= bsz;

                for (int k = 0; k < m.head.classes; ++k) {
                    tr.params[head_w + 1].grad[k] += dlogits[k];
                    for (int j = 0; j < m.head.in_dim; ++j)
                        tr.params[head_w].grad[static_cast<size_t>(k) * m.head.in_dim + j] +=
                            dlogits[k] * pooled[j];
                }
                g[i] = head_backward_to_map(m.head, dlogits, current[i].height, current[i].width);
            }

            // Reverse through the blocks with the through-statistics
            // backward, dz = (alpha*g - S0/N - nrm*S1/N) / sigma, where the
            // sums run over whatever set the statistics were taken from:
            // the whole batch normally, each sample alone on instance-stat
            // batches.
            for (int b = static_cast<int>(m.blocks.size()) - 1; b >= 0; --b) {
                BatchBlockCache& bc = caches[b];
                const Block& block = m.blocks[b];
                const int c_out = block.conv.out_ch;
                const double n_batch = static_cast<double>(bsz) * bc.post[0].plane();
                const size_t base = static_cast<size_t>(b) * 4;

                // The incoming gradient is with respect to the jittered
                // output; undo the scale before the ReLU mask.
                if (jitter_batch && b == static_cast<int>(jitter_block))
                    for (int i = 0; i < bsz; ++i)
                        for (double& v : g[i].data) v *= jit_scale;

                for (int i = 0; i < bsz; ++i) relu_backward_inplace(g[i], bc.post[i]);

                for (int c = 0; c < c_out; ++c) {
                    const double alpha = block.bn.alpha[c];
                    double da = 0.0, db = 0.0;
                    for (int i = 0; i < bsz; ++i) {
                        auto gc = g[i].channel(c);
                        auto nc = bc.normalized[i].channel(c);
                        for (size_t k = 0; k < gc.size(); ++k) {
                            da += gc[k] * nc[k];
                            db += gc[k];
                        }
                    }
                    tr.params[base + 2].grad[c] += da;
                    tr.params[base + 3].grad[c] += db;

                    if (bc.instance) {
                        for (int i = 0; i < bsz; ++i) {
                            auto gc = g[i].channel(c);
                            auto nc = bc.normalized[i].channel(c);
                            double s0 = 0.0, s1 = 0.0;
                            for (size_t k = 0; k < gc.size(); ++k) {
                                s0 += gc[k];
                                s1 += gc[k] * nc[k];
                            }
                            s0 *= alpha;
                            s1 *= alpha;
                            const double n_i = static_cast<double>(gc.size());
                            const double sig = bc.sigma_used[i][c];
                            for (size_t k = 0; k < gc.size(); ++k)
                                gc[k] = (alpha * gc[k] - s0 / n_i - nc[k] * s1 / n_i) / sig;
                        }
                    } else {
                        const double s0 = db * alpha;
                        const double s1 = da * alpha;
                        for (int i = 0; i < bsz; ++i) {
                            auto gc = g[i].channel(c);
                            auto nc = bc.normalized[i].channel(c);
                            const double sig = bc.sigma_used[i][c];
                            for (size_t k = 0; k < gc.size(); ++k)
                                gc[k] = (alpha * gc[k] - s0 / n_batch - nc[k] * s1 / n_batch) / sig;
                        }
                    }
                }

                for (int i = 0; i < bsz; ++i) {
                    conv_backward_params(bc.conv_in[i], g[i], block.conv, tr.params[base].grad,
                                         tr.params[base + 1].grad);
                    if (b > 0)
                        g[i] = conv_backward_input(g[i], block.conv, bc.conv_in[i].height,
                                                   bc.conv_in[i].width);
                }
            }

            tr.step(opt.lr, opt.momentum);
        }

        freeze_stats();
        holdout_acc = evaluate_frozen(m, holdout);
        if (holdout_acc >= opt.stop_accuracy) break;
    }

    freeze_stats();
    fixture.holdout_accuracy = evaluate_frozen(m, holdout);
    fixture.train_accuracy = evaluate_frozen(m, train);
    if (fixture.holdout_accuracy < opt.target_accuracy)
        throw ConvergenceFailure("pretrain: held-out accuracy " +
                                 std::to_string(fixture.holdout_accuracy) + " below target");
    m.validate();
    return fixture;
}

// ---------------------------------------------------------------------------
// Fixture serialization.

namespace {

using nlohmann::json;

json model_to_json(const ToyModel& m) {
    json blocks = json::array();
    for (const Block& b : m.blocks) {
        blocks.push_back(json{{"conv",
                               json{{"in_ch", b.conv.in_ch},
                                    {"out_ch", b.conv.out_ch},
                                    {"stride", b.conv.stride},
                                    {"weight", b.conv.weight},
                                    {"bias", b.conv.bias}}},
                              {"bn",
                               json{{"alpha", b.bn.alpha},
                                    {"beta", b.bn.beta},
                                    {"mu", b.bn.mu_s},
                                    {"sigma", b.bn.sigma_s}}}});
    }
    return json{{"in_channels", m.in_channels},
                {"in_height", m.in_height},
                {"in_width", m.in_width},
                {"insertion_index", m.insertion_index},
                {"blocks", blocks},
                {"head",
                 json{{"in_dim", m.head.in_dim},
                      {"classes", m.head.classes},
                      {"weight", m.head.weight},
                      {"bias", m.head.bias}}}};
}

ToyModel model_from_json(const json& j) {
    ToyModel m;
    m.in_channels = j.at("in_channels").get<int>();
    m.in_height = j.at("in_height").get<int>();
    m.in_width = j.at("in_width").get<int>();
    m.insertion_index = j.at("insertion_index").get<int>();
    for (const json& bj : j.at("blocks")) {
        Block b;
        const json& cj = bj.at("conv");
        b.conv.in_ch = cj.at("in_ch").get<int>();
        b.conv.out_ch = cj.at("out_ch").get<int>();
        b.conv.stride = cj.at("stride").get<int>();
        b.conv.weight = cj.at("weight").get<std::vector<double>>();
        b.conv.bias = cj.at("bias").get<std::vector<double>>();
        const json& nj = bj.at("bn");
        b.bn.alpha = nj.at("alpha").get<ChannelVector>();
        b.bn.beta = nj.at("beta").get<ChannelVector>();
        b.bn.mu_s = nj.at("mu").get<ChannelVector>();
        b.bn.sigma_s = nj.at("sigma").get<ChannelVector>();
        m.blocks.push_back(std::move(b));
    }
    const json& hj = j.at("head");
    m.head.in_dim = hj.at("in_dim").get<int>();
    m.head.classes = hj.at("classes").get<int>();
    m.head.weight = hj.at("weight").get<std::vector<double>>();
    m.head.bias = hj.at("bias").get<std::vector<double>>();
    return m;
}

json source_to_json(const SourceSpec& s) {
    return json{{"channels", s.channels},
                {"height", s.height},
                {"width", s.width},
                {"classes", s.classes},
                {"texture_noise", s.texture_noise},
                {"amplitude_base", s.amplitude_base},
                {"amplitude_step", s.amplitude_step}};
}

SourceSpec source_from_json(const json& j) {
    SourceSpec s;
    s.channels = j.at("channels").get<int>();
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.classes = j.at("classes").get<int>();
    s.texture_noise = j.at("texture_noise").get<double>();
    s.amplitude_base = j.at("amplitude_base").get<double>();
    s.amplitude_step = j.at("amplitude_step").get<double>();
    return s;
}

} // namespace

std::string fixture_to_string(const ModelFixture& fixture) {
    json j;
    j["version"] = 1;
    j["seed"] = fixture.seed;
    j["train_accuracy"] = fixture.train_accuracy;
    j["holdout_accuracy"] = fixture.holdout_accuracy;
    j["source"] = source_to_json(fixture.source);
    j["model"] = model_to_json(fixture.model);
    return j.dump(2) + "\n";
}

void save_fixture(const ModelFixture& fixture, const std::string& path) {
    fixture.model.validate();
    std::ofstream out(path);
    if (!out) throw IoFailure("save_fixture: cannot open " + path);
    out << fixture_to_string(fixture);
    if (!out) throw IoFailure("save_fixture: write failed for " + path);
}

ModelFixture load_fixture(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("load_fixture: cannot open " + path);
    json j = json::parse(in, nullptr, true);
    if (j.at("version").get<int>() != 1)
        throw IoFailure("load_fixture: unsupported fixture version in " + path);
    ModelFixture f;
    f.seed = j.at("seed").get<std::uint64_t>();
    f.train_accuracy = j.at("train_accuracy").get<double>();
    f.holdout_accuracy = j.at("holdout_accuracy").get<double>();
    f.source = source_from_json(j.at("source"));
    f.model = model_from_json(j.at("model"));
    f.model.validate();
    return f;
}

} // namespace bestta
