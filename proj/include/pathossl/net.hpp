#pragma once

// Siamese embedding network: three conv(3x3)-ReLU-maxpool(2x2) blocks, global
// average pooling and a fully connected head. Forward and backward passes are
// written out by hand and templated on the scalar type so that the same code
// runs in float for training and in double for gradient checking.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "pairs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "slide.hpp"

namespace pathossl {

inline constexpr int kEmbeddingDim = 128;

struct Architecture {
    static constexpr int in_channels = 3;
    static constexpr int blocks = 3;

    int tile_size = kDefaultTileSize;
    std::array<int, blocks> widths{8, 16, 32};
    int embed_dim = kEmbeddingDim;

    bool operator==(const Architecture&) const = default;

    void validate() const {
        if (tile_size < 8) throw ContractError("tile_size must be >= 8");
        for (int w : widths)
            if (w < 1) throw ContractError("layer widths must be >= 1");
        if (embed_dim < 1) throw ContractError("embed_dim must be >= 1");
    }
};

template <typename T>
struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<T> data;

    bool operator==(const Tensor&) const = default;
};

/// Parameter tensors in fixed order: conv{1,2,3} weight [out,in,3,3] and bias
/// [out], then fc weight [embed_dim, widths[2]] and fc bias [embed_dim].
template <typename T = float>
struct NetParams {
    Architecture arch;
    std::vector<Tensor<T>> tensors;

    static constexpr std::size_t conv_weight(int block) { return 2 * static_cast<std::size_t>(block); }
    static constexpr std::size_t conv_bias(int block) { return 2 * static_cast<std::size_t>(block) + 1; }
    static constexpr std::size_t fc_weight = 6;
    static constexpr std::size_t fc_bias = 7;

    static NetParams zeros(const Architecture& arch) {
        arch.validate();
        NetParams p;
        p.arch = arch;
        int in = Architecture::in_channels;
        for (int b = 0; b < Architecture::blocks; ++b) {
            const auto out = static_cast<std::uint32_t>(arch.widths[b]);
            p.tensors.push_back({{out, static_cast<std::uint32_t>(in), 3, 3}, std::vector<T>(out * in * 9, T(0))});
            p.tensors.push_back({{out}, std::vector<T>(out, T(0))});
            in = arch.widths[b];
        }
        const auto e = static_cast<std::uint32_t>(arch.embed_dim);
        p.tensors.push_back({{e, static_cast<std::uint32_t>(in)}, std::vector<T>(e * in, T(0))});
        p.tensors.push_back({{e}, std::vector<T>(e, T(0))});
        return p;
    }

    template <typename U>
    NetParams<U> cast() const {
        NetParams<U> out;
        out.arch = arch;
        for (const auto& t : tensors) out.tensors.push_back({t.dims, std::vector<U>(t.data.begin(), t.data.end())});
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.data.size();
        return n;
    }

    bool operator==(const NetParams&) const = default;
};

/// Glorot-uniform weights, zero biases.
inline NetParams<float> init_params(std::uint64_t seed, const Architecture& arch = {}) {
    auto p = NetParams<float>::zeros(arch);
    Rng rng(derive_seed(seed, {0x1417}));
    auto fill = [&](Tensor<float>& t, double fan_in, double fan_out) {
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
    };
    int in = Architecture::in_channels;
    for (int b = 0; b < Architecture::blocks; ++b) {
        fill(p.tensors[NetParams<float>::conv_weight(b)], in * 9.0, arch.widths[b] * 9.0);
        in = arch.widths[b];
    }
    fill(p.tensors[NetParams<float>::fc_weight], in, arch.embed_dim);
    return p;
}

/// Channel-major image, the network's input and activation layout.
template <typename T>
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, T(0)) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    T* channel(int c) { return data.data() + c * plane(); }
    const T* channel(int c) const { return data.data() + c * plane(); }
};

/// Tile pixels scaled to [0,1].
template <typename T = float>
Image<T> to_input(const Tile& tile) {
    Image<T> img(3, tile.size, tile.size);
    const std::size_t n = img.plane();
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) img.data[c * n + i] = static_cast<T>(tile.rgb[i * 3 + c]) / T(255);
    return img;
}

template <typename T>
struct ForwardCache {
    std::array<std::vector<T>, Architecture::blocks> columns;  // im2col of each block's input
    std::array<int, Architecture::blocks> in_channels{};
    std::array<Image<T>, Architecture::blocks> activation;  // post-ReLU conv output
    std::array<std::vector<std::uint32_t>, Architecture::blocks> argmax;
    Image<T> pooled;  // output of the last block
    std::vector<T> features;  // global average pool
};

namespace detail {

/// Unfolds 3x3 zero-padded neighbourhoods: row (c*9 + ky*3 + kx) of `cols`
/// holds input channel c shifted by (ky-1, kx-1), one column per pixel.
template <typename T>
void im2col3x3(const Image<T>& in, std::vector<T>& cols) {
    const int H = in.height, W = in.width, C = in.channels;
    const std::size_t HW = in.plane();
    cols.assign(static_cast<std::size_t>(C) * 9 * HW, T(0));
    for (int c = 0; c < C; ++c) {
        const T* ip = in.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            const int dy = ky - 1;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            for (int kx = 0; kx < 3; ++kx) {
                const int dx = kx - 1;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                T* row = cols.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * HW;
                for (int y = y0; y < y1; ++y) {
                    T* dst = row + static_cast<std::size_t>(y) * W;
                    const T* src = ip + static_cast<std::ptrdiff_t>(y + dy) * W + dx;
                    for (int x = x0; x < x1; ++x) dst[x] = src[x];
                }
            }
        }
    }
}

template <typename T>
void col2im3x3(const std::vector<T>& cols, Image<T>& out) {
    const int H = out.height, W = out.width, C = out.channels;
    const std::size_t HW = out.plane();
    for (int c = 0; c < C; ++c) {
        T* op = out.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            const int dy = ky - 1;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            for (int kx = 0; kx < 3; ++kx) {
                const int dx = kx - 1;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                const T* row = cols.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * HW;
                for (int y = y0; y < y1; ++y) {
                    const T* src = row + static_cast<std::size_t>(y) * W;
                    T* dst = op + static_cast<std::ptrdiff_t>(y + dy) * W + dx;
                    for (int x = x0; x < x1; ++x) dst[x] += src[x];
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1, from unfolded columns.
template <typename T>
void conv3x3(const std::vector<T>& cols, int H, int W, int C, const T* w, const T* b, int out_channels,
             Image<T>& out) {
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    const int R = C * 9;
    out = Image<T>(out_channels, H, W);
    for (int o = 0; o < out_channels; ++o) {
        T* op = out.channel(o);
        std::fill(op, op + HW, b[o]);
        const T* wo = w + static_cast<std::size_t>(o) * R;
        for (int r = 0; r < R; ++r) {
            const T wv = wo[r];
            const T* row = cols.data() + static_cast<std::size_t>(r) * HW;
            for (std::size_t i = 0; i < HW; ++i) op[i] += wv * row[i];
        }
    }
}

template <typename T>
void conv3x3_backward(const std::vector<T>& cols, int C, const T* w, const Image<T>& dout, T* dw, T* db,
                      Image<T>* din) {
    const std::size_t HW = dout.plane();
    const int R = C * 9;
    std::vector<T> dcols;
    if (din) {
        *din = Image<T>(C, dout.height, dout.width);
        dcols.assign(static_cast<std::size_t>(R) * HW, T(0));
    }
    for (int o = 0; o < dout.channels; ++o) {
        const T* gp = dout.channel(o);
        T bsum = 0;
        for (std::size_t i = 0; i < HW; ++i) bsum += gp[i];
        db[o] += bsum;
        const T* wo = w + static_cast<std::size_t>(o) * R;
        T* dwo = dw + static_cast<std::size_t>(o) * R;
        for (int r = 0; r < R; ++r) {
            const T* row = cols.data() + static_cast<std::size_t>(r) * HW;
            T acc = 0;
            for (std::size_t i = 0; i < HW; ++i) acc += gp[i] * row[i];
            dwo[r] += acc;
            if (din) {
                const T wv = wo[r];
                T* drow = dcols.data() + static_cast<std::size_t>(r) * HW;
                for (std::size_t i = 0; i < HW; ++i) drow[i] += wv * gp[i];
            }
        }
    }
    if (din) col2im3x3(dcols, *din);
}

template <typename T>
void relu_inplace(Image<T>& img) {
    for (auto& v : img.data) v = v > T(0) ? v : T(0);
}

/// 2x2 stride-2 max pool (floor); argmax holds the winning in-plane index,
/// first maximum in row-major window order.
template <typename T>
void maxpool2(const Image<T>& in, Image<T>& out, std::vector<std::uint32_t>& argmax) {
    const int Ho = in.height / 2, Wo = in.width / 2;
    out = Image<T>(in.channels, Ho, Wo);
    argmax.assign(out.data.size(), 0);
    for (int c = 0; c < in.channels; ++c) {
        const T* ip = in.channel(c);
        T* op = out.channel(c);
        std::uint32_t* ap = argmax.data() + c * out.plane();
        for (int y = 0; y < Ho; ++y) {
            for (int x = 0; x < Wo; ++x) {
                const std::uint32_t base = static_cast<std::uint32_t>(2 * y * in.width + 2 * x);
                const std::uint32_t cand[4] = {base, base + 1, base + static_cast<std::uint32_t>(in.width),
                                               base + static_cast<std::uint32_t>(in.width) + 1};
                std::uint32_t best = cand[0];
                for (int k = 1; k < 4; ++k)
                    if (ip[cand[k]] > ip[best]) best = cand[k];
                op[y * Wo + x] = ip[best];
                ap[y * Wo + x] = best;
            }
        }
    }
}

}  // namespace detail

/// Embeds one image. Pure function of (params, input); fills `cache` for a
/// subsequent backward pass when given.
template <typename T>
std::vector<T> forward(const NetParams<T>& params, const Image<T>& input, ForwardCache<T>* cache = nullptr) {
    if (input.channels != Architecture::in_channels) throw ContractError("input must have 3 channels");
    if (input.height < 8 || input.width < 8) throw ContractError("input size must be >= 8");
    for (const auto& v : input.data)
        if (!std::isfinite(static_cast<double>(v))) throw ContractError("non-finite input to forward");

    using P = NetParams<T>;
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    Image<T> x = input;
    for (int b = 0; b < Architecture::blocks; ++b) {
        Image<T> conv;
        detail::im2col3x3(x, c.columns[b]);
        c.in_channels[b] = x.channels;
        detail::conv3x3(c.columns[b], x.height, x.width, x.channels, params.tensors[P::conv_weight(b)].data.data(),
                        params.tensors[P::conv_bias(b)].data.data(), params.arch.widths[b], conv);
        detail::relu_inplace(conv);
        Image<T> pooled;
        detail::maxpool2(conv, pooled, c.argmax[b]);
        c.activation[b] = std::move(conv);
        x = std::move(pooled);
    }
    const int F = x.channels;
    c.features.assign(F, T(0));
    for (int ch = 0; ch < F; ++ch) {
        const T* p = x.channel(ch);
        T s = 0;
        for (std::size_t i = 0; i < x.plane(); ++i) s += p[i];
        c.features[ch] = s / static_cast<T>(x.plane());
    }
    c.pooled = std::move(x);

    const auto& W = params.tensors[P::fc_weight].data;
    const auto& B = params.tensors[P::fc_bias].data;
    const int E = params.arch.embed_dim;
    std::vector<T> out(E);
    for (int o = 0; o < E; ++o) {
        T s = B[o];
        const T* row = W.data() + static_cast<std::size_t>(o) * F;
        for (int i = 0; i < F; ++i) s += row[i] * c.features[i];
        out[o] = s;
    }
    return out;
}

/// Propagates dL/d(embedding) back through the network, adding the parameter
/// gradients into `grads` (same layout as params.tensors).
template <typename T>
void backward_from_embedding(const NetParams<T>& params, const ForwardCache<T>& c, std::span<const T> d_embed,
                             std::vector<std::vector<T>>& grads) {
    using P = NetParams<T>;
    const int E = params.arch.embed_dim;
    const int F = static_cast<int>(c.features.size());
    const auto& W = params.tensors[P::fc_weight].data;
    auto& dW = grads[P::fc_weight];
    auto& dB = grads[P::fc_bias];
    std::vector<T> dfeat(F, T(0));
    for (int o = 0; o < E; ++o) {
        const T g = d_embed[o];
        if (g == T(0)) continue;
        dB[o] += g;
        T* drow = dW.data() + static_cast<std::size_t>(o) * F;
        const T* row = W.data() + static_cast<std::size_t>(o) * F;
        for (int i = 0; i < F; ++i) {
            drow[i] += g * c.features[i];
            dfeat[i] += g * row[i];
        }
    }

    Image<T> dx(c.pooled.channels, c.pooled.height, c.pooled.width);
    const T inv = T(1) / static_cast<T>(c.pooled.plane());
    for (int ch = 0; ch < F; ++ch) std::fill(dx.channel(ch), dx.channel(ch) + dx.plane(), dfeat[ch] * inv);

    for (int b = Architecture::blocks - 1; b >= 0; --b) {
        const Image<T>& act = c.activation[b];
        Image<T> dconv(act.channels, act.height, act.width);
        for (int ch = 0; ch < act.channels; ++ch) {
            const std::uint32_t* ap = c.argmax[b].data() + ch * dx.plane();
            const T* g = dx.channel(ch);
            T* d = dconv.channel(ch);
            for (std::size_t i = 0; i < dx.plane(); ++i) d[ap[i]] += g[i];
        }
        for (std::size_t i = 0; i < dconv.data.size(); ++i)
            if (!(act.data[i] > T(0))) dconv.data[i] = T(0);
        Image<T> din;
        detail::conv3x3_backward(c.columns[b], c.in_channels[b], params.tensors[P::conv_weight(b)].data.data(), dconv,
                                 grads[P::conv_weight(b)].data(), grads[P::conv_bias(b)].data(), b > 0 ? &din : nullptr);
        dx = std::move(din);
    }
}

struct LossHyper {
    double margin = 1.0;

    void validate() const {
        if (!(margin > 0.0)) throw ContractError("margin must be > 0");
    }
};

template <typename T>
double l2_distance(std::span<const T> a, std::span<const T> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

/// (1-y)·‖f1−f2‖ + y·max(0, m−‖f1−f2‖), y = 0 for similar, 1 for dissimilar.
template <typename T>
double contrastive_loss(std::span<const T> f1, std::span<const T> f2, PairLabel y, const LossHyper& h = {}) {
    if (f1.size() != f2.size()) throw ContractError("embedding lengths differ");
    const double d = l2_distance(f1, f2);
    return y == PairLabel::similar ? d : std::max(0.0, h.margin - d);
}

/// Gradient of the loss with respect to f1 (the f2 gradient is its negation).
/// Zero at zero distance; the hinge is inactive at exactly d = m.
template <typename T>
std::vector<double> contrastive_loss_grad(std::span<const T> f1, std::span<const T> f2, PairLabel y,
                                          const LossHyper& h = {}) {
    std::vector<double> g(f1.size(), 0.0);
    const double d = l2_distance(f1, f2);
    if (d == 0.0) return g;
    double coef = 0.0;
    if (y == PairLabel::similar) {
        coef = 1.0 / d;
    } else if (h.margin - d > 0.0) {
        coef = -1.0 / d;
    }
    if (coef == 0.0) return g;
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = coef * (static_cast<double>(f1[i]) - static_cast<double>(f2[i]));
    return g;
}

template <typename T>
struct PairSample {
    const Image<T>* a = nullptr;
    const Image<T>* b = nullptr;
    PairLabel label = PairLabel::similar;
};

template <typename T>
std::vector<std::vector<T>> zero_grads(const NetParams<T>& params) {
    std::vector<std::vector<T>> g;
    for (const auto& t : params.tensors) g.emplace_back(t.data.size(), T(0));
    return g;
}

/// Loss and parameter gradients for a single pair, both branches sharing the
/// same weights. Gradients are added into `grads`.
template <typename T>
double pair_gradient(const NetParams<T>& params, const PairSample<T>& pair, const LossHyper& h,
                     std::vector<std::vector<T>>& grads) {
    ForwardCache<T> ca, cb;
    const auto fa = forward(params, *pair.a, &ca);
    const auto fb = forward(params, *pair.b, &cb);
    const std::span<const T> sa(fa), sb(fb);
    const double loss = contrastive_loss(sa, sb, pair.label, h);
    const auto g = contrastive_loss_grad(sa, sb, pair.label, h);
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) return loss;
    std::vector<T> ga(g.size()), gb(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] = static_cast<T>(g[i]);
        gb[i] = static_cast<T>(-g[i]);
    }
    backward_from_embedding(params, ca, std::span<const T>(ga), grads);
    backward_from_embedding(params, cb, std::span<const T>(gb), grads);
    return loss;
}

struct BatchGradient {
    std::vector<std::vector<double>> grads;  // same layout as params.tensors
    double mean_loss = 0.0;
};

/// Mean batch loss and its gradient. Pairs may be processed on several
/// workers; per-pair gradients are reduced in pair order in double precision
/// so the result does not depend on the worker count.
template <typename T>
BatchGradient backward(const NetParams<T>& params, std::span<const PairSample<T>> batch, const LossHyper& h = {},
                       int workers = 1) {
    if (batch.empty()) throw ContractError("backward requires a non-empty batch");
    h.validate();
    std::vector<std::vector<std::vector<T>>> per_pair(batch.size());
    std::vector<double> losses(batch.size(), 0.0);
    parallel_for(batch.size(), workers, [&](std::size_t i) {
        per_pair[i] = zero_grads(params);
        losses[i] = pair_gradient(params, batch[i], h, per_pair[i]);
    });

    BatchGradient out;
    for (const auto& t : params.tensors) out.grads.emplace_back(t.data.size(), 0.0);
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        total += losses[i];
        for (std::size_t k = 0; k < out.grads.size(); ++k) {
            auto& dst = out.grads[k];
            const auto& src = per_pair[i][k];
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += static_cast<double>(src[j]);
        }
    }
    for (auto& g : out.grads)
        for (auto& v : g) v *= inv;
    out.mean_loss = total * inv;
    if (!std::isfinite(out.mean_loss)) throw DivergenceError("non-finite batch loss");
    return out;
}

/// Mean contrastive loss of a batch without gradients.
template <typename T>
double batch_loss(const NetParams<T>& params, std::span<const PairSample<T>> batch, const LossHyper& h = {}) {
    double total = 0.0;
    for (const auto& p : batch) {
        const auto fa = forward(params, *p.a);
        const auto fb = forward(params, *p.b);
        total += contrastive_loss(std::span<const T>(fa), std::span<const T>(fb), p.label, h);
    }
    return total / static_cast<double>(batch.size());
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;

    static AdamState zeros_like(const std::vector<Tensor<float>>& params, AdamConfig cfg = {}) {
        AdamState s;
        s.config = cfg;
        for (const auto& t : params) {
            s.m.emplace_back(t.data.size(), 0.0f);
            s.v.emplace_back(t.data.size(), 0.0f);
        }
        return s;
    }

    bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update; the step counter is incremented first.
inline void adam_step(std::vector<Tensor<float>>& params, const std::vector<std::vector<double>>& grads,
                      AdamState& state) {
    if (state.m.empty() && state.v.empty()) state = AdamState::zeros_like(params, state.config);
    if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw ContractError("adam_step: tensor count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto n = params[k].data.size();
        if (grads[k].size() != n || state.m[k].size() != n || state.v[k].size() != n)
            throw ContractError("adam_step: shape mismatch in tensor " + std::to_string(k));
    }
    const AdamConfig& c = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& theta = params[k].data;
        auto& m = state.m[k];
        auto& v = state.v[k];
        const auto& g = grads[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            theta[i] = static_cast<float>(theta[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
        }
    }
}

}  // namespace pathossl
