#ifndef SESA_LAYERS_HPP
#define SESA_LAYERS_HPP

// Building blocks of the denoiser and its trainable copy: convolution and
// linear layers, residual blocks, self-/cross-attention transformer blocks.

#include "sesa/common.hpp"
#include "sesa/enhance.hpp"
#include "sesa/tensor.hpp"
#include "sesa/text.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sesa {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct Conv2dLayer {
    Tensor w;  // [Co x Ci x k x k]
    Tensor b;  // [Co]
    int64_t stride = 1;
    int64_t pad = 0;

    static Conv2dLayer create(int64_t ci, int64_t co, int64_t k, int64_t stride, int64_t pad,
                              Rng& rng) {
        Conv2dLayer l;
        double std = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
        l.w = Tensor::randn(Shape{co, ci, k, k}, rng, std, true);
        l.b = Tensor::zeros(Shape{co}, true);
        l.stride = stride;
        l.pad = pad;
        return l;
    }

    // zero convolution: weights and bias start at zero
    static Conv2dLayer zero(int64_t ci, int64_t co, int64_t k, int64_t stride, int64_t pad) {
        Conv2dLayer l;
        l.w = Tensor::zeros(Shape{co, ci, k, k}, true);
        l.b = Tensor::zeros(Shape{co}, true);
        l.stride = stride;
        l.pad = pad;
        return l;
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(NamedParams& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

struct Linear {
    Tensor w;  // [din x dout]
    Tensor b;  // [dout]

    static Linear create(int64_t din, int64_t dout, Rng& rng) {
        Linear l;
        l.w = Tensor::randn(Shape{din, dout}, rng, 1.0 / std::sqrt(static_cast<double>(din)), true);
        l.b = Tensor::zeros(Shape{dout}, true);
        return l;
    }

    Tensor forward(const Tensor& x) const { return add_bias_rows(matmul(x, w), b); }

    void collect(NamedParams& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

// sinusoidal timestep embedding, [1 x d], constant w.r.t. parameters
inline Tensor sinusoidal_embedding(int64_t t, int64_t d) {
    std::vector<double> v(static_cast<size_t>(d));
    int64_t half = d / 2;
    for (int64_t i = 0; i < half; i++) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        v[static_cast<size_t>(i)] = std::sin(t * freq);
        v[static_cast<size_t>(half + i)] = std::cos(t * freq);
    }
    return Tensor(Shape{1, d}, std::move(v));
}

struct ResBlock {
    Conv2dLayer c1, c2;   // 3x3, same channel count
    Linear time_proj;     // d_time -> C, added as per-channel bias

    static ResBlock create(int64_t channels, int64_t d_time, Rng& rng) {
        ResBlock r;
        r.c1 = Conv2dLayer::create(channels, channels, 3, 1, 1, rng);
        r.c2 = Conv2dLayer::create(channels, channels, 3, 1, 1, rng);
        r.time_proj = Linear::create(d_time, channels, rng);
        return r;
    }

    Tensor forward(const Tensor& x, const Tensor& temb) const {
        Tensor h = silu(c1.forward(x));
        Tensor tb = reshape(time_proj.forward(temb), Shape{x.dim(0)});
        h = add_bias_channels(h, tb);
        h = c2.forward(silu(h));
        return add(x, h);
    }

    void collect(NamedParams& out, const std::string& prefix) const {
        c1.collect(out, prefix + ".conv1");
        c2.collect(out, prefix + ".conv2");
        time_proj.collect(out, prefix + ".temb");
    }
};

struct SelfAttention {
    int64_t heads = 1;
    std::vector<Linear> q, k, v;  // per head: C -> C/heads
    Linear out;                   // C -> C

    static SelfAttention create(int64_t channels, int64_t heads, Rng& rng) {
        if (channels % heads != 0) throw ConfigMismatch("heads must divide channel width");
        SelfAttention a;
        a.heads = heads;
        int64_t dh = channels / heads;
        for (int64_t h = 0; h < heads; h++) {
            a.q.push_back(Linear::create(channels, dh, rng));
            a.k.push_back(Linear::create(channels, dh, rng));
            a.v.push_back(Linear::create(channels, dh, rng));
        }
        a.out = Linear::create(channels, channels, rng);
        return a;
    }

    // x: [n x C] token matrix; map_out, when given, receives the head-averaged
    // row-stochastic [n x n] attention map as a graph tensor
    Tensor forward(const Tensor& x, Tensor* map_out) const {
        int64_t dh = q[0].w.dim(1);
        double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> head_outs;
        Tensor map_sum;
        for (int64_t h = 0; h < heads; h++) {
            Tensor qm = q[static_cast<size_t>(h)].forward(x);
            Tensor km = k[static_cast<size_t>(h)].forward(x);
            Tensor vm = v[static_cast<size_t>(h)].forward(x);
            Tensor m = softmax_rows(mul_scalar(matmul(qm, transpose(km)), scale));
            if (map_out) map_sum = map_sum.defined() ? add(map_sum, m) : m;
            head_outs.push_back(matmul(m, vm));  // [n x dh]
        }
        if (map_out)
            *map_out = (heads == 1) ? map_sum : mul_scalar(map_sum, 1.0 / static_cast<double>(heads));
        // concat heads along feature dim: [n x C]
        Tensor cat;
        if (heads == 1) {
            cat = head_outs[0];
        } else {
            std::vector<Tensor> transposed;
            for (auto& ho : head_outs) transposed.push_back(transpose(ho));  // [dh x n]
            cat = transpose(concat_axis0(transposed));
        }
        return out.forward(cat);
    }

    void collect(NamedParams& out_params, const std::string& prefix) const {
        for (int64_t h = 0; h < heads; h++) {
            std::string hp = prefix + ".h" + std::to_string(h);
            q[static_cast<size_t>(h)].collect(out_params, hp + ".q");
            k[static_cast<size_t>(h)].collect(out_params, hp + ".k");
            v[static_cast<size_t>(h)].collect(out_params, hp + ".v");
        }
        out.collect(out_params, prefix + ".out");
    }
};

struct CrossAttentionLayer {
    int64_t heads = 1;
    std::vector<CrossAttentionWeights> hw;  // per head
    Linear out;

    static CrossAttentionLayer create(int64_t channels, int64_t d_text, int64_t heads, Rng& rng) {
        if (channels % heads != 0) throw ConfigMismatch("heads must divide channel width");
        CrossAttentionLayer a;
        a.heads = heads;
        int64_t dh = channels / heads;
        double sq = 1.0 / std::sqrt(static_cast<double>(channels));
        double st = 1.0 / std::sqrt(static_cast<double>(d_text));
        for (int64_t h = 0; h < heads; h++) {
            CrossAttentionWeights w;
            w.wq = Tensor::randn(Shape{channels, dh}, rng, sq, true);
            w.wk = Tensor::randn(Shape{d_text, dh}, rng, st, true);
            w.wv = Tensor::randn(Shape{d_text, dh}, rng, st, true);
            a.hw.push_back(std::move(w));
        }
        a.out = Linear::create(channels, channels, rng);
        return a;
    }

    Tensor forward(const Tensor& x, const TextEmbedding& ct, const BiasSpec* bias,
                   Tensor* map_out) const {
        std::optional<BiasSpec> spec;
        if (bias) spec = *bias;
        std::vector<Tensor> head_outs;
        Tensor map_sum;
        for (int64_t h = 0; h < heads; h++) {
            auto res = biased_cross_attention(x, ct, hw[static_cast<size_t>(h)], spec);
            if (map_out) map_sum = map_sum.defined() ? add(map_sum, res.map) : res.map;
            head_outs.push_back(res.output);
        }
        if (map_out)
            *map_out = (heads == 1) ? map_sum : mul_scalar(map_sum, 1.0 / static_cast<double>(heads));
        Tensor cat;
        if (heads == 1) {
            cat = head_outs[0];
        } else {
            std::vector<Tensor> transposed;
            for (auto& ho : head_outs) transposed.push_back(transpose(ho));
            cat = transpose(concat_axis0(transposed));
        }
        return out.forward(cat);
    }

    void collect(NamedParams& out_params, const std::string& prefix) const {
        for (int64_t h = 0; h < heads; h++) {
            std::string hp = prefix + ".h" + std::to_string(h);
            out_params.emplace_back(hp + ".wq", hw[static_cast<size_t>(h)].wq);
            out_params.emplace_back(hp + ".wk", hw[static_cast<size_t>(h)].wk);
            out_params.emplace_back(hp + ".wv", hw[static_cast<size_t>(h)].wv);
        }
        out.collect(out_params, prefix + ".out");
    }
};

// self-attention + cross-attention + feed-forward, all with residual adds
struct TransformerBlock {
    SelfAttention self_attn;
    CrossAttentionLayer cross_attn;
    Linear ff1, ff2;

    static TransformerBlock create(int64_t channels, int64_t d_text, int64_t heads, Rng& rng) {
        TransformerBlock t;
        t.self_attn = SelfAttention::create(channels, heads, rng);
        t.cross_attn = CrossAttentionLayer::create(channels, d_text, heads, rng);
        t.ff1 = Linear::create(channels, channels * 2, rng);
        t.ff2 = Linear::create(channels * 2, channels, rng);
        return t;
    }

    // x: [C x r x r]
    Tensor forward(const Tensor& x, const TextEmbedding& ct, const BiasSpec* bias,
                   Tensor* self_map, Tensor* cross_map) const {
        const int64_t c = x.dim(0), r = x.dim(1);
        Tensor tokens = transpose(reshape(x, Shape{c, r * r}));  // [n x C]
        Tensor h = add(tokens, self_attn.forward(tokens, self_map));
        h = add(h, cross_attn.forward(h, ct, bias, cross_map));
        h = add(h, ff2.forward(silu(ff1.forward(h))));
        return reshape(transpose(h), Shape{c, r, r});
    }

    void collect(NamedParams& out, const std::string& prefix) const {
        self_attn.collect(out, prefix + ".self");
        cross_attn.collect(out, prefix + ".cross");
        ff1.collect(out, prefix + ".ff1");
        ff2.collect(out, prefix + ".ff2");
    }
};

// ---- parameter utilities ----

inline void freeze_params(const NamedParams& params) {
    for (auto& [name, t] : params) const_cast<Tensor&>(t).set_requires_grad(false);
}

inline uint64_t params_hash(const NamedParams& params) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& [name, t] : params) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.data().data(), t.data().size() * sizeof(double), h);
    }
    return h;
}

inline void copy_params(const NamedParams& src, const NamedParams& dst) {
    if (src.size() != dst.size()) throw ConfigMismatch("parameter count mismatch in copy");
    for (size_t i = 0; i < src.size(); i++) {
        if (src[i].second.shape() != dst[i].second.shape())
            throw ConfigMismatch("parameter shape mismatch at " + src[i].first);
        const_cast<Tensor&>(dst[i].second).mutable_data() = src[i].second.data();
    }
}

}  // namespace sesa

#endif  // SESA_LAYERS_HPP
