#ifndef SESA_BACKBONE_HPP
#define SESA_BACKBONE_HPP

// The frozen generative denoiser: noise schedule, forward noising, a small
// UNet-style encoder/middle/decoder with transformer blocks, the training
// objective, and an ancestral DDPM sampler.

#include "sesa/common.hpp"
#include "sesa/layers.hpp"
#include "sesa/tensor.hpp"
#include "sesa/text.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sesa {

struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> betas;       // beta_t, strictly in (0,1)
    std::vector<double> alpha_bars;  // running product of (1 - beta)

    double alpha_bar(int64_t t) const {  // alpha_bar(0) == 1 by convention
        if (t < 0 || t > T) throw StepOutOfRange("t=" + std::to_string(t));
        return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)];
    }
};

inline NoiseSchedule make_schedule(int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidRange("T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw InvalidRange("need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int64_t t = 0; t < T; t++) {
        double beta = (T == 1) ? beta_start
                               : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                                  static_cast<double>(T - 1);
        s.betas[static_cast<size_t>(t)] = beta;
        prod *= (1.0 - beta);
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, for t in [1, T]
inline Tensor q_sample(const Tensor& z0, int64_t t, const Tensor& eps, const NoiseSchedule& sched) {
    if (z0.shape() != eps.shape())
        throw ShapeMismatch("q_sample: z0 " + shape_str(z0.shape()) + " vs eps " +
                            shape_str(eps.shape()));
    if (t < 1 || t > sched.T) throw StepOutOfRange("q_sample t=" + std::to_string(t));
    double ab = sched.alpha_bar(t);
    return add(mul_scalar(z0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
}

struct DenoiserConfig {
    int64_t image_extent = 64;
    int64_t latent_extent = 16;
    int64_t latent_channels = 3;
    int64_t condition_channels = 1;
    std::vector<int64_t> channels = {8, 16, 16};          // per level
    std::vector<int64_t> attn_resolutions = {16, 8, 4};   // halving chain from latent_extent
    int64_t heads = 1;
    int64_t d_text = 16;
    int64_t d_time = 16;
    int64_t max_tokens = 16;

    int64_t levels() const { return static_cast<int64_t>(channels.size()); }
    int64_t level_resolution(int64_t l) const { return latent_extent >> l; }
    int64_t target_resolution() const { return attn_resolutions.back(); }

    // attention lives at encoder/decoder levels for all configured resolutions
    // except the smallest, which is realized by the middle block
    bool level_has_attention(int64_t l) const {
        int64_t r = level_resolution(l);
        for (size_t i = 0; i + 1 < attn_resolutions.size(); i++)
            if (attn_resolutions[i] == r) return true;
        return false;
    }

    void validate() const {
        if (channels.empty()) throw ConfigMismatch("channels must be nonempty");
        if (attn_resolutions.size() != channels.size())
            throw ConfigMismatch("attn_resolutions count must equal level count");
        if (attn_resolutions[0] != latent_extent)
            throw ConfigMismatch("attention chain must start at the latent extent");
        for (size_t i = 1; i < attn_resolutions.size(); i++)
            if (attn_resolutions[i] * 2 != attn_resolutions[i - 1])
                throw ConfigMismatch("attention resolutions must halve");
        if (image_extent % latent_extent != 0)
            throw ConfigMismatch("latent extent must divide image extent");
        for (int64_t c : channels)
            if (c % heads != 0) throw ConfigMismatch("heads must divide every channel width");
    }

    bool operator==(const DenoiserConfig&) const = default;
};

// per-level additive terms Z(f'_c), consumed by Denoiser::denoise
struct Injection {
    std::vector<Tensor> skips;  // aligned with encoder skip levels
    Tensor mid;
};

// Shared encoder+middle stack; the backbone owns one and the control branch
// owns a trainable copy of it.
struct EncoderStack {
    DenoiserConfig cfg;
    Linear time1, time2;  // d_time -> d_time
    Conv2dLayer in_conv;  // latent_channels -> channels[0]
    struct Level {
        ResBlock res;
        std::optional<TransformerBlock> attn;
        std::optional<Conv2dLayer> down;  // stride-2, channels[l] -> channels[l+1]
    };
    std::vector<Level> levels;
    ResBlock mid_res;
    TransformerBlock mid_attn;

    static EncoderStack create(const DenoiserConfig& cfg, Rng& rng) {
        cfg.validate();
        EncoderStack e;
        e.cfg = cfg;
        e.time1 = Linear::create(cfg.d_time, cfg.d_time, rng);
        e.time2 = Linear::create(cfg.d_time, cfg.d_time, rng);
        e.in_conv = Conv2dLayer::create(cfg.latent_channels, cfg.channels[0], 3, 1, 1, rng);
        for (int64_t l = 0; l < cfg.levels(); l++) {
            Level lv;
            lv.res = ResBlock::create(cfg.channels[static_cast<size_t>(l)], cfg.d_time, rng);
            if (cfg.level_has_attention(l))
                lv.attn = TransformerBlock::create(cfg.channels[static_cast<size_t>(l)],
                                                   cfg.d_text, cfg.heads, rng);
            if (l + 1 < cfg.levels())
                lv.down = Conv2dLayer::create(cfg.channels[static_cast<size_t>(l)],
                                              cfg.channels[static_cast<size_t>(l + 1)], 4, 2, 1, rng);
            e.levels.push_back(std::move(lv));
        }
        int64_t cm = cfg.channels.back();
        e.mid_res = ResBlock::create(cm, cfg.d_time, rng);
        e.mid_attn = TransformerBlock::create(cm, cfg.d_text, cfg.heads, rng);
        return e;
    }

    struct State {
        Tensor temb;                        // [1 x d_time]
        std::vector<Tensor> skips;          // per level, pre-downsample features
        Tensor mid;                         // middle-block output
        std::map<int64_t, Tensor> self_maps;   // resolution -> psi_r [r^2 x r^2]
        std::vector<Tensor> cross_maps;         // M_cross per cross-attention layer
        std::vector<int64_t> cross_resolutions;
    };

    State forward(const Tensor& z, int64_t t, const TextEmbedding& ct, const BiasSpec* bias,
                  bool record_maps) const {
        if (z.rank() != 3 || z.dim(0) != cfg.latent_channels || z.dim(1) != cfg.latent_extent ||
            z.dim(2) != cfg.latent_extent)
            throw ShapeMismatch("latent " + shape_str(z.shape()) + ", expected [" +
                                std::to_string(cfg.latent_channels) + "x" +
                                std::to_string(cfg.latent_extent) + "x" +
                                std::to_string(cfg.latent_extent) + "]");
        State st;
        st.temb = time2.forward(silu(time1.forward(sinusoidal_embedding(t, cfg.d_time))));
        Tensor x = in_conv.forward(z);
        for (int64_t l = 0; l < cfg.levels(); l++) {
            const Level& lv = levels[static_cast<size_t>(l)];
            x = lv.res.forward(x, st.temb);
            if (lv.attn) {
                Tensor smap, cmap;
                x = lv.attn->forward(x, ct, bias, record_maps ? &smap : nullptr,
                                     record_maps ? &cmap : nullptr);
                if (record_maps) {
                    st.self_maps[cfg.level_resolution(l)] = smap;
                    st.cross_maps.push_back(cmap);
                    st.cross_resolutions.push_back(cfg.level_resolution(l));
                }
            }
            st.skips.push_back(x);
            if (lv.down) x = lv.down->forward(x);
        }
        x = mid_res.forward(x, st.temb);
        Tensor smap, cmap;
        x = mid_attn.forward(x, ct, bias, record_maps ? &smap : nullptr,
                             record_maps ? &cmap : nullptr);
        if (record_maps) {
            st.self_maps[cfg.target_resolution()] = smap;
            st.cross_maps.push_back(cmap);
            st.cross_resolutions.push_back(cfg.target_resolution());
        }
        st.mid = x;
        return st;
    }

    void collect(NamedParams& out, const std::string& prefix) const {
        time1.collect(out, prefix + ".time1");
        time2.collect(out, prefix + ".time2");
        in_conv.collect(out, prefix + ".in_conv");
        for (size_t l = 0; l < levels.size(); l++) {
            std::string lp = prefix + ".enc" + std::to_string(l);
            levels[l].res.collect(out, lp + ".res");
            if (levels[l].attn) levels[l].attn->collect(out, lp + ".attn");
            if (levels[l].down) levels[l].down->collect(out, lp + ".down");
        }
        mid_res.collect(out, prefix + ".mid.res");
        mid_attn.collect(out, prefix + ".mid.attn");
    }
};

struct Denoiser {
    DenoiserConfig cfg;
    TextEncoder text;
    EncoderStack encoder;
    struct DecLevel {
        Conv2dLayer fuse;  // 1x1, 2*channels[l] -> channels[l]
        ResBlock res;
        std::optional<TransformerBlock> attn;
        std::optional<Conv2dLayer> up;  // 3x3 after 2x upsample, channels[l] -> channels[l-1]
    };
    std::vector<DecLevel> decoder;  // indexed by level, consumed bottom-up
    Conv2dLayer out_conv;           // channels[0] -> latent_channels

    static Denoiser create(const DenoiserConfig& cfg, Rng& rng) {
        cfg.validate();
        Denoiser d;
        d.cfg = cfg;
        TextEncoderConfig tc;
        tc.d_text = cfg.d_text;
        tc.max_tokens = cfg.max_tokens;
        d.text = TextEncoder::create(tc, rng);
        d.encoder = EncoderStack::create(cfg, rng);
        for (int64_t l = 0; l < cfg.levels(); l++) {
            DecLevel dl;
            int64_t c = cfg.channels[static_cast<size_t>(l)];
            dl.fuse = Conv2dLayer::create(2 * c, c, 1, 1, 0, rng);
            dl.res = ResBlock::create(c, cfg.d_time, rng);
            if (cfg.level_has_attention(l))
                dl.attn = TransformerBlock::create(c, cfg.d_text, cfg.heads, rng);
            if (l > 0)
                dl.up = Conv2dLayer::create(c, cfg.channels[static_cast<size_t>(l - 1)], 3, 1, 1, rng);
            d.decoder.push_back(std::move(dl));
        }
        d.out_conv = Conv2dLayer::create(cfg.channels[0], cfg.latent_channels, 3, 1, 1, rng);
        return d;
    }

    // predicted noise; when inj is present, skip and middle features become
    // f' = Z(f'_c) + f before the decoder consumes them
    Tensor denoise(const Tensor& z_t, int64_t t, const TextEmbedding& ct,
                   const Injection* inj = nullptr) const {
        EncoderStack::State st = encoder.forward(z_t, t, ct, nullptr, false);
        std::vector<Tensor> skips = st.skips;
        Tensor mid = st.mid;
        if (inj) {
            if (static_cast<int64_t>(inj->skips.size()) != cfg.levels())
                throw LevelMismatch("injection has " + std::to_string(inj->skips.size()) +
                                    " levels, denoiser has " + std::to_string(cfg.levels()));
            for (size_t l = 0; l < skips.size(); l++) {
                if (inj->skips[l].shape() != skips[l].shape())
                    throw ConfigMismatch("injection shape at level " + std::to_string(l));
                skips[l] = add(skips[l], inj->skips[l]);
            }
            if (inj->mid.shape() != mid.shape()) throw ConfigMismatch("injection shape at middle");
            mid = add(mid, inj->mid);
        }
        Tensor x = mid;
        for (int64_t l = cfg.levels() - 1; l >= 0; l--) {
            const DecLevel& dl = decoder[static_cast<size_t>(l)];
            x = dl.fuse.forward(concat_axis0({x, skips[static_cast<size_t>(l)]}));
            x = dl.res.forward(x, st.temb);
            if (dl.attn) x = dl.attn->forward(x, ct, nullptr, nullptr, nullptr);
            if (l > 0) x = dl.up->forward(upsample_nearest2x(x));
        }
        return out_conv.forward(silu(x));
    }

    NamedParams params(const std::string& prefix = "backbone") const {
        NamedParams out;
        out.emplace_back(prefix + ".text.table", text.table);
        encoder.collect(out, prefix);
        for (size_t l = 0; l < decoder.size(); l++) {
            std::string lp = prefix + ".dec" + std::to_string(l);
            decoder[l].fuse.collect(out, lp + ".fuse");
            decoder[l].res.collect(out, lp + ".res");
            if (decoder[l].attn) decoder[l].attn->collect(out, lp + ".attn");
            if (decoder[l].up) decoder[l].up->collect(out, lp + ".up");
        }
        out_conv.collect(out, prefix + ".out_conv");
        return out;
    }
};

// excludes backbone parameters from gradient updates
inline void freeze_backbone(Denoiser& d) { freeze_params(d.params()); }

// a denoise step abstracted over the pipeline (plain backbone, controlled
// backbone, or a closed-form oracle in tests)
using DenoiseFn = std::function<Tensor(const Tensor& z_t, int64_t t)>;

struct TrainingSample {
    Tensor z0;
    TextEmbedding ct;
    // condition features are bound inside the DenoiseFn by the pipeline
};

// mean over the batch of || eps - eps_theta(z_t, t) ||_2^2, with t uniform in
// [1, T] and eps standard normal. The denoise_for callback binds conditioning
// for batch element i.
inline Tensor training_loss(const std::vector<Tensor>& z0s, const NoiseSchedule& sched,
                            const std::function<Tensor(size_t i, const Tensor& z_t, int64_t t)>& denoise_for,
                            Rng& rng) {
    if (z0s.empty()) throw ShapeMismatch("training_loss: empty batch");
    Tensor total;
    for (size_t i = 0; i < z0s.size(); i++) {
        int64_t t = 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(sched.T)));
        Tensor eps = Tensor::randn(z0s[i].shape(), rng);
        Tensor z_t = q_sample(z0s[i], t, eps, sched);
        Tensor pred = denoise_for(i, z_t, t);
        Tensor err = sub(eps, pred);
        Tensor l = sum_squares(err);
        total = total.defined() ? add(total, l) : l;
    }
    return mul_scalar(total, 1.0 / static_cast<double>(z0s.size()));
}

// ancestral DDPM reverse chain over an evenly strided subsequence of [1, T]
inline Tensor sample(const NoiseSchedule& sched, const DenoiseFn& denoise, const Shape& latent_shape,
                     int64_t steps, Rng& rng) {
    if (steps < 1 || steps > sched.T)
        throw ConfigMismatch("steps must be in [1, T=" + std::to_string(sched.T) + "]");
    std::vector<int64_t> ts(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; i++)
        ts[static_cast<size_t>(i)] = (i + 1) * sched.T / steps;  // ascending, ends at T
    Tensor z = Tensor::randn(latent_shape, rng);
    for (int64_t i = steps - 1; i >= 0; i--) {
        int64_t t = ts[static_cast<size_t>(i)];
        int64_t t_prev = (i == 0) ? 0 : ts[static_cast<size_t>(i - 1)];
        double ab_t = sched.alpha_bar(t);
        double ab_prev = sched.alpha_bar(t_prev);
        Tensor eps_hat = denoise(z, t).detach();
        // predicted z0, clipped-free posterior q(z_prev | z_t, z0)
        Tensor z0 = mul_scalar(sub(z, mul_scalar(eps_hat, std::sqrt(1.0 - ab_t))),
                               1.0 / std::sqrt(ab_t));
        double alpha_eff = ab_t / ab_prev;
        double beta_eff = 1.0 - alpha_eff;
        double c0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_t);
        double ct = std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t);
        Tensor mean = add(mul_scalar(z0, c0), mul_scalar(z, ct));
        if (t_prev > 0) {
            double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
            Tensor noise = Tensor::randn(latent_shape, rng);
            z = add(mean, mul_scalar(noise, std::sqrt(var)));
        } else {
            z = mean;
        }
    }
    return z.detach();
}

}  // namespace sesa

#endif  // SESA_BACKBONE_HPP
