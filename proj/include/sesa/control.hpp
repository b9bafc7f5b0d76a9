#ifndef SESA_CONTROL_HPP
#define SESA_CONTROL_HPP

// Trainable control branch: condition encoder, a trainable copy of the
// backbone's encoder+middle, and the zero-convolution injection contract.

#include "sesa/backbone.hpp"
#include "sesa/common.hpp"
#include "sesa/image.hpp"
#include "sesa/layers.hpp"

#include <map>
#include <string>
#include <vector>

namespace sesa {

enum class ConditionKind { HandMeshRender, SyntheticSilhouette };

struct ConditionImage {
    Image image;  // [C x H x W], values in [0,1]
    ConditionKind kind = ConditionKind::SyntheticSilhouette;
};

struct ControlOutput {
    std::vector<Tensor> skips;              // f_c per encoder skip level
    Tensor mid;                             // middle-block feature
    std::map<int64_t, Tensor> self_maps;    // psi_r keyed by resolution
    std::vector<Tensor> cross_maps;         // M_cross per cross-attention layer
    std::vector<int64_t> cross_resolutions;
    DenoiserConfig cfg;
};

// small condition network: stride-2 convolutions down to the latent extent,
// a stride-1 conv, then a zero conv so c_f == 0 at initialization
struct ConditionEncoder {
    std::vector<Conv2dLayer> downs;
    Conv2dLayer mix;
    Conv2dLayer zero;
    DenoiserConfig cfg;

    static ConditionEncoder create(const DenoiserConfig& cfg, Rng& rng) {
        ConditionEncoder e;
        e.cfg = cfg;
        int64_t extent = cfg.image_extent;
        int64_t c = cfg.condition_channels;
        const int64_t width = 8;
        while (extent > cfg.latent_extent) {
            e.downs.push_back(Conv2dLayer::create(c, width, 4, 2, 1, rng));
            c = width;
            extent /= 2;
        }
        e.mix = Conv2dLayer::create(c, width, 3, 1, 1, rng);
        e.zero = Conv2dLayer::zero(width, cfg.latent_channels, 3, 1, 1);
        return e;
    }

    Tensor forward(const ConditionImage& ci) const {
        if (ci.image.channels != cfg.condition_channels || ci.image.height != cfg.image_extent ||
            ci.image.width != cfg.image_extent)
            throw ShapeMismatch("condition image " + std::to_string(ci.image.channels) + "x" +
                                std::to_string(ci.image.height) + "x" +
                                std::to_string(ci.image.width) + ", configured extent " +
                                std::to_string(cfg.image_extent));
        Tensor x = ci.image.to_tensor();
        for (const auto& d : downs) x = silu(d.forward(x));
        x = silu(mix.forward(x));
        return zero.forward(x);
    }

    void collect(NamedParams& out, const std::string& prefix) const {
        for (size_t i = 0; i < downs.size(); i++)
            downs[i].collect(out, prefix + ".down" + std::to_string(i));
        mix.collect(out, prefix + ".mix");
        zero.collect(out, prefix + ".zero");
    }
};

struct ControlBranch {
    DenoiserConfig cfg;
    ConditionEncoder cond_enc;
    EncoderStack encoder;                // trainable copy of the backbone stack
    std::vector<Conv2dLayer> zero_skips; // 1x1 zero convs, one per skip level
    Conv2dLayer zero_mid;

    // trainable copy: structure from config, weights copied from the backbone
    static ControlBranch create_from(const Denoiser& backbone, Rng& rng) {
        ControlBranch c;
        c.cfg = backbone.cfg;
        c.cond_enc = ConditionEncoder::create(backbone.cfg, rng);
        c.encoder = EncoderStack::create(backbone.cfg, rng);
        NamedParams src, dst;
        backbone.encoder.collect(src, "");
        c.encoder.collect(dst, "");
        copy_params(src, dst);
        for (int64_t l = 0; l < backbone.cfg.levels(); l++) {
            int64_t ch = backbone.cfg.channels[static_cast<size_t>(l)];
            c.zero_skips.push_back(Conv2dLayer::zero(ch, ch, 1, 1, 0));
        }
        c.zero_mid = Conv2dLayer::zero(backbone.cfg.channels.back(), backbone.cfg.channels.back(),
                                       1, 1, 0);
        return c;
    }

    Tensor encode_condition(const ConditionImage& ci) const { return cond_enc.forward(ci); }

    // runs the trainable copy on z_t + c_f, recording attention maps and
    // applying the bias inside cross-attention layers
    ControlOutput forward(const Tensor& z_t, int64_t t, const TextEmbedding& ct, const Tensor& c_f,
                          const BiasSpec* bias) const {
        if (z_t.shape() != c_f.shape())
            throw ShapeMismatch("control_forward: z_t " + shape_str(z_t.shape()) + " vs c_f " +
                                shape_str(c_f.shape()));
        EncoderStack::State st = encoder.forward(add(z_t, c_f), t, ct, bias, true);
        ControlOutput out;
        out.skips = std::move(st.skips);
        out.mid = std::move(st.mid);
        out.self_maps = std::move(st.self_maps);
        out.cross_maps = std::move(st.cross_maps);
        out.cross_resolutions = std::move(st.cross_resolutions);
        out.cfg = cfg;
        return out;
    }

    // f' contributions: zero convolutions applied to the (refined) features
    Injection inject(const std::vector<Tensor>& skips, const Tensor& mid) const {
        if (skips.size() != zero_skips.size())
            throw LevelMismatch("inject: " + std::to_string(skips.size()) + " features for " +
                                std::to_string(zero_skips.size()) + " levels");
        Injection inj;
        for (size_t l = 0; l < skips.size(); l++)
            inj.skips.push_back(zero_skips[l].forward(skips[l]));
        inj.mid = zero_mid.forward(mid);
        return inj;
    }

    NamedParams params(const std::string& prefix = "control") const {
        NamedParams out;
        cond_enc.collect(out, prefix + ".cond");
        encoder.collect(out, prefix);
        for (size_t l = 0; l < zero_skips.size(); l++)
            zero_skips[l].collect(out, prefix + ".zero" + std::to_string(l));
        zero_mid.collect(out, prefix + ".zero_mid");
        return out;
    }
};

}  // namespace sesa

#endif  // SESA_CONTROL_HPP
