#ifndef SESA_PIPELINE_HPP
#define SESA_PIPELINE_HPP

// Ties the frozen backbone, control branch, structural fusion and attention
// enhancement into one controllable denoiser.

#include "sesa/backbone.hpp"
#include "sesa/control.hpp"
#include "sesa/enhance.hpp"
#include "sesa/fusion.hpp"

#include <optional>
#include <string>

namespace sesa {

struct PipelineOptions {
    FusionConfig fusion;
    double hand_bias_alpha = 2.0;
    IndexRule index_rule = IndexRule::Union;
    bool control_enabled = true;
};

struct Pipeline {
    Denoiser backbone;
    ControlBranch control;
    PipelineOptions opts;

    static Pipeline create(const DenoiserConfig& cfg, const PipelineOptions& opts, Rng& rng) {
        Pipeline p;
        p.backbone = Denoiser::create(cfg, rng);
        p.control = ControlBranch::create_from(p.backbone, rng);
        p.opts = opts;
        freeze_backbone(p.backbone);
        return p;
    }

    struct Prompt {
        TextEmbedding ct;
        BiasSpec bias;
    };

    // token indices from tagging, clipped to the encoded (possibly truncated)
    // token count
    Prompt prepare_prompt(const std::string& text) const {
        Prompt p;
        p.ct = backbone.text.encode(text);
        TaggedPrompt tagged = tag_hand_tokens(text, opts.index_rule);
        p.bias.alpha = opts.hand_bias_alpha;
        int64_t n = static_cast<int64_t>(p.ct.tokens.size());
        for (int64_t i : tagged.index_list)
            if (i < n) p.bias.index_list.insert(i);
        return p;
    }

    // full controlled denoise step; control_out, when given, receives the
    // recorded attention maps for inspection
    Tensor denoise(const Tensor& z_t, int64_t t, const Prompt& prompt, const Tensor& c_f,
                   ControlOutput* control_out = nullptr) const {
        if (!opts.control_enabled) return backbone.denoise(z_t, t, prompt.ct, nullptr);
        ControlOutput co = control.forward(z_t, t, prompt.ct, c_f, &prompt.bias);
        Injection inj = fuse_and_inject(co, control, opts.fusion);
        if (control_out) *control_out = co;
        return backbone.denoise(z_t, t, prompt.ct, &inj);
    }

    NamedParams trainable_params() const { return control.params(); }

    NamedParams all_params() const {
        NamedParams out = backbone.params();
        NamedParams cp = control.params();
        out.insert(out.end(), cp.begin(), cp.end());
        return out;
    }
};

}  // namespace sesa

#endif  // SESA_PIPELINE_HPP
