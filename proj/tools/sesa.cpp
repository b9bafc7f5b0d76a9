// sesa: command-line front end for dataset generation, training, sampling,
// evaluation, semantics extraction, attention dumps and benchmarks.

#define SESA_ENABLE_HTTP
#include "sesa/harness.hpp"
#include "sesa/semantics.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>

using namespace sesa;

namespace {

// exit codes: 0 ok, 2 usage, 3 data error, 4 numeric error, 5 network error
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitNetwork = 5;

int classify(const Error& e) {
    if (dynamic_cast<const ConfigMismatch*>(&e) || dynamic_cast<const InvalidRange*>(&e))
        return kExitUsage;
    if (dynamic_cast<const NanLoss*>(&e) || dynamic_cast<const NumericalInstability*>(&e) ||
        dynamic_cast<const NonFiniteInput*>(&e) || dynamic_cast<const NotScalar*>(&e))
        return kExitNumeric;
    if (dynamic_cast<const NetworkError*>(&e) || dynamic_cast<const TimeoutError*>(&e) ||
        dynamic_cast<const EmptyResponse*>(&e) || dynamic_cast<const MalformedJson*>(&e) ||
        dynamic_cast<const MissingField*>(&e))
        return kExitNetwork;
    return kExitData;
}

FewShotExample default_few_shot() {
    FewShotExample ex;
    ex.input =
        "In the image, the person is holding a pink umbrella with one hand and appears to be "
        "smiling while looking towards the camera...";
    ex.output = R"({
  "key_entities": "person, umbrella",
  "pose": "standing casually",
  "action": "appears to be smiling while looking towards the camera",
  "hand_action": "One hand is holding a pink umbrella and wraps around the handle...",
  "env": "possibly at sunny beach"
})";
    return ex;
}

struct GlobalOpts {
    std::string config_path;
    std::optional<uint64_t> seed;

    RunConfig load() const {
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed) cfg.seed = *seed;
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sesa: controllable hand-image generation toolkit"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "key=value config file");
    uint64_t seed_val = 0;
    auto* seed_opt = app.add_option("--seed", seed_val, "run seed (overrides train.seed)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic silhouette dataset");
    int64_t gen_count = 16;
    std::string gen_out = "data";
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "train the control branch");
    std::string tr_data, tr_out = "model.ckpt", tr_resume;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "checkpoint path");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    // shared sampling/eval knobs
    auto add_override_flags = [](CLI::App* cmd, std::string& fusion, double& alpha,
                                 std::string& rule) {
        cmd->add_option("--fusion", fusion, "on|off: structural fusion");
        cmd->add_option("--hand-bias-alpha", alpha, "cross-attention hand bias strength");
        cmd->add_option("--index-rule", rule, "union|intersection token index rule");
    };
    auto overrides_from = [](const std::string& fusion, double alpha, const std::string& rule) {
        std::vector<std::pair<std::string, std::string>> ov;
        if (!fusion.empty()) {
            if (fusion != "on" && fusion != "off")
                throw ConfigMismatch("--fusion expects on|off, got '" + fusion + "'");
            ov.emplace_back("fusion.enabled", fusion == "on" ? "true" : "false");
        }
        if (alpha >= 0.0) ov.emplace_back("enhance.alpha", std::to_string(alpha));
        if (!rule.empty()) ov.emplace_back("enhance.index_rule", rule);
        return ov;
    };

    // sample
    auto* sa = app.add_subcommand("sample", "sample an image from a checkpoint");
    std::string sa_ckpt, sa_prompt, sa_cond, sa_out = "sample.ppm";
    std::string sa_fusion, sa_rule, sa_attn_prefix;
    double sa_alpha = -1.0;
    int64_t sa_steps = 0;
    bool sa_extract = false;
    std::string sa_image, sa_captioner, sa_extractor;
    sa->add_option("--checkpoint", sa_ckpt, "model checkpoint")->required();
    sa->add_option("--prompt", sa_prompt, "prompt text");
    sa->add_option("--condition", sa_cond, "condition silhouette (PGM/PPM)");
    sa->add_option("--out", sa_out, "output image path");
    sa->add_option("--steps", sa_steps, "sampling steps (default: config)");
    add_override_flags(sa, sa_fusion, sa_alpha, sa_rule);
    sa->add_option("--dump-cross-attn", sa_attn_prefix,
                   "write attention-map heatmaps with this path prefix");
    sa->add_flag("--extract-semantics", sa_extract,
                 "derive the prompt from --image via the semantics pipeline");
    sa->add_option("--image", sa_image, "source image for --extract-semantics");
    sa->add_option("--captioner-url", sa_captioner, "captioner endpoint");
    sa->add_option("--extractor-url", sa_extractor, "extractor endpoint");

    // eval
    auto* ev = app.add_subcommand("eval", "compute metrics over image directories");
    std::string ev_gen, ev_ref, ev_out = "report.json", ev_gen_crops, ev_ref_crops;
    ev->add_option("--generated", ev_gen, "generated image directory")->required();
    ev->add_option("--reference", ev_ref, "reference image directory")->required();
    ev->add_option("--out", ev_out, "report path");
    ev->add_option("--gen-crops", ev_gen_crops, "JSON-lines crop boxes for generated images");
    ev->add_option("--ref-crops", ev_ref_crops, "JSON-lines crop boxes for reference images");

    // extract-semantics
    auto* ex = app.add_subcommand("extract-semantics", "build a caption/semantics manifest");
    std::vector<std::string> ex_images;
    std::string ex_captioner, ex_extractor, ex_out = "semantics.jsonl";
    ex->add_option("--images", ex_images, "input image files")->required();
    ex->add_option("--captioner-url", ex_captioner, "captioner endpoint")->required();
    ex->add_option("--extractor-url", ex_extractor, "extractor endpoint")->required();
    ex->add_option("--out", ex_out, "manifest path");

    // dump-attn
    auto* da = app.add_subcommand("dump-attn", "dump fused attention heatmaps for one step");
    std::string da_ckpt, da_prompt = "a hand", da_cond, da_prefix = "attn";
    int64_t da_t = 1;
    da->add_option("--checkpoint", da_ckpt, "model checkpoint")->required();
    da->add_option("--prompt", da_prompt, "prompt text");
    da->add_option("--condition", da_cond, "condition silhouette");
    da->add_option("--t", da_t, "diffusion step");
    da->add_option("--out-prefix", da_prefix, "output path prefix");

    // bench
    auto* be = app.add_subcommand("bench", "time a denoise forward and a training step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);  // prints help/usage
        return rc == 0 ? 0 : kExitUsage;
    }

    if (seed_opt->count()) g.seed = seed_val;

    try {
        RunConfig cfg = g.load();

        if (gen->parsed()) {
            auto samples = gen_synthetic(gen_count, cfg.seed, cfg.model.image_extent);
            std::string manifest = write_synthetic(samples, gen_out);
            std::cout << "wrote " << samples.size() << " samples, manifest " << manifest << "\n";
        } else if (tr->parsed()) {
            TrainResult res = train(cfg, tr_data, tr_out, tr_resume, std::clog);
            std::cout << "trained " << res.epochs_run << " epochs, checkpoint " << tr_out << "\n";
        } else if (sa->parsed()) {
            auto ov = overrides_from(sa_fusion, sa_alpha, sa_rule);
            LoadedCheckpoint lc = load_checkpoint(sa_ckpt, ov);
            SampleRequest req;
            if (sa_extract) {
                if (sa_image.empty() || sa_captioner.empty() || sa_extractor.empty())
                    throw ConfigMismatch(
                        "--extract-semantics needs --image, --captioner-url and "
                        "--extractor-url");
                Client client;
                ModelEndpoint cap_ep;
                cap_ep.base_url = sa_captioner;
                cap_ep.role = EndpointRole::Captioner;
                ModelEndpoint ext_ep;
                ext_ep.base_url = sa_extractor;
                ext_ep.role = EndpointRole::Extractor;
                std::string cap = caption(sa_image, cap_ep, client);
                SemanticsRecord rec = extract(cap, default_few_shot(), ext_ep, client);
                req.prompt = compose(rec).final_text;
                std::cout << "extracted prompt: " << req.prompt << "\n";
            } else {
                if (sa_prompt.empty()) throw ConfigMismatch("sample needs --prompt (or --extract-semantics)");
                req.prompt = sa_prompt;
            }
            req.condition_path = sa_cond;
            req.seed = cfg.seed;
            req.steps = sa_steps;
            SampleResult res = run_sample(lc, req);
            write_sample(res, sa_out);
            if (!sa_attn_prefix.empty()) {
                // rerun one controlled forward to materialize the maps
                Pipeline::Prompt prompt = lc.pipeline.prepare_prompt(req.prompt);
                ConditionImage cond;
                if (sa_cond.empty())
                    cond.image = Image::filled(lc.cfg.model.condition_channels,
                                               lc.cfg.model.image_extent,
                                               lc.cfg.model.image_extent);
                else cond = sesa::detail::load_condition(sa_cond, lc.cfg.model);
                Tensor c_f = lc.pipeline.control.encode_condition(cond);
                ControlOutput co = lc.pipeline.control.forward(
                    Tensor::zeros(Shape{lc.cfg.model.latent_channels, lc.cfg.model.latent_extent,
                                        lc.cfg.model.latent_extent}),
                    1, prompt.ct, c_f, &prompt.bias);
                for (const auto& [r, m] : co.self_maps)
                    write_pnm(sa_attn_prefix + "_self_" + std::to_string(r) + ".pgm", heatmap(m));
                for (size_t i = 0; i < co.cross_maps.size(); i++)
                    write_pnm(sa_attn_prefix + "_cross_" + std::to_string(i) + ".pgm",
                              heatmap(co.cross_maps[i]));
            }
            std::cout << "wrote " << sa_out << "\n";
        } else if (ev->parsed()) {
            MetricReport rep = eval_dirs(ev_gen, ev_ref, ev_gen_crops, ev_ref_crops);
            write_report(rep, ev_out);
            std::cout << rep.to_json().dump(2) << "\n";
        } else if (ex->parsed()) {
            ModelEndpoint cap_ep;
            cap_ep.base_url = ex_captioner;
            cap_ep.role = EndpointRole::Captioner;
            ModelEndpoint ext_ep;
            ext_ep.base_url = ex_extractor;
            ext_ep.role = EndpointRole::Extractor;
            Client client;
            auto entries = build_dataset(ex_images, cap_ep, ext_ep, default_few_shot(), ex_out,
                                         client, static_cast<int>(cfg.semantics_parallelism));
            int ok = 0;
            for (const auto& e : entries) ok += (e.status == "ok") ? 1 : 0;
            std::cout << "wrote " << ex_out << " (" << ok << "/" << entries.size() << " ok)\n";
        } else if (da->parsed()) {
            LoadedCheckpoint lc = load_checkpoint(da_ckpt);
            NamedParams all = lc.pipeline.all_params();
            freeze_params(all);
            Pipeline::Prompt prompt = lc.pipeline.prepare_prompt(da_prompt);
            ConditionImage cond;
            if (da_cond.empty())
                cond.image = Image::filled(lc.cfg.model.condition_channels,
                                           lc.cfg.model.image_extent, lc.cfg.model.image_extent);
            else cond = sesa::detail::load_condition(da_cond, lc.cfg.model);
            Tensor c_f = lc.pipeline.control.encode_condition(cond);
            Rng rng(cfg.seed);
            Tensor z = Tensor::randn(Shape{lc.cfg.model.latent_channels,
                                           lc.cfg.model.latent_extent,
                                           lc.cfg.model.latent_extent}, rng);
            ControlOutput co = lc.pipeline.control.forward(z, da_t, prompt.ct, c_f, &prompt.bias);
            FusedFeatures fused = fuse_features(co, lc.cfg.fusion);
            for (const auto& [r, m] : co.self_maps)
                write_pnm(da_prefix + "_self_" + std::to_string(r) + ".pgm", heatmap(m));
            if (fused.psi_prime.defined())
                write_pnm(da_prefix + "_fused.pgm", heatmap(fused.psi_prime));
            std::cout << "wrote heatmaps with prefix " << da_prefix << "\n";
        } else if (be->parsed()) {
            Rng rng(cfg.seed);
            Pipeline p = Pipeline::create(cfg.model, cfg.pipeline_options(), rng);
            Pipeline::Prompt prompt = p.prepare_prompt("a hand holding a cup");
            ConditionImage cond;
            cond.image = Image::filled(cfg.model.condition_channels, cfg.model.image_extent,
                                       cfg.model.image_extent, 0.5);
            Tensor c_f = p.control.encode_condition(cond);
            Rng zrng(1);
            Tensor z = Tensor::randn(Shape{cfg.model.latent_channels, cfg.model.latent_extent,
                                           cfg.model.latent_extent}, zrng);
            auto t0 = std::chrono::steady_clock::now();
            Tensor out = p.denoise(z, 1, prompt, c_f);
            auto t1 = std::chrono::steady_clock::now();
            backward(sum_squares(out));
            auto t2 = std::chrono::steady_clock::now();
            auto ms = [](auto a, auto b) {
                return std::chrono::duration<double, std::milli>(b - a).count();
            };
            std::cout << "forward " << ms(t0, t1) << " ms, backward " << ms(t1, t2) << " ms\n";
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
