#ifndef SESA_HARNESS_HPP
#define SESA_HARNESS_HPP

// End-to-end workflows: training the control branch on a synthetic dataset,
// checkpoint persistence with an embedded config snapshot, sampling, and
// metric evaluation over image directories.

#include "sesa/config.hpp"
#include "sesa/metrics.hpp"
#include "sesa/optimizer.hpp"
#include "sesa/pipeline.hpp"
#include "sesa/serialize.hpp"
#include "sesa/synthetic.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace sesa {

namespace detail {

// per-epoch stream derived only from (seed, epoch) so a resumed run draws
// exactly the same sequence as an uninterrupted one
inline Rng epoch_rng(uint64_t seed, int64_t epoch) {
    uint64_t h = fnv1a(&seed, sizeof(seed));
    uint64_t e = static_cast<uint64_t>(epoch);
    h = fnv1a(&e, sizeof(e), h);
    return Rng(h);
}

inline Tensor target_to_latent(const Image& target, const DenoiserConfig& cfg) {
    if (target.height != cfg.image_extent || target.width != cfg.image_extent)
        throw ShapeMismatch("target image " + std::to_string(target.height) + "x" +
                            std::to_string(target.width) + ", configured extent " +
                            std::to_string(cfg.image_extent));
    Image im = target;
    if (cfg.latent_channels == 1) im = to_gray(im);
    else if (im.channels != cfg.latent_channels)
        throw ConfigMismatch("latent_channels " + std::to_string(cfg.latent_channels) +
                             " incompatible with " + std::to_string(im.channels) +
                             "-channel targets");
    int64_t factor = cfg.image_extent / cfg.latent_extent;
    return avgpool(im, factor).to_tensor();
}

inline ConditionImage load_condition(const std::string& path, const DenoiserConfig& cfg) {
    Image im = to_gray(read_pnm(path));
    if (im.height != cfg.image_extent || im.width != cfg.image_extent)
        im = resize_bilinear(im, cfg.image_extent, cfg.image_extent);
    ConditionImage ci;
    ci.image = std::move(im);
    return ci;
}

}  // namespace detail

// ---- checkpointing ----------------------------------------------------

inline Tensor text_tensor(const std::string& s) {
    std::vector<double> codes(s.size());
    for (size_t i = 0; i < s.size(); i++) codes[i] = static_cast<unsigned char>(s[i]);
    return Tensor(Shape{static_cast<int64_t>(s.size())}, codes);
}

inline std::string tensor_text(const Tensor& t) {
    std::string s(static_cast<size_t>(t.numel()), '\0');
    for (int64_t i = 0; i < t.numel(); i++) s[static_cast<size_t>(i)] = static_cast<char>(t.at(i));
    return s;
}

inline void save_checkpoint(const std::string& path, const Pipeline& pipeline, const AdamW& opt,
                            int64_t epoch, const RunConfig& cfg) {
    std::map<std::string, Tensor> bundle;
    for (const auto& [name, t] : pipeline.all_params()) bundle["param." + name] = t;
    opt.export_state(bundle, "opt");
    bundle["epoch"] = Tensor::full(Shape{1}, static_cast<double>(epoch));
    bundle["__config__"] = text_tensor(dump_config(cfg));
    save_tensors(path, bundle);
}

struct LoadedCheckpoint {
    RunConfig cfg;
    Pipeline pipeline;
    AdamW opt;
    int64_t epoch = 0;
};

// config_overrides are applied to the snapshot before the model is rebuilt;
// they may only change run behavior (fusion, alpha, ...), not parameter shapes
inline LoadedCheckpoint load_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& config_overrides = {}) {
    std::map<std::string, Tensor> bundle = load_tensors(path);
    auto cfg_it = bundle.find("__config__");
    if (cfg_it == bundle.end()) throw ConfigMismatch("checkpoint has no config snapshot");
    LoadedCheckpoint out;
    out.cfg = parse_config_text(tensor_text(cfg_it->second));
    for (const auto& [k, v] : config_overrides) apply_config_entry(out.cfg, k, v);
    out.cfg.validate();

    Rng rng(out.cfg.seed);
    out.pipeline = Pipeline::create(out.cfg.model, out.cfg.pipeline_options(), rng);
    for (auto& [name, t] : out.pipeline.all_params()) {
        auto it = bundle.find("param." + name);
        if (it == bundle.end())
            throw ConfigMismatch("checkpoint missing tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw ConfigMismatch("tensor '" + name + "' has shape " +
                                 shape_str(it->second.shape()) + ", model expects " +
                                 shape_str(t.shape()));
        const_cast<Tensor&>(t).mutable_data() = it->second.data();
    }
    AdamWConfig oc;
    oc.lr = out.cfg.lr;
    oc.weight_decay = out.cfg.weight_decay;
    out.opt = AdamW(oc);
    out.opt.import_state(bundle, "opt");
    auto ep_it = bundle.find("epoch");
    if (ep_it != bundle.end()) out.epoch = static_cast<int64_t>(ep_it->second.at(0));
    return out;
}

// ---- training ----------------------------------------------------------

struct TrainResult {
    std::vector<double> epoch_losses;
    int64_t epochs_run = 0;
    std::string checkpoint_path;
};

struct TrainItem {
    Tensor z0;
    Pipeline::Prompt prompt;
    ConditionImage condition;
};

inline std::vector<TrainItem> prepare_items(const std::vector<DatasetItem>& items,
                                            const Pipeline& pipeline) {
    std::vector<TrainItem> out;
    for (const auto& it : items) {
        TrainItem ti;
        ti.z0 = detail::target_to_latent(read_pnm(it.target_path), pipeline.backbone.cfg);
        ti.prompt = pipeline.prepare_prompt(it.prompt);
        ti.condition = detail::load_condition(it.condition_path, pipeline.backbone.cfg);
        out.push_back(std::move(ti));
    }
    return out;
}

// one pass over the dataset; returns the mean per-sample loss
inline double train_epoch(Pipeline& pipeline, AdamW& opt, const std::vector<TrainItem>& items,
                          const NoiseSchedule& sched, const RunConfig& cfg, int64_t epoch) {
    Rng rng = detail::epoch_rng(cfg.seed, epoch);
    std::vector<size_t> order(items.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    for (size_t i = order.size(); i > 1; i--)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.next_below(i))]);

    NamedParams trainable = pipeline.trainable_params();
    double total = 0.0;
    int step = 0;
    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.batch)) {
        size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch));
        std::vector<Tensor> z0s;
        std::vector<const TrainItem*> batch;
        for (size_t i = lo; i < hi; i++) {
            batch.push_back(&items[order[i]]);
            z0s.push_back(items[order[i]].z0);
        }
        AdamW::zero_grads(trainable);
        Tensor loss = training_loss(z0s, sched, [&](size_t i, const Tensor& z_t, int64_t t) {
            const TrainItem& it = *batch[i];
            Tensor c_f = pipeline.control.encode_condition(it.condition);
            return pipeline.denoise(z_t, t, it.prompt, c_f);
        }, rng);
        double v = loss.item();
        if (!std::isfinite(v)) throw NanLoss(static_cast<int>(epoch), step);
        backward(loss);
        opt.step(trainable);
        total += v * static_cast<double>(z0s.size());
        step++;
    }
    return items.empty() ? 0.0 : total / static_cast<double>(items.size());
}

inline TrainResult train(const RunConfig& cfg, const std::string& dataset_dir,
                         const std::string& checkpoint_path,
                         const std::string& resume_from = "", std::ostream& log = std::clog) {
    RunConfig run = cfg;
    run.validate();
    Pipeline pipeline;
    AdamW opt;
    int64_t start_epoch = 0;
    if (!resume_from.empty()) {
        LoadedCheckpoint lc = load_checkpoint(resume_from);
        run = lc.cfg;
        run.epochs = cfg.epochs;  // the resumed run may extend training
        pipeline = std::move(lc.pipeline);
        opt = std::move(lc.opt);
        start_epoch = lc.epoch;
    } else {
        Rng rng(run.seed);
        pipeline = Pipeline::create(run.model, run.pipeline_options(), rng);
        AdamWConfig oc;
        oc.lr = run.lr;
        oc.weight_decay = run.weight_decay;
        opt = AdamW(oc);
    }

    std::vector<TrainItem> items = prepare_items(load_manifest(dataset_dir), pipeline);
    NoiseSchedule sched = make_schedule(run.schedule_steps, run.beta_start, run.beta_end);

    TrainResult res;
    res.checkpoint_path = checkpoint_path;
    for (int64_t epoch = start_epoch; epoch < run.epochs; epoch++) {
        double loss = train_epoch(pipeline, opt, items, sched, run, epoch);
        res.epoch_losses.push_back(loss);
        res.epochs_run++;
        log << "epoch " << epoch << " loss " << loss << "\n";
    }
    save_checkpoint(checkpoint_path, pipeline, opt, run.epochs, run);
    return res;
}

// ---- sampling ----------------------------------------------------------

struct SampleRequest {
    std::string prompt;
    std::string condition_path;  // empty: all-zero condition image
    uint64_t seed = 0;
    int64_t steps = 0;  // 0: config default
};

struct SampleResult {
    Image image;
    nlohmann::json sidecar;
};

inline SampleResult run_sample(const LoadedCheckpoint& lc, const SampleRequest& req) {
    const RunConfig& cfg = lc.cfg;
    const Pipeline& p = lc.pipeline;
    // inference only: detach parameters so sampling builds no autodiff graph
    NamedParams all = p.all_params();
    freeze_params(all);

    Pipeline::Prompt prompt = p.prepare_prompt(req.prompt);
    ConditionImage cond;
    if (req.condition_path.empty()) {
        cond.image = Image::filled(cfg.model.condition_channels, cfg.model.image_extent,
                                   cfg.model.image_extent);
    } else {
        cond = detail::load_condition(req.condition_path, cfg.model);
    }
    Tensor c_f = p.control.encode_condition(cond);

    int64_t steps = req.steps > 0 ? req.steps : cfg.sample_steps;
    NoiseSchedule sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
    Rng rng(req.seed);
    Shape latent{cfg.model.latent_channels, cfg.model.latent_extent, cfg.model.latent_extent};
    Tensor z = sample(sched, [&](const Tensor& z_t, int64_t t) {
        return p.denoise(z_t, t, prompt, c_f);
    }, latent, steps, rng);

    SampleResult out;
    Image latent_im = Image::from_tensor(z);
    out.image = upsample_nearest(latent_im, cfg.model.image_extent / cfg.model.latent_extent);
    out.sidecar["prompt"] = req.prompt;
    out.sidecar["seed"] = req.seed;
    out.sidecar["steps"] = steps;
    out.sidecar["alpha"] = cfg.enhance_alpha;
    out.sidecar["fusion"] = cfg.fusion.enabled;
    out.sidecar["fusion_normalize"] = cfg.fusion.normalize;
    out.sidecar["control"] = cfg.control_enabled;
    out.sidecar["condition"] = req.condition_path;
    return out;
}

inline void write_sample(const SampleResult& res, const std::string& out_path) {
    write_pnm(out_path, res.image);
    std::ofstream side(out_path + ".json", std::ios::binary);
    if (!side) throw IoError("cannot write sidecar for '" + out_path + "'");
    side << res.sidecar.dump(2) << "\n";
}

// fraction of pixels where the thresholded sampled silhouette disagrees with
// the condition silhouette; the toy alignment gauge
inline double silhouette_disagreement(const Image& sampled, const Image& condition) {
    Image a = to_gray(sampled), b = to_gray(condition);
    if (a.height != b.height || a.width != b.width)
        throw ShapeMismatch("silhouette_disagreement: extents differ");
    double acc = 0.0;
    for (size_t i = 0; i < a.pixels.size(); i++) {
        bool fa = a.pixels[i] > 0.5, fb = b.pixels[i] > 0.5;
        acc += (fa != fb) ? 1.0 : 0.0;
    }
    return acc / static_cast<double>(a.pixels.size());
}

// ---- evaluation ----------------------------------------------------------

inline std::vector<std::string> list_images(const std::string& dir) {
    std::vector<std::string> out;
    if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        std::string ext = e.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm") out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline CropSpec load_crops(const std::string& path, size_t expected) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open crops '" + path + "'");
    CropSpec out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back({j.at("x").get<int64_t>(), j.at("y").get<int64_t>(),
                       j.at("w").get<int64_t>(), j.at("h").get<int64_t>()});
    }
    if (out.size() != expected)
        throw ShapeMismatch("crops file has " + std::to_string(out.size()) + " boxes for " +
                            std::to_string(expected) + " images");
    return out;
}

inline MetricReport eval_dirs(const std::string& generated_dir, const std::string& reference_dir,
                              const std::string& gen_crops_path = "",
                              const std::string& ref_crops_path = "") {
    ToyEmbedder emb;
    auto load_dir = [&](const std::string& dir) {
        std::vector<Image> ims;
        for (const auto& p : list_images(dir)) ims.push_back(read_pnm(p));
        if (ims.size() < 2) throw TooFewSamples("need at least 2 images in '" + dir + "'");
        return ims;
    };
    std::vector<Image> gen = load_dir(generated_dir), ref = load_dir(reference_dir);
    FeatureSet fg = embed_images(gen, emb), fr = embed_images(ref, emb);
    MetricReport report;
    report.samples = static_cast<int64_t>(gen.size());
    report.fid = fid(fg, fr);
    report.kid = kid(fg, fr);
    if (!gen_crops_path.empty() && !ref_crops_path.empty()) {
        FeatureSet hg = crop_features(gen, load_crops(gen_crops_path, gen.size()), emb);
        FeatureSet hr = crop_features(ref, load_crops(ref_crops_path, ref.size()), emb);
        report.fid_h = fid(hg, hr);
        report.kid_h = kid(hg, hr);
    }
    return report;
}

inline void write_report(const MetricReport& report, const std::string& out_path) {
    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw IoError("cannot write report '" + out_path + "'");
    f << report.to_json().dump(2) << "\n";
}

}  // namespace sesa

#endif  // SESA_HARNESS_HPP
