#ifndef SESA_SYNTHETIC_HPP
#define SESA_SYNTHETIC_HPP

// Procedural hand-silhouette dataset: a palm blob with 3..5 finger lobes,
// rendered both as a binary condition silhouette and composited over a
// textured background as the training target, plus a prompt from a small
// grammar, a mask and toy fingertip keypoints.

#include "sesa/common.hpp"
#include "sesa/image.hpp"
#include "sesa/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace sesa {

struct SyntheticParams {
    double cx = 0.5, cy = 0.5;  // palm center, unit coords
    double radius = 0.18;       // palm radius, unit
    double rotation = 0.0;      // base finger angle, radians
    int fingers = 5;            // 3..5
    double tex_phase = 0.0;     // background texture phase
    int verb_index = 0;
    int object_index = 0;
    int env_index = 0;
};

// declared foreground-fraction bounds for a rendered silhouette
constexpr double kSilhouetteMinFill = 0.02;
constexpr double kSilhouetteMaxFill = 0.45;

struct SyntheticSample {
    Image target;     // [3 x E x E]
    Image condition;  // [1 x E x E] silhouette
    Image mask;       // [1 x E x E] binary, == condition
    std::string prompt;
    Tensor keypoints;  // [(fingers+1) x 2], unit coords: palm center + fingertips
    SyntheticParams params;
};

namespace detail {

inline const std::vector<std::string>& prompt_verbs() {
    static const std::vector<std::string> v{"holding", "waving", "grabbing", "pointing",
                                            "reaching", "lifting"};
    return v;
}
inline const std::vector<std::string>& prompt_objects() {
    static const std::vector<std::string> v{"a cup", "an umbrella", "a camera", "a handle",
                                            "nothing"};
    return v;
}
inline const std::vector<std::string>& prompt_envs() {
    static const std::vector<std::string> v{"at the beach", "at a table", "outdoors", "indoors"};
    return v;
}

// signed distance test: palm disc plus finger capsules
inline bool inside_silhouette(const SyntheticParams& p, double x, double y) {
    double dx = x - p.cx, dy = y - p.cy;
    if (dx * dx + dy * dy <= p.radius * p.radius) return true;
    const double finger_len = 1.25 * p.radius;
    const double finger_w = 0.30 * p.radius;
    const double spread = 1.9;  // radians across all fingers
    for (int f = 0; f < p.fingers; f++) {
        double a = p.rotation - spread / 2 +
                   spread * (p.fingers == 1 ? 0.5 : static_cast<double>(f) / (p.fingers - 1));
        double bx = p.cx + std::cos(a) * p.radius;
        double by = p.cy + std::sin(a) * p.radius;
        double ex = p.cx + std::cos(a) * (p.radius + finger_len);
        double ey = p.cy + std::sin(a) * (p.radius + finger_len);
        // distance from (x,y) to segment (bx,by)-(ex,ey)
        double vx = ex - bx, vy = ey - by;
        double t = ((x - bx) * vx + (y - by) * vy) / (vx * vx + vy * vy);
        t = std::clamp(t, 0.0, 1.0);
        double px = bx + t * vx, py = by + t * vy;
        double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        if (d2 <= finger_w * finger_w) return true;
    }
    return false;
}

}  // namespace detail

inline SyntheticParams draw_params(Rng& rng) {
    SyntheticParams p;
    p.radius = 0.10 + 0.08 * rng.uniform();
    double margin = 2.5 * p.radius;  // keep fingertips inside the frame
    p.cx = margin + (1.0 - 2.0 * margin) * rng.uniform();
    p.cy = margin + (1.0 - 2.0 * margin) * rng.uniform();
    p.rotation = 2.0 * 3.14159265358979323846 * rng.uniform();
    p.fingers = 3 + static_cast<int>(rng.next_below(3));
    p.tex_phase = 2.0 * 3.14159265358979323846 * rng.uniform();
    p.verb_index = static_cast<int>(rng.next_below(detail::prompt_verbs().size()));
    p.object_index = static_cast<int>(rng.next_below(detail::prompt_objects().size()));
    p.env_index = static_cast<int>(rng.next_below(detail::prompt_envs().size()));
    return p;
}

inline std::string render_prompt(const SyntheticParams& p) {
    return "a hand " + detail::prompt_verbs()[static_cast<size_t>(p.verb_index)] + " " +
           detail::prompt_objects()[static_cast<size_t>(p.object_index)] + " " +
           detail::prompt_envs()[static_cast<size_t>(p.env_index)];
}

inline SyntheticSample render_sample(const SyntheticParams& p, int64_t extent) {
    SyntheticSample s;
    s.params = p;
    s.prompt = render_prompt(p);
    s.condition = Image::filled(1, extent, extent);
    s.target = Image::filled(3, extent, extent);
    for (int64_t y = 0; y < extent; y++)
        for (int64_t x = 0; x < extent; x++) {
            double ux = (x + 0.5) / static_cast<double>(extent);
            double uy = (y + 0.5) / static_cast<double>(extent);
            bool in = detail::inside_silhouette(p, ux, uy);
            s.condition.at(0, y, x) = in ? 1.0 : 0.0;
            // textured background, brighter flat tone for the hand region
            double tex = 0.25 + 0.15 * std::sin(8.0 * ux + p.tex_phase) *
                                    std::cos(6.0 * uy + 0.5 * p.tex_phase);
            s.target.at(0, y, x) = in ? 0.85 : tex;
            s.target.at(1, y, x) = in ? 0.75 : tex * 0.8;
            s.target.at(2, y, x) = in ? 0.65 : tex * 1.1;
        }
    s.mask = s.condition;
    s.keypoints = Tensor::zeros(Shape{p.fingers + 1, 2});
    auto& kd = s.keypoints.mutable_data();
    kd[0] = p.cx;
    kd[1] = p.cy;
    const double spread = 1.9;
    const double tip = p.radius + 1.25 * p.radius;
    for (int f = 0; f < p.fingers; f++) {
        double a = p.rotation - spread / 2 +
                   spread * (p.fingers == 1 ? 0.5 : static_cast<double>(f) / (p.fingers - 1));
        kd[static_cast<size_t>(2 * (f + 1))] = p.cx + std::cos(a) * tip;
        kd[static_cast<size_t>(2 * (f + 1) + 1)] = p.cy + std::sin(a) * tip;
    }
    return s;
}

inline double foreground_fraction(const Image& silhouette) {
    double acc = 0.0;
    for (double v : silhouette.pixels) acc += (v > 0.5) ? 1.0 : 0.0;
    return acc / static_cast<double>(silhouette.pixels.size());
}

inline std::vector<SyntheticSample> gen_synthetic(int64_t count, uint64_t seed, int64_t extent) {
    Rng rng(seed);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; i++) out.push_back(render_sample(draw_params(rng), extent));
    return out;
}

// on-disk layout: NNNN_target.ppm, NNNN_cond.pgm, NNNN_mask.pgm + manifest.jsonl
inline std::string write_synthetic(const std::vector<SyntheticSample>& samples,
                                   const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::filesystem::path dir(out_dir);
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw IoError("cannot open manifest in '" + out_dir + "'");
    char name[32];
    for (size_t i = 0; i < samples.size(); i++) {
        const SyntheticSample& s = samples[i];
        std::snprintf(name, sizeof(name), "%04zu", i);
        std::string stem(name);
        write_pnm((dir / (stem + "_target.ppm")).string(), s.target);
        write_pnm((dir / (stem + "_cond.pgm")).string(), s.condition);
        write_pnm((dir / (stem + "_mask.pgm")).string(), s.mask);
        nlohmann::json j;
        j["target"] = stem + "_target.ppm";
        j["condition"] = stem + "_cond.pgm";
        j["mask"] = stem + "_mask.pgm";
        j["prompt"] = s.prompt;
        nlohmann::json kp = nlohmann::json::array();
        for (int64_t k = 0; k < s.keypoints.numel(); k++) kp.push_back(s.keypoints.at(k));
        j["keypoints"] = kp;
        manifest << j.dump() << "\n";
    }
    if (!manifest) throw IoError("manifest write failed in '" + out_dir + "'");
    return (dir / "manifest.jsonl").string();
}

struct DatasetItem {
    std::string target_path, condition_path, mask_path, prompt;
    Tensor keypoints;  // [J x 2]
};

inline std::vector<DatasetItem> load_manifest(const std::string& dir) {
    std::filesystem::path base(dir);
    std::ifstream f(base / "manifest.jsonl");
    if (!f) throw IoError("cannot open manifest in '" + dir + "'");
    std::vector<DatasetItem> items;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad manifest line " + std::to_string(items.size() + 1) + ": " +
                          e.what());
        }
        DatasetItem it;
        it.target_path = (base / j.at("target").get<std::string>()).string();
        it.condition_path = (base / j.at("condition").get<std::string>()).string();
        it.mask_path = (base / j.at("mask").get<std::string>()).string();
        it.prompt = j.at("prompt").get<std::string>();
        std::vector<double> kp = j.at("keypoints").get<std::vector<double>>();
        it.keypoints = Tensor(Shape{static_cast<int64_t>(kp.size()) / 2, 2}, kp);
        items.push_back(std::move(it));
    }
    return items;
}

// square crop centered on the mask bounding box (with margin), applied
// identically to the image, then resized to the training extent
struct CropTransform {
    int64_t x = 0, y = 0, side = 0;
};

inline CropTransform mask_crop_box(const Image& mask, double margin) {
    int64_t x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
    for (int64_t y = 0; y < mask.height; y++)
        for (int64_t x = 0; x < mask.width; x++)
            if (mask.at(0, y, x) > 0.5) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) throw EmptyMask("mask has no foreground pixels");
    double cx = (x0 + x1 + 1) / 2.0, cy = (y0 + y1 + 1) / 2.0;
    auto side = static_cast<int64_t>(
        std::ceil(std::max(x1 - x0 + 1, y1 - y0 + 1) * (1.0 + margin)));
    side = std::min(side, std::min(mask.width, mask.height));
    CropTransform t;
    t.side = side;
    t.x = std::clamp(static_cast<int64_t>(std::llround(cx - side / 2.0)), int64_t{0},
                     mask.width - side);
    t.y = std::clamp(static_cast<int64_t>(std::llround(cy - side / 2.0)), int64_t{0},
                     mask.height - side);
    return t;
}

inline Image apply_crop(const Image& im, const CropTransform& t, int64_t out_extent) {
    return resize_bilinear(crop(im, t.x, t.y, t.side, t.side), out_extent, out_extent);
}

inline std::pair<Image, Image> preprocess_crop(const Image& image, const Image& mask,
                                               int64_t out_extent, double margin = 0.2) {
    if (mask.channels != 1 || mask.height != image.height || mask.width != image.width)
        throw ShapeMismatch("preprocess_crop: mask must be single-channel and image-sized");
    CropTransform t = mask_crop_box(mask, margin);
    return {apply_crop(image, t, out_extent), apply_crop(mask, t, out_extent)};
}

}  // namespace sesa

#endif  // SESA_SYNTHETIC_HPP
