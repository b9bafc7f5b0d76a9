#ifndef SESA_METRICS_HPP
#define SESA_METRICS_HPP

// Generation-quality metrics on feature sets, crops, detector confidences and
// keypoints: fid, kid, cropped variants, hand confidence, keypoint mse.

#include "sesa/common.hpp"
#include "sesa/image.hpp"
#include "sesa/serialize.hpp"
#include "sesa/tensor.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace sesa {

struct FeatureSet {
    Tensor vectors;  // [n x d]
    std::string source;

    int64_t n() const { return vectors.dim(0); }
    int64_t d() const { return vectors.dim(1); }
};

namespace detail {

inline void check_pair(const FeatureSet& a, const FeatureSet& b, int64_t min_n) {
    if (a.vectors.rank() != 2 || b.vectors.rank() != 2)
        throw ShapeMismatch("feature sets must be [n x d]");
    if (a.d() != b.d())
        throw DimMismatch("feature dims " + std::to_string(a.d()) + " vs " +
                          std::to_string(b.d()));
    if (a.n() < min_n || b.n() < min_n)
        throw TooFewSamples("need at least " + std::to_string(min_n) + " samples, got " +
                            std::to_string(a.n()) + " and " + std::to_string(b.n()));
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (int64_t i = 0; i < t.dim(0); i++)
        for (int64_t j = 0; j < t.dim(1); j++) m(i, j) = t.at(i * t.dim(1) + j);
    return m;
}

inline void moments(const FeatureSet& s, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    Eigen::MatrixXd x = to_eigen(s.vectors);
    const auto n = static_cast<double>(x.rows());
    mu = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / (n - 1.0);  // unbiased
}

// symmetric PSD square root with the shared negative-eigenvalue policy
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); i++) {
        if (lam[i] < -1e-8)
            throw NumericalInstability("negative eigenvalue " + std::to_string(lam[i]) +
                                       " in covariance square root");
        lam[i] = std::sqrt(std::max(lam[i], 0.0));
    }
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// trace of (Sa Sb)^{1/2} via eigendecomposition of the symmetrized product
// A Sb A with A = Sa^{1/2}
inline double trace_sqrt_product(const Eigen::MatrixXd& sa, const Eigen::MatrixXd& sb) {
    Eigen::MatrixXd a = detail::psd_sqrt(sa);
    Eigen::MatrixXd m = a * sb * a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); i++) {
        double lam = es.eigenvalues()[i];
        if (lam < -1e-8)
            throw NumericalInstability("negative eigenvalue " + std::to_string(lam) +
                                       " in product square root");
        acc += std::sqrt(std::max(lam, 0.0));
    }
    return acc;
}

// full matrix square root S with S*S == Sa*Sb, for residual checks on
// well-conditioned inputs (needs Sa invertible)
inline Tensor sqrt_product(const Tensor& sigma_a, const Tensor& sigma_b) {
    Eigen::MatrixXd sa = detail::to_eigen(sigma_a), sb = detail::to_eigen(sigma_b);
    Eigen::MatrixXd a = detail::psd_sqrt(sa);
    Eigen::MatrixXd m = a * sb * a;
    m = 0.5 * (m + m.transpose());
    // S = A (A Sb A)^{1/2} A^{-1}  =>  S*S = A (A Sb A) A^{-1} = Sa Sb
    Eigen::MatrixXd s = a * detail::psd_sqrt(m) * a.inverse();
    Tensor out = Tensor::zeros(sigma_a.shape());
    auto& od = out.mutable_data();
    for (int64_t i = 0; i < sigma_a.dim(0); i++)
        for (int64_t j = 0; j < sigma_a.dim(1); j++)
            od[static_cast<size_t>(i * sigma_a.dim(1) + j)] = s(i, j);
    return out;
}

inline double fid(const FeatureSet& a, const FeatureSet& b) {
    detail::check_pair(a, b, 2);
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    detail::moments(a, mu_a, cov_a);
    detail::moments(b, mu_b, cov_b);
    double mean_term = (mu_a - mu_b).squaredNorm();
    double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b);
    double v = mean_term + trace_term;
    if (!std::isfinite(v)) throw NumericalInstability("fid is not finite");
    return std::max(v, 0.0);
}

struct KidOptions {
    int64_t subset_size = 0;  // 0: whole set, one estimate
    int64_t subsets = 1;
    uint64_t seed = 0;  // subset sampling seed
};

namespace detail {

inline double poly_kernel(const Tensor& x, int64_t i, const Tensor& y, int64_t j, int64_t d) {
    double dot = 0.0;
    for (int64_t k = 0; k < d; k++) dot += x.at(i * d + k) * y.at(j * d + k);
    double u = dot / static_cast<double>(d) + 1.0;
    return u * u * u;
}

inline double mmd2_unbiased(const Tensor& x, const std::vector<int64_t>& xi, const Tensor& y,
                            const std::vector<int64_t>& yi, int64_t d) {
    const auto m = static_cast<int64_t>(xi.size()), n = static_cast<int64_t>(yi.size());
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int64_t i = 0; i < m; i++)
        for (int64_t j = 0; j < m; j++)
            if (i != j) kxx += poly_kernel(x, xi[i], x, xi[j], d);
    for (int64_t i = 0; i < n; i++)
        for (int64_t j = 0; j < n; j++)
            if (i != j) kyy += poly_kernel(y, yi[i], y, yi[j], d);
    for (int64_t i = 0; i < m; i++)
        for (int64_t j = 0; j < n; j++) kxy += poly_kernel(x, xi[i], y, yi[j], d);
    return kxx / static_cast<double>(m * (m - 1)) + kyy / static_cast<double>(n * (n - 1)) -
           2.0 * kxy / static_cast<double>(m * n);
}

inline std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k, Rng& rng) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; i++) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; i++) {
        int64_t j = i + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

}  // namespace detail

inline double kid(const FeatureSet& a_in, const FeatureSet& b_in, const KidOptions& opts = {}) {
    detail::check_pair(a_in, b_in, 2);
    // canonical argument order makes the floating-point sums identical under
    // swap, so kid(a,b) == kid(b,a) bit-exactly
    bool swap_args = b_in.vectors.data() < a_in.vectors.data();
    const FeatureSet& a = swap_args ? b_in : a_in;
    const FeatureSet& b = swap_args ? a_in : b_in;
    const int64_t d = a.d();
    if (opts.subset_size == 0) {
        std::vector<int64_t> ai(static_cast<size_t>(a.n())), bi(static_cast<size_t>(b.n()));
        for (int64_t i = 0; i < a.n(); i++) ai[static_cast<size_t>(i)] = i;
        for (int64_t i = 0; i < b.n(); i++) bi[static_cast<size_t>(i)] = i;
        return detail::mmd2_unbiased(a.vectors, ai, b.vectors, bi, d);
    }
    if (opts.subset_size < 2 || opts.subset_size > a.n() || opts.subset_size > b.n())
        throw TooFewSamples("kid subset size " + std::to_string(opts.subset_size) +
                            " exceeds set sizes");
    if (opts.subsets < 1) throw InvalidRange("kid subsets must be >= 1");
    Rng rng(opts.seed);
    double acc = 0.0;
    for (int64_t s = 0; s < opts.subsets; s++) {
        auto ai = detail::sample_without_replacement(a.n(), opts.subset_size, rng);
        auto bi = detail::sample_without_replacement(b.n(), opts.subset_size, rng);
        acc += detail::mmd2_unbiased(a.vectors, ai, b.vectors, bi, d);
    }
    return acc / static_cast<double>(opts.subsets);
}

// pluggable feature embedder over fixed-extent square images
struct Embedder {
    virtual ~Embedder() = default;
    virtual int64_t input_extent() const = 0;
    virtual std::vector<double> embed(const Image& im) const = 0;
};

// raw pixel statistics: three channel means followed by a 4x4 average-pooled
// grayscale thumbnail; d = 19
struct ToyEmbedder : Embedder {
    int64_t extent = 16;

    int64_t input_extent() const override { return extent; }

    std::vector<double> embed(const Image& im) const override {
        if (im.height != extent || im.width != extent)
            throw ShapeMismatch("toy embedder expects " + std::to_string(extent) + "x" +
                                std::to_string(extent) + " input");
        std::vector<double> f;
        f.reserve(19);
        for (int64_t c = 0; c < 3; c++) {
            int64_t src = (im.channels == 3) ? c : 0;
            double acc = 0.0;
            for (int64_t y = 0; y < extent; y++)
                for (int64_t x = 0; x < extent; x++) acc += im.at(src, y, x);
            f.push_back(acc / static_cast<double>(extent * extent));
        }
        Image thumb = avgpool(to_gray(im), extent / 4);
        f.insert(f.end(), thumb.pixels.begin(), thumb.pixels.end());
        return f;
    }
};

struct CropBox {
    int64_t x = 0, y = 0, w = 0, h = 0;
};

using CropSpec = std::vector<CropBox>;  // one box per image

inline FeatureSet crop_features(const std::vector<Image>& images, const CropSpec& crops,
                                const Embedder& embedder) {
    if (crops.size() != images.size())
        throw ShapeMismatch(std::to_string(crops.size()) + " crops for " +
                            std::to_string(images.size()) + " images");
    if (images.empty()) throw TooFewSamples("no images to embed");
    std::vector<std::vector<double>> rows;
    for (size_t i = 0; i < images.size(); i++) {
        const CropBox& b = crops[i];
        Image patch = crop(images[i], b.x, b.y, b.w, b.h);
        patch = resize_bilinear(patch, embedder.input_extent(), embedder.input_extent());
        rows.push_back(embedder.embed(patch));
    }
    const auto d = static_cast<int64_t>(rows[0].size());
    Tensor t = Tensor::zeros(Shape{static_cast<int64_t>(rows.size()), d});
    auto& td = t.mutable_data();
    for (size_t i = 0; i < rows.size(); i++)
        for (int64_t j = 0; j < d; j++) td[i * static_cast<size_t>(d) + static_cast<size_t>(j)] =
            rows[i][static_cast<size_t>(j)];
    FeatureSet out;
    out.vectors = std::move(t);
    out.source = "crops";
    return out;
}

inline FeatureSet embed_images(const std::vector<Image>& images, const Embedder& embedder) {
    CropSpec full;
    for (const auto& im : images) full.push_back({0, 0, im.width, im.height});
    return crop_features(images, full, embedder);
}

// externally computed features: one [n x d] tensor named "features"
inline FeatureSet load_features(const std::string& path) {
    auto tensors = load_tensors(path);
    auto it = tensors.find("features");
    if (it == tensors.end()) throw MissingField("features");
    if (it->second.rank() != 2) throw ShapeMismatch("'features' must be [n x d]");
    FeatureSet out;
    out.vectors = it->second;
    out.source = path;
    return out;
}

// per-image max detection confidence (0 when none detected), then mean
inline double hand_confidence(const std::vector<std::vector<double>>& detections) {
    if (detections.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& per_image : detections) {
        double best = 0.0;
        for (double c : per_image) {
            if (c < 0.0 || c > 1.0)
                throw InvalidRange("confidence " + std::to_string(c) + " outside [0,1]");
            best = std::max(best, c);
        }
        acc += best;
    }
    return acc / static_cast<double>(detections.size());
}

// mean over visible (sample, joint) pairs of squared Euclidean distance;
// visibility: [n x J], nonzero = visible; empty mask = all visible
inline double keypoint_mse(const Tensor& pred, const Tensor& gt, const Tensor& visibility = {}) {
    if (pred.rank() != 3 || pred.shape() != gt.shape())
        throw ShapeMismatch("keypoints: pred " + shape_str(pred.shape()) + " vs gt " +
                            shape_str(gt.shape()));
    const int64_t n = pred.dim(0), j = pred.dim(1), d = pred.dim(2);
    if (d != 2 && d != 3) throw ShapeMismatch("keypoint dim must be 2 or 3");
    if (visibility.defined() && visibility.shape() != Shape{n, j})
        throw ShapeMismatch("visibility must be [n x J]");
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < n; i++)
        for (int64_t q = 0; q < j; q++) {
            if (visibility.defined() && visibility.at(i * j + q) == 0.0) continue;
            double dist2 = 0.0;
            for (int64_t k = 0; k < d; k++) {
                double diff = pred.at((i * j + q) * d + k) - gt.at((i * j + q) * d + k);
                dist2 += diff * diff;
            }
            acc += dist2;
            count++;
        }
    if (count == 0) throw AllMasked("no visible keypoints");
    return acc / static_cast<double>(count);
}

struct MetricReport {
    std::optional<double> fid, kid, fid_h, kid_h, hand_conf, mse_2d, mse_3d;
    int64_t samples = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        auto put = [&](const char* key, const std::optional<double>& v) {
            if (!v) return;
            if (!std::isfinite(*v)) throw NumericalInstability(std::string(key) + " not finite");
            j[key] = *v;
        };
        put("fid", fid);
        put("kid", kid);
        put("fid_h", fid_h);
        put("kid_h", kid_h);
        put("hand_conf", hand_conf);
        put("mse_2d", mse_2d);
        put("mse_3d", mse_3d);
        j["samples"] = samples;
        return j;
    }
};

}  // namespace sesa

#endif  // SESA_METRICS_HPP
