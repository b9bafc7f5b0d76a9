#ifndef SESA_FUSION_HPP
#define SESA_FUSION_HPP

// Hierarchical structural fusion: pool multi-resolution self-attention maps
// to a common resolution, aggregate by summation, and refine the control
// features by matrix multiplication before injection.

#include "sesa/common.hpp"
#include "sesa/control.hpp"
#include "sesa/tensor.hpp"

#include <cmath>
#include <map>
#include <vector>

namespace sesa {

struct FusionConfig {
    bool enabled = true;
    bool normalize = true;   // row-renormalize psi' before refine
    bool per_level = false;  // refine every skip level with a per-level psi'
    bool transposed = false; // use psi' instead of psi'^T in refine
};

struct AttentionPyramid {
    std::map<int64_t, Tensor> maps;  // resolution -> psi_r [r^2 x r^2]
    int64_t target_resolution = 0;
};

namespace detail {
inline int64_t map_resolution(const Tensor& psi) {
    if (psi.rank() != 2 || psi.dim(0) != psi.dim(1))
        throw ShapeMismatch("attention map must be square, got " + shape_str(psi.shape()));
    auto r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(psi.dim(0)))));
    if (r * r != psi.dim(0))
        throw ShapeMismatch("attention map side " + std::to_string(psi.dim(0)) +
                            " is not a perfect square");
    return r;
}
}  // namespace detail

// 4-D max pooling of a [r^2 x r^2] map over both query and key spatial axes,
// preserving the bipartite query->key structure
inline Tensor pool_map(const Tensor& psi, int64_t target) {
    int64_t r = detail::map_resolution(psi);
    if (target < 1 || r < target || r % target != 0)
        throw ResolutionMismatch("cannot pool r=" + std::to_string(r) + " to t=" +
                                 std::to_string(target));
    int64_t f = r / target;
    if ((f & (f - 1)) != 0)
        throw ResolutionMismatch("pooling factor must be a power of 2, got " + std::to_string(f));
    if (f == 1) return psi;
    Tensor x = reshape(psi, Shape{r, r, r, r});
    x = maxpool2d(x, f);                 // pool key axes -> [r, r, t, t]
    x = permute(x, {2, 3, 0, 1});        // -> [t, t, r, r]
    x = maxpool2d(x, f);                 // pool query axes -> [t, t, t, t]
    x = permute(x, {2, 3, 0, 1});        // back to query-major
    return reshape(x, Shape{target * target, target * target});
}

// psi' = sum over resolutions of pool_map(psi_r, target)
inline Tensor aggregate(const AttentionPyramid& pyramid) {
    if (pyramid.maps.empty()) throw EmptyPyramid("no attention maps to aggregate");
    Tensor acc;
    for (const auto& [r, psi] : pyramid.maps) {
        if (detail::map_resolution(psi) != r)
            throw ResolutionMismatch("map keyed " + std::to_string(r) + " has wrong extent");
        Tensor pooled = pool_map(psi, pyramid.target_resolution);
        acc = acc.defined() ? add(acc, pooled) : pooled;
    }
    return acc;
}

// f'_c = f_c (x) psi': each output location is a psi'-weighted combination of
// input locations (weights over keys, output indexed by query)
inline Tensor refine(const Tensor& f_c, const Tensor& psi_prime, bool transposed = false) {
    if (f_c.rank() != 3) throw ShapeMismatch("refine expects f_c [C x t x t]");
    const int64_t c = f_c.dim(0), t = f_c.dim(1);
    if (f_c.dim(2) != t || psi_prime.rank() != 2 || psi_prime.dim(0) != t * t ||
        psi_prime.dim(1) != t * t)
        throw ShapeMismatch("refine: f_c " + shape_str(f_c.shape()) + " vs psi' " +
                            shape_str(psi_prime.shape()));
    Tensor flat = reshape(f_c, Shape{c, t * t});
    Tensor mixed = transposed ? matmul(flat, psi_prime) : matmul(flat, transpose(psi_prime));
    return reshape(mixed, Shape{c, t, t});
}

struct FusedFeatures {
    std::vector<Tensor> skips;
    Tensor mid;
    Tensor psi_prime;  // aggregate at the target resolution (undefined when disabled)
};

// Applies the fusion to the middle-block feature (the level whose
// resolution equals the target); per_level additionally refines each skip
// with a psi' pooled to that level's resolution.
inline FusedFeatures fuse_features(const ControlOutput& out, const FusionConfig& cfg) {
    FusedFeatures f;
    f.skips = out.skips;
    f.mid = out.mid;
    if (!cfg.enabled) return f;
    const DenoiserConfig& dc = out.cfg;
    for (int64_t r : dc.attn_resolutions)
        if (!out.self_maps.count(r))
            throw ResolutionMismatch("missing self-attention map at resolution " +
                                     std::to_string(r));
    auto psi_at = [&](int64_t target) {
        AttentionPyramid pyr;
        pyr.target_resolution = target;
        for (const auto& [r, m] : out.self_maps)
            if (r >= target) pyr.maps[r] = m;
        Tensor psi = aggregate(pyr);
        return cfg.normalize ? normalize_rows(psi) : psi;
    };
    f.psi_prime = psi_at(dc.target_resolution());
    f.mid = refine(out.mid, f.psi_prime, cfg.transposed);
    if (cfg.per_level) {
        for (size_t l = 0; l < f.skips.size(); l++) {
            int64_t r = dc.level_resolution(static_cast<int64_t>(l));
            f.skips[l] = refine(f.skips[l], psi_at(r), cfg.transposed);
        }
    }
    return f;
}

// fusion then zero-conv injection, ready to add to the backbone features
inline Injection fuse_and_inject(const ControlOutput& out, const ControlBranch& control,
                                 const FusionConfig& cfg) {
    FusedFeatures f = fuse_features(out, cfg);
    return control.inject(f.skips, f.mid);
}

}  // namespace sesa

#endif  // SESA_FUSION_HPP
