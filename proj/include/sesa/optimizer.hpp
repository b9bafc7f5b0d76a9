#ifndef SESA_OPTIMIZER_HPP
#define SESA_OPTIMIZER_HPP

// Adaptive moment estimation with decoupled weight decay.

#include "sesa/common.hpp"
#include "sesa/layers.hpp"
#include "sesa/tensor.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace sesa {

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamW {
    AdamWConfig cfg;
    int64_t t = 0;  // completed steps
    std::map<std::string, std::vector<double>> m, v;  // first/second moments per param

    explicit AdamW(AdamWConfig c = {}) : cfg(c) {}

    // decoupled decay: p -= lr*wd*p, applied alongside the moment update
    void step(NamedParams& params) {
        t++;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            auto& mm = m[name];
            auto& vv = v[name];
            if (mm.empty()) mm.assign(static_cast<size_t>(p.numel()), 0.0);
            if (vv.empty()) vv.assign(static_cast<size_t>(p.numel()), 0.0);
            const std::vector<double> zero(p.has_grad() ? 0 : static_cast<size_t>(p.numel()), 0.0);
            const std::vector<double>& g = p.has_grad() ? p.grad() : zero;
            auto& data = const_cast<Tensor&>(p).mutable_data();
            for (size_t i = 0; i < data.size(); i++) {
                mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * g[i];
                vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                double mhat = mm[i] / bc1;
                double vhat = vv[i] / bc2;
                data[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                     cfg.weight_decay * data[i]);
            }
        }
    }

    static void zero_grads(NamedParams& params) {
        for (auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
    }

    // optimizer state as named tensors for exact training resumption
    void export_state(std::map<std::string, Tensor>& out, const std::string& prefix) const {
        out[prefix + ".t"] = Tensor::full(Shape{1}, static_cast<double>(t));
        for (const auto& [name, mm] : m)
            out[prefix + ".m." + name] = Tensor(Shape{static_cast<int64_t>(mm.size())}, mm);
        for (const auto& [name, vv] : v)
            out[prefix + ".v." + name] = Tensor(Shape{static_cast<int64_t>(vv.size())}, vv);
    }

    void import_state(const std::map<std::string, Tensor>& in, const std::string& prefix) {
        m.clear();
        v.clear();
        t = 0;
        auto it = in.find(prefix + ".t");
        if (it != in.end()) t = static_cast<int64_t>(it->second.at(0));
        const std::string mp = prefix + ".m.", vp = prefix + ".v.";
        for (const auto& [name, tensor] : in) {
            if (name.rfind(mp, 0) == 0) m[name.substr(mp.size())] = tensor.data();
            else if (name.rfind(vp, 0) == 0) v[name.substr(vp.size())] = tensor.data();
        }
    }
};

}  // namespace sesa

#endif  // SESA_OPTIMIZER_HPP
