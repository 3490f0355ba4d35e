#pragma once

#include <cmath>
#include <vector>

#include "kinemask/nn.hpp"
#include "kinemask/tensor.hpp"

namespace kinemask::optim {

/// Cosine-with-hard-restarts schedule over `total` steps, `cycles` restarts.
struct CosineRestarts {
    double base_lr = 1e-4;
    int total_steps = 1000;
    int cycles = 3;

    double lr_at(int step) const {
        if (total_steps <= 0) return base_lr;
        int cycle_len = std::max(1, (total_steps + cycles - 1) / cycles);
        double frac = double(step % cycle_len) / double(cycle_len);
        return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
    }
};

/// Decoupled-weight-decay Adam with global gradient-norm clipping.
template <typename T>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;

    explicit AdamW(const nn::NamedParams<T>& params) {
        for (auto& [name, t] : params.items) {
            m_.push_back(Tensor<T>(t->shape));
            v_.push_back(Tensor<T>(t->shape));
        }
    }

    /// Returns the pre-clip global gradient norm.
    double step(const nn::NamedParams<T>& params, const nn::NamedParams<T>& grads, double lr) {
        ++t_;
        double sq = 0;
        for (auto& [name, g] : grads.items)
            for (int64_t i = 0; i < g->numel(); ++i) sq += double((*g)[i]) * double((*g)[i]);
        double norm = std::sqrt(sq);
        double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

        double bc1 = 1.0 - std::pow(beta1, t_);
        double bc2 = 1.0 - std::pow(beta2, t_);
        for (size_t k = 0; k < params.items.size(); ++k) {
            Tensor<T>& p = *params.items[k].second;
            const Tensor<T>& g = *grads.items[k].second;
            Tensor<T>& m = m_[k];
            Tensor<T>& v = v_[k];
            for (int64_t i = 0; i < p.numel(); ++i) {
                double gi = double(g[i]) * scale;
                double mi = beta1 * double(m[i]) + (1 - beta1) * gi;
                double vi = beta2 * double(v[i]) + (1 - beta2) * gi * gi;
                m[i] = T(mi);
                v[i] = T(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                p[i] = T(double(p[i]) - lr * (update + weight_decay * double(p[i])));
            }
        }
        return norm;
    }

    int steps_taken() const { return t_; }

private:
    std::vector<Tensor<T>> m_, v_;
    int t_ = 0;
};

}  // namespace kinemask::optim
