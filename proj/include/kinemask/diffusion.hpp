#pragma once

#include <cmath>
#include <vector>

#include "kinemask/control.hpp"
#include "kinemask/denoiser.hpp"

namespace kinemask::diffusion {

// --- noise schedule -------------------------------------------------------------

/// Linear beta schedule; cumulative products kept in double regardless of the
/// network scalar type. Arrays are 1-indexed by timestep; abar[0] = 1.
struct NoiseSchedule {
    int steps = 1000;
    std::vector<double> beta, alpha, abar;  // size steps+1

    bool valid() const {
        if (steps < 10 || int(abar.size()) != steps + 1) return false;
        if (!(beta[1] > 0 && beta[1] < beta[size_t(steps)] && beta[size_t(steps)] < 1)) return false;
        for (int t = 1; t <= steps; ++t)
            if (!(abar[size_t(t)] < abar[size_t(t) - 1])) return false;
        return true;
    }
};

inline NoiseSchedule make_schedule(int steps, double beta1 = 1e-4, double betaT = 0.02,
                                   const std::string& shape = "linear") {
    KM_CHECK(steps >= 10, usage, "make_schedule: need at least 10 steps");
    KM_CHECK(shape == "linear", usage, "make_schedule: unknown shape '" << shape << "'");
    KM_CHECK(beta1 > 0 && beta1 < betaT && betaT < 1, usage,
             "make_schedule: need 0 < beta_1 < beta_T < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.assign(size_t(steps) + 1, 0.0);
    s.alpha.assign(size_t(steps) + 1, 1.0);
    s.abar.assign(size_t(steps) + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
        s.beta[size_t(t)] = steps == 1 ? beta1 : beta1 + (betaT - beta1) * double(t - 1) / double(steps - 1);
        s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
        s.abar[size_t(t)] = s.abar[size_t(t) - 1] * s.alpha[size_t(t)];
    }
    return s;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, per batch element.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& tsteps, const Tensor<T>& eps,
                   const NoiseSchedule& s) {
    KM_CHECK(x0.shape == eps.shape, usage, "q_sample: eps must be shaped like x0");
    const int batch = int(x0.shape[0]);
    KM_CHECK(int(tsteps.size()) == batch, usage, "q_sample: one timestep per batch element");
    Tensor<T> out(x0.shape);
    const int64_t per = x0.numel() / batch;
    for (int b = 0; b < batch; ++b) {
        int t = tsteps[size_t(b)];
        KM_CHECK(t >= 1 && t <= s.steps, usage, "q_sample: timestep " << t << " out of range");
        T a = T(std::sqrt(s.abar[size_t(t)]));
        T bnd = T(std::sqrt(1.0 - s.abar[size_t(t)]));
        const T* xs = x0.ptr() + int64_t(b) * per;
        const T* es = eps.ptr() + int64_t(b) * per;
        T* dst = out.ptr() + int64_t(b) * per;
        for (int64_t i = 0; i < per; ++i) dst[i] = a * xs[i] + bnd * es[i];
    }
    return out;
}

// --- training batches -------------------------------------------------------------

template <typename T>
struct DiffusionBatch {
    Tensor<T> x0;            // (B,F,3,HW), scaled to [-1,1]
    Tensor<T> y;             // (B,3,HW), scaled to [-1,1]
    std::vector<int> tokens; // B * max_tokens
    Tensor<T> u;             // (B,F,3,HW) velocity masks; empty when unused

    int batch() const { return int(x0.shape[0]); }
    bool has_mask() const { return u.numel() > 0; }
};

/// Draws (t, eps) and evaluates the noise-prediction MSE. Fills acts/eps_hat/
/// deps for a subsequent backward pass.
/// Raw-buffer q_sample for the training hot path.
template <typename T>
void q_sample_raw(const Tensor<T>& x0, const std::vector<int>& tsteps, const T* eps,
                  const NoiseSchedule& s, T* out) {
    const int batch = int(x0.shape[0]);
    const int64_t per = x0.numel() / batch;
    for (int b = 0; b < batch; ++b) {
        int t = tsteps[size_t(b)];
        T a = T(std::sqrt(s.abar[size_t(t)]));
        T bnd = T(std::sqrt(1.0 - s.abar[size_t(t)]));
        const T* xs = x0.ptr() + int64_t(b) * per;
        const T* es = eps + int64_t(b) * per;
        T* dst = out + int64_t(b) * per;
        for (int64_t i = 0; i < per; ++i) dst[i] = a * xs[i] + bnd * es[i];
    }
}

template <typename T>
double diffusion_loss_forward(const DenoiserParams<T>& p, const DiffusionBatch<T>& batch,
                              const NoiseSchedule& sched, Rng& rng, Acts<T>& acts,
                              Tensor<T>& eps_hat, Tensor<T>& deps, Workspace<T>& ws,
                              std::vector<int>* tsteps_out = nullptr,
                              const std::vector<Tensor<T>>* taps = nullptr, T lambda = T(0)) {
    const int B = batch.batch();
    std::vector<int> tsteps(static_cast<size_t>(B));
    for (auto& t : tsteps) t = 1 + int(rng.below(sched.steps));
    const int64_t n = batch.x0.numel();
    T* eps = ws.buf(nn::kSlotLossEps, n);
    for (int64_t i = 0; i < n; ++i) eps[i] = T(rng.normal());
    T* xt = ws.buf(nn::kSlotLossXt, n);
    q_sample_raw(batch.x0, tsteps, eps, sched, xt);
    assemble_input_raw(xt, batch.y, acts.input, B, p.cfg.frames, p.cfg.hw());
    cond_forward(p, batch.tokens, tsteps, acts.cond);
    denoiser_forward_core(p, tsteps, acts, eps_hat, ws, taps, lambda);
    if (deps.shape != eps_hat.shape) deps = Tensor<T>(eps_hat.shape);
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        double diff = double(eps_hat[i]) - double(eps[i]);
        loss += diff * diff;
        deps[i] = T(2.0 * diff / double(n));
    }
    if (tsteps_out) *tsteps_out = tsteps;
    return loss / double(n);
}

/// Spec op: scalar diffusion loss (no gradients kept).
template <typename T>
double diffusion_loss(const DenoiserParams<T>& p, const DiffusionBatch<T>& batch,
                      const NoiseSchedule& sched, Rng& rng) {
    Acts<T> acts;
    Workspace<T> ws;
    Tensor<T> eps_hat, deps;
    return diffusion_loss_forward(p, batch, sched, rng, acts, eps_hat, deps, ws);
}

/// Reusable buffers for control-loss steps (avoids per-step reallocation).
template <typename T>
struct ControlLossState {
    Acts<T> bb;
    ControlActs<T> ctl;
    std::vector<Tensor<T>> residuals, dtaps;
    Tensor<T> eps_hat, deps;
};

/// Control loss (Eq.-4 style): noise-prediction MSE through the fused forward
/// with the backbone frozen. Returns loss; when `phi_grads` is non-null the
/// gradients w.r.t. phi are accumulated there.
template <typename T>
double control_loss(const ControlParams<T>& phi, const DenoiserParams<T>& theta,
                    const DiffusionBatch<T>& batch, const NoiseSchedule& sched, Rng& rng,
                    ControlParams<T>* phi_grads, Workspace<T>& ws, ControlLossState<T>& st) {
    KM_CHECK(batch.has_mask(), usage, "control_loss: batch has no mask tensor");
    const int B = batch.batch();
    std::vector<int> tsteps(static_cast<size_t>(B));
    for (auto& t : tsteps) t = 1 + int(rng.below(sched.steps));
    const int64_t n = batch.x0.numel();
    T* eps = ws.buf(nn::kSlotLossEps, n);
    for (int64_t i = 0; i < n; ++i) eps[i] = T(rng.normal());
    T* xt = ws.buf(nn::kSlotLossXt, n);
    q_sample_raw(batch.x0, tsteps, eps, sched, xt);

    assemble_input_raw(xt, batch.y, st.bb.input, B, theta.cfg.frames, theta.cfg.hw());
    cond_forward(theta, batch.tokens, tsteps, st.bb.cond);
    control_forward(phi, batch.u, st.bb.input, st.bb.cond.e, st.ctl, st.residuals, ws);
    denoiser_forward_core(theta, tsteps, st.bb, st.eps_hat, ws, &st.residuals, phi.lambda);

    if (st.deps.shape != st.eps_hat.shape) st.deps = Tensor<T>(st.eps_hat.shape);
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        double diff = double(st.eps_hat[i]) - double(eps[i]);
        loss += diff * diff;
        st.deps[i] = T(2.0 * diff / double(n));
    }
    if (phi_grads) {
        denoiser_backward(theta, st.bb, st.deps, static_cast<DenoiserParams<T>*>(nullptr), ws,
                          &st.dtaps, phi.lambda, phi.taps);
        control_backward(phi, st.bb.input, st.bb.cond.e, st.ctl, st.dtaps, *phi_grads, ws);
    }
    return loss / double(n);
}

template <typename T>
double control_loss(const ControlParams<T>& phi, const DenoiserParams<T>& theta,
                    const DiffusionBatch<T>& batch, const NoiseSchedule& sched, Rng& rng,
                    ControlParams<T>* phi_grads, Workspace<T>& ws) {
    ControlLossState<T> st;
    return control_loss(phi, theta, batch, sched, rng, phi_grads, ws, st);
}

// --- sampling ----------------------------------------------------------------------

struct SamplerConfig {
    std::string method = "ddim";  // ddim | ancestral
    int steps = 50;               // ddim subsequence length
    double guidance = 1.0;        // classifier-free guidance scale; 1 = off
    std::vector<int> null_tokens; // padded null-caption tokens (for guidance)
    double lambda_override = -1;  // <0: use phi.lambda
};

/// Reverse diffusion. y: (B,3,HW); one RNG per element so batched generation
/// matches per-sample generation bit for bit. Returns (B,F,3,HW) in [-1,1].
template <typename T>
Tensor<T> sample_video(const DenoiserParams<T>& theta, const ControlParams<T>* phi,
                       const NoiseSchedule& sched, const Tensor<T>& y,
                       const std::vector<int>& tokens, const Tensor<T>* u,
                       const SamplerConfig& cfg, const std::vector<uint64_t>& seeds) {
    const auto& dc = theta.cfg;
    const int B = int(y.shape[0]);
    KM_CHECK(int(seeds.size()) == B, usage, "sample_video: one seed per batch element");
    const int64_t per = int64_t(dc.frames) * 3 * dc.hw();

    std::vector<Rng> rngs;
    rngs.reserve(size_t(B));
    for (auto s : seeds) rngs.emplace_back(derive_seed(s, "sample-noise", 0));

    Tensor<T> x({B, dc.frames, 3, dc.hw()});
    for (int b = 0; b < B; ++b) {
        T* dst = x.ptr() + int64_t(b) * per;
        for (int64_t i = 0; i < per; ++i) dst[i] = T(rngs[size_t(b)].normal());
    }

    Acts<T> acts;
    ControlActs<T> ctl;
    std::vector<Tensor<T>> residuals;
    Workspace<T> ws;
    Tensor<T> eps_hat, eps_null;
    T lam = T(cfg.lambda_override >= 0 ? cfg.lambda_override : (phi ? double(phi->lambda) : 0.0));

    auto predict = [&](const Tensor<T>& xt, int t, Tensor<T>& out) {
        std::vector<int> ts(size_t(B), t);
        if (phi && u) {
            fused_denoise(theta, *phi, xt, y, tokens, ts, *u, acts, ctl, residuals, out, ws, lam);
        } else {
            denoiser_forward(theta, xt, y, tokens, ts, acts, out, ws);
        }
        if (cfg.guidance != 1.0) {
            KM_CHECK(!cfg.null_tokens.empty(), usage,
                     "sample_video: guidance needs null-caption tokens");
            if (phi && u) {
                fused_denoise(theta, *phi, xt, y, cfg.null_tokens, ts, *u, acts, ctl, residuals,
                              eps_null, ws, lam);
            } else {
                denoiser_forward(theta, xt, y, cfg.null_tokens, ts, acts, eps_null, ws);
            }
            const T g = T(cfg.guidance);
            for (int64_t i = 0; i < out.numel(); ++i)
                out[i] = eps_null[i] + g * (out[i] - eps_null[i]);
        }
    };

    if (cfg.method == "ancestral") {
        for (int t = sched.steps; t >= 1; --t) {
            predict(x, t, eps_hat);
            double a = sched.alpha[size_t(t)], ab = sched.abar[size_t(t)];
            double ab_prev = sched.abar[size_t(t) - 1];
            double coef = sched.beta[size_t(t)] / std::sqrt(1.0 - ab);
            double inv_sqrt_a = 1.0 / std::sqrt(a);
            double sigma = t > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab) * sched.beta[size_t(t)])
                                 : 0.0;
            for (int b = 0; b < B; ++b) {
                T* xs = x.ptr() + int64_t(b) * per;
                const T* es = eps_hat.ptr() + int64_t(b) * per;
                for (int64_t i = 0; i < per; ++i) {
                    double mean = inv_sqrt_a * (double(xs[i]) - coef * double(es[i]));
                    double z = sigma > 0 ? rngs[size_t(b)].normal() : 0.0;
                    xs[i] = T(mean + sigma * z);
                }
            }
        }
    } else {
        KM_CHECK(cfg.method == "ddim", usage, "sample_video: unknown method '" << cfg.method << "'");
        int K = std::min(cfg.steps, sched.steps);
        KM_CHECK(K >= 1, usage, "sample_video: need at least one step");
        std::vector<int> taus(static_cast<size_t>(K));
        for (int i = 0; i < K; ++i)
            taus[size_t(i)] = K == 1 ? sched.steps
                                     : 1 + int(std::llround(double(i) * (sched.steps - 1) /
                                                            double(K - 1)));
        for (int i = K - 1; i >= 0; --i) {
            int t = taus[size_t(i)];
            int t_prev = i > 0 ? taus[size_t(i) - 1] : 0;
            predict(x, t, eps_hat);
            double ab = sched.abar[size_t(t)], ab_prev = sched.abar[size_t(t_prev)];
            double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
            double sap = std::sqrt(ab_prev), sbp = std::sqrt(1.0 - ab_prev);
            for (int64_t idx = 0; idx < x.numel(); ++idx) {
                double x0 = (double(x[idx]) - sb * double(eps_hat[idx])) / sa;
                x0 = clamp(x0, -1.0, 1.0);
                x[idx] = T(sap * x0 + sbp * double(eps_hat[idx]));
            }
        }
    }
    return x;
}

/// [-1,1] network range -> [0,1] video range, clamped.
template <typename T>
void to_unit_range(Tensor<T>& x) {
    for (auto& v : x.data) v = T(clamp((double(v) + 1.0) / 2.0, 0.0, 1.0));
}

}  // namespace kinemask::diffusion
