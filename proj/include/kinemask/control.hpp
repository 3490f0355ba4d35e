#pragma once

#include <vector>

#include "kinemask/denoiser.hpp"

namespace kinemask::diffusion {

/// Trainable copy of the backbone stem + first `taps` blocks, plus a mask stem
/// for the velocity-mask signal and one zero-initialized 1x1 projection per
/// tap. At init every projection is exactly zero, so fusing the branch leaves
/// the backbone output bit-identical.
template <typename T>
struct ControlParams {
    DenoiserConfig cfg;  // backbone config this branch was built for
    int taps = 3;
    T lambda = T(0.5);
    Tensor<T> mask_stem_w, mask_stem_b;  // [d, 3*9], [d]
    Tensor<T> stem_w, stem_b;            // copied from the backbone
    std::vector<BlockParams<T>> blocks;  // copied from the backbone
    std::vector<Tensor<T>> proj_w;       // per tap [d, d], zero at init
    std::vector<Tensor<T>> proj_b;       // per tap [d], zero at init

    void alloc() {
        int d = cfg.channels;
        mask_stem_w = Tensor<T>({d, int64_t(3) * 9});
        mask_stem_b = Tensor<T>({d});
        stem_w = Tensor<T>({d, int64_t(cfg.in_channels) * 9});
        stem_b = Tensor<T>({d});
        blocks.resize(size_t(taps));
        for (auto& b : blocks) b.alloc(d, cfg.cond_dim);
        proj_w.assign(size_t(taps), Tensor<T>({d, d}));
        proj_b.assign(size_t(taps), Tensor<T>({d}));
    }

    NamedParams<T> named() {
        NamedParams<T> np;
        np.add("mask_stem.w", mask_stem_w);
        np.add("mask_stem.b", mask_stem_b);
        np.add("stem.w", stem_w);
        np.add("stem.b", stem_b);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].reg(np, "blk" + std::to_string(i));
        for (size_t i = 0; i < proj_w.size(); ++i) {
            np.add("proj" + std::to_string(i) + ".w", proj_w[i]);
            np.add("proj" + std::to_string(i) + ".b", proj_b[i]);
        }
        return np;
    }
};

template <typename T>
ControlParams<T> zeros_like_params(const ControlParams<T>& p) {
    ControlParams<T> g;
    g.cfg = p.cfg;
    g.taps = p.taps;
    g.lambda = p.lambda;
    g.alloc();
    return g;
}

/// Copies the backbone stem and first `taps` blocks, zeroes every projection,
/// and gives the mask stem a fresh init.
template <typename T>
ControlParams<T> init_control(const DenoiserParams<T>& theta, int taps, T lambda, uint64_t seed) {
    KM_CHECK(taps >= 1 && taps <= theta.cfg.blocks, usage,
             "init_control: taps " << taps << " out of range [1," << theta.cfg.blocks << "]");
    ControlParams<T> p;
    p.cfg = theta.cfg;
    p.taps = taps;
    p.lambda = lambda;
    p.alloc();
    Rng rng(derive_seed(seed, "control-init", 0));
    double std = 1.0 / std::sqrt(27.0);  // mask stem fan-in 3*9
    for (auto& v : p.mask_stem_w.data) v = T(rng.normal() * std);
    p.mask_stem_b.fill(T(0));
    p.stem_w = theta.stem_w;
    p.stem_b = theta.stem_b;
    for (int i = 0; i < taps; ++i) p.blocks[size_t(i)] = theta.blocks[size_t(i)];
    // proj_w/proj_b stay exactly zero
    return p;
}

template <typename T>
struct ControlActs {
    Tensor<T> u;                    // (B,F,3,H,W) control signal fed to the mask stem
    std::vector<Tensor<T>> x;       // chain activations, size taps+1
    std::vector<BlockActs<T>> blk;
    VidDims dims{};
};

/// Runs the branch on the shared 6-channel stem input plus the mask tensor and
/// emits one residual per tap (the zero projections' outputs).
template <typename T>
void control_forward(const ControlParams<T>& p, const Tensor<T>& u, const Tensor<T>& stem_input,
                     const Tensor<T>& cond_e, ControlActs<T>& acts,
                     std::vector<Tensor<T>>& residuals, Workspace<T>& ws) {
    const auto& cfg = p.cfg;
    const int64_t hw = cfg.hw();
    const int batch = int(stem_input.shape[0]);
    KM_CHECK(u.shape == (std::vector<int64_t>{batch, cfg.frames, 3, hw}) ||
                 u.shape == (std::vector<int64_t>{batch, cfg.frames, 3, cfg.height, cfg.width}),
             usage, "control_forward: mask tensor shape mismatch");
    acts.dims = {batch, cfg.frames, cfg.channels, hw, cfg.height, cfg.width};
    const VidDims& d = acts.dims;
    const int n = batch * cfg.frames;

    acts.u = u;
    acts.x.resize(size_t(p.taps) + 1);
    acts.blk.resize(size_t(p.taps));
    if (acts.x[0].shape != std::vector<int64_t>{batch, cfg.frames, cfg.channels, hw} ||
        acts.x.back().shape != acts.x[0].shape)
        for (auto& t : acts.x) t = Tensor<T>({batch, cfg.frames, cfg.channels, hw});

    nn::conv3x3_forward(p.stem_w, p.stem_b, stem_input.ptr(), acts.x[0].ptr(), n, cfg.in_channels,
                        cfg.channels, cfg.height, cfg.width, ws);
    const int64_t total = d.numel();
    T* mask_feat = ws.buf(nn::kSlotCtlMaskFeat, total);
    nn::conv3x3_forward(p.mask_stem_w, p.mask_stem_b, u.ptr(), mask_feat, n, 3, cfg.channels,
                        cfg.height, cfg.width, ws);
    {
        T* dst = acts.x[0].ptr();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < total; ++i) dst[i] += mask_feat[i];
    }

    residuals.resize(size_t(p.taps));
    for (int i = 0; i < p.taps; ++i) {
        block_forward(p.blocks[size_t(i)], cond_e, acts.x[size_t(i)].ptr(),
                      acts.x[size_t(i) + 1].ptr(), acts.blk[size_t(i)], d, ws);
        auto& r = residuals[size_t(i)];
        if (r.shape != acts.x[0].shape) r = Tensor<T>(acts.x[0].shape);
        nn::conv1x1_forward(p.proj_w[size_t(i)], p.proj_b[size_t(i)],
                            acts.x[size_t(i) + 1].ptr(), r.ptr(), n, cfg.channels, cfg.channels,
                            hw);
    }
}

/// Backward through the branch given d(residual_i); accumulates grads into g.
template <typename T>
void control_backward(const ControlParams<T>& p, const Tensor<T>& stem_input,
                      const Tensor<T>& cond_e, const ControlActs<T>& acts,
                      const std::vector<Tensor<T>>& dresiduals, ControlParams<T>& g,
                      Workspace<T>& ws) {
    const auto& cfg = p.cfg;
    const VidDims& d = acts.dims;
    const int n = d.batch * d.frames;
    const int64_t total = d.numel();

    T* dh = ws.buf(nn::kSlotDh, total);
    T* dh_prev = ws.buf(nn::kSlotDhPrev, total);
    std::memset(dh, 0, size_t(total) * sizeof(T));
    for (int lvl = p.taps; lvl >= 1; --lvl) {
        int tap = lvl - 1;
        nn::conv1x1_backward(p.proj_w[size_t(tap)], acts.x[size_t(lvl)].ptr(),
                             dresiduals[size_t(tap)].ptr(), dh, &g.proj_w[size_t(tap)],
                             &g.proj_b[size_t(tap)], n, d.channels, d.channels, d.hw,
                             /*accumulate_din=*/true);
        block_backward(p.blocks[size_t(tap)], cond_e, acts.x[size_t(tap)].ptr(),
                       acts.blk[size_t(tap)], dh, dh_prev, &g.blocks[size_t(tap)],
                       static_cast<Tensor<T>*>(nullptr), d, ws);
        std::swap(dh, dh_prev);  // block_backward writes din in full
    }
    // dh now holds the gradient at the summed stem activations
    nn::conv3x3_backward(p.stem_w, stem_input.ptr(), dh, static_cast<T*>(nullptr), &g.stem_w,
                         &g.stem_b, n, cfg.in_channels, cfg.channels, d.height, d.width, ws);
    nn::conv3x3_backward(p.mask_stem_w, acts.u.ptr(), dh, static_cast<T*>(nullptr),
                         &g.mask_stem_w, &g.mask_stem_b, n, 3, cfg.channels, d.height, d.width,
                         ws);
}

/// Eq.-3-style fused prediction: backbone forward with lambda-scaled control
/// residuals added to the first `taps` block outputs.
template <typename T>
void fused_denoise(const DenoiserParams<T>& theta, const ControlParams<T>& phi,
                   const Tensor<T>& x_t, const Tensor<T>& y, const std::vector<int>& tokens,
                   const std::vector<int>& tsteps, const Tensor<T>& u, Acts<T>& bb_acts,
                   ControlActs<T>& ctl_acts, std::vector<Tensor<T>>& residuals,
                   Tensor<T>& eps_out, Workspace<T>& ws, T lambda_override = T(-1)) {
    T lam = lambda_override >= T(0) ? lambda_override : phi.lambda;
    const int batch = int(tsteps.size());
    assemble_input(x_t, y, bb_acts.input, batch, theta.cfg.frames, theta.cfg.hw());
    cond_forward(theta, tokens, tsteps, bb_acts.cond);
    control_forward(phi, u, bb_acts.input, bb_acts.cond.e, ctl_acts, residuals, ws);
    denoiser_forward_core(theta, tsteps, bb_acts, eps_out, ws, &residuals, lam);
}

template <typename T>
Tensor<T> fused_denoise(const DenoiserParams<T>& theta, const ControlParams<T>& phi,
                        const Tensor<T>& x_t, int t, const Tensor<T>& y,
                        const std::vector<int>& tokens, const Tensor<T>& u,
                        T lambda_override = T(-1)) {
    Acts<T> bb;
    ControlActs<T> ctl;
    std::vector<Tensor<T>> res;
    Tensor<T> eps;
    Workspace<T> ws;
    std::vector<int> ts{t};
    fused_denoise(theta, phi, x_t, y, tokens, ts, u, bb, ctl, res, eps, ws, lambda_override);
    return eps;
}

}  // namespace kinemask::diffusion
