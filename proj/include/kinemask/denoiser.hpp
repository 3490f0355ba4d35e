#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/captions.hpp"
#include "kinemask/common.hpp"
#include "kinemask/nn.hpp"
#include "kinemask/tensor.hpp"

namespace kinemask::diffusion {

using nn::NamedParams;
using nn::Workspace;

struct DenoiserConfig {
    int frames = 16, height = 48, width = 48;
    int channels = 64;   // feature width d
    int blocks = 6;      // residual block count B
    int cond_dim = 128;  // conditioning embedding size
    int temb_dim = 128;  // sinusoidal timestep embedding size
    int vocab_size = 0;  // filled from the caption vocabulary by default
    int max_tokens = 128;
    int in_channels = 6;  // noisy video (3) + replicated first frame (3)
    int out_channels = 3;

    int64_t hw() const { return int64_t(height) * width; }

    nlohmann::json to_json() const {
        return nlohmann::json{{"frames", frames},     {"height", height},
                              {"width", width},       {"channels", channels},
                              {"blocks", blocks},     {"cond_dim", cond_dim},
                              {"temb_dim", temb_dim}, {"vocab_size", vocab_size},
                              {"max_tokens", max_tokens}, {"in_channels", in_channels},
                              {"out_channels", out_channels}};
    }

    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.frames = j.at("frames").get<int>();
        c.height = j.at("height").get<int>();
        c.width = j.at("width").get<int>();
        c.channels = j.at("channels").get<int>();
        c.blocks = j.at("blocks").get<int>();
        c.cond_dim = j.at("cond_dim").get<int>();
        c.temb_dim = j.at("temb_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_tokens = j.at("max_tokens").get<int>();
        c.in_channels = j.at("in_channels").get<int>();
        c.out_channels = j.at("out_channels").get<int>();
        return c;
    }

    bool operator==(const DenoiserConfig&) const = default;
};

// --- parameters -----------------------------------------------------------------

template <typename T>
struct BlockParams {
    Tensor<T> norm_g;          // [d]
    Tensor<T> sp_w, sp_b;      // [d, d*9], [d]
    Tensor<T> t_w, t_b;        // [3, d, d], [d]
    Tensor<T> film_w, film_b;  // [2d, cond], [2d]

    void alloc(int d, int cond) {
        norm_g = Tensor<T>({d});
        sp_w = Tensor<T>({d, int64_t(d) * 9});
        sp_b = Tensor<T>({d});
        t_w = Tensor<T>({3, d, d});
        t_b = Tensor<T>({d});
        film_w = Tensor<T>({int64_t(2) * d, cond});
        film_b = Tensor<T>({int64_t(2) * d});
    }

    void reg(NamedParams<T>& np, const std::string& prefix) {
        np.add(prefix + ".norm.g", norm_g);
        np.add(prefix + ".sp.w", sp_w);
        np.add(prefix + ".sp.b", sp_b);
        np.add(prefix + ".t.w", t_w);
        np.add(prefix + ".t.b", t_b);
        np.add(prefix + ".film.w", film_w);
        np.add(prefix + ".film.b", film_b);
    }
};

template <typename T>
struct DenoiserParams {
    DenoiserConfig cfg;
    Tensor<T> stem_w, stem_b;
    std::vector<BlockParams<T>> blocks;
    Tensor<T> head_norm_g, head_w, head_b;
    Tensor<T> temb1_w, temb1_b, temb2_w, temb2_b;
    Tensor<T> tok_emb;        // [V, cond]
    Tensor<T> cap_w, cap_b;   // [cond, cond], [cond]

    void alloc() {
        int d = cfg.channels, cond = cfg.cond_dim;
        stem_w = Tensor<T>({d, int64_t(cfg.in_channels) * 9});
        stem_b = Tensor<T>({d});
        blocks.resize(size_t(cfg.blocks));
        for (auto& b : blocks) b.alloc(d, cond);
        head_norm_g = Tensor<T>({d});
        head_w = Tensor<T>({cfg.out_channels, int64_t(d) * 9});
        head_b = Tensor<T>({cfg.out_channels});
        temb1_w = Tensor<T>({cond, cfg.temb_dim});
        temb1_b = Tensor<T>({cond});
        temb2_w = Tensor<T>({cond, cond});
        temb2_b = Tensor<T>({cond});
        tok_emb = Tensor<T>({cfg.vocab_size, cond});
        cap_w = Tensor<T>({cond, cond});
        cap_b = Tensor<T>({cond});
    }

    NamedParams<T> named() {
        NamedParams<T> np;
        np.add("stem.w", stem_w);
        np.add("stem.b", stem_b);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].reg(np, "blk" + std::to_string(i));
        np.add("head.norm.g", head_norm_g);
        np.add("head.w", head_w);
        np.add("head.b", head_b);
        np.add("temb1.w", temb1_w);
        np.add("temb1.b", temb1_b);
        np.add("temb2.w", temb2_w);
        np.add("temb2.b", temb2_b);
        np.add("cap.emb", tok_emb);
        np.add("cap.proj.w", cap_w);
        np.add("cap.proj.b", cap_b);
        return np;
    }
};

template <typename T>
DenoiserParams<T> zeros_like_params(const DenoiserParams<T>& p) {
    DenoiserParams<T> g;
    g.cfg = p.cfg;
    g.alloc();
    return g;
}

/// Residual branches and the output head start at zero so a fresh network is
/// the identity map onto zero output; conditioning grows in through training.
template <typename T>
DenoiserParams<T> init_denoiser(const DenoiserConfig& cfg_in, uint64_t seed) {
    DenoiserConfig cfg = cfg_in;
    if (cfg.vocab_size == 0) cfg.vocab_size = int(captions::vocab().size());
    DenoiserParams<T> p;
    p.cfg = cfg;
    p.alloc();
    Rng rng(derive_seed(seed, "denoiser-init", 0));
    auto he = [&](Tensor<T>& t, int fan_in) {
        double std = 1.0 / std::sqrt(double(fan_in));
        for (auto& v : t.data) v = T(rng.normal() * std);
    };
    he(p.stem_w, cfg.in_channels * 9);
    p.stem_b.fill(T(0));
    for (auto& b : p.blocks) {
        b.norm_g.fill(T(1));
        he(b.sp_w, cfg.channels * 9);
        b.sp_b.fill(T(0));
        b.t_w.fill(T(0));
        b.t_b.fill(T(0));
        b.film_w.fill(T(0));
        b.film_b.fill(T(0));
    }
    p.head_norm_g.fill(T(1));
    p.head_w.fill(T(0));
    p.head_b.fill(T(0));
    he(p.temb1_w, cfg.temb_dim);
    p.temb1_b.fill(T(0));
    he(p.temb2_w, cfg.cond_dim);
    p.temb2_b.fill(T(0));
    for (auto& v : p.tok_emb.data) v = T(rng.normal() * 0.02);
    he(p.cap_w, cfg.cond_dim);
    p.cap_b.fill(T(0));
    return p;
}

// --- conditioning embedding --------------------------------------------------------

template <typename T>
void sinusoidal_embedding(int t, T* out, int dim) {
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(1, half - 1)));
        out[i] = T(std::sin(double(t) * freq));
        out[half + i] = T(std::cos(double(t) * freq));
    }
}

template <typename T>
struct CondActs {
    Tensor<T> sinus;        // (B, temb_dim)
    Tensor<T> a1, a3;       // temb linear outputs (pre-silu / final)
    Tensor<T> pool, q;      // caption pooling / projection
    Tensor<T> e_pre, e;     // combined embedding before/after silu
    std::vector<int> tokens;
    std::vector<T> inv_count;  // 1 / (#non-pad tokens) per batch row
};

/// e = silu(temb2(silu(temb1(sin(t)))) + cap_proj(meanpool(emb(tokens)))).
template <typename T>
void cond_forward(const DenoiserParams<T>& p, const std::vector<int>& tokens,
                  const std::vector<int>& tsteps, CondActs<T>& a) {
    const auto& cfg = p.cfg;
    const int batch = int(tsteps.size());
    const int L = cfg.max_tokens;
    KM_CHECK(int(tokens.size()) == batch * L, usage, "cond_forward: token buffer size mismatch");
    for (int tok : tokens)
        KM_CHECK(tok >= 0 && tok < cfg.vocab_size, data,
                 "token id " << tok << " outside vocabulary of size " << cfg.vocab_size);

    a.tokens = tokens;
    a.sinus = Tensor<T>({batch, cfg.temb_dim});
    for (int b = 0; b < batch; ++b)
        sinusoidal_embedding(tsteps[size_t(b)], a.sinus.ptr() + int64_t(b) * cfg.temb_dim,
                             cfg.temb_dim);

    a.a1 = Tensor<T>({batch, cfg.cond_dim});
    nn::linear_forward(p.temb1_w, p.temb1_b, a.sinus.ptr(), a.a1.ptr(), batch, cfg.temb_dim,
                       cfg.cond_dim);
    Tensor<T> a2({batch, cfg.cond_dim});
    nn::silu_forward(a.a1.ptr(), a2.ptr(), a2.numel());
    a.a3 = Tensor<T>({batch, cfg.cond_dim});
    nn::linear_forward(p.temb2_w, p.temb2_b, a2.ptr(), a.a3.ptr(), batch, cfg.cond_dim,
                       cfg.cond_dim);

    a.pool = Tensor<T>({batch, cfg.cond_dim});
    a.inv_count.assign(size_t(batch), T(0));
    for (int b = 0; b < batch; ++b) {
        int count = 0;
        T* dst = a.pool.ptr() + int64_t(b) * cfg.cond_dim;
        for (int l = 0; l < L; ++l) {
            int tok = tokens[size_t(b) * L + l];
            if (tok == 0) continue;  // PAD
            ++count;
            const T* src = p.tok_emb.ptr() + int64_t(tok) * cfg.cond_dim;
            for (int c = 0; c < cfg.cond_dim; ++c) dst[c] += src[c];
        }
        if (count > 0) {
            a.inv_count[size_t(b)] = T(1) / T(count);
            for (int c = 0; c < cfg.cond_dim; ++c) dst[c] *= a.inv_count[size_t(b)];
        }
    }
    a.q = Tensor<T>({batch, cfg.cond_dim});
    nn::linear_forward(p.cap_w, p.cap_b, a.pool.ptr(), a.q.ptr(), batch, cfg.cond_dim,
                       cfg.cond_dim);

    a.e_pre = Tensor<T>({batch, cfg.cond_dim});
    for (int64_t i = 0; i < a.e_pre.numel(); ++i) a.e_pre[i] = a.a3[i] + a.q[i];
    a.e = Tensor<T>({batch, cfg.cond_dim});
    nn::silu_forward(a.e_pre.ptr(), a.e.ptr(), a.e.numel());
}

template <typename T>
void cond_backward(const DenoiserParams<T>& p, const CondActs<T>& a, const Tensor<T>& de,
                   DenoiserParams<T>& g) {
    const auto& cfg = p.cfg;
    const int batch = int(a.inv_count.size());
    const int L = cfg.max_tokens;
    Tensor<T> de_pre({batch, cfg.cond_dim});
    nn::silu_backward(a.e_pre.ptr(), de.ptr(), de_pre.ptr(), de_pre.numel());

    // caption branch
    Tensor<T> dpool({batch, cfg.cond_dim});
    nn::linear_backward(p.cap_w, a.pool.ptr(), de_pre.ptr(), dpool.ptr(), g.cap_w, g.cap_b, batch,
                        cfg.cond_dim, cfg.cond_dim);
    for (int b = 0; b < batch; ++b) {
        if (a.inv_count[size_t(b)] == T(0)) continue;
        const T* src = dpool.ptr() + int64_t(b) * cfg.cond_dim;
        for (int l = 0; l < L; ++l) {
            int tok = a.tokens[size_t(b) * L + l];
            if (tok == 0) continue;
            T* dst = g.tok_emb.ptr() + int64_t(tok) * cfg.cond_dim;
            for (int c = 0; c < cfg.cond_dim; ++c) dst[c] += src[c] * a.inv_count[size_t(b)];
        }
    }

    // timestep branch
    Tensor<T> a2({batch, cfg.cond_dim});
    nn::silu_forward(a.a1.ptr(), a2.ptr(), a2.numel());
    Tensor<T> da2({batch, cfg.cond_dim});
    nn::linear_backward(p.temb2_w, a2.ptr(), de_pre.ptr(), da2.ptr(), g.temb2_w, g.temb2_b, batch,
                        cfg.cond_dim, cfg.cond_dim);
    Tensor<T> da1({batch, cfg.cond_dim});
    nn::silu_backward(a.a1.ptr(), da2.ptr(), da1.ptr(), da1.numel());
    nn::linear_backward(p.temb1_w, a.sinus.ptr(), da1.ptr(), static_cast<T*>(nullptr), g.temb1_w,
                        g.temb1_b, batch, cfg.temb_dim, cfg.cond_dim);
}

// --- residual block ------------------------------------------------------------------

template <typename T>
struct BlockActs {
    Tensor<T> n1;      // rmsnorm output (pre-silu)
    Tensor<T> z2, z3;  // conv outputs (pre-silu / pre-FiLM)
    Tensor<T> a2;      // silu(z2), the temporal-conv input
    Tensor<T> sc;      // (B, 2d) FiLM scale/shift rows
};

struct VidDims {
    int batch, frames, channels;
    int64_t hw;
    int height, width;
    int64_t numel() const { return int64_t(batch) * frames * channels * hw; }
};

/// x_out = x_in + film(conv_t(silu(conv_sp(silu(rmsnorm(x_in)))))). x_out may
/// alias x_in.
template <typename T>
void block_forward(const BlockParams<T>& bp, const Tensor<T>& e, const T* x_in, T* x_out,
                   BlockActs<T>& acts, const VidDims& d, Workspace<T>& ws) {
    const int n = d.batch * d.frames;
    const int c = d.channels;
    const int64_t total = d.numel();
    const std::vector<int64_t> shape{d.batch, d.frames, c, d.hw};
    T* tmp = ws.buf(nn::kSlotBlockTmp, total);
    if (acts.n1.shape != shape) acts.n1 = Tensor<T>(shape);
    nn::rmsnorm_forward(bp.norm_g, x_in, acts.n1.ptr(), n, c, d.hw);
    nn::silu_forward(acts.n1.ptr(), tmp, total);
    if (acts.z2.shape != shape) acts.z2 = Tensor<T>(shape);
    nn::conv3x3_forward(bp.sp_w, bp.sp_b, tmp, acts.z2.ptr(), n, c, c, d.height, d.width, ws);
    if (acts.a2.shape != shape) acts.a2 = Tensor<T>(shape);
    nn::silu_forward(acts.z2.ptr(), acts.a2.ptr(), total);
    if (acts.z3.shape != shape) acts.z3 = Tensor<T>(shape);
    nn::conv_temporal_forward(bp.t_w, bp.t_b, acts.a2.ptr(), acts.z3.ptr(), d.batch, d.frames, c,
                              c, d.hw);
    if (acts.sc.shape != std::vector<int64_t>{d.batch, int64_t(2) * c})
        acts.sc = Tensor<T>({d.batch, int64_t(2) * c});
    nn::linear_forward(bp.film_w, bp.film_b, e.ptr(), acts.sc.ptr(), d.batch,
                       int(e.shape[1]), 2 * c);
    nn::film_forward(acts.sc.ptr(), acts.z3.ptr(), tmp, d.batch, d.frames, c, d.hw);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < total; ++i) x_out[i] = x_in[i] + tmp[i];
}

/// din is written (= dout + path gradient). When `gr` is null the block is
/// frozen: only din is produced. de_accum (when given) accumulates the
/// conditioning-embedding gradient.
template <typename T>
void block_backward(const BlockParams<T>& bp, const Tensor<T>& e, const T* x_in,
                    const BlockActs<T>& acts, const T* dout, T* din, BlockParams<T>* gr,
                    Tensor<T>* de_accum, const VidDims& d, Workspace<T>& ws) {
    const int n = d.batch * d.frames;
    const int c = d.channels;
    const int cond = int(e.shape[1]);
    const int64_t total = d.numel();

    T* dz3 = ws.buf(nn::kSlotBlockTmp, total);
    Tensor<T> dsc;
    if (gr) dsc = Tensor<T>({d.batch, int64_t(2) * c});
    nn::film_backward(acts.sc.ptr(), acts.z3.ptr(), dout, dz3, gr ? dsc.ptr() : nullptr, d.batch,
                      d.frames, c, d.hw);
    if (gr) {
        Tensor<T> de_local({d.batch, cond});
        nn::linear_backward(bp.film_w, e.ptr(), dsc.ptr(), de_local.ptr(), gr->film_w, gr->film_b,
                            d.batch, cond, 2 * c);
        if (de_accum)
            for (int64_t i = 0; i < de_local.numel(); ++i) (*de_accum)[i] += de_local[i];
    }

    T* da2 = ws.buf(nn::kSlotBlockDa, total);
    std::memset(da2, 0, size_t(total) * sizeof(T));
    nn::conv_temporal_backward(bp.t_w, acts.a2.ptr(), dz3, da2, gr ? &gr->t_w : nullptr,
                               gr ? &gr->t_b : nullptr, d.batch, d.frames, c, c, d.hw);

    T* dz2 = ws.buf(nn::kSlotBlockDz2, total);
    nn::silu_backward(acts.z2.ptr(), da2, dz2, total);

    // conv_sp backward; its input a1 = silu(n1) is recomputed from the saved n1
    T* a1 = ws.buf(nn::kSlotBlockA1, total);
    nn::silu_forward(acts.n1.ptr(), a1, total);
    T* da1 = ws.buf(nn::kSlotBlockDa, total);  // da2 no longer live
    nn::conv3x3_backward(bp.sp_w, a1, dz2, da1, gr ? &gr->sp_w : nullptr,
                         gr ? &gr->sp_b : nullptr, n, c, c, d.height, d.width, ws);

    T* dn1 = ws.buf(nn::kSlotBlockDn1, total);
    nn::silu_backward(acts.n1.ptr(), da1, dn1, total);
    nn::rmsnorm_backward(bp.norm_g, x_in, dn1, din, gr ? &gr->norm_g : nullptr, n, c, d.hw);

#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < total; ++i) din[i] += dout[i];  // residual passthrough
}

// --- full denoiser ---------------------------------------------------------------------

template <typename T>
struct Acts {
    Tensor<T> input;                 // (B,F,in_ch,H,W)
    std::vector<Tensor<T>> x;        // per-level activations, size blocks+1
    std::vector<BlockActs<T>> blk;
    CondActs<T> cond;
    VidDims dims{};
};

/// Assemble (B,F,6,H,W): channels 0-2 noisy video, 3-5 the first frame
/// replicated across time.
template <typename T>
void assemble_input_raw(const T* x_t, const Tensor<T>& y, Tensor<T>& input, int batch, int frames,
                        int64_t hw) {
    if (input.shape != std::vector<int64_t>{batch, frames, 6, hw})
        input = Tensor<T>({batch, frames, 6, hw});
    for (int b = 0; b < batch; ++b)
        for (int f = 0; f < frames; ++f) {
            const T* xs = x_t + ((int64_t(b) * frames + f) * 3) * hw;
            const T* ys = y.ptr() + int64_t(b) * 3 * hw;
            T* dst = input.ptr() + ((int64_t(b) * frames + f) * 6) * hw;
            std::memcpy(dst, xs, size_t(3 * hw) * sizeof(T));
            std::memcpy(dst + 3 * hw, ys, size_t(3 * hw) * sizeof(T));
        }
}

template <typename T>
void assemble_input(const Tensor<T>& x_t, const Tensor<T>& y, Tensor<T>& input, int batch,
                    int frames, int64_t hw) {
    assemble_input_raw(x_t.ptr(), y, input, batch, frames, hw);
}

/// Forward from a pre-assembled acts.input (conditioning already computed by
/// the caller via cond_forward). `taps`/`lambda` inject control residuals at
/// the first `taps->size()` block outputs.
template <typename T>
void denoiser_forward_core(const DenoiserParams<T>& p, const std::vector<int>& tsteps,
                           Acts<T>& acts, Tensor<T>& eps_out, Workspace<T>& ws,
                           const std::vector<Tensor<T>>* taps = nullptr, T lambda = T(0)) {
    const auto& cfg = p.cfg;
    const int batch = int(tsteps.size());
    const int64_t hw = cfg.hw();
    acts.dims = {batch, cfg.frames, cfg.channels, hw, cfg.height, cfg.width};
    const VidDims& d = acts.dims;
    const int n = batch * cfg.frames;

    acts.x.resize(size_t(cfg.blocks) + 1);
    acts.blk.resize(size_t(cfg.blocks));
    const std::vector<int64_t> act_shape{batch, cfg.frames, cfg.channels, hw};
    if (acts.x[0].shape != act_shape || acts.x.back().shape != act_shape)
        for (auto& t : acts.x) t = Tensor<T>(act_shape);
    nn::conv3x3_forward(p.stem_w, p.stem_b, acts.input.ptr(), acts.x[0].ptr(), n, cfg.in_channels,
                        cfg.channels, cfg.height, cfg.width, ws);

    const int ntaps = taps ? int(taps->size()) : 0;
    for (int i = 0; i < cfg.blocks; ++i) {
        block_forward(p.blocks[size_t(i)], acts.cond.e, acts.x[size_t(i)].ptr(),
                      acts.x[size_t(i) + 1].ptr(), acts.blk[size_t(i)], d, ws);
        if (i < ntaps && lambda != T(0)) {
            const Tensor<T>& r = (*taps)[size_t(i)];
            T* dst = acts.x[size_t(i) + 1].ptr();
            const int64_t total = r.numel();
#pragma omp parallel for schedule(static)
            for (int64_t j = 0; j < total; ++j) dst[j] += lambda * r[j];
        }
    }

    // head: rmsnorm -> silu -> 3x3 conv
    const int64_t act_numel = d.numel();
    T* hn = ws.buf(nn::kSlotHeadHn, act_numel);
    nn::rmsnorm_forward(p.head_norm_g, acts.x[size_t(cfg.blocks)].ptr(), hn, n, cfg.channels, hw);
    nn::silu_forward(hn, hn, act_numel);
    const std::vector<int64_t> out_shape{batch, cfg.frames, cfg.out_channels, hw};
    if (eps_out.shape != out_shape) eps_out = Tensor<T>(out_shape);
    nn::conv3x3_forward(p.head_w, p.head_b, hn, eps_out.ptr(), n, cfg.channels,
                        cfg.out_channels, cfg.height, cfg.width, ws);
}

/// Full forward pass from a noisy video tensor.
template <typename T>
void denoiser_forward(const DenoiserParams<T>& p, const Tensor<T>& x_t, const Tensor<T>& y,
                      const std::vector<int>& tokens, const std::vector<int>& tsteps,
                      Acts<T>& acts, Tensor<T>& eps_out, Workspace<T>& ws,
                      const std::vector<Tensor<T>>* taps = nullptr, T lambda = T(0)) {
    const auto& cfg = p.cfg;
    const int batch = int(tsteps.size());
    KM_CHECK(x_t.shape == (std::vector<int64_t>{batch, cfg.frames, 3, cfg.hw()}), usage,
             "denoiser_forward: x_t shape mismatch");
    assemble_input(x_t, y, acts.input, batch, cfg.frames, cfg.hw());
    cond_forward(p, tokens, tsteps, acts.cond);
    denoiser_forward_core(p, tsteps, acts, eps_out, ws, taps, lambda);
}

/// Backward from d(eps). `grads` null = frozen backbone (activation gradients
/// only). When `dtaps` is non-null it receives lambda * d(block_out_i) for the
/// first `ntaps` blocks, i.e. the gradient wrt each injected residual.
template <typename T>
void denoiser_backward(const DenoiserParams<T>& p, const Acts<T>& acts, const Tensor<T>& deps,
                       DenoiserParams<T>* grads, Workspace<T>& ws,
                       std::vector<Tensor<T>>* dtaps = nullptr, T lambda = T(0), int ntaps = 0) {
    const auto& cfg = p.cfg;
    const VidDims& d = acts.dims;
    const int n = d.batch * d.frames;
    const int64_t total = d.numel();

    // head backward (recompute hn pre-silu)
    T* hn = ws.buf(nn::kSlotHeadHn, total);
    nn::rmsnorm_forward(p.head_norm_g, acts.x[size_t(cfg.blocks)].ptr(), hn, n, cfg.channels,
                        d.hw);
    T* ha = ws.buf(nn::kSlotHeadHa, total);
    nn::silu_forward(hn, ha, total);
    T* dha = ws.buf(nn::kSlotHeadDha, total);
    nn::conv3x3_backward(p.head_w, ha, deps.ptr(), dha, grads ? &grads->head_w : nullptr,
                         grads ? &grads->head_b : nullptr, n, cfg.channels, cfg.out_channels,
                         d.height, d.width, ws);
    T* dhn = ws.buf(nn::kSlotHeadDhn, total);
    nn::silu_backward(hn, dha, dhn, total);
    T* dh = ws.buf(nn::kSlotDh, total);
    nn::rmsnorm_backward(p.head_norm_g, acts.x[size_t(cfg.blocks)].ptr(), dhn, dh,
                         grads ? &grads->head_norm_g : nullptr, n, cfg.channels, d.hw);

    Tensor<T> de({d.batch, cfg.cond_dim});
    T* dh_prev = ws.buf(nn::kSlotDhPrev, total);
    if (dtaps) dtaps->resize(size_t(ntaps));
    for (int i = cfg.blocks - 1; i >= 0; --i) {
        if (dtaps && i < ntaps) {
            auto& slot = (*dtaps)[size_t(i)];
            if (slot.shape != std::vector<int64_t>{d.batch, d.frames, d.channels, d.hw})
                slot = Tensor<T>({d.batch, d.frames, d.channels, d.hw});
            for (int64_t j = 0; j < total; ++j) slot[j] = lambda * dh[j];
        }
        // frozen backbone: once the lowest tap gradient is taken, nothing
        // below it is needed
        if (!grads && dtaps && i == 0) return;
        block_backward(p.blocks[size_t(i)], acts.cond.e, acts.x[size_t(i)].ptr(),
                       acts.blk[size_t(i)], dh, dh_prev,
                       grads ? &grads->blocks[size_t(i)] : nullptr, grads ? &de : nullptr, d, ws);
        std::swap(dh, dh_prev);
    }

    if (grads) {
        nn::conv3x3_backward(p.stem_w, acts.input.ptr(), dh, static_cast<T*>(nullptr),
                             &grads->stem_w, &grads->stem_b, n, cfg.in_channels, cfg.channels,
                             d.height, d.width, ws);
        cond_backward(p, acts.cond, de, *grads);
    }
}

/// Deterministic single prediction (Eq.-1-style conditional denoiser output).
template <typename T>
Tensor<T> denoise_predict(const DenoiserParams<T>& p, const Tensor<T>& x_t, int t,
                          const Tensor<T>& y, const std::vector<int>& tokens_padded) {
    Acts<T> acts;
    Workspace<T> ws;
    Tensor<T> eps;
    std::vector<int> ts{t};
    denoiser_forward(p, x_t, y, tokens_padded, ts, acts, eps, ws);
    return eps;
}

}  // namespace kinemask::diffusion
