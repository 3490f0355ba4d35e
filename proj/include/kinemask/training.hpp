#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/checkpoint.hpp"
#include "kinemask/dataset.hpp"
#include "kinemask/diffusion.hpp"
#include "kinemask/optim.hpp"

namespace kinemask::train {

using data::Dataset;
using diffusion::ControlParams;
using diffusion::DenoiserConfig;
using diffusion::DenoiserParams;
using diffusion::DiffusionBatch;
using diffusion::NoiseSchedule;
using json = nlohmann::json;

struct TrainConfig {
    int steps = 1000;
    int batch = 8;
    double lr = 1e-4;
    double adam_beta1 = 0.9, adam_beta2 = 0.95;
    double clip_norm = 1.0;
    double weight_decay = 0.0;
    int lr_cycles = 3;
    int sched_steps = 1000;
    double sched_beta1 = 1e-4, sched_betaT = 0.02;
    uint64_t seed = 0;
    std::string caption_mode = "rich";  // rich | null
    double caption_dropout = 0.1;       // rich mode only
    masks::CutoffSampler cutoff;        // stage-2 truncation sampler
    int log_every = 100;
    bool verbose = false;

    json to_json() const {
        return json{{"steps", steps},
                    {"batch", batch},
                    {"lr", lr},
                    {"adam_beta1", adam_beta1},
                    {"adam_beta2", adam_beta2},
                    {"clip_norm", clip_norm},
                    {"weight_decay", weight_decay},
                    {"lr_cycles", lr_cycles},
                    {"sched_steps", sched_steps},
                    {"sched_beta1", sched_beta1},
                    {"sched_betaT", sched_betaT},
                    {"seed", seed},
                    {"caption_mode", caption_mode},
                    {"caption_dropout", caption_dropout},
                    {"cutoff_mode", masks::cutoff_mode_name(cutoff.mode)}};
    }
};

// --- batch assembly -----------------------------------------------------------------

using data::mask_to_net;
using data::video_to_net;

struct BatchOptions {
    bool with_masks = false;
    bool truncate_masks = false;  // stage-2 style per-element cutoff
    std::string caption_mode = "rich";
    double caption_dropout = 0.1;
    masks::CutoffSampler cutoff;
    Rng* cutoff_rng = nullptr;  // cutoff draws come from their own stream
    int force_cutoff = -1;      // >= 0: fixed cutoff (test hook)
    int max_tokens = 128;       // must match the DenoiserConfig in use
};

/// Draws one training batch (with replacement) from one or more datasets,
/// reusing the caller's batch buffers.
inline void draw_batch(std::vector<Dataset*>& sets, int batch_size, const BatchOptions& opt,
                       Rng& rng, DiffusionBatch<float>& b,
                       std::vector<int>* cutoffs_out = nullptr) {
    KM_CHECK(!sets.empty() && sets[0]->size() > 0, data, "draw_batch: empty dataset");
    int total = 0;
    for (auto* s : sets) total += s->size();
    const auto& cfg = sets[0]->config();
    const int F = cfg.frames, H = cfg.height, W = cfg.width;
    const int64_t hw = int64_t(H) * W;
    const int L = opt.max_tokens;

    if (b.x0.shape != std::vector<int64_t>{batch_size, F, 3, hw}) {
        b.x0 = Tensor<float>({batch_size, F, 3, hw});
        b.y = Tensor<float>({batch_size, 3, hw});
    }
    b.tokens.assign(size_t(batch_size) * L, 0);
    if (opt.with_masks && b.u.shape != std::vector<int64_t>{batch_size, F, 3, hw})
        b.u = Tensor<float>({batch_size, F, 3, hw});
    if (cutoffs_out) cutoffs_out->assign(size_t(batch_size), F - 1);

    auto null_tokens = captions::pad_tokens(captions::null_caption().tokens, L);
    for (int i = 0; i < batch_size; ++i) {
        int idx = int(rng.below(total));
        Dataset* set = sets[0];
        for (auto* s : sets) {
            if (idx < s->size()) {
                set = s;
                break;
            }
            idx -= s->size();
        }
        const data::Sample& s = set->at(idx);
        video_to_net(s.video, b.x0.ptr() + int64_t(i) * F * 3 * hw);
        {
            const float* f0 = s.video.frame(0);
            float* dst = b.y.ptr() + int64_t(i) * 3 * hw;
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < 3; ++c) dst[int64_t(c) * hw + p] = 2.0f * f0[p * 3 + c] - 1.0f;
        }
        bool use_null = opt.caption_mode == "null" ||
                        (opt.caption_dropout > 0 && rng.uniform() < opt.caption_dropout);
        auto toks = use_null ? null_tokens : captions::pad_tokens(s.caption.tokens, L);
        std::copy(toks.begin(), toks.end(), b.tokens.begin() + int64_t(i) * L);

        if (opt.with_masks) {
            float* um = b.u.ptr() + int64_t(i) * F * 3 * hw;
            mask_to_net(s.mask, um);
            if (opt.truncate_masks) {
                int cut = opt.force_cutoff >= 0
                              ? opt.force_cutoff
                              : masks::sample_cutoff(F, s.trace.events, opt.cutoff,
                                                     opt.cutoff_rng ? *opt.cutoff_rng : rng);
                if (cutoffs_out) (*cutoffs_out)[size_t(i)] = cut;
                for (int f = cut + 1; f < F; ++f)
                    std::memset(um + int64_t(f) * 3 * hw, 0, size_t(3 * hw) * sizeof(float));
                // the forward pass must never see mask support past the cutoff
                for (int f = cut + 1; f < F; ++f) {
                    const float* chk = um + int64_t(f) * 3 * hw;
                    for (int64_t p = 0; p < 3 * hw; ++p)
                        KM_CHECK(chk[p] == 0.0f, training,
                                 "truncated mask has support past cutoff " << cut);
                }
            }
        }
    }
}

// --- training loops -----------------------------------------------------------------

struct TrainLog {
    std::vector<double> losses;
    std::vector<int> cutoffs;  // stage-2: every sampled f*
    double median_head(double frac) const {  // median of the first frac of steps
        return median_range(0, int(double(losses.size()) * frac));
    }
    double median_tail(double frac) const {
        return median_range(int(double(losses.size()) * (1 - frac)), int(losses.size()));
    }
    double median_range(int lo, int hi) const {
        std::vector<double> v(losses.begin() + lo, losses.begin() + hi);
        if (v.empty()) return 0;
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    }
};

/// Caption-conditioned backbone pretraining (the stand-in for the paper's
/// frozen pretrained I2V model).
inline TrainLog train_backbone(DenoiserParams<float>& theta, std::vector<Dataset*> sets,
                               const TrainConfig& tc) {
    NoiseSchedule sched = diffusion::make_schedule(tc.sched_steps, tc.sched_beta1, tc.sched_betaT);
    auto np = theta.named();
    optim::AdamW<float> opt(np);
    opt.beta1 = tc.adam_beta1;
    opt.beta2 = tc.adam_beta2;
    opt.clip_norm = tc.clip_norm;
    opt.weight_decay = tc.weight_decay;
    optim::CosineRestarts lr{tc.lr, tc.steps, tc.lr_cycles};

    DenoiserParams<float> grads = diffusion::zeros_like_params(theta);
    auto gnp = grads.named();
    diffusion::Acts<float> acts;
    nn::Workspace<float> ws;
    Tensor<float> eps_hat, deps;
    Rng rng(derive_seed(tc.seed, "train-backbone", 0));
    BatchOptions bo;
    bo.max_tokens = theta.cfg.max_tokens;
    bo.caption_mode = tc.caption_mode;
    bo.caption_dropout = tc.caption_mode == "rich" ? tc.caption_dropout : 0.0;

    TrainLog log;
    DiffusionBatch<float> batch;
    for (int step = 0; step < tc.steps; ++step) {
        draw_batch(sets, tc.batch, bo, rng, batch);
        double loss =
            diffusion::diffusion_loss_forward(theta, batch, sched, rng, acts, eps_hat, deps, ws);
        KM_CHECK(std::isfinite(loss), training, "backbone training diverged at step " << step);
        for (auto& [n, t] : gnp.items) t->fill(0.0f);
        diffusion::denoiser_backward(theta, acts, deps, &grads, ws);
        opt.step(np, gnp, lr.lr_at(step));
        log.losses.push_back(loss);
        if (tc.verbose && (step + 1) % tc.log_every == 0)
            std::fprintf(stderr, "[backbone] step %d/%d loss %.4f\n", step + 1, tc.steps, loss);
    }
    return log;
}

/// Shared control-branch loop. Stage 1 trains on full masks; stage 2 (and
/// direct-from-scratch training) applies per-element sampled truncation.
/// force_cutoff >= 0 pins every draw (testing).
inline TrainLog train_control(ControlParams<float>& phi, const DenoiserParams<float>& theta,
                              std::vector<Dataset*> sets, const TrainConfig& tc,
                              bool truncate_masks, const std::string& tag,
                              int force_cutoff = -1) {
    NoiseSchedule sched = diffusion::make_schedule(tc.sched_steps, tc.sched_beta1, tc.sched_betaT);
    auto np = phi.named();
    optim::AdamW<float> opt(np);
    opt.beta1 = tc.adam_beta1;
    opt.beta2 = tc.adam_beta2;
    opt.clip_norm = tc.clip_norm;
    opt.weight_decay = tc.weight_decay;
    optim::CosineRestarts lr{tc.lr, tc.steps, tc.lr_cycles};

    ControlParams<float> grads = diffusion::zeros_like_params(phi);
    auto gnp = grads.named();
    nn::Workspace<float> ws;
    Rng rng(derive_seed(tc.seed, "train-control:" + tag, 0));
    Rng cutoff_rng(derive_seed(tc.seed, "cutoff:" + tag, 0));
    BatchOptions bo;
    bo.max_tokens = phi.cfg.max_tokens;
    bo.with_masks = true;
    bo.truncate_masks = truncate_masks;
    bo.caption_mode = tc.caption_mode;
    bo.caption_dropout = tc.caption_mode == "rich" ? tc.caption_dropout : 0.0;
    bo.cutoff = tc.cutoff;
    bo.cutoff_rng = &cutoff_rng;
    bo.force_cutoff = force_cutoff;

    TrainLog log;
    DiffusionBatch<float> batch;
    diffusion::ControlLossState<float> st;
    std::vector<int> cutoffs;
    for (int step = 0; step < tc.steps; ++step) {
        draw_batch(sets, tc.batch, bo, rng, batch, truncate_masks ? &cutoffs : nullptr);
        if (truncate_masks)
            log.cutoffs.insert(log.cutoffs.end(), cutoffs.begin(), cutoffs.end());
        for (auto& [n, t] : gnp.items) t->fill(0.0f);
        double loss = diffusion::control_loss(phi, theta, batch, sched, rng, &grads, ws, st);
        KM_CHECK(std::isfinite(loss), training,
                 "control training (" << tag << ") diverged at step " << step);
        opt.step(np, gnp, lr.lr_at(step));
        log.losses.push_back(loss);
        if (tc.verbose && (step + 1) % tc.log_every == 0)
            std::fprintf(stderr, "[%s] step %d/%d loss %.4f\n", tag.c_str(), step + 1, tc.steps,
                         loss);
    }
    return log;
}

/// Stage 1 (full masks): fresh branch copied from theta, optimizer state fresh.
inline ControlParams<float> train_stage1(const DenoiserParams<float>& theta,
                                         std::vector<Dataset*> sets, const TrainConfig& tc,
                                         int taps, float lambda, TrainLog* log = nullptr) {
    ControlParams<float> phi = diffusion::init_control(theta, taps, lambda, tc.seed);
    TrainLog l = train_control(phi, theta, sets, tc, /*truncate=*/false, "stage1");
    if (log) *log = l;
    return phi;
}

/// Stage 2 (sampled truncation): fine-tunes a stage-1 branch; optimizer
/// moments are not carried over.
inline ControlParams<float> train_stage2(ControlParams<float> phi_prime,
                                         const DenoiserParams<float>& theta,
                                         std::vector<Dataset*> sets, const TrainConfig& tc,
                                         TrainLog* log = nullptr) {
    TrainLog l = train_control(phi_prime, theta, sets, tc, /*truncate=*/true, "stage2");
    if (log) *log = l;
    return phi_prime;
}

// --- one-command recipe ------------------------------------------------------------

struct RecipeConfig {
    fs::path data_dir;        // dataset root (train split used)
    fs::path out_dir;
    DenoiserConfig net;
    TrainConfig backbone;     // steps etc. for pretraining
    TrainConfig stage1;
    TrainConfig stage2;
    int taps = 3;
    float lambda = 0.5f;
};

struct RecipeResult {
    fs::path backbone_path, stage1_path, stage2_path, manifest_path;
};

/// backbone pretrain -> stage 1 -> stage 2, with a manifest for exact reruns.
inline RecipeResult run_recipe(const RecipeConfig& rc) {
    fs::create_directories(rc.out_dir);
    RecipeResult res;
    res.backbone_path = rc.out_dir / "backbone.ckpt";
    res.stage1_path = rc.out_dir / "stage1.ckpt";
    res.stage2_path = rc.out_dir / "stage2.ckpt";
    res.manifest_path = rc.out_dir / "recipe.json";

    Dataset train_set(rc.data_dir, "train");
    std::vector<Dataset*> sets{&train_set};

    DenoiserParams<float> theta;
    std::string theta_fp;
    try {
        theta = diffusion::init_denoiser<float>(rc.net, rc.backbone.seed);
        train_backbone(theta, sets, rc.backbone);
        ckpt::save_backbone(res.backbone_path, theta, rc.backbone.steps);
        theta_fp = ckpt::params_fingerprint(theta);
    } catch (const Error& e) {
        throw Error(e.kind(), std::string("recipe stage 'backbone': ") + e.what());
    }

    std::string phi1_fp;
    try {
        ControlParams<float> phi1 = train_stage1(theta, sets, rc.stage1, rc.taps, rc.lambda);
        ckpt::save_control(res.stage1_path, phi1, 1, rc.stage1.steps, theta_fp);
        phi1_fp = ckpt::params_fingerprint(phi1);
        ControlParams<float> phi2 = train_stage2(std::move(phi1), theta, sets, rc.stage2);
        ckpt::save_control(res.stage2_path, phi2, 2, rc.stage2.steps, theta_fp, phi1_fp);
    } catch (const Error& e) {
        if (e.kind() == ErrKind::training) throw;
        throw Error(e.kind(), std::string("recipe stage 'control': ") + e.what());
    }

    json manifest{{"backbone", {{"path", res.backbone_path.string()},
                                {"fingerprint", theta_fp},
                                {"config", rc.backbone.to_json()}}},
                  {"stage1", {{"path", res.stage1_path.string()},
                              {"fingerprint", phi1_fp},
                              {"config", rc.stage1.to_json()}}},
                  {"stage2", {{"path", res.stage2_path.string()},
                              {"fingerprint",
                               ckpt::load_container(res.stage2_path).header.value("fingerprint", "")},
                              {"config", rc.stage2.to_json()}}},
                  {"net", rc.net.to_json()},
                  {"taps", rc.taps},
                  {"lambda", rc.lambda}};
    write_text_file(res.manifest_path, manifest.dump(2) + "\n");
    return res;
}

}  // namespace kinemask::train
