#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/checkpoint.hpp"
#include "kinemask/dataset.hpp"
#include "kinemask/diffusion.hpp"

namespace kinemask::infer {

using diffusion::ControlParams;
using diffusion::DenoiserParams;
using diffusion::NoiseSchedule;
using diffusion::SamplerConfig;
using json = nlohmann::json;
using masks::InferenceObject;
using render::VideoTensor;

struct InferRequest {
    Tensor<float> image;                 // H x W x 3 in [0,1]
    std::vector<InferenceObject> objects;
    std::string caption = captions::kNullCaption;
    SamplerConfig sampler;
    uint64_t seed = 0;
    double lambda_override = -1;  // <0: use the checkpoint's lambda
};

struct GenerateResult {
    VideoTensor video;
    json metadata;
};

/// Deployment path: build the frame-0-only control tensor, tokenize the
/// caption (unknown words map to UNK), run the fused sampler.
inline GenerateResult generate(const DenoiserParams<float>& theta, const ControlParams<float>& phi,
                               const NoiseSchedule& sched, const InferRequest& req) {
    const auto& cfg = theta.cfg;
    KM_CHECK(!req.objects.empty(), usage, "generate: at least one object mask required");
    KM_CHECK(req.image.shape == (std::vector<int64_t>{cfg.height, cfg.width, 3}), data,
             "generate: image dims must match the model (" << cfg.height << "x" << cfg.width
                                                           << ")");
    bool z_flagged = false;
    for (const auto& o : req.objects)
        if (o.velocity[2] != 0.0) z_flagged = true;

    masks::MaskTensor m0 = masks::build_inference_mask(req.objects, cfg.frames, cfg.height,
                                                       cfg.width, 2.0f);
    // runtime contract: the control tensor entering the sampler has zero
    // support past frame 0
    for (int f = 1; f < m0.frames(); ++f)
        for (int64_t i = 0; i < int64_t(cfg.hw()) * 3; ++i)
            KM_CHECK(m0.frame(f)[i] == 0.0f, data, "inference mask support past frame 0");

    Tensor<float> u({1, cfg.frames, 3, cfg.hw()});
    {
        const int64_t hw = cfg.hw();
        for (int f = 0; f < cfg.frames; ++f) {
            const float* src = m0.frame(f);
            float* dst = u.ptr() + int64_t(f) * 3 * hw;
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < 3; ++c) dst[int64_t(c) * hw + p] = src[p * 3 + c];
        }
    }
    Tensor<float> y({1, 3, cfg.hw()});
    {
        const int64_t hw = cfg.hw();
        for (int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c)
                y[int64_t(c) * hw + p] = 2.0f * req.image[p * 3 + c] - 1.0f;
    }
    auto token_ids = captions::tokenize(req.caption);
    auto tokens = captions::pad_tokens(token_ids, cfg.max_tokens);

    SamplerConfig sc = req.sampler;
    sc.lambda_override = req.lambda_override;
    if (sc.guidance != 1.0)
        sc.null_tokens = captions::pad_tokens(captions::null_caption().tokens, cfg.max_tokens);
    Tensor<float> x = diffusion::sample_video(theta, &phi, sched, y, tokens, &u, sc, {req.seed});
    diffusion::to_unit_range(x);

    GenerateResult res;
    res.video = VideoTensor::zeros(cfg.frames, cfg.height, cfg.width, 12.0);
    const int64_t hw = cfg.hw();
    for (int f = 0; f < cfg.frames; ++f) {
        const float* src = x.ptr() + int64_t(f) * 3 * hw;
        float* dst = res.video.frame(f);
        for (int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) dst[p * 3 + c] = src[int64_t(c) * hw + p];
    }
    res.metadata = json{{"seed", req.seed},
                        {"caption", req.caption},
                        {"tokens", token_ids},
                        {"lambda", req.lambda_override >= 0 ? req.lambda_override
                                                            : double(phi.lambda)},
                        {"sampler", sc.method},
                        {"sampler_steps", sc.steps},
                        {"guidance", sc.guidance},
                        {"objects", req.objects.size()},
                        {"nonzero_z_velocity", z_flagged},
                        {"mask_frames_nonzero", 1},
                        {"mask_support_past_frame0", false}};
    return res;
}

enum class ControlFeed { none, frame0, full };

inline std::string control_feed_name(ControlFeed c) {
    switch (c) {
        case ControlFeed::none: return "none";
        case ControlFeed::frame0: return "frame0";
        default: return "full";
    }
}

struct BatchGenConfig {
    std::string caption_mode = "null";  // rich | null
    ControlFeed control = ControlFeed::frame0;
    SamplerConfig sampler;
    uint64_t seed = 0;
    int gen_batch = 8;
    double lambda_override = -1;
    bool verbose = false;
};

/// Evaluation-protocol generation over a dataset split: requests are built
/// from ground-truth frame 0 only (first frame, frame-0 mover masks and
/// velocities), captions per caption_mode. ControlFeed::full instead feeds the
/// untruncated ground-truth mask tensor (the stage-1 upper-bound protocol);
/// ControlFeed::none runs the bare backbone.
inline int batch_generate(const DenoiserParams<float>& theta, const ControlParams<float>* phi,
                          const NoiseSchedule& sched, const fs::path& gt_root,
                          const std::string& split, const fs::path& out_dir,
                          const BatchGenConfig& bc,
                          std::optional<masks::EncodeMode> mask_override = {}) {
    KM_CHECK(fs::exists(gt_root / "meta.json"), data,
             "batch_generate: no dataset at " << gt_root.string());
    data::Dataset set(gt_root, split, mask_override);
    const auto& cfg = theta.cfg;
    const int64_t hw = cfg.hw();
    const int F = cfg.frames;
    fs::create_directories(out_dir);

    auto null_tokens = captions::pad_tokens(captions::null_caption().tokens, cfg.max_tokens);
    int done = 0;
    for (int base = 0; base < set.size(); base += bc.gen_batch) {
        int nb = std::min(bc.gen_batch, set.size() - base);
        Tensor<float> y({nb, 3, hw});
        Tensor<float> u({nb, F, 3, hw});
        std::vector<int> tokens(size_t(nb) * cfg.max_tokens, 0);
        std::vector<uint64_t> seeds(static_cast<size_t>(nb));
        std::vector<json> metas(static_cast<size_t>(nb));

        for (int i = 0; i < nb; ++i) {
            const data::Sample& s = set.at(base + i);
            KM_CHECK(s.video.height() == cfg.height && s.video.width() == cfg.width &&
                         s.video.frames() == F,
                     data, "batch_generate: dataset dims do not match the model");
            const float* f0 = s.video.frame(0);
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < 3; ++c)
                    y[(int64_t(i) * 3 + c) * hw + p] = 2.0f * f0[p * 3 + c] - 1.0f;

            auto toks = bc.caption_mode == "rich"
                            ? captions::pad_tokens(s.caption.tokens, cfg.max_tokens)
                            : null_tokens;
            std::copy(toks.begin(), toks.end(), tokens.begin() + int64_t(i) * cfg.max_tokens);
            seeds[size_t(i)] = derive_seed(bc.seed, "batch-generate", uint64_t(base + i));

            float* ui = u.ptr() + int64_t(i) * F * 3 * hw;
            if (bc.control == ControlFeed::full) {
                data::mask_to_net(s.mask, ui);
            } else if (bc.control == ControlFeed::frame0) {
                // protocol contract: only frame-0 mover masks and velocities
                // are read from the ground truth
                std::vector<InferenceObject> objs;
                render::RenderStyle style = data::style_for(set.config(), s.trace.spec);
                for (size_t mi : masks::frame0_movers(s.trace)) {
                    InferenceObject o;
                    o.pixels = render::rasterize_object_mask(s.trace.states[0], s.trace.spec.bodies,
                                                             s.trace.spec.bodies[mi].id, style);
                    const auto& v = s.trace.states[0][mi].velocity;
                    o.velocity = {v.x, v.y, 0.0};
                    objs.push_back(std::move(o));
                }
                masks::MaskTensor m0 = masks::build_inference_mask(objs, F, cfg.height, cfg.width,
                                                                   set.config().v_max);
                data::mask_to_net(m0, ui);
                for (int f = 1; f < F; ++f)
                    for (int64_t p = 0; p < 3 * hw; ++p)
                        KM_CHECK(ui[int64_t(f) * 3 * hw + p] == 0.0f, data,
                                 "frame0 control tensor has support past frame 0");
            }
            metas[size_t(i)] = json{{"seed", seeds[size_t(i)]},
                                    {"caption_mode", bc.caption_mode},
                                    {"control", control_feed_name(bc.control)},
                                    {"sampler", bc.sampler.method},
                                    {"sampler_steps", bc.sampler.steps},
                                    {"reads_gt_masks_past_frame0",
                                     bc.control == ControlFeed::full}};
        }

        SamplerConfig sc = bc.sampler;
        sc.lambda_override = bc.lambda_override;
        if (sc.guidance != 1.0) {
            sc.null_tokens.clear();
            for (int i = 0; i < nb; ++i)
                sc.null_tokens.insert(sc.null_tokens.end(), null_tokens.begin(),
                                      null_tokens.end());
        }
        Tensor<float> x = diffusion::sample_video(theta, bc.control == ControlFeed::none ? nullptr : phi,
                                                  sched, y, tokens,
                                                  bc.control == ControlFeed::none ? nullptr : &u,
                                                  sc, seeds);
        diffusion::to_unit_range(x);

        for (int i = 0; i < nb; ++i) {
            VideoTensor v = VideoTensor::zeros(F, cfg.height, cfg.width, 12.0);
            for (int f = 0; f < F; ++f) {
                const float* src = x.ptr() + (int64_t(i) * F + f) * 3 * hw;
                float* dst = v.frame(f);
                for (int64_t p = 0; p < hw; ++p)
                    for (int c = 0; c < 3; ++c) dst[p * 3 + c] = src[int64_t(c) * hw + p];
            }
            fs::path sdir = out_dir / data::sample_name(base + i);
            render::export_video_png(v, sdir);
            write_text_file(sdir / "pred_meta.json", metas[size_t(i)].dump(2) + "\n");
            ++done;
        }
        if (bc.verbose)
            std::fprintf(stderr, "[generate] %s: %d/%d\n", out_dir.filename().c_str(), done,
                         set.size());
    }
    return done;
}

}  // namespace kinemask::infer
