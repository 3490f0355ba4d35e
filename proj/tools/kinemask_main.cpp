// kinemask: synthetic rigid-body video data, velocity-mask-conditioned
// diffusion training (two-stage mask dropout), inference, and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "kinemask/ablations.hpp"
#include "kinemask/checkpoint.hpp"
#include "kinemask/dataset.hpp"
#include "kinemask/eval.hpp"
#include "kinemask/inference.hpp"
#include "kinemask/training.hpp"

using namespace kinemask;

namespace {

uint64_t env_default_seed() {
    const char* s = std::getenv("KINEMASK_SEED");
    return s ? std::strtoull(s, nullptr, 10) : 0;
}

std::array<double, 3> parse_velocity(const std::string& s) {
    std::array<double, 3> v{0, 0, 0};
    int n = std::sscanf(s.c_str(), "%lf,%lf,%lf", &v[0], &v[1], &v[2]);
    KM_CHECK(n >= 2, usage, "--velocity expects 'vx,vy[,vz]', got '" << s << "'");
    return v;
}

Tensor<float> load_image_float(const fs::path& path) {
    ImageU8 img = read_png(path);
    Tensor<float> out({img.height, img.width, 3});
    render::image_to_frame(img, out.ptr());
    return out;
}

render::BinaryMask load_mask_png(const fs::path& path) {
    ImageU8 img = read_png(path);
    render::BinaryMask m({img.height, img.width});
    for (int64_t p = 0; p < m.numel(); ++p) {
        const unsigned char* px = img.rgb.data() + p * 3;
        m[p] = (px[0] || px[1] || px[2]) ? 1 : 0;
    }
    return m;
}

void write_run_record(const fs::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

// --- subcommand implementations ---------------------------------------------------

struct GenDataArgs {
    std::string out, mode = "simple", split = "both";
    int n = -1, n_test = -1;
    uint64_t seed = env_default_seed();
    int frames = 16, size = 48;
    int jobs = 1;
    bool paper_scale = false;
    bool mask_vis = false;
    bool quiet = false;
};

int run_gen_data(const GenDataArgs& a) {
    data::GenConfig cfg = a.paper_scale ? data::GenConfig::paper_scale() : data::GenConfig();
    cfg.mode = a.mode;
    cfg.master_seed = a.seed;
    cfg.frames = a.frames;
    cfg.height = cfg.width = a.size;
    if (a.n >= 0) {
        if (a.split == "test") cfg.n_test = a.n;
        else cfg.n_train = a.n;
    }
    if (a.n_test >= 0) cfg.n_test = a.n_test;
    if (a.split == "train") cfg.n_test = 0;
    if (a.split == "test") cfg.n_train = 0;
    auto manifest = data::generate_dataset(cfg, a.out, a.quiet, a.jobs, a.mask_vis);
    std::printf("%s\n", (fs::path(a.out) / "meta.json").string().c_str());
    (void)manifest;
    return 0;
}

struct TrainArgs {
    std::string phase = "backbone";
    std::vector<std::string> data;
    std::string init, backbone, out = "model.ckpt";
    std::string caption_mode = "rich";
    std::string cutoff = "early_biased";
    std::string mask_mode;  // "" = dataset default
    int steps = 1000, batch = 8, taps = 3;
    double lr = 1e-4, lambda = 0.5;
    uint64_t seed = env_default_seed();
    bool verbose = false;
};

int run_train(const TrainArgs& a) {
    KM_CHECK(!a.data.empty(), usage, "train: at least one --data dataset is required");
    std::optional<masks::EncodeMode> mode_override;
    if (!a.mask_mode.empty()) mode_override = masks::encode_mode_from(a.mask_mode);

    std::vector<std::unique_ptr<data::Dataset>> owned;
    std::vector<data::Dataset*> sets;
    for (const auto& d : a.data) {
        owned.push_back(std::make_unique<data::Dataset>(d, "train", mode_override));
        sets.push_back(owned.back().get());
    }
    const auto& dcfg = sets[0]->config();

    train::TrainConfig tc;
    tc.steps = a.steps;
    tc.batch = a.batch;
    tc.lr = a.lr;
    tc.seed = a.seed;
    tc.caption_mode = a.caption_mode;
    tc.cutoff.mode = masks::cutoff_mode_from(a.cutoff);
    tc.verbose = a.verbose;

    nlohmann::json run{{"phase", a.phase},
                       {"data", a.data},
                       {"seed", a.seed},
                       {"caption_mode", a.caption_mode},
                       {"cutoff_mode", a.cutoff},
                       {"mask_mode", a.mask_mode.empty() ? dcfg.mask_mode : a.mask_mode},
                       {"config", tc.to_json()}};

    if (a.phase == "backbone") {
        diffusion::DenoiserConfig nc;
        nc.frames = dcfg.frames;
        nc.height = dcfg.height;
        nc.width = dcfg.width;
        nc.vocab_size = int(captions::vocab().size());
        auto theta = diffusion::init_denoiser<float>(nc, a.seed);
        auto log = train::train_backbone(theta, sets, tc);
        ckpt::save_backbone(a.out, theta, tc.steps);
        run["checkpoint"] = a.out;
        run["fingerprint"] = ckpt::params_fingerprint(theta);
        run["final_loss"] = log.losses.empty() ? 0.0 : log.losses.back();
    } else if (a.phase == "stage1" || a.phase == "stage2") {
        KM_CHECK(!a.backbone.empty(), usage, "train: --backbone checkpoint required for " << a.phase);
        ckpt::BackboneMeta bmeta;
        auto theta = ckpt::load_backbone<float>(a.backbone, &bmeta);
        if (a.phase == "stage1") {
            train::TrainLog log;
            auto phi = train::train_stage1(theta, sets, tc, a.taps, float(a.lambda), &log);
            ckpt::save_control(a.out, phi, 1, tc.steps, bmeta.fingerprint);
            run["fingerprint"] = ckpt::params_fingerprint(phi);
            run["final_loss"] = log.losses.empty() ? 0.0 : log.losses.back();
        } else {
            KM_CHECK(!a.init.empty(), usage,
                     "train: --phase stage2 requires --init with a stage-1 checkpoint");
            ckpt::ControlMeta cmeta;
            auto phi1 = ckpt::load_control<float>(a.init, &cmeta);
            KM_CHECK(cmeta.backbone_fingerprint == bmeta.fingerprint, data,
                     "stage-1 checkpoint was trained against a different backbone (fingerprint "
                         << cmeta.backbone_fingerprint << " vs " << bmeta.fingerprint << ")");
            train::TrainLog log;
            auto phi2 = train::train_stage2(std::move(phi1), theta, sets, tc, &log);
            ckpt::save_control(a.out, phi2, 2, tc.steps, bmeta.fingerprint, cmeta.fingerprint);
            run["fingerprint"] = ckpt::params_fingerprint(phi2);
            run["parent_fingerprint"] = cmeta.fingerprint;
            run["final_loss"] = log.losses.empty() ? 0.0 : log.losses.back();
        }
        run["backbone_fingerprint"] = bmeta.fingerprint;
        run["checkpoint"] = a.out;
    } else {
        throw Error(ErrKind::usage, "train: unknown phase '" + a.phase + "'");
    }
    fs::path run_path = fs::path(a.out).parent_path() / "run.json";
    if (fs::path(a.out).parent_path().empty()) run_path = "run.json";
    write_run_record(run_path, run);
    std::printf("%s\n", a.out.c_str());
    return 0;
}

struct InferArgs {
    std::string ckpt_backbone, ckpt_control, image, caption, out = "out";
    std::vector<std::string> mask_paths, velocities;
    uint64_t seed = env_default_seed();
    int steps = 50;
    std::string method = "ddim";
    double guidance = 1.0, lambda = -1;
};

int run_infer(const InferArgs& a) {
    KM_CHECK(a.mask_paths.size() == a.velocities.size() && !a.mask_paths.empty(), usage,
             "infer: provide matching --mask/--velocity pairs (at least one)");
    ckpt::BackboneMeta bmeta;
    auto theta = ckpt::load_backbone<float>(a.ckpt_backbone, &bmeta);
    ckpt::ControlMeta cmeta;
    auto phi = ckpt::load_control<float>(a.ckpt_control, &cmeta);
    KM_CHECK(cmeta.backbone_fingerprint == bmeta.fingerprint, data,
             "control checkpoint fingerprint mismatch: branch trained against backbone "
                 << cmeta.backbone_fingerprint << ", got " << bmeta.fingerprint);

    infer::InferRequest req;
    req.image = load_image_float(a.image);
    for (size_t i = 0; i < a.mask_paths.size(); ++i) {
        masks::InferenceObject obj;
        obj.pixels = load_mask_png(a.mask_paths[i]);
        obj.velocity = parse_velocity(a.velocities[i]);
        if (obj.velocity[2] != 0.0)
            std::fprintf(stderr,
                         "warning: nonzero z velocity %.3f (training data has z = 0)\n",
                         obj.velocity[2]);
        req.objects.push_back(std::move(obj));
    }
    req.caption = a.caption.empty() ? captions::kNullCaption : a.caption;
    req.seed = a.seed;
    req.sampler.method = a.method;
    req.sampler.steps = a.steps;
    req.sampler.guidance = a.guidance;
    req.lambda_override = a.lambda;

    auto sched = diffusion::make_schedule(1000);
    auto res = infer::generate(theta, phi, sched, req);
    render::export_video_png(res.video, a.out);
    write_text_file(fs::path(a.out) / "pred_meta.json", res.metadata.dump(2) + "\n");
    std::printf("%s\n", a.out.c_str());
    return 0;
}

struct EvalArgs {
    std::string pred, gt, report = "report.json", split = "test";
};

int run_eval(const EvalArgs& a) {
    auto rep = eval::eval_report(a.pred, a.gt, a.split);
    write_text_file(a.report, rep.to_json().dump(2) + "\n");
    std::printf("%s\n", eval::report_table(rep, fs::path(a.pred).filename().string()).c_str());
    std::printf("%s\n", a.report.c_str());
    if (!rep.missing.empty()) {
        std::fprintf(stderr, "missing predictions (%zu):", rep.missing.size());
        for (const auto& id : rep.missing) std::fprintf(stderr, " %s", id.c_str());
        std::fprintf(stderr, "\n");
        return 2;
    }
    return 0;
}

struct AblateArgs {
    std::string preset = "desk", out = "runs/ablations";
    bool quiet = false;
};

int run_ablations(const AblateArgs& a) {
    auto preset = ablation::preset_by_name(a.preset);
    fs::path out = fs::path(a.out).string().empty() ? fs::path("runs/ablations") : fs::path(a.out);
    auto res = ablation::reproduce_ablations(preset, out, !a.quiet);
    std::printf("ordering checks (preset %s):\n", a.preset.c_str());
    for (const auto& r : res.rows)
        std::printf("  %-26s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.detail.c_str());
    std::printf("report: %s\n", (out / "ablation_report.json").string().c_str());
    return res.all_pass() ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"velocity-mask-conditioned video diffusion at desk scale"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI config file (flags override)");

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--out", gd.out, "output dataset directory")->required();
    gen->add_option("--mode", gd.mode, "simple | interactions")
        ->check(CLI::IsMember({"simple", "interactions"}));
    gen->add_option("--split", gd.split, "train | test | both")
        ->check(CLI::IsMember({"train", "test", "both"}));
    gen->add_option("--n", gd.n, "sample count for the chosen split");
    gen->add_option("--n-test", gd.n_test, "test sample count");
    gen->add_option("--seed", gd.seed, "master seed (default env KINEMASK_SEED)");
    gen->add_option("--frames", gd.frames, "frames per clip");
    gen->add_option("--size", gd.size, "frame height/width in pixels");
    gen->add_option("--jobs", gd.jobs, "parallel sample-generation workers");
    gen->add_flag("--paper-scale", gd.paper_scale, "paper-scale counts (10000 train / 100 test)");
    gen->add_flag("--mask-vis", gd.mask_vis, "also write human-inspection mask PNGs");
    gen->add_flag("--quiet", gd.quiet, "suppress progress output");

    TrainArgs tr;
    auto* trn = app.add_subcommand("train", "train the backbone or a control stage");
    trn->add_option("--phase", tr.phase, "backbone | stage1 | stage2")
        ->check(CLI::IsMember({"backbone", "stage1", "stage2"}));
    trn->add_option("--data", tr.data, "dataset directory (repeatable)")->required();
    trn->add_option("--backbone", tr.backbone, "backbone checkpoint (control stages)");
    trn->add_option("--init", tr.init, "stage-1 checkpoint to fine-tune (stage2)");
    trn->add_option("--out", tr.out, "output checkpoint path");
    trn->add_option("--caption-mode", tr.caption_mode, "rich | null")
        ->check(CLI::IsMember({"rich", "null"}));
    trn->add_option("--cutoff", tr.cutoff, "uniform | early_biased | collision_aware")
        ->check(CLI::IsMember({"uniform", "early_biased", "collision_aware"}));
    trn->add_option("--mask-mode", tr.mask_mode, "v_t | v_0 (override dataset encoding)")
        ->check(CLI::IsMember({"v_t", "v_0"}));
    trn->add_option("--steps", tr.steps, "optimizer steps");
    trn->add_option("--batch", tr.batch, "batch size");
    trn->add_option("--taps", tr.taps, "control taps (stage1)");
    trn->add_option("--lambda", tr.lambda, "control weight");
    trn->add_option("--lr", tr.lr, "learning rate");
    trn->add_option("--seed", tr.seed, "training seed");
    trn->add_flag("--verbose", tr.verbose, "log step losses");

    InferArgs in;
    auto* inf = app.add_subcommand("infer", "generate a video from an image + velocity masks");
    inf->add_option("--ckpt-backbone", in.ckpt_backbone, "backbone checkpoint")->required();
    inf->add_option("--ckpt-control", in.ckpt_control, "control checkpoint")->required();
    inf->add_option("--image", in.image, "input first-frame PNG")->required();
    inf->add_option("--mask", in.mask_paths, "object mask PNG, nonzero = object (repeatable)")
        ->required();
    inf->add_option("--velocity", in.velocities, "per-mask 'vx,vy[,vz]' world units/s (repeatable)")
        ->required();
    inf->add_option("--caption", in.caption, "caption text (default: the null caption)");
    inf->add_option("--seed", in.seed, "sampling seed");
    inf->add_option("--steps", in.steps, "sampler steps");
    inf->add_option("--method", in.method, "ddim | ancestral")
        ->check(CLI::IsMember({"ddim", "ancestral"}));
    inf->add_option("--guidance", in.guidance, "classifier-free guidance scale (1 = off)");
    inf->add_option("--lambda", in.lambda, "control weight override (<0 = checkpoint value)");
    inf->add_option("--out", in.out, "output directory");

    EvalArgs ev;
    auto* evl = app.add_subcommand("eval", "metrics for a prediction directory");
    evl->add_option("--pred", ev.pred, "prediction directory")->required();
    evl->add_option("--gt", ev.gt, "ground-truth dataset root")->required();
    evl->add_option("--split", ev.split, "dataset split");
    evl->add_option("--report", ev.report, "report JSON output path");

    AblateArgs ab;
    auto* abl = app.add_subcommand("reproduce-ablations", "run the ablation ordering pipeline");
    abl->add_option("--preset", ab.preset, "desk | micro | smoke")
        ->check(CLI::IsMember({"desk", "micro", "smoke"}));
    abl->add_option("--out", ab.out, "working/output directory");
    abl->add_flag("--quiet", ab.quiet, "suppress progress output");

    try {
        app.parse(argc, argv);
        if (*gen) return run_gen_data(gd);
        if (*trn) return run_train(tr);
        if (*inf) return run_infer(in);
        if (*evl) return run_eval(ev);
        if (*abl) return run_ablations(ab);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return int(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
