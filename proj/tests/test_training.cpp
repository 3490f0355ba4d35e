#include <catch2/catch_amalgamated.hpp>

#include "kinemask/training.hpp"

using namespace kinemask;
using namespace kinemask::train;

namespace {

/// Tiny on-disk dataset shared by the training tests; generated once.
const fs::path& smoke_dataset() {
    static const fs::path dir = [] {
        fs::path d = fs::path("test_tmp") / "train_ds";
        data::GenConfig cfg;
        cfg.mode = "interactions";
        cfg.n_train = 64;
        cfg.n_test = 4;
        cfg.height = cfg.width = 24;
        cfg.frames = 6;
        cfg.arena = 4.0;
        cfg.min_size = 0.55;
        cfg.max_size = 0.8;
        cfg.max_bodies = 3;
        cfg.master_seed = 404;
        data::generate_dataset(cfg, d);
        return d;
    }();
    return dir;
}

diffusion::DenoiserConfig smoke_net() {
    diffusion::DenoiserConfig nc;
    nc.frames = 6;
    nc.height = nc.width = 24;
    nc.channels = 16;
    nc.blocks = 2;
    nc.cond_dim = 48;
    nc.temb_dim = 48;
    nc.vocab_size = int(captions::vocab().size());
    return nc;
}

TrainConfig smoke_tc(int steps, uint64_t seed) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = 4;
    tc.seed = seed;
    tc.lr = 1e-3;  // tiny net, short run
    return tc;
}

}  // namespace

TEST_CASE("optimizer hyperparameters default to the training recipe", "[training]") {
    TrainConfig tc;
    REQUIRE(tc.lr == 1e-4);
    REQUIRE(tc.adam_beta1 == 0.9);
    REQUIRE(tc.adam_beta2 == 0.95);
    REQUIRE(tc.clip_norm == 1.0);
    REQUIRE(tc.caption_dropout == 0.1);
}

TEST_CASE("cosine-with-restarts schedule restarts", "[training]") {
    optim::CosineRestarts lr{1e-4, 900, 3};
    REQUIRE(lr.lr_at(0) == Catch::Approx(1e-4));
    REQUIRE(lr.lr_at(299) < 1e-6);           // end of cycle 1
    REQUIRE(lr.lr_at(300) == Catch::Approx(1e-4));  // restart
    REQUIRE(lr.lr_at(450) == Catch::Approx(0.5e-4).epsilon(0.01));
}

TEST_CASE("zero training steps leave the parameters untouched", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto ref = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc = smoke_tc(0, 1);
    train_backbone(theta, sets, tc);
    REQUIRE(ckpt::params_fingerprint(theta) == ckpt::params_fingerprint(ref));
}

TEST_CASE("a short backbone run reduces the loss", "[training][smoke]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc = smoke_tc(200, 2);
    auto log = train_backbone(theta, sets, tc);
    REQUIRE(int(log.losses.size()) == 200);
    REQUIRE(log.median_tail(0.1) < log.median_head(0.1));
    for (double l : log.losses) REQUIRE(std::isfinite(l));
}

TEST_CASE("backbone training is deterministic per seed", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto run = [&](uint64_t seed) {
        auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
        auto tc = smoke_tc(20, seed);
        train_backbone(theta, sets, tc);
        return ckpt::params_fingerprint(theta);
    };
    REQUIRE(run(3) == run(3));
    REQUIRE(run(3) != run(4));
}

TEST_CASE("stage 1 leaves theta frozen and learns", "[training][smoke]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc0 = smoke_tc(60, 6);
    train_backbone(theta, sets, tc0);
    std::string theta_fp = ckpt::params_fingerprint(theta);

    SECTION("zero steps return the fresh copy") {
        auto tc = smoke_tc(0, 7);
        auto phi = train_stage1(theta, sets, tc, 1, 0.5f);
        auto fresh = diffusion::init_control(theta, 1, 0.5f, tc.seed);
        REQUIRE(ckpt::params_fingerprint(phi) == ckpt::params_fingerprint(fresh));
    }
    SECTION("a smoke run decreases the control loss and keeps theta fixed") {
        auto tc = smoke_tc(150, 8);
        TrainLog log;
        auto phi = train_stage1(theta, sets, tc, 1, 0.5f, &log);
        REQUIRE(log.median_tail(0.1) < log.median_head(0.1));
        REQUIRE(ckpt::params_fingerprint(theta) == theta_fp);
        REQUIRE(log.cutoffs.empty());  // stage 1 never truncates
    }
}

TEST_CASE("stage 2 samples cutoffs in range and trains", "[training][smoke]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc0 = smoke_tc(60, 9);
    train_backbone(theta, sets, tc0);

    auto tc1 = smoke_tc(60, 10);
    auto phi1 = train_stage1(theta, sets, tc1, 1, 0.5f);

    auto tc2 = smoke_tc(60, 11);
    tc2.cutoff.mode = masks::CutoffMode::collision_aware;
    TrainLog log;
    auto phi2 = train_stage2(phi1, theta, sets, tc2, &log);
    REQUIRE(int(log.cutoffs.size()) == 60 * tc2.batch);  // every sampled f* logged
    for (int c : log.cutoffs) {
        REQUIRE(c >= 0);
        REQUIRE(c <= smoke_net().frames - 1);
    }
    REQUIRE(std::isfinite(log.losses.back()));
    REQUIRE(ckpt::params_fingerprint(phi2) != ckpt::params_fingerprint(phi1));
}

TEST_CASE("stage 2 with the cutoff pinned to F-1 reproduces stage 1 exactly", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc0 = smoke_tc(40, 12);
    train_backbone(theta, sets, tc0);

    auto tc = smoke_tc(50, 13);
    auto phi_a = diffusion::init_control(theta, 1, 0.5f, 99);
    auto log_a = train_control(phi_a, theta, sets, tc, /*truncate=*/false, "stage1");
    auto phi_b = diffusion::init_control(theta, 1, 0.5f, 99);
    auto log_b = train_control(phi_b, theta, sets, tc, /*truncate=*/true, "stage1",
                               /*force_cutoff=*/smoke_net().frames - 1);
    REQUIRE(log_a.losses == log_b.losses);
    REQUIRE(ckpt::params_fingerprint(phi_a) == ckpt::params_fingerprint(phi_b));
}

TEST_CASE("stage-2 first step carries no optimizer state from stage 1", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    train_backbone(theta, sets, smoke_tc(40, 14));

    auto tc_short = smoke_tc(10, 15);
    auto tc_long = smoke_tc(80, 15);
    auto phi_short = train_stage1(theta, sets, tc_short, 1, 0.5f);
    auto phi_long = train_stage1(theta, sets, tc_long, 1, 0.5f);

    // make both branches identical, then take one stage-2 step: the updates
    // must match because stage 2 always starts from fresh moments
    phi_long = phi_short;
    auto tc2 = smoke_tc(1, 16);
    auto a = train_stage2(phi_short, theta, sets, tc2);
    auto b = train_stage2(phi_long, theta, sets, tc2);
    REQUIRE(ckpt::params_fingerprint(a) == ckpt::params_fingerprint(b));
}

TEST_CASE("divergent training aborts with a training error", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    auto theta = diffusion::init_denoiser<float>(smoke_net(), 5);
    auto tc = smoke_tc(200, 17);
    tc.lr = 1e12;  // guaranteed blow-up
    tc.clip_norm = 0.0;
    try {
        train_backbone(theta, sets, tc);
        FAIL("expected divergence");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrKind::training);
    }
}

TEST_CASE("run_recipe emits a lineage-consistent manifest", "[training][smoke]") {
    fs::path out = fs::path("test_tmp") / "recipe";
    fs::remove_all(out);
    RecipeConfig rc;
    rc.data_dir = smoke_dataset();
    rc.out_dir = out;
    rc.net = smoke_net();
    rc.backbone = smoke_tc(30, 18);
    rc.stage1 = smoke_tc(10, 19);
    rc.stage2 = smoke_tc(10, 20);
    rc.taps = 1;
    auto res = run_recipe(rc);

    ckpt::BackboneMeta bmeta;
    ckpt::load_backbone<float>(res.backbone_path, &bmeta);
    ckpt::ControlMeta m1, m2;
    ckpt::load_control<float>(res.stage1_path, &m1);
    ckpt::load_control<float>(res.stage2_path, &m2);
    REQUIRE(m1.stage == 1);
    REQUIRE(m2.stage == 2);
    REQUIRE(m1.backbone_fingerprint == bmeta.fingerprint);
    REQUIRE(m2.backbone_fingerprint == bmeta.fingerprint);
    REQUIRE(m2.parent_fingerprint == m1.fingerprint);  // stage lineage

    auto manifest = nlohmann::json::parse(read_text_file(res.manifest_path));
    REQUIRE(manifest.at("backbone").at("fingerprint").get<std::string>() == bmeta.fingerprint);
    REQUIRE(manifest.at("stage1").at("fingerprint").get<std::string>() == m1.fingerprint);

    // rerunning the recipe with the same seeds reproduces the checkpoints
    fs::path out2 = fs::path("test_tmp") / "recipe2";
    fs::remove_all(out2);
    rc.out_dir = out2;
    auto res2 = run_recipe(rc);
    ckpt::ControlMeta m2b;
    ckpt::load_control<float>(res2.stage2_path, &m2b);
    REQUIRE(m2b.fingerprint == m2.fingerprint);
}

TEST_CASE("caption modes control the batch captions", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    Rng rng(21);
    BatchOptions bo;
    bo.caption_mode = "null";
    diffusion::DiffusionBatch<float> batch;
    draw_batch(sets, 4, bo, rng, batch);
    auto null_toks = captions::pad_tokens(captions::null_caption().tokens, bo.max_tokens);
    for (int i = 0; i < 4; ++i)
        for (int l = 0; l < bo.max_tokens; ++l)
            REQUIRE(batch.tokens[size_t(i) * bo.max_tokens + l] == null_toks[size_t(l)]);

    // rich mode with dropout off never produces the null caption for these
    // event-rich samples
    bo.caption_mode = "rich";
    bo.caption_dropout = 0.0;
    draw_batch(sets, 4, bo, rng, batch);
    for (int i = 0; i < 4; ++i) {
        bool is_null = true;
        for (int l = 0; l < bo.max_tokens; ++l)
            if (batch.tokens[size_t(i) * bo.max_tokens + l] != null_toks[size_t(l)])
                is_null = false;
        REQUIRE_FALSE(is_null);
    }
}

TEST_CASE("truncated batches never expose mask support past the cutoff", "[training]") {
    data::Dataset set(smoke_dataset(), "train");
    std::vector<data::Dataset*> sets{&set};
    Rng rng(22);
    BatchOptions bo;
    bo.with_masks = true;
    bo.truncate_masks = true;
    bo.cutoff.mode = masks::CutoffMode::uniform;
    diffusion::DiffusionBatch<float> batch;
    std::vector<int> cutoffs;
    const auto& cfg = set.config();
    const int64_t per_frame = 3 * int64_t(cfg.height) * cfg.width;
    for (int rep = 0; rep < 5; ++rep) {
        draw_batch(sets, 4, bo, rng, batch, &cutoffs);
        for (int i = 0; i < 4; ++i) {
            REQUIRE(cutoffs[size_t(i)] >= 0);
            REQUIRE(cutoffs[size_t(i)] < cfg.frames);
            for (int f = cutoffs[size_t(i)] + 1; f < cfg.frames; ++f) {
                const float* fr =
                    batch.u.ptr() + (int64_t(i) * cfg.frames + f) * per_frame;
                for (int64_t p = 0; p < per_frame; ++p) REQUIRE(fr[p] == 0.0f);
            }
        }
    }
}
