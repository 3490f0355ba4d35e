#include <catch2/catch_amalgamated.hpp>

#include "kinemask/eval.hpp"
#include "kinemask/inference.hpp"
#include "kinemask/training.hpp"

using namespace kinemask;

namespace {

/// Desk-geometry dataset (48x48, large bodies) for segmentation-grade tests.
const fs::path& eval_dataset() {
    static const fs::path dir = [] {
        fs::path d = fs::path("test_tmp") / "eval_ds";
        data::GenConfig cfg;
        cfg.mode = "simple";
        cfg.n_train = 0;
        cfg.n_test = 8;
        cfg.master_seed = 777;
        data::generate_dataset(cfg, d);
        return d;
    }();
    return dir;
}

render::VideoTensor video_of(const data::Sample& s) { return s.video; }

}  // namespace

TEST_CASE("video_mse endpoints and oracle agreement", "[eval]") {
    auto a = render::VideoTensor::zeros(2, 8, 8, 12.0);
    auto b = render::VideoTensor::zeros(2, 8, 8, 12.0);
    REQUIRE(eval::video_mse(a, a) == 0.0);

    b.data.fill(1.0f);
    REQUIRE(eval::video_mse(a, b) == Catch::Approx(65025.0));  // 255^2

    Rng rng(3);
    for (auto& v : a.data.data) v = float(rng.uniform(0, 1));
    for (auto& v : b.data.data) v = float(rng.uniform(0, 1));
    // naive double-loop oracle
    double acc = 0;
    for (int64_t i = 0; i < a.data.numel(); ++i) {
        double d = 255.0 * (double(a.data[i]) - double(b.data[i]));
        acc += d * d;
    }
    double oracle = acc / double(a.data.numel());
    REQUIRE(eval::video_mse(a, b) == Catch::Approx(oracle).margin(1e-6));

    auto c = render::VideoTensor::zeros(3, 8, 8, 12.0);
    REQUIRE_THROWS_AS(eval::video_mse(a, c), Error);
}

TEST_CASE("color segmentation recovers renderer masks on clean frames", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    const auto& manifest = set.manifest();
    for (int i = 0; i < set.size(); ++i) {
        const auto& s = set.at(i);
        auto palette = eval::scene_palette(s.trace, manifest);
        auto seg = eval::segment_by_color(s.video, palette);
        auto style = data::style_for(set.config(), s.trace.spec);
        std::vector<eval::MaskStack> gt(palette.size());
        for (size_t k = 0; k < s.trace.spec.bodies.size(); ++k)
            for (int f = 0; f < s.trace.frames; ++f)
                gt[k].push_back(render::rasterize_object_mask(
                    s.trace.states[size_t(f)], s.trace.spec.bodies, s.trace.spec.bodies[k].id,
                    style));
        double iou = eval::mask_iou(seg, gt);
        INFO("sample " << i << " IoU " << iou);
        REQUIRE(iou >= 0.95);
    }
}

TEST_CASE("segmentation edge behavior", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    const auto& s = set.at(0);
    auto palette = eval::scene_palette(s.trace, set.manifest());

    SECTION("background-only frames give empty masks") {
        auto st = data::style_for(set.config(), s.trace.spec);
        auto bg = render::make_texture(st);
        render::VideoTensor v = render::VideoTensor::zeros(1, st.height, st.width, 12.0);
        std::copy(bg.data.begin(), bg.data.end(), v.frame(0));
        auto seg = eval::segment_by_color(v, palette);
        for (const auto& stack : seg)
            for (const auto& m : stack)
                for (int64_t p = 0; p < m.numel(); ++p) REQUIRE(m[p] == 0);
    }
    SECTION("zero tolerance on quantized frames leaves near-empty masks") {
        fs::path dir = fs::path("test_tmp") / "quantized";
        fs::remove_all(dir);
        render::export_video_png(s.video, dir);
        auto quant = render::import_video_png(dir, s.video.frames(), s.video.fps);
        auto seg = eval::segment_by_color(quant, palette, 0.0);
        int64_t hits = 0;
        for (const auto& stack : seg)
            for (const auto& m : stack)
                for (int64_t p = 0; p < m.numel(); ++p) hits += m[p];
        // 8-bit palette values rarely land exactly on the float palette
        REQUIRE(hits <= s.video.data.numel() / 3 / 100);
    }
}

TEST_CASE("mask_iou arithmetic", "[eval]") {
    auto mk = [](std::initializer_list<int> on) {
        Tensor<uint8_t> m({4, 4});
        for (int p : on) m[p] = 1;
        return m;
    };
    eval::MaskStack a{mk({0, 1, 2, 3})};
    eval::MaskStack b{mk({0, 1, 2, 3})};
    REQUIRE(eval::mask_iou({a}, {b}) == 1.0);

    eval::MaskStack c{mk({4, 5, 6, 7})};
    REQUIRE(eval::mask_iou({a}, {c}) == 0.0);

    // two "unit squares" overlapping half: |I| = 2, |U| = 6 -> 1/3
    eval::MaskStack d{mk({0, 1, 4, 5})};
    eval::MaskStack e{mk({1, 2, 5, 6})};
    REQUIRE(eval::mask_iou({d}, {e}) == Catch::Approx(1.0 / 3));

    // both-empty frames are skipped; one-sided empties count as zero
    eval::MaskStack empty{mk({})};
    REQUIRE(eval::mask_iou({empty}, {empty}) == 1.0);  // nothing counted
    REQUIRE(eval::mask_iou({a}, {empty}) == 0.0);
}

TEST_CASE("trajectory error measures centroid displacement", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    const auto& s = set.at(1);
    auto palette = eval::scene_palette(s.trace, set.manifest());

    auto te0 = eval::trajectory_error(s.video, s.video, palette);
    REQUIRE(te0.mean_centroid_dist == Catch::Approx(0.0).margin(1e-9));

    // shift every body k pixels right by re-rendering a shifted trace
    const double k_px = 4.0;
    auto shifted_trace = s.trace;
    double units = k_px * s.trace.spec.arena / set.config().width;
    for (auto& frame : shifted_trace.states)
        for (auto& st : frame) st.position.x += units;
    auto style = data::style_for(set.config(), s.trace.spec);
    auto shifted = render::render_video(shifted_trace, style);
    auto te = eval::trajectory_error(shifted, s.video, palette);
    REQUIRE(te.mean_centroid_dist == Catch::Approx(k_px).margin(0.35));

    // an object missing from the prediction pays the diagonal penalty
    auto gone_trace = s.trace;
    for (auto& frame : gone_trace.states) frame[0].position = {1e3, 1e3};
    auto gone = render::render_video(gone_trace, style);
    auto te_gone = eval::trajectory_error(gone, s.video, palette);
    double diag = std::hypot(48.0, 48.0);
    REQUIRE(te_gone.mean_centroid_dist >= diag / double(s.trace.spec.bodies.size()) - 1.0);
}

TEST_CASE("direction adherence endpoints", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    const auto& s = set.at(2);
    auto movers = masks::frame0_movers(s.trace);
    REQUIRE_FALSE(movers.empty());
    size_t mi = movers[0];
    auto color = eval::scene_palette(s.trace, set.manifest())[mi];
    auto v = s.trace.states[0][mi].velocity;

    REQUIRE(eval::direction_adherence(s.video, {v.x, v.y}, color) > 0.9);
    REQUIRE(eval::direction_adherence(s.video, {-v.x, -v.y}, color) < -0.9);
    REQUIRE_THROWS_AS(eval::direction_adherence(s.video, {0, 0}, color), Error);

    // static object: displacement under half a pixel returns 0
    for (size_t k = 0; k < s.trace.spec.bodies.size(); ++k) {
        if (std::find(movers.begin(), movers.end(), k) != movers.end()) continue;
        auto c2 = eval::scene_palette(s.trace, set.manifest())[k];
        REQUIRE(eval::direction_adherence(s.video, {1, 0}, c2) == 0.0);
    }
}

TEST_CASE("ground-truth videos adhere to their own commands", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    double acc = 0;
    int n = 0;
    for (int i = 0; i < set.size(); ++i) {
        const auto& s = set.at(i);
        auto palette = eval::scene_palette(s.trace, set.manifest());
        for (size_t mi : masks::frame0_movers(s.trace)) {
            auto v = s.trace.states[0][mi].velocity;
            acc += eval::direction_adherence(s.video, {v.x, v.y}, palette[mi]);
            ++n;
        }
    }
    REQUIRE(n > 0);
    REQUIRE(acc / n >= 0.95);
}

TEST_CASE("eval_report on a ground-truth copy is near-perfect", "[eval]") {
    data::Dataset set(eval_dataset(), "test");
    fs::path pred = fs::path("test_tmp") / "pred_copy";
    fs::remove_all(pred);
    for (int i = 0; i < set.size(); ++i)
        render::export_video_png(set.at(i).video, pred / data::sample_name(i));

    auto rep = eval::eval_report(pred, eval_dataset(), "test");
    REQUIRE(rep.counted == set.size());
    REQUIRE(rep.missing.empty());
    REQUIRE(rep.aggregate.mse < 1.0);  // 8-bit quantization only
    REQUIRE(rep.aggregate.iou >= 0.95);
    REQUIRE(rep.aggregate.traj_mean < 0.5);

    // aggregate equals the mean of the per-sample values
    double mse = 0, iou = 0;
    for (auto& [id, m] : rep.samples) {
        mse += m.mse;
        iou += m.iou;
    }
    REQUIRE(rep.aggregate.mse == Catch::Approx(mse / rep.counted).margin(1e-9));
    REQUIRE(rep.aggregate.iou == Catch::Approx(iou / rep.counted).margin(1e-9));

    // a partial prediction directory is reported but evaluated
    fs::remove_all(pred / data::sample_name(0));
    auto rep2 = eval::eval_report(pred, eval_dataset(), "test");
    REQUIRE(rep2.counted == set.size() - 1);
    REQUIRE(rep2.missing == std::vector<std::string>{data::sample_name(0)});
}

TEST_CASE("generate is deterministic and guards the control contract", "[infer]") {
    diffusion::DenoiserConfig nc;
    nc.frames = 4;
    nc.height = nc.width = 16;
    nc.channels = 8;
    nc.blocks = 2;
    nc.cond_dim = 16;
    nc.temb_dim = 16;
    nc.max_tokens = 16;
    nc.vocab_size = int(captions::vocab().size());
    auto theta = diffusion::init_denoiser<float>(nc, 3);
    auto phi = diffusion::init_control(theta, 1, 0.5f, 4);
    auto sched = diffusion::make_schedule(20, 1e-3, 0.1);

    infer::InferRequest req;
    req.image = Tensor<float>({16, 16, 3});
    Rng rng(5);
    for (auto& v : req.image.data) v = float(rng.uniform(0, 1));
    masks::InferenceObject obj;
    obj.pixels = render::BinaryMask({16, 16});
    for (int p = 40; p < 60; ++p) obj.pixels[p] = 1;
    obj.velocity = {1.0, 0.2, 0.0};
    req.objects = {obj};
    req.sampler.steps = 5;
    req.seed = 9;

    auto a = infer::generate(theta, phi, sched, req);
    auto b = infer::generate(theta, phi, sched, req);
    REQUIRE(a.video.data.data == b.video.data.data);
    REQUIRE(a.metadata.at("mask_support_past_frame0").get<bool>() == false);
    REQUIRE(a.metadata.at("caption").get<std::string>() == captions::kNullCaption);
    REQUIRE(a.metadata.at("nonzero_z_velocity").get<bool>() == false);
    REQUIRE(a.video.frames() == 4);
    for (auto v : a.video.data.data) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }

    req.objects[0].velocity = {1.0, 0.2, 0.7};
    auto c = infer::generate(theta, phi, sched, req);
    REQUIRE(c.metadata.at("nonzero_z_velocity").get<bool>() == true);

    infer::InferRequest bad = req;
    bad.objects.clear();
    REQUIRE_THROWS_AS(infer::generate(theta, phi, sched, bad), Error);
    bad = req;
    bad.image = Tensor<float>({8, 8, 3});
    REQUIRE_THROWS_AS(infer::generate(theta, phi, sched, bad), Error);
}

TEST_CASE("batch_generate covers the split and honors protocol flags", "[infer]") {
    // tiny dataset + tiny model so the whole loop stays fast
    fs::path dsdir = fs::path("test_tmp") / "bg_ds";
    data::GenConfig cfg;
    cfg.mode = "simple";
    cfg.n_train = 0;
    cfg.n_test = 3;
    cfg.height = cfg.width = 16;
    cfg.frames = 4;
    cfg.arena = 4.0;
    cfg.min_size = 0.6;
    cfg.max_size = 0.9;
    cfg.max_bodies = 2;
    cfg.master_seed = 31;
    data::generate_dataset(cfg, dsdir);

    diffusion::DenoiserConfig nc;
    nc.frames = 4;
    nc.height = nc.width = 16;
    nc.channels = 8;
    nc.blocks = 2;
    nc.cond_dim = 16;
    nc.temb_dim = 16;
    nc.vocab_size = int(captions::vocab().size());
    auto theta = diffusion::init_denoiser<float>(nc, 3);
    auto phi = diffusion::init_control(theta, 1, 0.5f, 4);
    auto sched = diffusion::make_schedule(20, 1e-3, 0.1);

    infer::BatchGenConfig bc;
    bc.sampler.steps = 4;
    bc.caption_mode = "null";
    bc.seed = 2;

    fs::path pred = fs::path("test_tmp") / "bg_pred";
    fs::remove_all(pred);
    int n = infer::batch_generate(theta, &phi, sched, dsdir, "test", pred, bc);
    REQUIRE(n == 3);
    for (int i = 0; i < 3; ++i) {
        fs::path sdir = pred / data::sample_name(i);
        REQUIRE(fs::exists(sdir / "frames" / "0003.png"));
        auto meta = nlohmann::json::parse(read_text_file(sdir / "pred_meta.json"));
        REQUIRE(meta.at("caption_mode").get<std::string>() == "null");
        REQUIRE(meta.at("control").get<std::string>() == "frame0");
        REQUIRE(meta.at("reads_gt_masks_past_frame0").get<bool>() == false);
    }

    // full-mask protocol is recorded as privileged
    fs::path pred_full = fs::path("test_tmp") / "bg_pred_full";
    fs::remove_all(pred_full);
    bc.control = infer::ControlFeed::full;
    infer::batch_generate(theta, &phi, sched, dsdir, "test", pred_full, bc);
    auto meta = nlohmann::json::parse(
        read_text_file(pred_full / "000000" / "pred_meta.json"));
    REQUIRE(meta.at("reads_gt_masks_past_frame0").get<bool>() == true);

    // deterministic reruns produce identical pixel content
    fs::path pred2 = fs::path("test_tmp") / "bg_pred2";
    fs::remove_all(pred2);
    bc.control = infer::ControlFeed::frame0;
    infer::batch_generate(theta, &phi, sched, dsdir, "test", pred2, bc);
    auto v1 = render::import_video_png(pred / "000001", 4, 12.0);
    auto v2 = render::import_video_png(pred2 / "000001", 4, 12.0);
    REQUIRE(v1.data.data == v2.data.data);
}

TEST_CASE("backbone checkpoints round-trip bit-exactly", "[infer]") {
    diffusion::DenoiserConfig nc;
    nc.frames = 2;
    nc.height = nc.width = 8;
    nc.channels = 8;
    nc.blocks = 2;
    nc.cond_dim = 16;
    nc.temb_dim = 16;
    nc.vocab_size = int(captions::vocab().size());
    auto theta = diffusion::init_denoiser<float>(nc, 12);
    fs::path path = fs::path("test_tmp") / "bb.ckpt";
    ckpt::save_backbone(path, theta, 42);
    ckpt::BackboneMeta meta;
    auto back = ckpt::load_backbone<float>(path, &meta);
    REQUIRE(meta.step == 42);
    REQUIRE(ckpt::params_fingerprint(back) == ckpt::params_fingerprint(theta));
    REQUIRE(back.cfg == theta.cfg);

    // corrupting the payload is caught by the fingerprint
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-4, std::ios::end);
        float junk = 1234.5f;
        f.write(reinterpret_cast<const char*>(&junk), 4);
    }
    REQUIRE_THROWS_AS(ckpt::load_backbone<float>(path), Error);
    // and a control loader refuses a backbone file
    ckpt::save_backbone(path, theta, 1);
    REQUIRE_THROWS_AS(ckpt::load_control<float>(path), Error);
}
