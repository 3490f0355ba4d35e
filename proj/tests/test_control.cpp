#include <catch2/catch_amalgamated.hpp>

#include "kinemask/captions.hpp"
#include "kinemask/checkpoint.hpp"
#include "kinemask/control.hpp"
#include "kinemask/diffusion.hpp"

using namespace kinemask;
using namespace kinemask::diffusion;

namespace {

DenoiserConfig tiny_cfg() {
    DenoiserConfig c;
    c.frames = 3;
    c.height = c.width = 8;
    c.channels = 8;
    c.blocks = 3;
    c.cond_dim = 16;
    c.temb_dim = 16;
    c.max_tokens = 8;
    c.vocab_size = int(captions::vocab().size());
    return c;
}

template <typename P>
void wake_up(P& params, uint64_t seed, double scale = 0.05) {
    Rng rng(seed);
    auto np = params.named();
    for (auto& [name, t] : np.items) {
        bool zeroed = true;
        for (auto v : t->data)
            if (v != 0) zeroed = false;
        if (zeroed)
            for (auto& v : t->data)
                v = std::remove_reference_t<decltype(v)>(rng.normal() * scale);
    }
}

struct Fixture {
    DenoiserConfig cfg = tiny_cfg();
    DenoiserParams<float> theta;
    Tensor<float> x, y, u;
    std::vector<int> tokens;
    std::vector<int> ts{5, 9};

    Fixture() {
        theta = init_denoiser<float>(cfg, 1);
        wake_up(theta, 2);
        x = Tensor<float>({2, cfg.frames, 3, cfg.hw()});
        y = Tensor<float>({2, 3, cfg.hw()});
        u = Tensor<float>({2, cfg.frames, 3, cfg.hw()});
        Rng rng(3);
        for (auto& v : x.data) v = float(rng.normal());
        for (auto& v : y.data) v = float(rng.uniform(-1, 1));
        for (auto& v : u.data) v = float(rng.uniform(-0.5, 0.5));
        tokens.assign(size_t(2) * cfg.max_tokens, 0);
        tokens[0] = 4;
    }

    Tensor<float> backbone_out() {
        Acts<float> acts;
        nn::Workspace<float> ws;
        Tensor<float> eps;
        denoiser_forward(theta, x, y, tokens, ts, acts, eps, ws);
        return eps;
    }
};

}  // namespace

TEST_CASE("init_control copies the backbone and zeroes every projection", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    REQUIRE(phi.taps == 2);
    REQUIRE(phi.lambda == 0.5f);  // paper's control weight
    for (const auto& w : phi.proj_w)
        for (auto v : w.data) REQUIRE(v == 0.0f);
    for (const auto& b : phi.proj_b)
        for (auto v : b.data) REQUIRE(v == 0.0f);
    REQUIRE(phi.stem_w.data == fx.theta.stem_w.data);
    REQUIRE(phi.stem_b.data == fx.theta.stem_b.data);
    for (int i = 0; i < phi.taps; ++i) {
        REQUIRE(phi.blocks[size_t(i)].sp_w.data == fx.theta.blocks[size_t(i)].sp_w.data);
        REQUIRE(phi.blocks[size_t(i)].t_w.data == fx.theta.blocks[size_t(i)].t_w.data);
        REQUIRE(phi.blocks[size_t(i)].film_w.data == fx.theta.blocks[size_t(i)].film_w.data);
    }
    REQUIRE_THROWS_AS(init_control(fx.theta, 0, 0.5f, 7), Error);
    REQUIRE_THROWS_AS(init_control(fx.theta, fx.cfg.blocks + 1, 0.5f, 7), Error);
}

TEST_CASE("fresh control branches emit exactly-zero residuals", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    Acts<float> bb;
    ControlActs<float> ctl;
    std::vector<Tensor<float>> residuals;
    nn::Workspace<float> ws;
    assemble_input(fx.x, fx.y, bb.input, 2, fx.cfg.frames, fx.cfg.hw());
    cond_forward(fx.theta, fx.tokens, fx.ts, bb.cond);
    control_forward(phi, fx.u, bb.input, bb.cond.e, ctl, residuals, ws);
    REQUIRE(residuals.size() == 2);
    for (const auto& r : residuals) {
        REQUIRE(r.shape == std::vector<int64_t>{2, fx.cfg.frames, fx.cfg.channels, fx.cfg.hw()});
        for (auto v : r.data) REQUIRE(v == 0.0f);
    }
}

TEST_CASE("trained-branch residuals stay defined with a zero mask", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    wake_up(phi, 8);  // give the projections nonzero weights
    Tensor<float> zero_u({2, fx.cfg.frames, 3, fx.cfg.hw()});
    Acts<float> bb;
    ControlActs<float> ctl;
    std::vector<Tensor<float>> residuals;
    nn::Workspace<float> ws;
    assemble_input(fx.x, fx.y, bb.input, 2, fx.cfg.frames, fx.cfg.hw());
    cond_forward(fx.theta, fx.tokens, fx.ts, bb.cond);
    control_forward(phi, zero_u, bb.input, bb.cond.e, ctl, residuals, ws);
    double nonzero = 0;
    for (const auto& r : residuals) {
        REQUIRE(all_finite(r));
        for (auto v : r.data) nonzero += std::abs(double(v));
    }
    REQUIRE(nonzero > 0.0);  // the branch also sees x_t, not only u
}

TEST_CASE("zero-init fusion is bit-identical to the bare backbone", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    auto plain = fx.backbone_out();
    Acts<float> bb;
    ControlActs<float> ctl;
    std::vector<Tensor<float>> residuals;
    Tensor<float> fused;
    nn::Workspace<float> ws;
    fused_denoise(fx.theta, phi, fx.x, fx.y, fx.tokens, fx.ts, fx.u, bb, ctl, residuals, fused,
                  ws);
    REQUIRE(max_abs_diff(fused, plain) <= 1e-12);
}

TEST_CASE("lambda = 0 bypasses even a trained branch", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    wake_up(phi, 11, 0.3);
    auto plain = fx.backbone_out();
    Acts<float> bb;
    ControlActs<float> ctl;
    std::vector<Tensor<float>> residuals;
    Tensor<float> fused;
    nn::Workspace<float> ws;
    fused_denoise(fx.theta, phi, fx.x, fx.y, fx.tokens, fx.ts, fx.u, bb, ctl, residuals, fused,
                  ws, 0.0f);
    REQUIRE(fused.data == plain.data);
}

TEST_CASE("the injected contribution is linear in lambda", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 1, 0.5f, 7);
    wake_up(phi, 12, 0.2);

    auto run = [&](float lam, Acts<float>& bb, Tensor<float>& out) {
        ControlActs<float> ctl;
        std::vector<Tensor<float>> residuals;
        nn::Workspace<float> ws;
        fused_denoise(fx.theta, phi, fx.x, fx.y, fx.tokens, fx.ts, fx.u, bb, ctl, residuals, out,
                      ws, lam);
    };
    Acts<float> bb0, bb25, bb50;
    Tensor<float> out0, out25, out50;
    run(0.0f, bb0, out0);
    run(0.25f, bb25, out25);
    run(0.5f, bb50, out50);

    // at the first tap the injection is additive: x1(lam) - x1(0) = lam * r
    const auto& base = bb0.x[1];
    const auto& a = bb25.x[1];
    const auto& b = bb50.x[1];
    double worst = 0;
    for (int64_t i = 0; i < base.numel(); ++i) {
        double da = double(a[i]) - double(base[i]);
        double db = double(b[i]) - double(base[i]);
        worst = std::max(worst, std::abs(db - 2.0 * da));
    }
    REQUIRE(worst <= 1e-6);

    // continuity of the full output as lambda -> 0
    double d_small = mean_abs_diff(out25, out0);
    double d_large = mean_abs_diff(out50, out0);
    REQUIRE(d_small > 0.0);
    REQUIRE(d_small < d_large);
    Acts<float> bb_eps;
    Tensor<float> out_eps;
    run(1e-4f, bb_eps, out_eps);
    REQUIRE(mean_abs_diff(out_eps, out0) < 1e-3 * d_large);
}

TEST_CASE("control gradients match finite differences in double", "[control]") {
    DenoiserConfig cfg = tiny_cfg();
    auto theta = init_denoiser<double>(cfg, 1);
    wake_up(theta, 2);
    auto phi = init_control(theta, 2, 0.5, uint64_t(7));
    wake_up(phi, 13);
    auto sched = make_schedule(50, 1e-4, 0.05);

    DiffusionBatch<double> batch;
    batch.x0 = Tensor<double>({2, cfg.frames, 3, cfg.hw()});
    batch.y = Tensor<double>({2, 3, cfg.hw()});
    batch.u = Tensor<double>({2, cfg.frames, 3, cfg.hw()});
    Rng rng(3);
    for (auto& v : batch.x0.data) v = rng.uniform(-1, 1);
    for (auto& v : batch.y.data) v = rng.uniform(-1, 1);
    for (auto& v : batch.u.data) v = rng.uniform(-0.5, 0.5);
    batch.tokens.assign(size_t(2) * cfg.max_tokens, 0);
    batch.tokens[0] = 3;

    auto loss_eval = [&]() {
        Rng r(43);
        nn::Workspace<double> ws;
        return control_loss(phi, theta, batch, sched, r, (ControlParams<double>*)nullptr, ws);
    };
    auto grads = zeros_like_params(phi);
    {
        Rng r(43);
        nn::Workspace<double> ws;
        control_loss(phi, theta, batch, sched, r, &grads, ws);
    }
    auto np = phi.named();
    auto gnp = grads.named();
    const double h = 1e-4;
    int64_t stride = std::max<int64_t>(1, np.total() / 1000);
    double worst = 0;
    int checked = 0;
    int64_t flat = 0;
    for (size_t k = 0; k < np.items.size(); ++k) {
        auto& t = *np.items[k].second;
        auto& g = *gnp.items[k].second;
        for (int64_t i = 0; i < t.numel(); ++i, ++flat) {
            if (flat % stride) continue;
            double orig = t[i];
            t[i] = orig + h;
            double lp = loss_eval();
            t[i] = orig - h;
            double lm = loss_eval();
            t[i] = orig;
            double fd = (lp - lm) / (2 * h);
            double rel = std::abs(fd - g[i]) / std::max(std::abs(fd) + std::abs(g[i]), 1e-6);
            worst = std::max(worst, rel);
            ++checked;
        }
    }
    INFO("checked " << checked << " parameters, worst rel err " << worst);
    REQUIRE(checked >= 900);
    REQUIRE(worst < 1e-4);
}

TEST_CASE("control training leaves the backbone checkpoint bytes unchanged", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.5f, 7);
    std::string before = ckpt::params_fingerprint(fx.theta);

    DiffusionBatch<float> batch;
    batch.x0 = fx.x;  // any tensor of the right shape works as data here
    batch.y = fx.y;
    batch.u = fx.u;
    batch.tokens = fx.tokens;
    auto sched = make_schedule(50, 1e-4, 0.05);
    auto grads = zeros_like_params(phi);
    nn::Workspace<float> ws;
    Rng rng(5);
    for (int i = 0; i < 3; ++i) control_loss(phi, fx.theta, batch, sched, rng, &grads, ws);

    REQUIRE(ckpt::params_fingerprint(fx.theta) == before);
    // and the projections receive nonzero gradients once anything flows
    double sum = 0;
    for (const auto& w : grads.proj_w)
        for (auto v : w.data) sum += std::abs(double(v));
    REQUIRE(sum > 0.0);
}

TEST_CASE("control checkpoints round-trip with lineage metadata", "[control]") {
    Fixture fx;
    auto phi = init_control(fx.theta, 2, 0.25f, 9);
    wake_up(phi, 14);
    fs::path path = fs::path("test_tmp") / "ctrl.ckpt";
    fs::remove_all(path.parent_path());
    ckpt::save_control(path, phi, 2, 123, "theta_fp", "parent_fp");
    ckpt::ControlMeta meta;
    auto back = ckpt::load_control<float>(path, &meta);
    REQUIRE(meta.stage == 2);
    REQUIRE(meta.step == 123);
    REQUIRE(meta.backbone_fingerprint == "theta_fp");
    REQUIRE(meta.parent_fingerprint == "parent_fp");
    REQUIRE(meta.lambda == 0.25);
    auto a = ckpt::pack_params(phi.named());
    auto b = ckpt::pack_params(back.named());
    REQUIRE(a.fingerprint() == b.fingerprint());
}
