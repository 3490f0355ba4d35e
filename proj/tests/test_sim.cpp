#include <catch2/catch_amalgamated.hpp>

#include "kinemask/sim.hpp"

using namespace kinemask;
using namespace kinemask::sim;

namespace {

SceneGenConfig small_cfg(SceneMode mode) {
    SceneGenConfig c;
    c.mode = mode;
    c.palette_ids = {0, 1, 2, 3, 4, 5, 6, 7};
    c.frames = 16;
    c.arena = 6.0;
    return c;
}

double kinetic_energy(double m, Vec2 v) { return 0.5 * m * v.dot(v); }

}  // namespace

TEST_CASE("resolve_collision conserves momentum and never adds energy", "[sim]") {
    Rng rng(123);
    for (int it = 0; it < 1000; ++it) {
        BodySpec sa, sb;
        sa.mass = rng.uniform(0.2, 3.0);
        sb.mass = rng.uniform(0.2, 3.0);
        sa.restitution = rng.uniform(0.0, 1.0);
        sb.restitution = rng.uniform(0.0, 1.0);
        double ang = rng.uniform(0.0, 2 * M_PI);
        Vec2 n{std::cos(ang), std::sin(ang)};
        BodyState a, b;
        a.velocity = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        b.velocity = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        if ((b.velocity - a.velocity).dot(n) >= 0) n = n * -1.0;  // force approaching

        auto r = resolve_collision(sa, a, sb, b, n);
        Vec2 p_before = a.velocity * sa.mass + b.velocity * sb.mass;
        Vec2 p_after = r.va * sa.mass + r.vb * sb.mass;
        REQUIRE(std::abs(p_before.x - p_after.x) <= 1e-9);
        REQUIRE(std::abs(p_before.y - p_after.y) <= 1e-9);

        double ke_before =
            kinetic_energy(sa.mass, a.velocity) + kinetic_energy(sb.mass, b.velocity);
        double ke_after = kinetic_energy(sa.mass, r.va) + kinetic_energy(sb.mass, r.vb);
        REQUIRE(ke_after <= ke_before + 1e-9);
        REQUIRE(r.impulse >= 0.0);
    }
}

TEST_CASE("resolve_collision endpoint cases", "[sim]") {
    BodySpec sa, sb;
    sa.mass = sb.mass = 1.0;
    BodyState a{{-1, 0}, {1, 0}}, b{{1, 0}, {-1, 0}};

    SECTION("perfectly inelastic head-on stops both") {
        sa.restitution = sb.restitution = 0.0;
        auto r = resolve_collision(sa, a, sb, b, {1, 0});
        REQUIRE(r.va.x == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(r.vb.x == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("elastic head-on exchanges velocities") {
        sa.restitution = sb.restitution = 1.0;
        auto r = resolve_collision(sa, a, sb, b, {1, 0});
        REQUIRE(std::abs(r.va.x - (-1.0)) <= 1e-9);
        REQUIRE(std::abs(r.vb.x - 1.0) <= 1e-9);
    }
    SECTION("separating pair gets zero impulse") {
        sa.restitution = sb.restitution = 0.5;
        BodyState a2{{-1, 0}, {-1, 0}}, b2{{1, 0}, {1, 0}};
        auto r = resolve_collision(sa, a2, sb, b2, {1, 0});
        REQUIRE(r.impulse == 0.0);
        REQUIRE(r.va.x == a2.velocity.x);
        REQUIRE(r.vb.x == b2.velocity.x);
    }
}

TEST_CASE("friction stops a sliding disc at the analytic time", "[sim]") {
    BodySpec spec;
    spec.id = 0;
    spec.friction_decel = 0.5;
    std::vector<BodySpec> specs{spec};
    std::vector<BodyState> st{{{0, 0}, {1, 0}}};
    std::vector<CollisionEvent> ev;
    const double dt = 0.01;
    int n = 0;
    while (st[0].velocity.norm() > 0 && n < 100000) {
        step(st, specs, dt, ev, 0);
        ++n;
    }
    double t_stop = n * dt;
    double analytic = 1.0 / 0.5;  // |v| / (mu g)
    REQUIRE(t_stop >= analytic - 1e-9);
    REQUIRE(t_stop <= analytic + dt + 1e-9);
    REQUIRE(ev.empty());
}

TEST_CASE("step fixed point: bodies at rest stay put", "[sim]") {
    BodySpec a, b;
    a.id = 0;
    b.id = 1;
    b.start = {3, 0};
    std::vector<BodySpec> specs{a, b};
    std::vector<BodyState> st{{{0, 0}, {0, 0}}, {{3, 0}, {0, 0}}};
    std::vector<CollisionEvent> ev;
    step(st, specs, 0.05, ev, 0);
    REQUIRE(st[0].position.x == 0.0);
    REQUIRE(st[0].velocity.norm() == 0.0);
    REQUIRE(st[1].position.x == 3.0);
    REQUIRE(ev.empty());
}

TEST_CASE("in-sim elastic exchange between equal discs", "[sim]") {
    SceneSpec scene;
    BodySpec a;
    a.id = 0;
    a.size = 0.5;
    a.restitution = 1.0;
    a.friction_decel = 0.0;
    BodySpec b = a;
    b.id = 1;
    a.start = {-2, 0};
    b.start = {2, 0};
    scene.bodies = {a, b};
    scene.movers = {Mover{0, {1, 0}}, Mover{1, {-1, 0}}};
    auto tr = simulate(scene, 48, 12.0, 8);
    REQUIRE(tr.events.size() == 1);
    const auto& last = tr.states.back();
    REQUIRE(std::abs(last[0].velocity.x - (-1.0)) <= 1e-9);
    REQUIRE(std::abs(last[1].velocity.x - 1.0) <= 1e-9);
}

TEST_CASE("aimed discs collide at the analytic contact frame", "[sim]") {
    SceneSpec scene;
    BodySpec a;
    a.id = 0;
    a.size = 0.5;
    a.friction_decel = 0.0;
    a.restitution = 0.5;
    BodySpec b = a;
    b.id = 1;
    a.start = {-2, 0};
    b.start = {1, 0};
    scene.bodies = {a, b};
    scene.movers = {Mover{0, {1.0, 0}}};
    // gap = 3 - (0.5 + 0.5) = 2 world units at 1 u/s -> contact at t = 2 s
    auto tr = simulate(scene, 32, 12.0, 4);
    REQUIRE_FALSE(tr.events.empty());
    int expected_frame = int(std::ceil(2.0 * 12.0));
    REQUIRE(std::abs(tr.events[0].frame - expected_frame) <= 1);
}

TEST_CASE("simulate is bitwise deterministic", "[sim]") {
    auto cfg = small_cfg(SceneMode::interactions);
    auto scene = init_scene(cfg, 99);
    auto t1 = simulate(scene, 16, 12.0, 4);
    auto t2 = simulate(scene, 16, 12.0, 4);
    REQUIRE(serialize(t1) == serialize(t2));

    auto scene_b = init_scene(cfg, 99);
    REQUIRE(to_json(scene).dump() == to_json(scene_b).dump());
}

TEST_CASE("static scene produces a static trace with no events", "[sim]") {
    SceneSpec scene;
    BodySpec a;
    a.id = 0;
    a.start = {1, 1};
    scene.bodies = {a};
    auto tr = simulate(scene, 8, 12.0, 4);
    REQUIRE(tr.events.empty());
    for (const auto& frame : tr.states) {
        REQUIRE(frame[0].position.x == 1.0);
        REQUIRE(frame[0].velocity.norm() == 0.0);
    }
}

TEST_CASE("init_scene respects the mode contract", "[sim]") {
    SECTION("simple mode yields zero-collision rollouts") {
        auto cfg = small_cfg(SceneMode::simple);
        auto scene = init_scene(cfg, 7);
        auto oracle = simulate(scene, cfg.frames, cfg.fps, cfg.substeps);
        REQUIRE(oracle.events.empty());
    }
    SECTION("interactions mode always collides under the reference rollout") {
        auto cfg = small_cfg(SceneMode::interactions);
        for (uint64_t seed = 0; seed < 200; ++seed) {
            auto scene = init_scene(cfg, seed);
            auto oracle = simulate(scene, cfg.frames, cfg.fps, cfg.substeps);
            REQUIRE_FALSE(oracle.events.empty());
        }
    }
}

TEST_CASE("init_scene keeps mover speeds in the commanded range", "[sim]") {
    for (auto mode : {SceneMode::simple, SceneMode::interactions}) {
        auto cfg = small_cfg(mode);
        for (uint64_t seed = 0; seed < 50; ++seed) {
            auto scene = init_scene(cfg, seed * 31 + 5);
            REQUIRE_FALSE(scene.movers.empty());
            REQUIRE(speeds_in_range(scene, 0.5, 1.5));
        }
    }
}

TEST_CASE("frame-0 placements never overlap", "[sim]") {
    auto cfg = small_cfg(SceneMode::interactions);
    for (uint64_t seed = 0; seed < 50; ++seed) {
        auto scene = init_scene(cfg, seed);
        for (size_t i = 0; i < scene.bodies.size(); ++i)
            for (size_t j = i + 1; j < scene.bodies.size(); ++j)
                REQUIRE(overlap_depth(scene.bodies[i], scene.bodies[i].start, scene.bodies[j],
                                      scene.bodies[j].start) == 0.0);
    }
}

TEST_CASE("post-step overlap stays within the positional tolerance", "[sim]") {
    auto cfg = small_cfg(SceneMode::interactions);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto scene = init_scene(cfg, seed + 1000);
        auto tr = simulate(scene, cfg.frames, cfg.fps, cfg.substeps);
        double min_size = 1e9;
        for (const auto& b : scene.bodies) min_size = std::min(min_size, b.size);
        for (const auto& frame : tr.states)
            for (size_t i = 0; i < scene.bodies.size(); ++i)
                for (size_t j = i + 1; j < scene.bodies.size(); ++j)
                    REQUIRE(overlap_depth(scene.bodies[i], frame[i].position, scene.bodies[j],
                                          frame[j].position) <= 1e-3 * min_size);
    }
}

TEST_CASE("without collisions speed is monotone non-increasing", "[sim]") {
    auto cfg = small_cfg(SceneMode::simple);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto scene = init_scene(cfg, seed + 2000);
        auto tr = simulate(scene, cfg.frames, cfg.fps, cfg.substeps);
        for (size_t b = 0; b < scene.bodies.size(); ++b)
            for (size_t f = 1; f < tr.states.size(); ++f)
                REQUIRE(tr.states[f][b].velocity.norm() <=
                        tr.states[f - 1][b].velocity.norm() + 1e-12);
    }
}

TEST_CASE("sim trace round-trips through JSON", "[sim]") {
    auto cfg = small_cfg(SceneMode::interactions);
    auto scene = init_scene(cfg, 4);
    auto tr = simulate(scene, 16, 12.0, 4);
    auto back = trace_from_json(to_json(tr));
    REQUIRE(serialize(back) == serialize(tr));
}

TEST_CASE("init_scene reports failure with a diagnostic", "[sim]") {
    auto cfg = small_cfg(SceneMode::interactions);
    cfg.max_rejections = 1;
    cfg.min_movers = cfg.max_movers = 1;
    cfg.min_speed = cfg.max_speed = 0.5;
    cfg.min_bodies = cfg.max_bodies = 2;
    cfg.arena = 60.0;  // bodies too far apart to ever collide
    REQUIRE_THROWS_AS(init_scene(cfg, 3), Error);
}

TEST_CASE("invalid step and simulate arguments are rejected", "[sim]") {
    std::vector<BodySpec> specs{BodySpec{}};
    std::vector<BodyState> st{BodyState{}};
    std::vector<CollisionEvent> ev;
    REQUIRE_THROWS_AS(step(st, specs, 0.0, ev, 0), Error);
    SceneSpec scene;
    scene.bodies = specs;
    REQUIRE_THROWS_AS(simulate(scene, 0, 12.0, 4), Error);
    REQUIRE_THROWS_AS(simulate(scene, 8, 12.0, 0), Error);
}
