#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include <json.hpp>

#include "kinemask/common.hpp"

namespace kinemask::sim {

using json = nlohmann::json;

struct Vec2 {
    double x = 0, y = 0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

enum class Shape { disc, square };

inline std::string shape_name(Shape s) { return s == Shape::disc ? "disc" : "square"; }

struct BodySpec {
    int id = 0;
    Shape shape = Shape::disc;
    double size = 0.5;            // disc radius or square half-extent, world units
    double mass = 1.0;
    double restitution = 0.4;
    double friction_decel = 0.8;  // constant kinetic deceleration, units/s^2
    int color_id = 0;
    Vec2 start;                   // frame-0 position
};

struct BodyState {
    Vec2 position;
    Vec2 velocity;
};

struct Mover {
    int id = 0;
    Vec2 velocity;
};

struct SceneSpec {
    std::vector<BodySpec> bodies;
    std::vector<Mover> movers;
    double arena = 6.0;  // camera view covers [-arena/2, arena/2]^2
    std::string texture_kind = "checker";
    uint64_t texture_seed = 0;

    const BodySpec* find(int id) const {
        for (const auto& b : bodies)
            if (b.id == id) return &b;
        return nullptr;
    }
};

struct CollisionEvent {
    int frame = 0;
    int a = 0, b = 0;    // body ids, a < b
    double impulse = 0;  // momentum units
};

struct SimTrace {
    SceneSpec spec;
    int frames = 0;
    double fps = 12.0;
    int substeps = 4;
    std::vector<std::vector<BodyState>> states;  // [frame][body index]
    std::vector<CollisionEvent> events;
};

// --- contact geometry ------------------------------------------------------

struct Contact {
    Vec2 normal;   // unit, from a to b
    double depth;  // penetration depth, > 0 when overlapping
};

inline std::optional<Contact> contact_disc_disc(Vec2 pa, double ra, Vec2 pb, double rb) {
    Vec2 d = pb - pa;
    double dist = d.norm();
    double pen = ra + rb - dist;
    if (pen <= 0) return std::nullopt;
    Vec2 n = dist > 1e-12 ? d * (1.0 / dist) : Vec2{1, 0};
    return Contact{n, pen};
}

inline std::optional<Contact> contact_box_box(Vec2 pa, double ha, Vec2 pb, double hb) {
    double ox = (ha + hb) - std::abs(pb.x - pa.x);
    double oy = (ha + hb) - std::abs(pb.y - pa.y);
    if (ox <= 0 || oy <= 0) return std::nullopt;
    if (ox < oy) return Contact{{pb.x >= pa.x ? 1.0 : -1.0, 0.0}, ox};
    return Contact{{0.0, pb.y >= pa.y ? 1.0 : -1.0}, oy};
}

/// Disc a vs axis-aligned square b (normal from a to b).
inline std::optional<Contact> contact_disc_box(Vec2 pc, double r, Vec2 pb, double hb) {
    Vec2 q{clamp(pc.x, pb.x - hb, pb.x + hb), clamp(pc.y, pb.y - hb, pb.y + hb)};
    Vec2 d = pc - q;
    double dist = d.norm();
    if (dist > 1e-12) {
        double pen = r - dist;
        if (pen <= 0) return std::nullopt;
        return Contact{{-d.x / dist, -d.y / dist}, pen};
    }
    // disc center inside the box: push out along the shallow axis
    double ox = hb - std::abs(pc.x - pb.x) + r;
    double oy = hb - std::abs(pc.y - pb.y) + r;
    if (ox < oy) return Contact{{pb.x >= pc.x ? 1.0 : -1.0, 0.0}, ox};
    return Contact{{0.0, pb.y >= pc.y ? 1.0 : -1.0}, oy};
}

inline std::optional<Contact> contact(const BodySpec& sa, Vec2 pa, const BodySpec& sb, Vec2 pb) {
    if (sa.shape == Shape::disc && sb.shape == Shape::disc)
        return contact_disc_disc(pa, sa.size, pb, sb.size);
    if (sa.shape == Shape::square && sb.shape == Shape::square)
        return contact_box_box(pa, sa.size, pb, sb.size);
    if (sa.shape == Shape::disc) return contact_disc_box(pa, sa.size, pb, sb.size);
    auto c = contact_disc_box(pb, sb.size, pa, sa.size);
    if (!c) return std::nullopt;
    return Contact{{-c->normal.x, -c->normal.y}, c->depth};
}

/// Penetration depth of a pair, 0 when separated.
inline double overlap_depth(const BodySpec& sa, Vec2 pa, const BodySpec& sb, Vec2 pb) {
    auto c = contact(sa, pa, sb, pb);
    return c ? c->depth : 0.0;
}

// --- impulse resolution ----------------------------------------------------

struct ImpulseResult {
    double impulse = 0;  // magnitude along the normal
    Vec2 va, vb;
};

/// Normal impulse with restitution (pairwise minimum). Momentum conserved
/// exactly; returns zero impulse when the pair is separating.
inline ImpulseResult resolve_collision(const BodySpec& sa, const BodyState& a, const BodySpec& sb,
                                       const BodyState& b, Vec2 n) {
    ImpulseResult r{0.0, a.velocity, b.velocity};
    double rel = (b.velocity - a.velocity).dot(n);
    if (rel >= 0) return r;  // separating or resting
    double e = std::min(sa.restitution, sb.restitution);
    double inv_mass = 1.0 / sa.mass + 1.0 / sb.mass;
    double j = -(1.0 + e) * rel / inv_mass;
    r.impulse = j;
    r.va = a.velocity - n * (j / sa.mass);
    r.vb = b.velocity + n * (j / sb.mass);
    return r;
}

// --- stepping ----------------------------------------------------------------

/// One integration substep: kinetic friction (clamped so friction alone never
/// reverses velocity), semi-implicit Euler translation, then iterated pairwise
/// impulse resolution with positional de-penetration.
inline void step(std::vector<BodyState>& states, const std::vector<BodySpec>& specs, double dt,
                 std::vector<CollisionEvent>& events, int frame_tag) {
    KM_CHECK(dt > 0, usage, "step: dt must be positive");
    const size_t n = specs.size();
    for (size_t i = 0; i < n; ++i) {
        auto& st = states[i];
        double speed = st.velocity.norm();
        if (speed > 0) {
            double drop = specs[i].friction_decel * dt;
            double scale = speed <= drop ? 0.0 : (speed - drop) / speed;
            st.velocity = st.velocity * scale;
        }
        st.position = st.position + st.velocity * dt;
    }

    constexpr double kSlop = 1e-9;
    for (int iter = 0; iter < 16; ++iter) {
        bool touched = false;
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = i + 1; j < n; ++j) {
                auto c = contact(specs[i], states[i].position, specs[j], states[j].position);
                if (!c || c->depth <= kSlop) continue;
                touched = true;
                auto res = resolve_collision(specs[i], states[i], specs[j], states[j], c->normal);
                if (res.impulse > kSlop) {
                    states[i].velocity = res.va;
                    states[j].velocity = res.vb;
                    events.push_back({frame_tag, specs[i].id, specs[j].id, res.impulse});
                }
                double wa = 1.0 / specs[i].mass, wb = 1.0 / specs[j].mass;
                double push = c->depth + kSlop;
                states[i].position = states[i].position - c->normal * (push * wa / (wa + wb));
                states[j].position = states[j].position + c->normal * (push * wb / (wa + wb));
            }
        }
        if (!touched) break;
    }
}

/// Same-pair events within one frame collapse to a single collision with the
/// impulses summed (a contact resolved across substeps is one event).
inline void merge_frame_events(std::vector<CollisionEvent>& events, size_t frame_begin) {
    for (size_t i = frame_begin; i < events.size(); ++i) {
        for (size_t j = events.size(); j-- > i + 1;) {
            if (events[j].a == events[i].a && events[j].b == events[i].b &&
                events[j].frame == events[i].frame) {
                events[i].impulse += events[j].impulse;
                events.erase(events.begin() + long(j));
            }
        }
    }
}

inline std::vector<BodyState> initial_states(const SceneSpec& spec) {
    std::vector<BodyState> st(spec.bodies.size());
    for (size_t i = 0; i < spec.bodies.size(); ++i) st[i].position = spec.bodies[i].start;
    for (const auto& m : spec.movers) {
        for (size_t i = 0; i < spec.bodies.size(); ++i)
            if (spec.bodies[i].id == m.id) st[i].velocity = m.velocity;
    }
    return st;
}

inline SimTrace simulate(const SceneSpec& spec, int frames, double fps, int substeps) {
    KM_CHECK(frames >= 1, usage, "simulate: frames must be >= 1");
    KM_CHECK(substeps >= 1, usage, "simulate: substeps must be >= 1");
    SimTrace trace;
    trace.spec = spec;
    trace.frames = frames;
    trace.fps = fps;
    trace.substeps = substeps;
    trace.states.reserve(size_t(frames));

    std::vector<BodyState> cur = initial_states(spec);
    trace.states.push_back(cur);
    const double dt = 1.0 / (fps * double(substeps));
    for (int f = 1; f < frames; ++f) {
        size_t frame_begin = trace.events.size();
        for (int s = 0; s < substeps; ++s) step(cur, spec.bodies, dt, trace.events, f);
        merge_frame_events(trace.events, frame_begin);
        trace.states.push_back(cur);
    }
    return trace;
}

// --- scene generation --------------------------------------------------------

enum class SceneMode { simple, interactions };

struct SceneGenConfig {
    SceneMode mode = SceneMode::simple;
    int min_bodies = 2, max_bodies = 4;
    int min_movers = 1, max_movers = 2;
    double min_size = 0.8, max_size = 1.3;
    double min_mass = 0.6, max_mass = 1.8;
    double min_speed = 0.5, max_speed = 1.5;
    double restitution = 0.4;
    double friction_decel = 0.8;
    double arena = 6.0;
    int frames = 16;
    double fps = 12.0;
    int substeps = 4;
    std::vector<int> palette_ids;          // allowed color ids (distinct per body)
    std::vector<std::string> texture_kinds = {"checker", "stripes", "noise"};
    uint64_t texture_seed_base = 0;
    uint64_t texture_seed_count = 1u << 20;
    int max_rejections = 1000;
};

inline bool speeds_in_range(const SceneSpec& spec, double lo, double hi) {
    for (const auto& m : spec.movers) {
        double s = m.velocity.norm();
        if (s < lo - 1e-12 || s > hi + 1e-12) return false;
    }
    return true;
}

/// Draw one candidate scene: non-overlapping placement, random shapes and
/// distinct colors, 1-2 movers with random direction and speed.
inline std::optional<SceneSpec> draw_scene(const SceneGenConfig& cfg, Rng& rng) {
    SceneSpec spec;
    spec.arena = cfg.arena;
    spec.texture_kind = cfg.texture_kinds[size_t(rng.below(int64_t(cfg.texture_kinds.size())))];
    spec.texture_seed = cfg.texture_seed_base + uint64_t(rng.below(int64_t(cfg.texture_seed_count)));

    int n_bodies = cfg.min_bodies + int(rng.below(cfg.max_bodies - cfg.min_bodies + 1));
    KM_CHECK(int(cfg.palette_ids.size()) >= n_bodies, usage,
             "scene gen: palette id set smaller than body count");
    std::vector<int> colors = cfg.palette_ids;
    for (size_t i = 0; i < colors.size(); ++i) std::swap(colors[i], colors[size_t(rng.below(int64_t(colors.size())))]);

    for (int i = 0; i < n_bodies; ++i) {
        BodySpec b;
        b.id = i;
        b.shape = rng.uniform() < 0.5 ? Shape::disc : Shape::square;
        b.size = rng.uniform(cfg.min_size, cfg.max_size);
        b.mass = rng.uniform(cfg.min_mass, cfg.max_mass);
        b.restitution = cfg.restitution;
        b.friction_decel = cfg.friction_decel;
        b.color_id = colors[size_t(i)];
        double margin = b.size * 1.05;
        double half = cfg.arena / 2.0 - margin;
        if (half <= 0) return std::nullopt;
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            b.start = {rng.uniform(-half, half), rng.uniform(-half, half)};
            placed = true;
            for (const auto& other : spec.bodies) {
                // inflate both sizes so frame 0 keeps a small clearance
                BodySpec bi = b, oi = other;
                bi.size += 0.04;
                oi.size += 0.04;
                if (contact(bi, b.start, oi, other.start)) placed = false;
            }
        }
        if (!placed) return std::nullopt;
        spec.bodies.push_back(b);
    }

    int n_movers = cfg.min_movers + int(rng.below(cfg.max_movers - cfg.min_movers + 1));
    n_movers = std::min(n_movers, n_bodies);
    std::vector<int> ids(static_cast<size_t>(n_bodies));
    for (int i = 0; i < n_bodies; ++i) ids[size_t(i)] = i;
    for (size_t i = 0; i < ids.size(); ++i) std::swap(ids[i], ids[size_t(rng.below(int64_t(ids.size())))]);
    for (int k = 0; k < n_movers; ++k) {
        double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        double angle = rng.uniform(0.0, 2.0 * M_PI);
        spec.movers.push_back(Mover{ids[size_t(k)], {speed * std::cos(angle), speed * std::sin(angle)}});
    }
    return spec;
}

/// Rejection-sample a scene whose reference rollout matches the mode:
/// `simple` has no collision events, `interactions` has at least one.
inline SceneSpec init_scene(const SceneGenConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    for (int attempt = 0; attempt < cfg.max_rejections; ++attempt) {
        auto cand = draw_scene(cfg, rng);
        if (!cand) continue;
        SimTrace oracle = simulate(*cand, cfg.frames, cfg.fps, cfg.substeps);
        bool has_events = !oracle.events.empty();
        if (cfg.mode == SceneMode::interactions ? has_events : !has_events) return *cand;
    }
    throw Error(ErrKind::data, "init_scene: no admissible scene after " +
                                   std::to_string(cfg.max_rejections) +
                                   " rejections (seed " + std::to_string(seed) + ")");
}

// --- JSON --------------------------------------------------------------------

inline json to_json(const BodySpec& b) {
    return json{{"id", b.id},
                {"shape", shape_name(b.shape)},
                {"size", b.size},
                {"mass", b.mass},
                {"restitution", b.restitution},
                {"friction_decel", b.friction_decel},
                {"color_id", b.color_id},
                {"start", {b.start.x, b.start.y}}};
}

inline BodySpec body_from_json(const json& j) {
    BodySpec b;
    b.id = j.at("id").get<int>();
    b.shape = j.at("shape").get<std::string>() == "disc" ? Shape::disc : Shape::square;
    b.size = j.at("size").get<double>();
    b.mass = j.at("mass").get<double>();
    b.restitution = j.at("restitution").get<double>();
    b.friction_decel = j.at("friction_decel").get<double>();
    b.color_id = j.at("color_id").get<int>();
    b.start = {j.at("start")[0].get<double>(), j.at("start")[1].get<double>()};
    return b;
}

inline json to_json(const SceneSpec& s) {
    json bodies = json::array();
    for (const auto& b : s.bodies) bodies.push_back(to_json(b));
    json movers = json::array();
    for (const auto& m : s.movers)
        movers.push_back(json{{"id", m.id}, {"velocity", {m.velocity.x, m.velocity.y}}});
    return json{{"bodies", bodies},
                {"movers", movers},
                {"arena", s.arena},
                {"texture_kind", s.texture_kind},
                {"texture_seed", s.texture_seed}};
}

inline SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    for (const auto& bj : j.at("bodies")) s.bodies.push_back(body_from_json(bj));
    for (const auto& mj : j.at("movers"))
        s.movers.push_back(
            {mj.at("id").get<int>(),
             {mj.at("velocity")[0].get<double>(), mj.at("velocity")[1].get<double>()}});
    s.arena = j.at("arena").get<double>();
    s.texture_kind = j.at("texture_kind").get<std::string>();
    s.texture_seed = j.at("texture_seed").get<uint64_t>();
    return s;
}

inline json to_json(const SimTrace& t) {
    json states = json::array();
    for (const auto& frame : t.states) {
        json fr = json::array();
        for (const auto& st : frame)
            fr.push_back(json{{"p", {st.position.x, st.position.y}},
                              {"v", {st.velocity.x, st.velocity.y}}});
        states.push_back(fr);
    }
    json events = json::array();
    for (const auto& e : t.events)
        events.push_back(
            json{{"frame", e.frame}, {"a", e.a}, {"b", e.b}, {"impulse", e.impulse}});
    return json{{"spec", to_json(t.spec)}, {"frames", t.frames},   {"fps", t.fps},
                {"substeps", t.substeps},  {"states", states}, {"events", events}};
}

inline SimTrace trace_from_json(const json& j) {
    SimTrace t;
    t.spec = scene_from_json(j.at("spec"));
    t.frames = j.at("frames").get<int>();
    t.fps = j.at("fps").get<double>();
    t.substeps = j.at("substeps").get<int>();
    for (const auto& fj : j.at("states")) {
        std::vector<BodyState> frame;
        for (const auto& sj : fj) {
            BodyState st;
            st.position = {sj.at("p")[0].get<double>(), sj.at("p")[1].get<double>()};
            st.velocity = {sj.at("v")[0].get<double>(), sj.at("v")[1].get<double>()};
            frame.push_back(st);
        }
        t.states.push_back(std::move(frame));
    }
    for (const auto& ej : j.at("events"))
        t.events.push_back({ej.at("frame").get<int>(), ej.at("a").get<int>(),
                            ej.at("b").get<int>(), ej.at("impulse").get<double>()});
    return t;
}

inline std::string serialize(const SimTrace& t) { return to_json(t).dump(); }

inline void save_trace(const fs::path& path, const SimTrace& t) {
    write_text_file(path, serialize(t));
}

inline SimTrace load_trace(const fs::path& path) {
    return trace_from_json(json::parse(read_text_file(path)));
}

}  // namespace kinemask::sim
