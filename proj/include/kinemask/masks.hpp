#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/common.hpp"
#include "kinemask/render.hpp"
#include "kinemask/sim.hpp"
#include "kinemask/tensor.hpp"

namespace kinemask::masks {

using render::BinaryMask;
using render::RenderStyle;
using sim::SimTrace;

/// Velocity encoding written into mask frames: per-frame instantaneous
/// velocity (v_t) or the frame-0 velocity replicated (v_0).
enum class EncodeMode { v_t, v_0 };

inline std::string encode_mode_name(EncodeMode m) { return m == EncodeMode::v_t ? "v_t" : "v_0"; }
inline EncodeMode encode_mode_from(const std::string& s) {
    KM_CHECK(s == "v_t" || s == "v_0", usage, "unknown mask mode '" << s << "'");
    return s == "v_t" ? EncodeMode::v_t : EncodeMode::v_0;
}

/// Signed velocity mask, F x H x W x 3 in [-1,1]. Channels 0/1/2 carry the
/// x/y/z velocity components normalized by v_max; z is identically zero in
/// generated data.
struct MaskTensor {
    Tensor<float> data;  // F x H x W x 3
    float v_max = 2.0f;
    EncodeMode mode = EncodeMode::v_t;

    int frames() const { return int(data.shape[0]); }
    int height() const { return int(data.shape[1]); }
    int width() const { return int(data.shape[2]); }

    float* frame(int f) { return data.ptr() + int64_t(f) * height() * width() * 3; }
    const float* frame(int f) const { return data.ptr() + int64_t(f) * height() * width() * 3; }

    static MaskTensor zeros(int f, int h, int w, float v_max, EncodeMode mode) {
        MaskTensor m;
        m.data = Tensor<float>({f, h, w, 3});
        m.v_max = v_max;
        m.mode = mode;
        return m;
    }
};

/// Body indices (into trace.spec.bodies) moving at frame 0.
inline std::vector<size_t> frame0_movers(const SimTrace& trace) {
    std::vector<size_t> out;
    for (size_t i = 0; i < trace.spec.bodies.size(); ++i)
        if (trace.states[0][i].velocity.norm() > 1e-12) out.push_back(i);
    return out;
}

/// Velocity masks for a rollout: for every frame, the pixels of each body
/// that moves at frame 0 are filled with its (clamped) normalized velocity.
/// Bodies set in motion later by collisions are left blank. Higher body ids
/// overwrite lower ones on overlap, matching render occlusion.
inline MaskTensor encode_masks(const SimTrace& trace, const RenderStyle& style, EncodeMode mode,
                               float v_max) {
    KM_CHECK(v_max > 0, usage, "encode_masks: v_max must be positive");
    MaskTensor m = MaskTensor::zeros(trace.frames, style.height, style.width, v_max, mode);
    auto movers = frame0_movers(trace);
    const int h = style.height, w = style.width;
    for (int f = 0; f < trace.frames; ++f) {
        float* dst = m.frame(f);
        for (size_t mi : movers) {
            const auto& vel = mode == EncodeMode::v_t ? trace.states[size_t(f)][mi].velocity
                                                      : trace.states[0][mi].velocity;
            float vx = clamp(float(vel.x) / v_max, -1.0f, 1.0f);
            float vy = clamp(float(vel.y) / v_max, -1.0f, 1.0f);
            if (vx == 0.0f && vy == 0.0f) continue;
            BinaryMask pix = render::rasterize_object_mask(
                trace.states[size_t(f)], trace.spec.bodies, trace.spec.bodies[mi].id, style);
            for (int64_t p = 0; p < int64_t(h) * w; ++p) {
                if (!pix[p]) continue;
                dst[p * 3 + 0] = vx;
                dst[p * 3 + 1] = vy;
                dst[p * 3 + 2] = 0.0f;
            }
        }
    }
    return m;
}

/// Eq.-style truncation: frames 0..cutoff kept, the rest zeroed.
inline MaskTensor truncate(const MaskTensor& m, int cutoff) {
    KM_CHECK(cutoff >= 0 && cutoff < m.frames(), usage,
             "truncate: cutoff " << cutoff << " out of range [0," << m.frames() - 1 << "]");
    MaskTensor out = m;
    int64_t per_frame = int64_t(m.height()) * m.width() * 3;
    for (int f = cutoff + 1; f < m.frames(); ++f)
        std::memset(out.frame(f), 0, size_t(per_frame) * sizeof(float));
    return out;
}

// --- cutoff sampling ----------------------------------------------------------

enum class CutoffMode { uniform, early_biased, collision_aware };

inline std::string cutoff_mode_name(CutoffMode m) {
    switch (m) {
        case CutoffMode::uniform: return "uniform";
        case CutoffMode::early_biased: return "early_biased";
        default: return "collision_aware";
    }
}

inline CutoffMode cutoff_mode_from(const std::string& s) {
    if (s == "uniform") return CutoffMode::uniform;
    if (s == "early_biased") return CutoffMode::early_biased;
    KM_CHECK(s == "collision_aware", usage, "unknown cutoff mode '" << s << "'");
    return CutoffMode::collision_aware;
}

struct CutoffSampler {
    CutoffMode mode = CutoffMode::early_biased;
    double geometric_rate = 0.25;  // early_biased: P(f) proportional to (1-rho)^f
    int collision_window = 2;      // collision_aware: frames around each event
    double collision_prob = 0.7;   // chance of drawing from the event windows
};

inline int sample_early_biased(int frames, double rho, Rng& rng) {
    // truncated geometric over {0..F-1}
    std::vector<double> cdf(static_cast<size_t>(frames));
    double acc = 0, p = 1;
    for (int f = 0; f < frames; ++f) {
        acc += p;
        cdf[size_t(f)] = acc;
        p *= (1.0 - rho);
    }
    double u = rng.uniform() * acc;
    for (int f = 0; f < frames; ++f)
        if (u <= cdf[size_t(f)]) return f;
    return frames - 1;
}

inline int sample_cutoff(int frames, const std::vector<sim::CollisionEvent>& events,
                         const CutoffSampler& sampler, Rng& rng) {
    KM_CHECK(frames >= 1, usage, "sample_cutoff: frames must be >= 1");
    if (frames == 1) return 0;
    switch (sampler.mode) {
        case CutoffMode::uniform:
            return int(rng.below(frames));
        case CutoffMode::early_biased:
            return sample_early_biased(frames, sampler.geometric_rate, rng);
        case CutoffMode::collision_aware: {
            if (!events.empty() && rng.uniform() < sampler.collision_prob) {
                std::vector<int> pool;
                for (const auto& e : events)
                    for (int f = e.frame - sampler.collision_window;
                         f <= e.frame + sampler.collision_window; ++f)
                        if (f >= 0 && f < frames) pool.push_back(f);
                if (!pool.empty()) return pool[size_t(rng.below(int64_t(pool.size())))];
            }
            return sample_early_biased(frames, sampler.geometric_rate, rng);
        }
    }
    return 0;
}

inline int sample_cutoff(int frames, const std::vector<sim::CollisionEvent>& events,
                         const CutoffSampler& sampler, uint64_t seed) {
    Rng rng(seed);
    return sample_cutoff(frames, events, sampler, rng);
}

// --- inference mask ------------------------------------------------------------

struct InferenceObject {
    BinaryMask pixels;                  // H x W, nonzero = object
    std::array<double, 3> velocity{};   // world units/s, z accepted but zero in data
};

/// The deployment-time control tensor: frame 0 carries the user-provided
/// object velocities at the given pixels, all later frames are zero.
inline MaskTensor build_inference_mask(const std::vector<InferenceObject>& objects, int frames,
                                       int h, int w, float v_max) {
    KM_CHECK(v_max > 0, usage, "build_inference_mask: v_max must be positive");
    MaskTensor m = MaskTensor::zeros(frames, h, w, v_max, EncodeMode::v_t);
    float* f0 = m.frame(0);
    for (const auto& obj : objects) {
        KM_CHECK(obj.pixels.shape.size() == 2 && obj.pixels.shape[0] == h &&
                     obj.pixels.shape[1] == w,
                 data, "build_inference_mask: mask shape mismatch (expected " << h << "x" << w << ")");
        for (int c = 0; c < 3; ++c)
            KM_CHECK(std::isfinite(obj.velocity[size_t(c)]), data,
                     "build_inference_mask: non-finite velocity");
        float vx = clamp(float(obj.velocity[0]) / v_max, -1.0f, 1.0f);
        float vy = clamp(float(obj.velocity[1]) / v_max, -1.0f, 1.0f);
        float vz = clamp(float(obj.velocity[2]) / v_max, -1.0f, 1.0f);
        for (int64_t p = 0; p < int64_t(h) * w; ++p) {
            if (!obj.pixels[p]) continue;
            f0[p * 3 + 0] = vx;
            f0[p * 3 + 1] = vy;
            f0[p * 3 + 2] = vz;
        }
    }
    return m;
}

// --- disk format -----------------------------------------------------------------

/// mask.f32: little-endian float32 raw binary, C order (F,H,W,3), with a
/// sibling mask_meta.json describing the shape and encoding.
inline void save_mask(const fs::path& dir, const MaskTensor& m) {
    fs::create_directories(dir);
    std::ofstream out(dir / "mask.f32", std::ios::binary | std::ios::trunc);
    KM_CHECK(out.good(), data, "cannot write " << (dir / "mask.f32").string());
    out.write(reinterpret_cast<const char*>(m.data.ptr()),
              std::streamsize(size_t(m.data.numel()) * sizeof(float)));
    KM_CHECK(out.good(), data, "short write to " << (dir / "mask.f32").string());
    nlohmann::json meta{{"F", m.frames()},
                        {"H", m.height()},
                        {"W", m.width()},
                        {"v_max", m.v_max},
                        {"mode", encode_mode_name(m.mode)}};
    write_text_file(dir / "mask_meta.json", meta.dump(2) + "\n");
}

inline MaskTensor load_mask(const fs::path& dir) {
    auto meta_path = dir / "mask_meta.json";
    auto bin_path = dir / "mask.f32";
    KM_CHECK(fs::exists(meta_path), data, "missing file: " << meta_path.string());
    KM_CHECK(fs::exists(bin_path), data, "missing file: " << bin_path.string());
    auto meta = nlohmann::json::parse(read_text_file(meta_path));
    MaskTensor m = MaskTensor::zeros(meta.at("F").get<int>(), meta.at("H").get<int>(),
                                     meta.at("W").get<int>(), meta.at("v_max").get<float>(),
                                     encode_mode_from(meta.at("mode").get<std::string>()));
    std::ifstream in(bin_path, std::ios::binary);
    in.read(reinterpret_cast<char*>(m.data.ptr()),
            std::streamsize(size_t(m.data.numel()) * sizeof(float)));
    KM_CHECK(in.gcount() == std::streamsize(size_t(m.data.numel()) * sizeof(float)), data,
             "truncated mask payload: " << bin_path.string());
    return m;
}

/// Human-inspection export only: value v maps to round(127.5*(v+1)).
inline void export_mask_png(const MaskTensor& m, const fs::path& dir) {
    fs::create_directories(dir);
    char name[32];
    for (int f = 0; f < m.frames(); ++f) {
        ImageU8 img;
        img.height = m.height();
        img.width = m.width();
        img.rgb.resize(size_t(m.height()) * m.width() * 3);
        const float* src = m.frame(f);
        for (size_t i = 0; i < img.rgb.size(); ++i)
            img.rgb[i] = (unsigned char)std::lround(127.5 * (double(src[i]) + 1.0));
        std::snprintf(name, sizeof name, "mask_%04d.png", f);
        write_png(dir / name, img);
    }
}

}  // namespace kinemask::masks
