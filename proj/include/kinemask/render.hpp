#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <vector>

#include "kinemask/common.hpp"
#include "kinemask/png_io.hpp"
#include "kinemask/sim.hpp"
#include "kinemask/tensor.hpp"

namespace kinemask::render {

using sim::BodySpec;
using sim::BodyState;
using sim::Shape;
using sim::SimTrace;
using sim::Vec2;

struct VideoTensor {
    Tensor<float> data;  // F x H x W x 3, values in [0,1]
    double fps = 12.0;

    int frames() const { return int(data.shape[0]); }
    int height() const { return int(data.shape[1]); }
    int width() const { return int(data.shape[2]); }

    float* frame(int f) { return data.ptr() + int64_t(f) * int64_t(height()) * width() * 3; }
    const float* frame(int f) const {
        return data.ptr() + int64_t(f) * int64_t(height()) * width() * 3;
    }

    static VideoTensor zeros(int f, int h, int w, double fps) {
        VideoTensor v;
        v.data = Tensor<float>({f, h, w, 3});
        v.fps = fps;
        return v;
    }
};

struct RenderStyle {
    int height = 48, width = 48;
    std::string texture_kind = "checker";
    uint64_t texture_seed = 0;
    std::vector<std::array<float, 3>> palette;  // object colors indexed by color_id
    int supersample = 4;
    double world_extent = 6.0;  // world units spanned by the view

    static RenderStyle from_scene(const sim::SceneSpec& scene,
                                  std::vector<std::array<float, 3>> palette_colors, int h, int w,
                                  int ss = 4) {
        RenderStyle st;
        st.height = h;
        st.width = w;
        st.texture_kind = scene.texture_kind;
        st.texture_seed = scene.texture_seed;
        st.palette = std::move(palette_colors);
        st.supersample = ss;
        st.world_extent = scene.arena;
        return st;
    }
};

using Frame = Tensor<float>;      // H x W x 3
using BinaryMask = Tensor<uint8_t>;  // H x W

inline constexpr float kBackgroundGuard = 0.15f;

inline float linf(const std::array<float, 3>& a, const std::array<float, 3>& b) {
    float m = 0;
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(a[c] - b[c]));
    return m;
}

/// Sample a mid-tone background color whose L-inf distance to every object
/// palette color lands in [0.19, 0.34]. The lower edge clears the guard, the
/// upper edge keeps antialiased body rims inside the color-segmentation
/// tolerance.
inline std::array<float, 3> guarded_color(Rng& rng,
                                          const std::vector<std::array<float, 3>>& palette,
                                          const std::vector<std::array<float, 3>>& taken) {
    for (int attempt = 0; attempt < 8192; ++attempt) {
        std::array<float, 3> c{float(rng.uniform(0.44, 0.54)), float(rng.uniform(0.44, 0.54)),
                               float(rng.uniform(0.44, 0.54))};
        bool ok = true;
        for (const auto& p : palette) {
            float d = linf(c, p);
            if (d < 0.19f || d > 0.34f) ok = false;
        }
        for (const auto& t : taken)
            if (linf(c, t) < 0.04f) ok = false;  // keep texture colors tellable apart
        if (ok) return c;
    }
    throw Error(ErrKind::data, "guarded_color: could not find a compliant background color");
}

/// Procedural background. Deterministic per (kind, seed); every pixel color
/// stays at least the guard distance away from all object palette colors.
inline Frame make_texture(const std::string& kind, uint64_t seed, int h, int w,
                          const std::vector<std::array<float, 3>>& palette) {
    KM_CHECK(kind == "checker" || kind == "stripes" || kind == "noise", usage,
             "make_texture: unknown kind '" << kind << "'");
    Rng rng(derive_seed(seed, "texture:" + kind, 0));
    Frame out({h, w, 3});

    auto put = [&](int y, int x, const std::array<float, 3>& c) {
        float* p = out.ptr() + (int64_t(y) * w + x) * 3;
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    };

    if (kind == "checker") {
        std::vector<std::array<float, 3>> cols;
        cols.push_back(guarded_color(rng, palette, cols));
        cols.push_back(guarded_color(rng, palette, cols));
        int cell = 4 + int(rng.below(8));
        int ox = int(rng.below(cell)), oy = int(rng.below(cell));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                put(y, x, cols[size_t((((x + ox) / cell) + ((y + oy) / cell)) & 1)]);
    } else if (kind == "stripes") {
        std::vector<std::array<float, 3>> cols;
        cols.push_back(guarded_color(rng, palette, cols));
        cols.push_back(guarded_color(rng, palette, cols));
        int width_px = 3 + int(rng.below(7));
        int dir = int(rng.below(4));  // 0, 45, 90, 135 degrees
        double cs = dir == 0 ? 1 : dir == 1 ? M_SQRT1_2 : dir == 2 ? 0 : -M_SQRT1_2;
        double sn = dir == 0 ? 0 : dir == 1 ? M_SQRT1_2 : dir == 2 ? 1 : M_SQRT1_2;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                long band = long(std::floor((x * cs + y * sn) / width_px));
                put(y, x, cols[size_t(((band % 2) + 2) % 2)]);
            }
    } else {  // posterized value noise
        std::vector<std::array<float, 3>> cols;
        cols.push_back(guarded_color(rng, palette, cols));
        cols.push_back(guarded_color(rng, palette, cols));
        cols.push_back(guarded_color(rng, palette, cols));
        int g = 5 + int(rng.below(6));  // lattice step in pixels
        int gw = w / g + 2, gh = h / g + 2;
        std::vector<double> lattice(size_t(gw) * size_t(gh));
        for (auto& v : lattice) v = rng.uniform();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double fx = double(x) / g, fy = double(y) / g;
                int x0 = int(fx), y0 = int(fy);
                double tx = fx - x0, ty = fy - y0;
                auto at = [&](int yy, int xx) { return lattice[size_t(yy) * size_t(gw) + size_t(xx)]; };
                double v = at(y0, x0) * (1 - tx) * (1 - ty) + at(y0, x0 + 1) * tx * (1 - ty) +
                           at(y0 + 1, x0) * (1 - tx) * ty + at(y0 + 1, x0 + 1) * tx * ty;
                put(y, x, cols[v < 1.0 / 3 ? 0u : v < 2.0 / 3 ? 1u : 2u]);
            }
    }
    return out;
}

inline Frame make_texture(const RenderStyle& style) {
    return make_texture(style.texture_kind, style.texture_seed, style.height, style.width,
                        style.palette);
}

inline bool covers(const BodySpec& spec, Vec2 pos, double wx, double wy) {
    if (spec.shape == Shape::disc) {
        double dx = wx - pos.x, dy = wy - pos.y;
        return dx * dx + dy * dy <= spec.size * spec.size;
    }
    return std::abs(wx - pos.x) <= spec.size && std::abs(wy - pos.y) <= spec.size;
}

/// Highest body id covering the world point, or -1. Painter's order draws
/// ascending ids, so the last-drawn (highest) id is visible.
inline int topmost_at(const std::vector<BodyState>& states, const std::vector<BodySpec>& specs,
                      double wx, double wy) {
    int best = -1;
    for (size_t i = 0; i < specs.size(); ++i)
        if (covers(specs[i], states[i].position, wx, wy) && specs[i].id > best) best = specs[i].id;
    return best;
}

/// Render one frame: flat-shaded bodies over the procedural background with
/// supersampled box-filter antialiasing. `background` lets callers reuse a
/// precomputed texture.
inline Frame render_frame(const std::vector<BodyState>& states, const std::vector<BodySpec>& specs,
                          const RenderStyle& style, const Frame* background = nullptr) {
    Frame bg_local;
    if (!background) {
        bg_local = make_texture(style);
        background = &bg_local;
    }
    const int h = style.height, w = style.width, ss = style.supersample;
    const double ext = style.world_extent;
    Frame out({h, w, 3});
    const double inv = 1.0 / double(ss * ss);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float* bg = background->ptr() + (int64_t(y) * w + x) * 3;
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < ss; ++sy) {
                for (int sx = 0; sx < ss; ++sx) {
                    double wx = (double(x) + (sx + 0.5) / ss) / w * ext - ext / 2;
                    double wy = (double(y) + (sy + 0.5) / ss) / h * ext - ext / 2;
                    int id = topmost_at(states, specs, wx, wy);
                    if (id < 0) {
                        acc[0] += bg[0];
                        acc[1] += bg[1];
                        acc[2] += bg[2];
                    } else {
                        const BodySpec* b = nullptr;
                        for (const auto& s : specs)
                            if (s.id == id) b = &s;
                        const auto& c = style.palette.at(size_t(b->color_id));
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
            }
            float* po = out.ptr() + (int64_t(y) * w + x) * 3;
            po[0] = float(acc[0] * inv);
            po[1] = float(acc[1] * inv);
            po[2] = float(acc[2] * inv);
        }
    }
    return out;
}

inline VideoTensor render_video(const SimTrace& trace, const RenderStyle& style) {
    VideoTensor v = VideoTensor::zeros(trace.frames, style.height, style.width, trace.fps);
    Frame bg = make_texture(style);
    for (int f = 0; f < trace.frames; ++f) {
        Frame fr = render_frame(trace.states[size_t(f)], trace.spec.bodies, style, &bg);
        std::copy(fr.data.begin(), fr.data.end(), v.frame(f));
    }
    return v;
}

/// Binary segmentation of one object: 1 where it is the top-most body at the
/// pixel center. No antialiasing, occlusion respected.
inline BinaryMask rasterize_object_mask(const std::vector<BodyState>& states,
                                        const std::vector<BodySpec>& specs, int object_id,
                                        const RenderStyle& style) {
    bool known = false;
    for (const auto& s : specs)
        if (s.id == object_id) known = true;
    KM_CHECK(known, usage, "rasterize_object_mask: unknown body id " << object_id);
    const int h = style.height, w = style.width;
    const double ext = style.world_extent;
    BinaryMask m({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double wx = (x + 0.5) / double(w) * ext - ext / 2;
            double wy = (y + 0.5) / double(h) * ext - ext / 2;
            m[int64_t(y) * w + x] = topmost_at(states, specs, wx, wy) == object_id ? 1 : 0;
        }
    return m;
}

// --- PNG bridging ------------------------------------------------------------

inline ImageU8 frame_to_image(const float* frame, int h, int w) {
    ImageU8 img;
    img.height = h;
    img.width = w;
    img.rgb.resize(size_t(h) * w * 3);
    for (size_t i = 0; i < img.rgb.size(); ++i)
        img.rgb[i] = (unsigned char)(std::lround(255.0 * clamp(double(frame[i]), 0.0, 1.0)));
    return img;
}

inline void image_to_frame(const ImageU8& img, float* frame) {
    for (size_t i = 0; i < img.rgb.size(); ++i) frame[i] = float(img.rgb[i]) / 255.0f;
}

/// Writes frames/0000.png ... under `dir`.
inline void export_video_png(const VideoTensor& v, const fs::path& dir) {
    fs::create_directories(dir / "frames");
    char name[32];
    for (int f = 0; f < v.frames(); ++f) {
        std::snprintf(name, sizeof name, "%04d.png", f);
        write_png(dir / "frames" / name, frame_to_image(v.frame(f), v.height(), v.width()));
    }
}

inline VideoTensor import_video_png(const fs::path& dir, int frames, double fps) {
    char name[32];
    VideoTensor v;
    for (int f = 0; f < frames; ++f) {
        std::snprintf(name, sizeof name, "%04d.png", f);
        ImageU8 img = read_png(dir / "frames" / name);
        if (f == 0) v = VideoTensor::zeros(frames, img.height, img.width, fps);
        KM_CHECK(img.height == v.height() && img.width == v.width(), data,
                 "import_video_png: inconsistent frame sizes in " << dir.string());
        image_to_frame(img, v.frame(f));
    }
    return v;
}

}  // namespace kinemask::render
