#pragma once

#include <atomic>
#include <cstdio>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kinemask/captions.hpp"
#include "kinemask/common.hpp"
#include "kinemask/masks.hpp"
#include "kinemask/palette.hpp"
#include "kinemask/render.hpp"
#include "kinemask/sim.hpp"

namespace kinemask::data {

using captions::CaptionKind;
using captions::CaptionRecord;
using json = nlohmann::json;
using masks::EncodeMode;
using masks::MaskTensor;
using render::RenderStyle;
using render::VideoTensor;
using sim::SceneMode;
using sim::SimTrace;

struct SplitSpec {
    int count = 0;
    std::vector<int> palette_ids;
    uint64_t texture_seed_base = 0;
    uint64_t texture_seed_count = 1;
};

struct GenConfig {
    std::string mode = "simple";  // simple | interactions
    int n_train = 2000, n_test = 64;
    int height = 48, width = 48, frames = 16;
    double fps = 12.0;
    int substeps = 4;
    int supersample = 4;
    double arena = 6.0;
    float v_max = 2.0f;
    std::string mask_mode = "v_t";
    uint64_t master_seed = 0;
    int min_bodies = 2, max_bodies = 4;
    int min_movers = 1, max_movers = 2;
    double min_size = 0.8, max_size = 1.3;
    double min_speed = 0.5, max_speed = 1.5;
    double restitution = 0.4, friction_decel = 0.8;
    int max_rejections = 1000;

    /// Paper-scale sample counts; dims stay at the desk defaults.
    static GenConfig paper_scale() {
        GenConfig c;
        c.n_train = 10000;
        c.n_test = 100;
        return c;
    }

    SplitSpec split(const std::string& name) const {
        SplitSpec s;
        if (name == "train") {
            s.count = n_train;
            s.palette_ids = default_train_palette_ids();
            s.texture_seed_base = 0;
            s.texture_seed_count = 1u << 20;
        } else {
            s.count = n_test;
            s.palette_ids = default_test_palette_ids();
            s.texture_seed_base = 1ull << 32;  // disjoint from the train range
            s.texture_seed_count = 1u << 20;
        }
        return s;
    }

    sim::SceneGenConfig scene_config(const SplitSpec& split) const {
        sim::SceneGenConfig sc;
        sc.mode = mode == "interactions" ? SceneMode::interactions : SceneMode::simple;
        sc.min_bodies = min_bodies;
        sc.max_bodies = max_bodies;
        sc.min_movers = min_movers;
        sc.max_movers = max_movers;
        sc.min_size = min_size;
        sc.max_size = max_size;
        sc.min_speed = min_speed;
        sc.max_speed = max_speed;
        sc.restitution = restitution;
        sc.friction_decel = friction_decel;
        sc.arena = arena;
        sc.frames = frames;
        sc.fps = fps;
        sc.substeps = substeps;
        sc.palette_ids = split.palette_ids;
        sc.texture_seed_base = split.texture_seed_base;
        sc.texture_seed_count = split.texture_seed_count;
        sc.max_rejections = max_rejections;
        return sc;
    }

    json to_json() const {
        return json{{"mode", mode},           {"n_train", n_train},
                    {"n_test", n_test},       {"height", height},
                    {"width", width},         {"frames", frames},
                    {"fps", fps},             {"substeps", substeps},
                    {"supersample", supersample}, {"arena", arena},
                    {"v_max", v_max},         {"mask_mode", mask_mode},
                    {"master_seed", master_seed}, {"min_bodies", min_bodies},
                    {"max_bodies", max_bodies},   {"min_movers", min_movers},
                    {"max_movers", max_movers},   {"min_size", min_size},
                    {"max_size", max_size},       {"min_speed", min_speed},
                    {"max_speed", max_speed},     {"restitution", restitution},
                    {"friction_decel", friction_decel}, {"max_rejections", max_rejections}};
    }

    static GenConfig from_json(const json& j) {
        GenConfig c;
        c.mode = j.value("mode", c.mode);
        c.n_train = j.value("n_train", c.n_train);
        c.n_test = j.value("n_test", c.n_test);
        c.height = j.value("height", c.height);
        c.width = j.value("width", c.width);
        c.frames = j.value("frames", c.frames);
        c.fps = j.value("fps", c.fps);
        c.substeps = j.value("substeps", c.substeps);
        c.supersample = j.value("supersample", c.supersample);
        c.arena = j.value("arena", c.arena);
        c.v_max = j.value("v_max", c.v_max);
        c.mask_mode = j.value("mask_mode", c.mask_mode);
        c.master_seed = j.value("master_seed", c.master_seed);
        c.min_bodies = j.value("min_bodies", c.min_bodies);
        c.max_bodies = j.value("max_bodies", c.max_bodies);
        c.min_movers = j.value("min_movers", c.min_movers);
        c.max_movers = j.value("max_movers", c.max_movers);
        c.min_size = j.value("min_size", c.min_size);
        c.max_size = j.value("max_size", c.max_size);
        c.min_speed = j.value("min_speed", c.min_speed);
        c.max_speed = j.value("max_speed", c.max_speed);
        c.restitution = j.value("restitution", c.restitution);
        c.friction_decel = j.value("friction_decel", c.friction_decel);
        c.max_rejections = j.value("max_rejections", c.max_rejections);
        return c;
    }
};

struct DatasetManifest {
    int version = 1;
    GenConfig config;
    std::vector<std::array<float, 3>> palette;  // master palette colors
    SplitSpec train, test;

    json to_json() const {
        auto split_json = [](const SplitSpec& s) {
            return json{{"count", s.count},
                        {"palette_ids", s.palette_ids},
                        {"texture_seed_base", s.texture_seed_base},
                        {"texture_seed_count", s.texture_seed_count}};
        };
        json pal = json::array();
        for (const auto& c : palette) pal.push_back({c[0], c[1], c[2]});
        return json{{"version", version},
                    {"config", config.to_json()},
                    {"palette", pal},
                    {"splits", {{"train", split_json(train)}, {"test", split_json(test)}}}};
    }

    static DatasetManifest from_json(const json& j) {
        DatasetManifest m;
        m.version = j.at("version").get<int>();
        m.config = GenConfig::from_json(j.at("config"));
        for (const auto& cj : j.at("palette"))
            m.palette.push_back({cj[0].get<float>(), cj[1].get<float>(), cj[2].get<float>()});
        auto split_from = [](const json& sj) {
            SplitSpec s;
            s.count = sj.at("count").get<int>();
            s.palette_ids = sj.at("palette_ids").get<std::vector<int>>();
            s.texture_seed_base = sj.at("texture_seed_base").get<uint64_t>();
            s.texture_seed_count = sj.at("texture_seed_count").get<uint64_t>();
            return s;
        };
        m.train = split_from(j.at("splits").at("train"));
        m.test = split_from(j.at("splits").at("test"));
        return m;
    }
};

struct Sample {
    std::string id;
    VideoTensor video;           // x0
    Tensor<float> first_frame;   // y, H x W x 3 (equals video frame 0)
    MaskTensor mask;             // m
    CaptionRecord caption;       // rich caption c (null variant is constant)
    SimTrace trace;
};

/// FHWC [0,1] frame block -> FCHW scaled to [-1,1] (network layout).
inline void video_to_net(const render::VideoTensor& v, float* dst) {
    const int F = v.frames(), H = v.height(), W = v.width();
    const int64_t hw = int64_t(H) * W;
    for (int f = 0; f < F; ++f) {
        const float* src = v.frame(f);
        float* out = dst + int64_t(f) * 3 * hw;
        for (int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) out[int64_t(c) * hw + p] = 2.0f * src[p * 3 + c] - 1.0f;
    }
}

/// FHWC signed mask -> FCHW (values already normalized).
inline void mask_to_net(const masks::MaskTensor& m, float* dst) {
    const int F = m.frames(), H = m.height(), W = m.width();
    const int64_t hw = int64_t(H) * W;
    for (int f = 0; f < F; ++f) {
        const float* src = m.frame(f);
        float* out = dst + int64_t(f) * 3 * hw;
        for (int64_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) out[int64_t(c) * hw + p] = src[p * 3 + c];
    }
}

inline std::string sample_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", index);
    return buf;
}

inline std::vector<std::array<float, 3>> master_palette_colors() {
    std::vector<std::array<float, 3>> out;
    for (const auto& c : master_palette()) out.push_back(c.rgb);
    return out;
}

inline RenderStyle style_for(const GenConfig& cfg, const sim::SceneSpec& scene) {
    return RenderStyle::from_scene(scene, master_palette_colors(), cfg.height, cfg.width,
                                   cfg.supersample);
}

inline void write_sample(const fs::path& dir, const Sample& s) {
    fs::create_directories(dir);
    render::export_video_png(s.video, dir);
    masks::save_mask(dir, s.mask);
    sim::save_trace(dir / "sim.json", s.trace);
    // caption.txt is written last and doubles as the completeness marker
    write_text_file(dir / "caption.txt", s.caption.text + "\n");
}

inline bool sample_complete(const fs::path& dir) { return fs::exists(dir / "caption.txt"); }

inline Sample read_sample(const fs::path& dir, const std::string& id) {
    Sample s;
    s.id = id;
    try {
        s.trace = sim::load_trace(dir / "sim.json");
        s.mask = masks::load_mask(dir);
        s.video = render::import_video_png(dir, s.trace.frames, s.trace.fps);
        std::string text = read_text_file(dir / "caption.txt");
        while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
        s.caption.text = text;
        s.caption.tokens = captions::tokenize(text);
        s.caption.kind = text == captions::kNullCaption ? CaptionKind::null_caption
                                                        : CaptionKind::rich;
    } catch (const Error& e) {
        throw Error(e.kind(), "sample " + id + ": " + e.what());
    }
    KM_CHECK(s.mask.frames() == s.video.frames() && s.mask.height() == s.video.height() &&
                 s.mask.width() == s.video.width(),
             data, "sample " << id << ": mask dims do not match video dims");
    s.first_frame = Tensor<float>({s.video.height(), s.video.width(), 3});
    std::copy(s.video.frame(0), s.video.frame(0) + s.first_frame.numel(), s.first_frame.ptr());
    return s;
}

/// Build one sample from its derived seed (deterministic).
inline Sample make_sample(const GenConfig& cfg, const SplitSpec& split, const std::string& id,
                          uint64_t seed) {
    Sample s;
    s.id = id;
    sim::SceneGenConfig sc = cfg.scene_config(split);
    sim::SceneSpec scene = sim::init_scene(sc, seed);
    s.trace = sim::simulate(scene, cfg.frames, cfg.fps, cfg.substeps);
    RenderStyle style = style_for(cfg, scene);
    s.video = render::render_video(s.trace, style);
    s.mask = masks::encode_masks(s.trace, style, masks::encode_mode_from(cfg.mask_mode), cfg.v_max);
    s.caption = captions::caption_from_trace(s.trace, CaptionKind::rich);
    s.first_frame = Tensor<float>({s.video.height(), s.video.width(), 3});
    std::copy(s.video.frame(0), s.video.frame(0) + s.first_frame.numel(), s.first_frame.ptr());
    return s;
}

/// Generate (or resume) the on-disk dataset; fully deterministic per master
/// seed and per-sample seed derivation, so generation parallelizes across
/// samples. Already-complete samples are skipped; the manifest is written
/// once at the end. `mask_vis` additionally writes mask_XXXX.png previews.
inline DatasetManifest generate_dataset(const GenConfig& cfg, const fs::path& out_dir,
                                        bool quiet = true, int jobs = 1, bool mask_vis = false) {
    DatasetManifest manifest;
    manifest.config = cfg;
    manifest.palette = master_palette_colors();
    manifest.train = cfg.split("train");
    manifest.test = cfg.split("test");

    for (const std::string split_name : {std::string("train"), std::string("test")}) {
        SplitSpec split = cfg.split(split_name);
        std::atomic<int> next{0}, done{0};
        std::mutex err_mutex;
        std::optional<Error> first_error;
        auto worker = [&]() {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= split.count) return;
                {
                    std::lock_guard<std::mutex> lk(err_mutex);
                    if (first_error) return;
                }
                fs::path dir = out_dir / split_name / "samples" / sample_name(i);
                uint64_t seed =
                    derive_seed(cfg.master_seed, cfg.mode + ":" + split_name, uint64_t(i));
                try {
                    if (!sample_complete(dir)) {
                        Sample s = make_sample(cfg, split, sample_name(i), seed);
                        write_sample(dir, s);
                        if (mask_vis) masks::export_mask_png(s.mask, dir / "mask_vis");
                    }
                } catch (const Error& e) {
                    std::lock_guard<std::mutex> lk(err_mutex);
                    if (!first_error)
                        first_error = Error(e.kind(), split_name + "/" + sample_name(i) +
                                                          " (seed " + std::to_string(seed) +
                                                          "): " + e.what());
                    return;
                }
                int d = done.fetch_add(1) + 1;
                if (!quiet && d % 100 == 0)
                    std::fprintf(stderr, "[gen-data] %s %s: %d/%d\n", cfg.mode.c_str(),
                                 split_name.c_str(), d, split.count);
            }
        };
        int n_workers = clamp(jobs, 1, 64);
        if (n_workers == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
        }
        if (first_error) throw *first_error;
    }
    write_text_file(out_dir / "meta.json", manifest.to_json().dump(2) + "\n");
    return manifest;
}

inline DatasetManifest load_manifest(const fs::path& dataset_dir) {
    return DatasetManifest::from_json(json::parse(read_text_file(dataset_dir / "meta.json")));
}

/// Lazy dataset view with an in-RAM cache; masks can be re-encoded in a
/// different velocity mode than the one stored on disk (used by the encoding
/// ablation; the videos are identical either way).
class Dataset {
public:
    Dataset(fs::path root, std::string split, std::optional<EncodeMode> mask_override = {})
        : root_(std::move(root)), split_(std::move(split)), mask_override_(mask_override) {
        manifest_ = load_manifest(root_);
        count_ = split_ == "train" ? manifest_.train.count : manifest_.test.count;
        cache_.resize(size_t(count_));
    }

    int size() const { return count_; }
    const DatasetManifest& manifest() const { return manifest_; }
    const GenConfig& config() const { return manifest_.config; }

    fs::path sample_dir(int i) const { return root_ / split_ / "samples" / sample_name(i); }

    const Sample& at(int i) {
        KM_CHECK(i >= 0 && i < count_, data, "dataset index " << i << " out of range");
        auto& slot = cache_[size_t(i)];
        if (!slot) {
            Sample s = read_sample(sample_dir(i), sample_name(i));
            if (mask_override_ && *mask_override_ != s.mask.mode) {
                RenderStyle style = style_for(manifest_.config, s.trace.spec);
                s.mask = masks::encode_masks(s.trace, style, *mask_override_,
                                             manifest_.config.v_max);
            }
            slot = std::make_shared<Sample>(std::move(s));
        }
        return *slot;
    }

private:
    fs::path root_;
    std::string split_;
    std::optional<EncodeMode> mask_override_;
    DatasetManifest manifest_;
    int count_ = 0;
    std::vector<std::shared_ptr<Sample>> cache_;
};

}  // namespace kinemask::data
