#include <catch2/catch_amalgamated.hpp>

#include "kinemask/captions.hpp"
#include "kinemask/dataset.hpp"

using namespace kinemask;
using namespace kinemask::captions;

namespace {

data::GenConfig tiny_cfg(const std::string& mode, uint64_t seed = 5) {
    data::GenConfig c;
    c.mode = mode;
    c.n_train = 3;
    c.n_test = 2;
    c.height = c.width = 32;
    c.frames = 6;
    c.arena = 5.0;
    c.min_size = 0.7;
    c.max_size = 1.0;
    c.max_bodies = 3;
    c.master_seed = seed;
    return c;
}

sim::SimTrace trace_for(uint64_t seed, sim::SceneMode mode) {
    sim::SceneGenConfig cfg;
    cfg.mode = mode;
    cfg.palette_ids = {0, 1, 2, 3, 4, 5, 6, 7};
    auto scene = sim::init_scene(cfg, seed);
    return sim::simulate(scene, 16, 12.0, 4);
}

}  // namespace

TEST_CASE("vocabulary is closed, small, and round-trips", "[captions]") {
    const auto& v = vocab();
    REQUIRE(v.size() < 200);
    REQUIRE(v.words[0] == "<pad>");
    REQUIRE(v.words[1] == "<unk>");

    // every template production tokenizes without UNK and round-trips
    for (uint64_t seed = 0; seed < 12; ++seed) {
        auto tr = trace_for(seed, seed % 2 ? sim::SceneMode::interactions
                                           : sim::SceneMode::simple);
        auto rec = caption_from_trace(tr, CaptionKind::rich);
        for (int id : rec.tokens) REQUIRE(id != v.unk_id());
        auto again = tokenize(detokenize(rec.tokens));
        REQUIRE(again == rec.tokens);
    }
    auto null_toks = tokenize(kNullCaption);
    for (int id : null_toks) REQUIRE(id != v.unk_id());

    REQUIRE(tokenize("a glorp on a surface")[1] == v.unk_id());
}

TEST_CASE("null captions are the exact fixed sentence", "[captions]") {
    auto rec = null_caption();
    REQUIRE(rec.text == "An object moving on a surface");
    auto tr = trace_for(1, sim::SceneMode::simple);
    REQUIRE(caption_from_trace(tr, CaptionKind::null_caption).text == rec.text);
}

TEST_CASE("collision traces mention the collision", "[captions]") {
    auto tr = trace_for(3, sim::SceneMode::interactions);
    REQUIRE_FALSE(tr.events.empty());
    auto rec = caption_from_trace(tr, CaptionKind::rich);
    REQUIRE(rec.text.find("collides") != std::string::npos);
    // deterministic
    REQUIRE(caption_from_trace(tr, CaptionKind::rich).text == rec.text);
}

TEST_CASE("traces that settle end with a stationarity clause", "[captions]") {
    sim::SceneSpec scene;
    sim::BodySpec b;
    b.id = 0;
    b.size = 0.8;
    b.friction_decel = 4.0;  // stops quickly
    b.color_id = 2;
    scene.bodies = {b};
    scene.movers = {sim::Mover{0, {1.0, 0.0}}};
    auto tr = sim::simulate(scene, 16, 12.0, 4);
    REQUIRE(tr.states.back()[0].velocity.norm() < 0.02);
    auto rec = caption_from_trace(tr, CaptionKind::rich);
    REQUIRE(rec.text.size() > std::string("remain stationary.").size());
    REQUIRE(rec.text.substr(rec.text.size() - 18) == "remain stationary.");
}

TEST_CASE("direction phrases map screen axes correctly", "[captions]") {
    REQUIRE(direction_phrase({1, 0}) == "to the right");
    REQUIRE(direction_phrase({-1, 0}) == "to the left");
    REQUIRE(direction_phrase({0, -1}) == "upwards");
    REQUIRE(direction_phrase({0, 1}) == "downwards");
    REQUIRE(direction_phrase({1, 1}) == "to the lower right");
    REQUIRE(direction_phrase({-1, -1}) == "to the upper left");
}

TEST_CASE("dataset generation writes a complete, consistent layout", "[dataset]") {
    fs::path dir = fs::path("test_tmp") / "ds_simple";
    fs::remove_all(dir);
    auto cfg = tiny_cfg("simple");
    auto manifest = data::generate_dataset(cfg, dir);

    REQUIRE(fs::exists(dir / "meta.json"));
    REQUIRE(manifest.train.count == 3);
    REQUIRE(manifest.test.count == 2);

    // disjoint appearance pools between splits
    for (int id : manifest.train.palette_ids)
        for (int jd : manifest.test.palette_ids) REQUIRE(id != jd);
    REQUIRE(manifest.train.texture_seed_base + manifest.train.texture_seed_count <=
            manifest.test.texture_seed_base);

    for (int i = 0; i < 3; ++i) {
        auto s = data::read_sample(dir / "train" / "samples" / data::sample_name(i),
                                   data::sample_name(i));
        REQUIRE(s.video.frames() == cfg.frames);
        REQUIRE(s.trace.events.empty());  // simple motion has no collisions
        // first frame is frame 0, bit-exact
        REQUIRE(std::equal(s.first_frame.data.begin(), s.first_frame.data.end(),
                           s.video.frame(0)));
        REQUIRE(s.caption.kind == captions::CaptionKind::rich);
        REQUIRE_FALSE(s.caption.tokens.empty());
    }
}

TEST_CASE("interactions datasets always log events", "[dataset]") {
    fs::path dir = fs::path("test_tmp") / "ds_inter";
    fs::remove_all(dir);
    auto cfg = tiny_cfg("interactions", 9);
    cfg.n_train = 2;
    cfg.n_test = 1;
    data::generate_dataset(cfg, dir);
    for (int i = 0; i < 2; ++i) {
        auto s = data::read_sample(dir / "train" / "samples" / data::sample_name(i),
                                   data::sample_name(i));
        REQUIRE_FALSE(s.trace.events.empty());
    }
}

TEST_CASE("sample write/read round-trip and error reporting", "[dataset]") {
    fs::path dir = fs::path("test_tmp") / "ds_rt";
    fs::remove_all(dir);
    auto cfg = tiny_cfg("simple", 21);
    auto split = cfg.split("train");
    auto sample = data::make_sample(cfg, split, "000000", derive_seed(21, "rt", 0));
    data::write_sample(dir / "s0", sample);

    auto back = data::read_sample(dir / "s0", "000000");
    REQUIRE(back.mask.data.data == sample.mask.data.data);  // bit-exact mask
    REQUIRE(max_abs_diff(back.video.data, sample.video.data) <= 0.5 / 255.0 + 1e-6);
    REQUIRE(back.caption.text == sample.caption.text);
    REQUIRE(sim::serialize(back.trace) == sim::serialize(sample.trace));

    fs::remove(dir / "s0" / "mask.f32");
    try {
        data::read_sample(dir / "s0", "000000");
        FAIL("expected a structured error");
    } catch (const Error& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("000000") != std::string::npos);
        REQUIRE(msg.find("mask.f32") != std::string::npos);
    }
}

TEST_CASE("regeneration with the same seed reproduces pixel content", "[dataset]") {
    fs::path d1 = fs::path("test_tmp") / "ds_a";
    fs::path d2 = fs::path("test_tmp") / "ds_b";
    fs::remove_all(d1);
    fs::remove_all(d2);
    auto cfg = tiny_cfg("simple", 33);
    cfg.n_train = 2;
    cfg.n_test = 0;
    data::generate_dataset(cfg, d1);
    data::generate_dataset(cfg, d2);
    for (int i = 0; i < 2; ++i) {
        auto a = data::read_sample(d1 / "train" / "samples" / data::sample_name(i), "a");
        auto b = data::read_sample(d2 / "train" / "samples" / data::sample_name(i), "b");
        REQUIRE(a.video.data.data == b.video.data.data);
        REQUIRE(a.mask.data.data == b.mask.data.data);
        REQUIRE(a.caption.text == b.caption.text);
    }
    // resume: regenerating over an existing dataset touches nothing
    auto before = fs::last_write_time(d1 / "train" / "samples" / "000000" / "caption.txt");
    data::generate_dataset(cfg, d1);
    REQUIRE(fs::last_write_time(d1 / "train" / "samples" / "000000" / "caption.txt") == before);
}

TEST_CASE("zero-count generation still writes a valid manifest", "[dataset]") {
    fs::path dir = fs::path("test_tmp") / "ds_empty";
    fs::remove_all(dir);
    auto cfg = tiny_cfg("simple");
    cfg.n_train = 0;
    cfg.n_test = 0;
    auto manifest = data::generate_dataset(cfg, dir);
    REQUIRE(manifest.train.count == 0);
    REQUIRE(fs::exists(dir / "meta.json"));
    auto loaded = data::load_manifest(dir);
    REQUIRE(loaded.train.count == 0);
}

TEST_CASE("default and paper-scale sample counts", "[dataset]") {
    data::GenConfig desk;
    REQUIRE(desk.n_train == 2000);
    REQUIRE(desk.n_test == 64);
    REQUIRE(desk.frames == 16);
    REQUIRE(desk.height == 48);
    auto paper = data::GenConfig::paper_scale();
    REQUIRE(paper.n_train == 10000);
    REQUIRE(paper.n_test == 100);
}

TEST_CASE("the dataset loader can re-encode masks in the other mode", "[dataset]") {
    fs::path dir = fs::path("test_tmp") / "ds_modes";
    fs::remove_all(dir);
    auto cfg = tiny_cfg("simple", 44);
    cfg.n_train = 2;
    cfg.n_test = 0;
    data::generate_dataset(cfg, dir);

    data::Dataset as_written(dir, "train");
    data::Dataset re_encoded(dir, "train", masks::EncodeMode::v_0);
    for (int i = 0; i < 2; ++i) {
        const auto& s = as_written.at(i);
        REQUIRE(s.mask.mode == masks::EncodeMode::v_t);
        auto style = data::style_for(cfg, s.trace.spec);
        auto expect_vt = masks::encode_masks(s.trace, style, masks::EncodeMode::v_t, cfg.v_max);
        REQUIRE(s.mask.data.data == expect_vt.data.data);

        const auto& s0 = re_encoded.at(i);
        auto expect_v0 = masks::encode_masks(s0.trace, style, masks::EncodeMode::v_0, cfg.v_max);
        REQUIRE(s0.mask.mode == masks::EncodeMode::v_0);
        REQUIRE(s0.mask.data.data == expect_v0.data.data);
    }
}
