#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "kinemask/common.hpp"
#include "kinemask/palette.hpp"
#include "kinemask/sim.hpp"

namespace kinemask::captions {

using sim::SimTrace;

inline const std::string kNullCaption = "An object moving on a surface";

enum class CaptionKind { rich, null_caption };

struct CaptionRecord {
    std::string text;
    std::vector<int> tokens;
    CaptionKind kind = CaptionKind::rich;
};

// --- vocabulary -----------------------------------------------------------------

struct Vocab {
    std::vector<std::string> words;  // index = id; 0 = PAD, 1 = UNK
    std::map<std::string, int> index;

    int pad_id() const { return 0; }
    int unk_id() const { return 1; }
    size_t size() const { return words.size(); }

    int id_of(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? unk_id() : it->second;
    }
};

/// Lowercase and split, treating , . : as standalone tokens.
inline std::vector<std::string> split_words(const std::string& text) {
    std::string norm;
    norm.reserve(text.size() + 8);
    for (char ch : text) {
        if (ch == ',' || ch == '.' || ch == ':') {
            norm += ' ';
            norm += ch;
            norm += ' ';
        } else {
            norm += char(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    std::vector<std::string> out;
    std::string cur;
    for (char ch : norm) {
        if (ch == ' ') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

/// Closed word-level vocabulary over every template production. Stable order:
/// PAD, UNK, then the fixed lexeme list.
inline Vocab build_vocab() {
    Vocab v;
    std::vector<std::string> lex = {
        "<pad>", "<unk>",
        // scaffolding
        "on", "a", "surface", "there", "are", "objects", "two", "three", "four", "and", "the",
        "moves", "to", "right", "left", "upwards", "downwards", "upper", "lower", "collides",
        "with", "pushing", "it", "slightly", "out", "of", "frame", "after", "motion", "all",
        "remain", "stationary", "some", "still", "moving", "at", "end", "an", "object",
        // punctuation
        ",", ".", ":",
        // shapes and textures
        "cube", "cylinder", "checkered", "striped", "mottled"};
    for (const auto& c : master_palette()) lex.push_back(c.name);
    for (const auto& w : lex) {
        if (v.index.count(w)) continue;
        v.index[w] = int(v.words.size());
        v.words.push_back(w);
    }
    return v;
}

inline const Vocab& vocab() {
    static const Vocab v = build_vocab();
    return v;
}

inline std::vector<int> tokenize(const std::string& text, const Vocab& v = vocab()) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(v.id_of(w));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& v = vocab()) {
    std::string out;
    for (int id : ids) {
        if (id == v.pad_id()) continue;
        if (!out.empty()) out += ' ';
        out += v.words.at(size_t(id));
    }
    return out;
}

// --- templating -------------------------------------------------------------------

inline std::string direction_phrase(sim::Vec2 v) {
    double deg = std::atan2(v.y, v.x) * 180.0 / M_PI;  // screen y grows downward
    if (deg >= -22.5 && deg < 22.5) return "to the right";
    if (deg >= 22.5 && deg < 67.5) return "to the lower right";
    if (deg >= 67.5 && deg < 112.5) return "downwards";
    if (deg >= 112.5 && deg < 157.5) return "to the lower left";
    if (deg >= -67.5 && deg < -22.5) return "to the upper right";
    if (deg >= -112.5 && deg < -67.5) return "upwards";
    if (deg >= -157.5 && deg < -112.5) return "to the upper left";
    return "to the left";
}

inline std::string surface_word(const std::string& texture_kind) {
    if (texture_kind == "checker") return "checkered";
    if (texture_kind == "stripes") return "striped";
    return "mottled";
}

inline std::string body_phrase(const sim::BodySpec& b) {
    return palette_color(b.color_id).name + " " +
           (b.shape == sim::Shape::disc ? "cylinder" : "cube");
}

inline std::string count_word(size_t n) {
    return n == 2 ? "two" : n == 3 ? "three" : "four";
}

/// Deterministic caption from the rollout's event log, in the style the
/// rich training captions follow: scene inventory, per-mover motion, one
/// clause per collision, and a terminal stationarity clause.
inline CaptionRecord caption_from_trace(const SimTrace& trace, CaptionKind kind) {
    CaptionRecord rec;
    rec.kind = kind;
    if (kind == CaptionKind::null_caption) {
        rec.text = kNullCaption;
        rec.tokens = tokenize(rec.text);
        return rec;
    }
    const auto& bodies = trace.spec.bodies;
    std::string s = "On a " + surface_word(trace.spec.texture_kind) + " surface, there are " +
                    count_word(bodies.size()) + " objects: ";
    for (size_t i = 0; i < bodies.size(); ++i) {
        if (i > 0) s += (i + 1 == bodies.size()) ? " and " : ", ";
        s += "a " + body_phrase(bodies[i]);
    }
    s += ".";

    auto index_of = [&](int id) {
        for (size_t i = 0; i < bodies.size(); ++i)
            if (bodies[i].id == id) return i;
        return size_t(0);
    };

    for (const auto& m : trace.spec.movers) {
        const auto& b = bodies[index_of(m.id)];
        s += " The " + body_phrase(b) + " moves " + direction_phrase(m.velocity) + ".";
    }

    std::vector<sim::CollisionEvent> events = trace.events;
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& x, const auto& y) { return x.frame < y.frame; });
    for (const auto& e : events) {
        size_t ia = index_of(e.a), ib = index_of(e.b);
        int prev = std::max(0, e.frame - 1);
        // the faster body going in is the agent
        bool a_pushes = trace.states[size_t(prev)][ia].velocity.norm() >=
                        trace.states[size_t(prev)][ib].velocity.norm();
        size_t agent = a_pushes ? ia : ib;
        size_t pushee = a_pushes ? ib : ia;
        auto v_after = trace.states[size_t(e.frame)][pushee].velocity;
        if (v_after.norm() < 0.15) {
            s += " The " + body_phrase(bodies[agent]) + " collides slightly with the " +
                 body_phrase(bodies[pushee]) + ".";
        } else {
            s += " The " + body_phrase(bodies[agent]) + " collides with the " +
                 body_phrase(bodies[pushee]) + ", pushing it " + direction_phrase(v_after) + ".";
        }
    }

    double half = trace.spec.arena / 2.0;
    for (size_t i = 0; i < bodies.size(); ++i) {
        auto p = trace.states.back()[i].position;
        if (std::abs(p.x) > half + bodies[i].size || std::abs(p.y) > half + bodies[i].size)
            s += " The " + body_phrase(bodies[i]) + " moves out of the frame.";
    }

    bool all_still = true;
    for (const auto& st : trace.states.back())
        if (st.velocity.norm() > 0.02) all_still = false;
    s += all_still ? " After the motion, all objects remain stationary."
                   : " Some objects are still moving at the end.";

    rec.text = s;
    rec.tokens = tokenize(s);
    return rec;
}

inline CaptionRecord null_caption() {
    CaptionRecord rec;
    rec.kind = CaptionKind::null_caption;
    rec.text = kNullCaption;
    rec.tokens = tokenize(rec.text);
    return rec;
}

/// Pad or clip to a fixed token length for batching; PAD is ignored by the
/// embedding pooling.
inline std::vector<int> pad_tokens(const std::vector<int>& ids, int length) {
    std::vector<int> out(size_t(length), vocab().pad_id());
    for (size_t i = 0; i < ids.size() && i < size_t(length); ++i) out[i] = ids[i];
    return out;
}

}  // namespace kinemask::captions
