#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/control.hpp"
#include "kinemask/denoiser.hpp"

namespace kinemask::ckpt {

using diffusion::ControlParams;
using diffusion::DenoiserConfig;
using diffusion::DenoiserParams;
using json = nlohmann::json;

inline constexpr char kMagic[8] = {'K', 'M', 'C', 'K', 'P', 'T', '0', '1'};

/// Payload = all tensors as little-endian float32 in header order; the
/// fingerprint is the FNV-1a 64 hash of those bytes.
struct Container {
    json header;
    std::vector<std::string> names;
    std::vector<std::vector<int64_t>> shapes;
    std::vector<std::vector<float>> payloads;

    std::string fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : payloads) h = fnv1a(p.data(), p.size() * sizeof(float), h);
        return hex64(h);
    }

    const std::vector<float>* find(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return &payloads[i];
        return nullptr;
    }
};

inline void save_container(const fs::path& path, Container& c) {
    c.header["fingerprint"] = c.fingerprint();
    json tensors = json::array();
    for (size_t i = 0; i < c.names.size(); ++i)
        tensors.push_back(json{{"name", c.names[i]}, {"shape", c.shapes[i]}});
    c.header["tensors"] = tensors;
    std::string hdr = c.header.dump();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    KM_CHECK(out.good(), data, "cannot write checkpoint " << path.string());
    out.write(kMagic, 8);
    uint64_t len = hdr.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(hdr.data(), std::streamsize(hdr.size()));
    for (const auto& p : c.payloads)
        out.write(reinterpret_cast<const char*>(p.data()), std::streamsize(p.size() * 4));
    KM_CHECK(out.good(), data, "short write to checkpoint " << path.string());
}

inline Container load_container(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    KM_CHECK(in.good(), data, "cannot open checkpoint " << path.string());
    char magic[8];
    in.read(magic, 8);
    KM_CHECK(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0, data,
             "not a checkpoint file: " << path.string());
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string hdr(len, '\0');
    in.read(hdr.data(), std::streamsize(len));
    KM_CHECK(in.good(), data, "truncated checkpoint header: " << path.string());
    Container c;
    c.header = json::parse(hdr);
    for (const auto& tj : c.header.at("tensors")) {
        c.names.push_back(tj.at("name").get<std::string>());
        c.shapes.push_back(tj.at("shape").get<std::vector<int64_t>>());
        int64_t n = 1;
        for (auto d : c.shapes.back()) n *= d;
        c.payloads.emplace_back(size_t(n));
        in.read(reinterpret_cast<char*>(c.payloads.back().data()), std::streamsize(n * 4));
        KM_CHECK(in.gcount() == std::streamsize(n * 4), data,
                 "truncated tensor '" << c.names.back() << "' in " << path.string());
    }
    std::string want = c.header.value("fingerprint", "");
    KM_CHECK(want.empty() || want == c.fingerprint(), data,
             "checkpoint fingerprint mismatch (corrupt file?): " << path.string());
    return c;
}

template <typename T>
Container pack_params(nn::NamedParams<T> np) {
    Container c;
    for (auto& [name, t] : np.items) {
        c.names.push_back(name);
        c.shapes.push_back(t->shape);
        std::vector<float> buf(static_cast<size_t>(t->numel()));
        for (int64_t i = 0; i < t->numel(); ++i) buf[size_t(i)] = float((*t)[i]);
        c.payloads.push_back(std::move(buf));
    }
    return c;
}

template <typename T>
void unpack_params(const Container& c, nn::NamedParams<T> np) {
    for (auto& [name, t] : np.items) {
        const auto* src = c.find(name);
        KM_CHECK(src, data, "checkpoint missing tensor '" << name << "'");
        KM_CHECK(int64_t(src->size()) == t->numel(), data,
                 "checkpoint tensor '" << name << "' has wrong size");
        for (int64_t i = 0; i < t->numel(); ++i) (*t)[i] = T((*src)[size_t(i)]);
    }
}

template <typename T>
std::string params_fingerprint(DenoiserParams<T>& p) {
    return pack_params(p.named()).fingerprint();
}

template <typename T>
std::string params_fingerprint(ControlParams<T>& p) {
    return pack_params(p.named()).fingerprint();
}

// --- backbone ------------------------------------------------------------------

template <typename T>
void save_backbone(const fs::path& path, DenoiserParams<T>& p, int step) {
    Container c = pack_params(p.named());
    c.header = json{{"kind", "backbone"}, {"config", p.cfg.to_json()}, {"step", step}};
    save_container(path, c);
}

struct BackboneMeta {
    DenoiserConfig config;
    int step = 0;
    std::string fingerprint;
};

template <typename T>
DenoiserParams<T> load_backbone(const fs::path& path, BackboneMeta* meta = nullptr) {
    Container c = load_container(path);
    KM_CHECK(c.header.value("kind", "") == "backbone", data,
             path.string() << " is not a backbone checkpoint");
    DenoiserParams<T> p;
    p.cfg = DenoiserConfig::from_json(c.header.at("config"));
    p.alloc();
    unpack_params(c, p.named());
    if (meta) {
        meta->config = p.cfg;
        meta->step = c.header.value("step", 0);
        meta->fingerprint = c.header.value("fingerprint", "");
    }
    return p;
}

// --- control branch ---------------------------------------------------------------

struct ControlMeta {
    DenoiserConfig config;
    int taps = 0;
    double lambda = 0.5;
    int stage = 0;
    int step = 0;
    std::string fingerprint;
    std::string backbone_fingerprint;  // the theta this branch belongs to
    std::string parent_fingerprint;    // stage-2 records its stage-1 parent
};

template <typename T>
void save_control(const fs::path& path, ControlParams<T>& p, int stage, int step,
                  const std::string& backbone_fp, const std::string& parent_fp = "") {
    Container c = pack_params(p.named());
    c.header = json{{"kind", "control"},
                    {"config", p.cfg.to_json()},
                    {"taps", p.taps},
                    {"lambda", double(p.lambda)},
                    {"stage", stage},
                    {"step", step},
                    {"backbone_fingerprint", backbone_fp},
                    {"parent_fingerprint", parent_fp}};
    save_container(path, c);
}

template <typename T>
ControlParams<T> load_control(const fs::path& path, ControlMeta* meta = nullptr) {
    Container c = load_container(path);
    KM_CHECK(c.header.value("kind", "") == "control", data,
             path.string() << " is not a control checkpoint");
    ControlParams<T> p;
    p.cfg = DenoiserConfig::from_json(c.header.at("config"));
    p.taps = c.header.at("taps").get<int>();
    p.lambda = T(c.header.at("lambda").get<double>());
    p.alloc();
    unpack_params(c, p.named());
    if (meta) {
        meta->config = p.cfg;
        meta->taps = p.taps;
        meta->lambda = c.header.at("lambda").get<double>();
        meta->stage = c.header.value("stage", 0);
        meta->step = c.header.value("step", 0);
        meta->fingerprint = c.header.value("fingerprint", "");
        meta->backbone_fingerprint = c.header.value("backbone_fingerprint", "");
        meta->parent_fingerprint = c.header.value("parent_fingerprint", "");
    }
    return p;
}

}  // namespace kinemask::ckpt
