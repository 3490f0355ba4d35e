#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinemask/common.hpp"
#include "kinemask/dataset.hpp"
#include "kinemask/render.hpp"

namespace kinemask::eval {

using json = nlohmann::json;
using render::VideoTensor;

/// Mean squared error on the 0-255 scale (paper-style magnitudes).
inline double video_mse(const VideoTensor& pred, const VideoTensor& gt) {
    KM_CHECK(pred.data.shape == gt.data.shape, usage, "video_mse: shape mismatch");
    double acc = 0;
    const int64_t n = pred.data.numel();
    for (int64_t i = 0; i < n; ++i) {
        double d = 255.0 * (double(pred.data[i]) - double(gt.data[i]));
        acc += d * d;
    }
    return n ? acc / double(n) : 0.0;
}

using MaskStack = std::vector<Tensor<uint8_t>>;  // per frame, H x W

/// Assigns each pixel to the nearest palette color within the L-inf tolerance;
/// pixels matching nothing stay background. Returns one mask stack per color.
inline std::vector<MaskStack> segment_by_color(const VideoTensor& video,
                                               const std::vector<std::array<float, 3>>& palette,
                                               double tol = 0.12) {
    const int F = video.frames(), H = video.height(), W = video.width();
    std::vector<MaskStack> out(palette.size());
    for (auto& stack : out) {
        stack.reserve(size_t(F));
        for (int f = 0; f < F; ++f) stack.emplace_back(std::vector<int64_t>{H, W});
    }
    for (int f = 0; f < F; ++f) {
        const float* fr = video.frame(f);
        for (int64_t p = 0; p < int64_t(H) * W; ++p) {
            const float* px = fr + p * 3;
            int best = -1;
            double best_d = tol;
            for (size_t k = 0; k < palette.size(); ++k) {
                double d = 0;
                for (int c = 0; c < 3; ++c)
                    d = std::max(d, std::abs(double(px[c]) - double(palette[k][size_t(c)])));
                if (d <= best_d) {  // ties broken by nearest color
                    best_d = d;
                    best = int(k);
                }
            }
            if (best >= 0) out[size_t(best)][size_t(f)][p] = 1;
        }
    }
    return out;
}

/// Mean IoU over objects and frames; frames empty on both sides are skipped,
/// one-sided-empty frames count as zero.
inline double mask_iou(const std::vector<MaskStack>& pred, const std::vector<MaskStack>& gt) {
    KM_CHECK(pred.size() == gt.size(), usage, "mask_iou: object count mismatch");
    double acc = 0;
    int64_t counted = 0;
    for (size_t k = 0; k < pred.size(); ++k) {
        KM_CHECK(pred[k].size() == gt[k].size(), usage, "mask_iou: frame count mismatch");
        for (size_t f = 0; f < pred[k].size(); ++f) {
            const auto& a = pred[k][f];
            const auto& b = gt[k][f];
            int64_t inter = 0, uni = 0;
            for (int64_t p = 0; p < a.numel(); ++p) {
                bool pa = a[p] != 0, pb = b[p] != 0;
                inter += (pa && pb) ? 1 : 0;
                uni += (pa || pb) ? 1 : 0;
            }
            if (uni == 0) continue;  // both empty
            acc += double(inter) / double(uni);
            ++counted;
        }
    }
    return counted ? acc / double(counted) : 1.0;
}

inline std::optional<std::array<double, 2>> centroid(const Tensor<uint8_t>& mask) {
    int64_t count = 0;
    double cy = 0, cx = 0;
    const int H = int(mask.shape[0]), W = int(mask.shape[1]);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask[int64_t(y) * W + x]) {
                ++count;
                cy += y;
                cx += x;
            }
    if (!count) return std::nullopt;
    return std::array<double, 2>{cx / double(count), cy / double(count)};
}

struct TrajectoryError {
    double mean_centroid_dist = 0;  // pixels, averaged over objects and frames
    double endpoint_dist = 0;       // pixels at the final frame
};

/// Color-tracked centroid distance; an object visible in gt but lost in pred
/// contributes the image diagonal for that frame.
inline TrajectoryError trajectory_error(const VideoTensor& pred, const VideoTensor& gt,
                                        const std::vector<std::array<float, 3>>& palette,
                                        double tol = 0.12) {
    auto pm = segment_by_color(pred, palette, tol);
    auto gm = segment_by_color(gt, palette, tol);
    const double diag = std::hypot(double(gt.height()), double(gt.width()));
    double acc = 0, end_acc = 0;
    int64_t counted = 0, end_counted = 0;
    for (size_t k = 0; k < palette.size(); ++k) {
        for (size_t f = 0; f < gm[k].size(); ++f) {
            auto g = centroid(gm[k][f]);
            if (!g) continue;  // object out of view in ground truth
            auto p = centroid(pm[k][f]);
            double d = p ? std::hypot((*p)[0] - (*g)[0], (*p)[1] - (*g)[1]) : diag;
            acc += d;
            ++counted;
            if (f + 1 == gm[k].size()) {
                end_acc += d;
                ++end_counted;
            }
        }
    }
    TrajectoryError te;
    te.mean_centroid_dist = counted ? acc / double(counted) : 0.0;
    te.endpoint_dist = end_counted ? end_acc / double(end_counted) : 0.0;
    return te;
}

/// Cosine between the commanded (x,y) velocity and the object's centroid
/// displacement over the first `k_frames` frames; 0 when the object barely
/// moves or cannot be found.
inline double direction_adherence(const VideoTensor& pred, std::array<double, 2> commanded,
                                  const std::array<float, 3>& object_color, int k_frames = 5,
                                  double tol = 0.12) {
    double cmd_norm = std::hypot(commanded[0], commanded[1]);
    KM_CHECK(cmd_norm > 0, usage, "direction_adherence: commanded velocity is zero");
    auto stacks = segment_by_color(pred, {object_color}, tol);
    const auto& stack = stacks[0];
    int last = std::min<int>(k_frames, int(stack.size()) - 1);
    auto c0 = centroid(stack[0]);
    auto ck = centroid(stack[size_t(last)]);
    if (!c0 || !ck) return 0.0;
    double dx = (*ck)[0] - (*c0)[0], dy = (*ck)[1] - (*c0)[1];
    double disp = std::hypot(dx, dy);
    if (disp < 0.5) return 0.0;
    return (dx * commanded[0] + dy * commanded[1]) / (disp * cmd_norm);
}

// --- report -----------------------------------------------------------------------

struct SampleMetrics {
    double mse = 0, iou = 0, traj_mean = 0, traj_end = 0;
    double adherence = 0;
    bool has_adherence = false;
};

struct Report {
    std::map<std::string, SampleMetrics> samples;
    std::vector<std::string> missing;
    SampleMetrics aggregate;
    int counted = 0;

    json to_json() const {
        json per = json::object();
        for (const auto& [id, m] : samples)
            per[id] = json{{"mse", m.mse},
                           {"iou", m.iou},
                           {"trajectory_mean_px", m.traj_mean},
                           {"trajectory_endpoint_px", m.traj_end},
                           {"adherence", m.has_adherence ? json(m.adherence) : json()}};
        return json{{"samples", per},
                    {"missing", missing},
                    {"count", counted},
                    {"aggregate",
                     {{"mse", aggregate.mse},
                      {"iou", aggregate.iou},
                      {"trajectory_mean_px", aggregate.traj_mean},
                      {"trajectory_endpoint_px", aggregate.traj_end},
                      {"adherence", aggregate.adherence}}}};
    }
};

/// Colors of the bodies in one scene, via the master palette ids recorded in
/// its sim trace.
inline std::vector<std::array<float, 3>> scene_palette(const sim::SimTrace& trace,
                                                       const data::DatasetManifest& manifest) {
    std::vector<std::array<float, 3>> out;
    for (const auto& b : trace.spec.bodies) out.push_back(manifest.palette.at(size_t(b.color_id)));
    return out;
}

/// Per-sample and aggregate metrics for a prediction directory against a
/// dataset split. Missing predictions are listed and skipped.
inline Report eval_report(const fs::path& pred_dir, const fs::path& gt_root,
                          const std::string& split, double tol = 0.12, int adherence_k = 5) {
    data::DatasetManifest manifest = data::load_manifest(gt_root);
    int count = split == "train" ? manifest.train.count : manifest.test.count;
    Report rep;
    double sum_mse = 0, sum_iou = 0, sum_tm = 0, sum_te = 0, sum_adh = 0;
    int adh_count = 0;
    for (int i = 0; i < count; ++i) {
        std::string id = data::sample_name(i);
        fs::path pdir = pred_dir / id;
        if (!fs::exists(pdir / "frames" / "0000.png")) {
            rep.missing.push_back(id);
            continue;
        }
        data::Sample gt = data::read_sample(gt_root / split / "samples" / id, id);
        VideoTensor pred = render::import_video_png(pdir, gt.video.frames(), gt.video.fps);
        KM_CHECK(pred.height() == gt.video.height() && pred.width() == gt.video.width(), data,
                 "prediction " << id << " has wrong dimensions");

        auto palette = scene_palette(gt.trace, manifest);
        SampleMetrics m;
        m.mse = video_mse(pred, gt.video);
        m.iou = mask_iou(segment_by_color(pred, palette, tol),
                         segment_by_color(gt.video, palette, tol));
        auto te = trajectory_error(pred, gt.video, palette, tol);
        m.traj_mean = te.mean_centroid_dist;
        m.traj_end = te.endpoint_dist;

        auto movers = masks::frame0_movers(gt.trace);
        if (!movers.empty()) {
            double acc = 0;
            for (size_t mi : movers) {
                const auto& v = gt.trace.states[0][mi].velocity;
                acc += direction_adherence(pred, {v.x, v.y},
                                           palette[size_t(mi)], adherence_k, tol);
            }
            m.adherence = acc / double(movers.size());
            m.has_adherence = true;
            sum_adh += m.adherence;
            ++adh_count;
        }
        rep.samples[id] = m;
        sum_mse += m.mse;
        sum_iou += m.iou;
        sum_tm += m.traj_mean;
        sum_te += m.traj_end;
        ++rep.counted;
    }
    if (rep.counted) {
        rep.aggregate.mse = sum_mse / rep.counted;
        rep.aggregate.iou = sum_iou / rep.counted;
        rep.aggregate.traj_mean = sum_tm / rep.counted;
        rep.aggregate.traj_end = sum_te / rep.counted;
        rep.aggregate.adherence = adh_count ? sum_adh / adh_count : 0.0;
    }
    return rep;
}

inline std::string report_table(const Report& r, const std::string& title) {
    char buf[224];
    std::snprintf(buf, sizeof buf, "%-28s  n=%-4d MSE %8.2f  IoU %6.4f  traj %6.2fpx  adh %6.3f",
                  title.c_str(), r.counted, r.aggregate.mse, r.aggregate.iou,
                  r.aggregate.traj_mean, r.aggregate.adherence);
    std::string line = buf;
    if (!r.missing.empty()) line += "  (missing " + std::to_string(r.missing.size()) + ")";
    return line;
}

}  // namespace kinemask::eval
