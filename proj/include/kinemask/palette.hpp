#pragma once

#include <array>
#include <string>
#include <vector>

namespace kinemask {

struct PaletteColor {
    std::string name;
    std::array<float, 3> rgb;
};

/// Master object palette on the channel grid {0.20, 0.49, 0.78}: every pair
/// differs by at least 0.29 in some channel, and every color has an extreme
/// channel, so compliant mid-tone backgrounds sit at an L-inf distance of
/// 0.24-0.34 from every object color. That window keeps the antialiased rim
/// of a body within the color-segmentation tolerance on one side and off the
/// background on the other. Train/test splits use disjoint id subsets.
inline const std::vector<PaletteColor>& master_palette() {
    static const std::vector<PaletteColor> p = {
        {"red", {0.78f, 0.20f, 0.20f}},     {"green", {0.20f, 0.78f, 0.20f}},
        {"blue", {0.20f, 0.20f, 0.78f}},    {"yellow", {0.78f, 0.78f, 0.20f}},
        {"purple", {0.49f, 0.20f, 0.78f}},  {"cyan", {0.20f, 0.78f, 0.78f}},
        {"orange", {0.78f, 0.49f, 0.20f}},  {"pink", {0.78f, 0.49f, 0.78f}},
        {"teal", {0.20f, 0.49f, 0.49f}},    {"lime", {0.49f, 0.78f, 0.20f}},
        {"magenta", {0.78f, 0.20f, 0.78f}}, {"navy", {0.20f, 0.49f, 0.78f}},
    };
    return p;
}

inline const PaletteColor& palette_color(int id) { return master_palette().at(size_t(id)); }

/// Default split of palette ids: first 8 for training scenes, last 4 held
/// out for test scenes.
inline std::vector<int> default_train_palette_ids() { return {0, 1, 2, 3, 4, 5, 6, 7}; }
inline std::vector<int> default_test_palette_ids() { return {8, 9, 10, 11}; }

}  // namespace kinemask
