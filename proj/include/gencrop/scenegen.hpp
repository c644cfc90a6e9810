#pragma once

#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"

#include <array>
#include <cstdint>
#include <string>

namespace gencrop {

enum class SubjectShape { Ellipse, RoundedRect, Silhouette };
enum class FramingRule { Centered, RuleOfThirds };

const char* to_string(SubjectShape s);
const char* to_string(FramingRule r);

// Named flat-shade palette used for subjects; the mock detector matches on it.
struct PaletteColor {
    const char* name;
    double r, g, b;
};
const std::array<PaletteColor, 6>& scene_palette();

struct SceneSpec {
    std::uint64_t seed = 0;
    ImageDims canvas{256, 256};
    SubjectShape subject_shape = SubjectShape::Ellipse;
    int subject_color = 0;  // index into scene_palette()
    int background_style = 0;  // gradient direction / noise mix selector
    FramingRule framing_rule = FramingRule::Centered;
    double padding = 0.1;  // normalized padding per side between subject bbox and ideal crop
    int distractors = 0;

    // Derives a fully randomized spec from (seed); canvas and padding kept.
    static SceneSpec randomized(std::uint64_t seed, ImageDims canvas, double padding = 0.1);
};

struct Scene {
    Image image;
    SubjectRegion subject;
    CropRect ideal_crop;
    std::string caption;
};

// Deterministic in spec: identical spec gives a bit-identical scene.
Scene generate_scene(const SceneSpec& spec);

}  // namespace gencrop
