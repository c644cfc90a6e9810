#include "gencrop/scenegen.hpp"

#include "gencrop/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace gencrop {

const char* to_string(SubjectShape s) {
    switch (s) {
        case SubjectShape::Ellipse: return "ellipse";
        case SubjectShape::RoundedRect: return "rounded-rect";
        case SubjectShape::Silhouette: return "silhouette";
    }
    return "?";
}

const char* to_string(FramingRule r) {
    return r == FramingRule::Centered ? "centered" : "rule-of-thirds";
}

const std::array<PaletteColor, 6>& scene_palette() {
    static const std::array<PaletteColor, 6> palette = {{
        {"red", 0.85, 0.15, 0.15},
        {"green", 0.15, 0.70, 0.20},
        {"blue", 0.15, 0.25, 0.85},
        {"orange", 0.95, 0.55, 0.10},
        {"purple", 0.55, 0.15, 0.75},
        {"teal", 0.10, 0.65, 0.65},
    }};
    return palette;
}

SceneSpec SceneSpec::randomized(std::uint64_t seed, ImageDims canvas, double padding) {
    Rng rng = Rng::derive(seed, std::uint64_t{0x5ce9e});
    SceneSpec spec;
    spec.seed = seed;
    spec.canvas = canvas;
    spec.subject_shape = static_cast<SubjectShape>(rng.uniform_int(0, 2));
    spec.subject_color = rng.uniform_int(0, static_cast<int>(scene_palette().size()) - 1);
    spec.background_style = rng.uniform_int(0, 3);
    spec.framing_rule = rng.bernoulli(0.5) ? FramingRule::Centered : FramingRule::RuleOfThirds;
    spec.padding = padding;
    spec.distractors = 0;
    return spec;
}

namespace {

struct ShapeGeom {
    SubjectShape shape;
    double cx, cy, sw, sh;  // normalized center and full extents

    bool inside(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        switch (shape) {
            case SubjectShape::Ellipse: {
                const double u = dx / (0.5 * sw), v = dy / (0.5 * sh);
                return u * u + v * v <= 1.0;
            }
            case SubjectShape::RoundedRect: {
                const double hw = 0.5 * sw, hh = 0.5 * sh;
                const double r = 0.25 * std::min(sw, sh);
                if (std::abs(dx) > hw || std::abs(dy) > hh) return false;
                const double ex = std::abs(dx) - (hw - r), ey = std::abs(dy) - (hh - r);
                if (ex <= 0.0 || ey <= 0.0) return true;
                return ex * ex + ey * ey <= r * r;
            }
            case SubjectShape::Silhouette: {
                // torso ellipse plus head disc; union spans the sw x sh box
                const double bu = dx / (0.5 * sw), bv = (dy - 0.15 * sh) / (0.35 * sh);
                if (bu * bu + bv * bv <= 1.0) return true;
                const double hr = 0.2 * sh;
                const double hx = dx, hy = dy + 0.3 * sh;
                return hx * hx + hy * hy <= hr * hr;
            }
        }
        return false;
    }
};

void draw_shape(Image& img, Mask& mask, const ShapeGeom& g, const PaletteColor& color,
                bool into_mask) {
    const int w = img.width(), h = img.height();
    const int x0 = std::max(0, static_cast<int>((g.cx - 0.5 * g.sw) * w) - 1);
    const int x1 = std::min(w - 1, static_cast<int>((g.cx + 0.5 * g.sw) * w) + 1);
    const int y0 = std::max(0, static_cast<int>((g.cy - 0.5 * g.sh) * h) - 1);
    const int y1 = std::min(h - 1, static_cast<int>((g.cy + 0.5 * g.sh) * h) + 1);
    for (int y = y0; y <= y1; ++y) {
        const double ny = (y + 0.5) / h;
        for (int x = x0; x <= x1; ++x) {
            const double nx = (x + 0.5) / w;
            if (g.inside(nx, ny)) {
                img.ch[0](y, x) = color.r;
                img.ch[1](y, x) = color.g;
                img.ch[2](y, x) = color.b;
                if (into_mask) mask(y, x) = 1;
            }
        }
    }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
    const int w = spec.canvas.width, h = spec.canvas.height;
    if (w < 32 || h < 32) throw std::invalid_argument("generate_scene: canvas too small for subject");
    Rng rng = Rng::derive(spec.seed, std::uint64_t{0xa11ce});

    // Subject extents and the crop implied by the framing rule.
    const double sw = rng.uniform(0.18, 0.30);
    const double sh = rng.uniform(0.18, 0.30);
    double crop_w, crop_h;
    double third_x = 0.5, third_y = 0.5;
    if (spec.framing_rule == FramingRule::Centered) {
        crop_w = sw + 2.0 * spec.padding;
        crop_h = sh + 2.0 * spec.padding;
    } else {
        // subject center sits at a thirds intersection of the crop
        third_x = rng.bernoulli(0.5) ? 1.0 / 3.0 : 2.0 / 3.0;
        third_y = rng.bernoulli(0.5) ? 1.0 / 3.0 : 2.0 / 3.0;
        crop_w = 3.0 * (0.5 * sw + spec.padding);
        crop_h = 3.0 * (0.5 * sh + spec.padding);
    }
    if (crop_w > 0.98 || crop_h > 0.98) {
        throw std::invalid_argument("generate_scene: canvas too small for subject");
    }

    const double crop_x1 = rng.uniform(0.01, 0.99 - crop_w);
    const double crop_y1 = rng.uniform(0.01, 0.99 - crop_h);
    const CropRect ideal_crop(crop_x1, crop_y1, crop_x1 + crop_w, crop_y1 + crop_h);
    const double cx = crop_x1 + third_x * crop_w;
    const double cy = crop_y1 + third_y * crop_h;

    // Background: two-tone gradient mixed with smooth value noise.
    Image img(w, h, 3);
    const double base_a = rng.uniform(0.25, 0.55), base_b = rng.uniform(0.45, 0.8);
    const double tint[3] = {rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)};
    const bool horizontal = (spec.background_style % 2) == 0;
    Plane noise = value_noise(w, h, std::max(8, w / 8), hash_combine(spec.seed, std::uint64_t{0xb6}));
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double t = horizontal ? static_cast<double>(x) / w : static_cast<double>(y) / h;
                const double grad = base_a + (base_b - base_a) * t;
                img.ch[c](y, x) = tint[c] * (0.75 * grad + 0.25 * noise(y, x));
            }
        }
    }
    img = gaussian_blur(img, 1.0);
    img.clamp01();

    Mask mask = Mask::Zero(h, w);
    const PaletteColor& color = scene_palette()[spec.subject_color % scene_palette().size()];

    // Distractors first so the subject draws over any overlap.
    for (int d = 0; d < spec.distractors; ++d) {
        ShapeGeom dg;
        dg.shape = static_cast<SubjectShape>(rng.uniform_int(0, 2));
        dg.sw = 0.4 * sw;
        dg.sh = 0.4 * sh;
        int color_idx = rng.uniform_int(0, static_cast<int>(scene_palette().size()) - 1);
        if (color_idx == spec.subject_color) {
            color_idx = (color_idx + 1) % static_cast<int>(scene_palette().size());
        }
        // keep distractors clear of the subject bbox
        for (int attempt = 0; attempt < 50; ++attempt) {
            dg.cx = rng.uniform(0.5 * dg.sw + 0.01, 0.99 - 0.5 * dg.sw);
            dg.cy = rng.uniform(0.5 * dg.sh + 0.01, 0.99 - 0.5 * dg.sh);
            const bool overlaps = std::abs(dg.cx - cx) < 0.5 * (dg.sw + sw) + 0.02 &&
                                  std::abs(dg.cy - cy) < 0.5 * (dg.sh + sh) + 0.02;
            if (!overlaps) break;
        }
        draw_shape(img, mask, dg, scene_palette()[color_idx], false);
    }

    ShapeGeom subject_geom{spec.subject_shape, cx, cy, sw, sh};
    draw_shape(img, mask, subject_geom, color, true);

    Scene scene;
    scene.image = std::move(img);
    scene.subject.mask = std::move(mask);
    scene.subject.bbox = mask_tight_bbox(scene.subject.mask);
    scene.ideal_crop = ideal_crop;
    scene.caption = std::string("a ") + color.name + " " + to_string(spec.subject_shape) +
                    " on a gradient background";
    return scene;
}

}  // namespace gencrop
