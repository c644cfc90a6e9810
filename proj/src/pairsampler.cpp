#include "gencrop/pairsampler.hpp"

#include <algorithm>
#include <cmath>

namespace gencrop {

namespace {

constexpr double kMaxLongShort = 16.0 / 9.0;
constexpr int kMaxAttempts = 100;
constexpr double kEps = 1e-12;

struct ViewDims {
    double w, h, scale;
};

// Orientation-resolved dimensions for a long:short ratio and scale on the
// longest label side.
ViewDims dims_for(double long_short, double scale, double label_long, bool landscape) {
    const double long_side = scale * label_long;
    const double short_side = long_side / long_short;
    return landscape ? ViewDims{long_side, short_side, scale}
                     : ViewDims{short_side, long_side, scale};
}

}  // namespace

CropRect canvas_to_view(const CropRect& in_canvas, const CropRect& view) {
    return CropRect((in_canvas.x1 - view.x1) / view.width(), (in_canvas.y1 - view.y1) / view.height(),
                    (in_canvas.x2 - view.x1) / view.width(), (in_canvas.y2 - view.y1) / view.height());
}

CropRect view_to_canvas(const CropRect& in_view, const CropRect& view) {
    return CropRect(view.x1 + in_view.x1 * view.width(), view.y1 + in_view.y1 * view.height(),
                    view.x1 + in_view.x2 * view.width(), view.y1 + in_view.y2 * view.height());
}

ViewSpec sample_view_rect(const CropRect& label, Rng& rng) {
    const double lw = label.width(), lh = label.height();
    const double label_long = std::max(lw, lh);

    ViewSpec spec;
    if (lw >= 1.0 - 1e-9 && lh >= 1.0 - 1e-9) {
        spec.rect = label;
        spec.aspect = lw / lh;
        spec.degenerate = true;
        return spec;
    }

    const bool label_square = std::abs(lw - lh) <= kEps;
    const bool label_landscape = lw > lh;
    // square labels have no orientation, so no flip branch for them
    spec.orientation_flipped = !label_square && rng.bernoulli(0.2);
    spec.edge_snapped = rng.bernoulli(0.25);

    // scale is drawn once so its marginal stays U[1,2]; only the aspect is
    // rejection-sampled
    const double scale = rng.uniform(1.0, 2.0);
    ViewDims dims{0, 0, 0};
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        const double long_short = std::exp(rng.uniform(0.0, std::log(kMaxLongShort)));
        const bool landscape =
            label_square ? rng.bernoulli(0.5) : (label_landscape != spec.orientation_flipped);
        dims = dims_for(long_short, scale, label_long, landscape);
        if (dims.w <= 1.0 + kEps && dims.h <= 1.0 + kEps && dims.w >= lw - kEps &&
            dims.h >= lh - kEps) {
            accepted = true;
            break;
        }
    }
    if (!accepted) {
        // tightest containing view of one more sampled aspect, clipped to canvas
        spec.tightest_fallback = true;
        const double long_short = std::exp(rng.uniform(0.0, std::log(kMaxLongShort)));
        const bool landscape =
            label_square ? rng.bernoulli(0.5) : (label_landscape != spec.orientation_flipped);
        double w, h;
        if (landscape) {
            h = std::max(lh, lw / long_short);
            w = long_short * h;
        } else {
            w = std::max(lw, lh / long_short);
            h = long_short * w;
        }
        dims = ViewDims{std::min(1.0, w), std::min(1.0, h), 0.0};
        dims.scale = std::max(dims.w, dims.h) / label_long;
    }
    dims.w = std::min(1.0, std::max(dims.w, lw));
    dims.h = std::min(1.0, std::max(dims.h, lh));

    // positions keeping the label inside the view and the view inside the canvas
    const double x_lo = std::max(0.0, label.x2 - dims.w);
    const double x_hi = std::min(label.x1, 1.0 - dims.w);
    const double y_lo = std::max(0.0, label.y2 - dims.h);
    const double y_hi = std::min(label.y1, 1.0 - dims.h);

    double x1, y1;
    if (spec.edge_snapped) {
        spec.snapped_edge = rng.uniform_int(0, 3);
        x1 = rng.uniform(x_lo, std::max(x_lo, x_hi));
        y1 = rng.uniform(y_lo, std::max(y_lo, y_hi));
        switch (spec.snapped_edge) {
            case 0: x1 = label.x1; break;            // view left on label left
            case 1: y1 = label.y1; break;            // view top on label top
            case 2: x1 = label.x2 - dims.w; break;   // view right on label right
            case 3: y1 = label.y2 - dims.h; break;   // view bottom on label bottom
        }
        x1 = std::clamp(x1, x_lo, std::max(x_lo, x_hi));
        y1 = std::clamp(y1, y_lo, std::max(y_lo, y_hi));
    } else {
        x1 = rng.uniform(x_lo, std::max(x_lo, x_hi));
        y1 = rng.uniform(y_lo, std::max(y_lo, y_hi));
    }

    spec.rect = CropRect(x1, y1, std::min(1.0, x1 + dims.w), std::min(1.0, y1 + dims.h));
    spec.aspect = spec.rect.width() / spec.rect.height();
    spec.scale = dims.scale;
    return spec;
}

TrainingPair make_training_pair(const Image& canvas_image, const Mask& subject_mask,
                                const CropRect& pseudo_label, const CropRect& subject_bbox,
                                const ViewSpec& view) {
    TrainingPair pair;
    pair.view_spec = view;

    const ImageDims dims = canvas_image.dims();
    const PixelRect pr = to_pixels(view.rect, dims);
    pair.view_image = crop_image(canvas_image, pr);
    pair.view_subject.mask = crop_mask(subject_mask, pr);

    CropRect label_v = canvas_to_view(pseudo_label, view.rect);
    // containment is exact in canvas space; only numeric round-off to absorb
    pair.label = CropRect(std::clamp(label_v.x1, 0.0, 1.0), std::clamp(label_v.y1, 0.0, 1.0),
                          std::clamp(label_v.x2, 0.0, 1.0), std::clamp(label_v.y2, 0.0, 1.0));

    if (pair.view_subject.mask.any()) {
        pair.view_subject.bbox = mask_tight_bbox(pair.view_subject.mask);
    } else {
        // pixel cropping lost the mask; fall back to the intersected bbox
        CropRect sb = canvas_to_view(subject_bbox, view.rect);
        const double x1 = std::clamp(sb.x1, 0.0, 1.0 - 1e-6);
        const double y1 = std::clamp(sb.y1, 0.0, 1.0 - 1e-6);
        pair.view_subject.bbox = CropRect(x1, y1, std::max(std::clamp(sb.x2, 0.0, 1.0), x1 + 1e-6),
                                          std::max(std::clamp(sb.y2, 0.0, 1.0), y1 + 1e-6));
    }
    return pair;
}

TrainingPair sample_enclosing_view(const DatasetRecord& record, Rng& rng) {
    Image canvas = load_png(record.outpainted_path);
    Mask mask = load_mask_png(record.subject_mask_path);
    ViewSpec view = sample_view_rect(record.pseudo_label, rng);
    return make_training_pair(canvas, mask, record.pseudo_label, record.subject_bbox, view);
}

}  // namespace gencrop
