#pragma once

#include "gencrop/datagen.hpp"
#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"
#include "gencrop/rng.hpp"

namespace gencrop {

// An enclosing view sampled around a pseudo-label on the outpainted canvas.
struct ViewSpec {
    CropRect rect;        // canvas-normalized
    double aspect = 1.0;  // view width / height
    double scale = 1.0;   // longest-label-side multiplier actually realized
    bool orientation_flipped = false;
    bool edge_snapped = false;
    int snapped_edge = -1;  // 0 left, 1 top, 2 right, 3 bottom
    bool tightest_fallback = false;
    bool degenerate = false;  // label fills the canvas; view == label
};

struct TrainingPair {
    Image view_image;
    SubjectRegion view_subject;
    CropRect label;  // pseudo-label in view coordinates
    ViewSpec view_spec;
};

// Pure geometry; pixel extraction happens in make_training_pair.
ViewSpec sample_view_rect(const CropRect& label, Rng& rng);

// Rect conversions between canvas coordinates and a view's local coordinates.
CropRect canvas_to_view(const CropRect& in_canvas, const CropRect& view);
CropRect view_to_canvas(const CropRect& in_view, const CropRect& view);

TrainingPair make_training_pair(const Image& canvas_image, const Mask& subject_mask,
                                const CropRect& pseudo_label, const CropRect& subject_bbox,
                                const ViewSpec& view);

// Loads the record's canvas and mask from disk and samples one fresh view.
TrainingPair sample_enclosing_view(const DatasetRecord& record, Rng& rng);

}  // namespace gencrop
