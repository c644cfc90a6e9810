#pragma once

#include "gencrop/autograd.hpp"
#include "gencrop/geometry.hpp"

namespace gencrop::losses {

struct LossWeights {
    double per_anchor = 0.1;  // low-weight auxiliary regression
    double boundary = 1.0;    // lambda_b, ablatable
};

// Component values are reported pre-weighting; total applies the weights.
struct LossBreakdown {
    double main_l1 = 0.0;
    double per_anchor_l1 = 0.0;
    double subject_boundary = 0.0;
    double total = 0.0;
    LossWeights weights;
};

// Rects on tape are (4 x 1) columns: x1, y1, x2, y2.
ag::Value rect_value(ag::Tape& tape, const CropRect& r, bool requires_grad = false);
CropRect rect_from_value(ag::Value v);

// Mean absolute difference over the 4 coordinates.
ag::Value regression_l1(ag::Value blended, ag::Value label);

// Mean over every anchor and coordinate, independent of blending weights.
ag::Value per_anchor_l1(ag::Value proposals, ag::Value label);

// Margin hinge keeping crop edges off the subject bbox; each side is gated
// on the label itself clearing that side by the margin.
ag::Value subject_boundary_loss(ag::Value blended, const CropRect& label,
                                const CropRect& subject_bbox, double margin = 0.025);

ag::Value binary_ce(ag::Value score, double target);

ag::Value total_loss(ag::Value blended, ag::Value proposals, const CropRect& label,
                     const CropRect& subject_bbox, const LossWeights& weights,
                     LossBreakdown* breakdown = nullptr, double margin = 0.025);

// Scalar conveniences (no tape) for evaluation and tests.
double regression_l1(const CropRect& blended, const CropRect& label);
double subject_boundary_loss(const CropRect& blended, const CropRect& label,
                             const CropRect& subject_bbox, double margin = 0.025);
double binary_ce(double score, double target);

}  // namespace gencrop::losses
