#include "gencrop/losses.hpp"

#include <cmath>

namespace gencrop::losses {

namespace {
constexpr double kBceEps = 1e-7;
}

ag::Value rect_value(ag::Tape& tape, const CropRect& r, bool requires_grad) {
    ag::Matrix m(4, 1);
    m << r.x1, r.y1, r.x2, r.y2;
    return tape.input(std::move(m), requires_grad);
}

CropRect rect_from_value(ag::Value v) {
    const auto& m = v.val();
    return CropRect(m(0, 0), m(1, 0), m(2, 0), m(3, 0));
}

ag::Value regression_l1(ag::Value blended, ag::Value label) {
    return ag::mean(ag::abs_op(ag::sub(blended, label)));
}

ag::Value per_anchor_l1(ag::Value proposals, ag::Value label) {
    ag::Tape& tape = *proposals.tape;
    ag::Value broadcast = ag::matmul(label, tape.constant(ag::Matrix::Ones(1, proposals.cols())));
    return ag::mean(ag::abs_op(ag::sub(proposals, broadcast)));
}

ag::Value subject_boundary_loss(ag::Value blended, const CropRect& label,
                                const CropRect& subject_bbox, double margin) {
    ag::Tape& tape = *blended.tape;
    const double margin_x = margin * subject_bbox.width();
    const double margin_y = margin * subject_bbox.height();

    // sign +1 when the crop must stay below (left/top of) the subject edge
    struct Side {
        int coord;
        double subject_edge;
        double label_edge;
        double margin;
        double sign;  // clearance = sign * (subject_edge - crop_edge)
    };
    const Side sides[4] = {
        {0, subject_bbox.x1, label.x1, margin_x, +1.0},  // left
        {1, subject_bbox.y1, label.y1, margin_y, +1.0},  // top
        {2, subject_bbox.x2, label.x2, margin_x, -1.0},  // right
        {3, subject_bbox.y2, label.y2, margin_y, -1.0},  // bottom
    };

    ag::Value total = tape.scalar(0.0);
    for (const auto& side : sides) {
        const double label_clearance = side.sign * (side.subject_edge - side.label_edge);
        if (label_clearance < side.margin) continue;  // label crops on or near the subject
        ag::Value edge = ag::slice_rows(blended, side.coord, 1);
        // hinge: max(0, margin - clearance(crop))
        ag::Value clearance = ag::scale(ag::add_scalar(edge, -side.subject_edge), -side.sign);
        total = ag::add(total, ag::relu(ag::scale(ag::add_scalar(clearance, -side.margin), -1.0)));
    }
    return total;
}

ag::Value binary_ce(ag::Value score, double target) {
    ag::Value s = ag::clamp(score, kBceEps, 1.0 - kBceEps);
    ag::Value loss_pos = ag::scale(ag::log_op(s), -target);
    ag::Value one_minus = ag::scale(ag::add_scalar(s, -1.0), -1.0);
    ag::Value loss_neg = ag::scale(ag::log_op(one_minus), -(1.0 - target));
    return ag::add(loss_pos, loss_neg);
}

ag::Value total_loss(ag::Value blended, ag::Value proposals, const CropRect& label,
                     const CropRect& subject_bbox, const LossWeights& weights,
                     LossBreakdown* breakdown, double margin) {
    ag::Tape& tape = *blended.tape;
    ag::Value label_v = rect_value(tape, label);
    ag::Value main = regression_l1(blended, label_v);
    ag::Value anchor = per_anchor_l1(proposals, label_v);
    ag::Value boundary = subject_boundary_loss(blended, label, subject_bbox, margin);
    ag::Value total = ag::add(main, ag::add(ag::scale(anchor, weights.per_anchor),
                                            ag::scale(boundary, weights.boundary)));
    if (breakdown != nullptr) {
        breakdown->main_l1 = main.scalar();
        breakdown->per_anchor_l1 = anchor.scalar();
        breakdown->subject_boundary = boundary.scalar();
        breakdown->total = total.scalar();
        breakdown->weights = weights;
    }
    return total;
}

double regression_l1(const CropRect& blended, const CropRect& label) {
    return (std::abs(blended.x1 - label.x1) + std::abs(blended.y1 - label.y1) +
            std::abs(blended.x2 - label.x2) + std::abs(blended.y2 - label.y2)) / 4.0;
}

double subject_boundary_loss(const CropRect& blended, const CropRect& label,
                             const CropRect& subject_bbox, double margin) {
    ag::Tape tape;
    return subject_boundary_loss(rect_value(tape, blended), label, subject_bbox, margin).scalar();
}

double binary_ce(double score, double target) {
    const double s = std::clamp(score, kBceEps, 1.0 - kBceEps);
    return -(target * std::log(s) + (1.0 - target) * std::log(1.0 - s));
}

}  // namespace gencrop::losses
