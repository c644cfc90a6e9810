#include "gencrop/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace gencrop {

CropRect mask_tight_bbox(const Mask& mask) {
    const int h = static_cast<int>(mask.rows());
    const int w = static_cast<int>(mask.cols());
    int min_x = w, max_x = -1, min_y = h, max_y = -1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask(y, x) != 0) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
        }
    }
    if (max_x < 0) throw std::invalid_argument("mask_tight_bbox: empty mask");
    return CropRect(static_cast<double>(min_x) / w, static_cast<double>(min_y) / h,
                    static_cast<double>(max_x + 1) / w, static_cast<double>(max_y + 1) / h);
}

bool subject_region_consistent(const SubjectRegion& region, double pixel_tol) {
    if (region.mask.size() == 0 || region.mask_pixel_count() == 0) return false;
    const double w = static_cast<double>(region.mask.cols());
    const double h = static_cast<double>(region.mask.rows());
    CropRect tight = mask_tight_bbox(region.mask);
    return std::abs(tight.x1 - region.bbox.x1) * w <= pixel_tol &&
           std::abs(tight.x2 - region.bbox.x2) * w <= pixel_tol &&
           std::abs(tight.y1 - region.bbox.y1) * h <= pixel_tol &&
           std::abs(tight.y2 - region.bbox.y2) * h <= pixel_tol;
}

double iou(const CropRect& a, const CropRect& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double boundary_displacement(const CropRect& pred, const CropRect& gt) {
    return (std::abs(pred.x1 - gt.x1) + std::abs(pred.x2 - gt.x2) +
            std::abs(pred.y1 - gt.y1) + std::abs(pred.y2 - gt.y2)) / 4.0;
}

MetricPair evaluate_against_labels(const CropRect& pred, const std::vector<CropRect>& labels) {
    if (labels.empty()) throw std::invalid_argument("evaluate_against_labels: no ground truth");
    MetricPair best;
    best.iou = -1.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double v = iou(pred, labels[i]);
        if (v > best.iou) {
            best.iou = v;
            best.best_label = static_cast<int>(i);
        }
    }
    best.disp = boundary_displacement(pred, labels[best.best_label]);
    return best;
}

PixelRect to_pixels(const CropRect& r, const ImageDims& dims) {
    PixelRect p;
    p.x1 = static_cast<int>(std::lround(r.x1 * dims.width));
    p.y1 = static_cast<int>(std::lround(r.y1 * dims.height));
    p.x2 = static_cast<int>(std::lround(r.x2 * dims.width));
    p.y2 = static_cast<int>(std::lround(r.y2 * dims.height));
    p.x1 = std::clamp(p.x1, 0, dims.width - 1);
    p.y1 = std::clamp(p.y1, 0, dims.height - 1);
    p.x2 = std::clamp(p.x2, p.x1 + 1, dims.width);
    p.y2 = std::clamp(p.y2, p.y1 + 1, dims.height);
    return p;
}

CropRect from_pixels(const PixelRect& r, const ImageDims& dims) {
    return CropRect(static_cast<double>(r.x1) / dims.width,
                    static_cast<double>(r.y1) / dims.height,
                    static_cast<double>(r.x2) / dims.width,
                    static_cast<double>(r.y2) / dims.height);
}

}  // namespace gencrop
