#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gencrop {

// Axis-aligned crop rectangle in normalized coordinates.
// x values are fractions of image width, y values fractions of height.
struct CropRect {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    CropRect() = default;
    CropRect(double x1_, double y1_, double x2_, double y2_)
        : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
        if (!is_valid()) {
            throw std::invalid_argument("CropRect: degenerate or out-of-range rectangle");
        }
    }

    bool is_valid() const {
        return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
               x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 && x1 < x2 && y1 < y2;
    }

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }

    bool contains(const CropRect& inner, double tol = 0.0) const {
        return inner.x1 >= x1 - tol && inner.y1 >= y1 - tol &&
               inner.x2 <= x2 + tol && inner.y2 <= y2 + tol;
    }

    bool contains_point(double x, double y) const {
        return x >= x1 && x <= x2 && y >= y1 && y <= y2;
    }

    bool intersects(const CropRect& other) const {
        return x1 < other.x2 && other.x1 < x2 && y1 < other.y2 && other.y1 < y2;
    }

    bool operator==(const CropRect& o) const {
        return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
    }
};

struct ImageDims {
    int width = 0;
    int height = 0;

    ImageDims() = default;
    ImageDims(int w, int h) : width(w), height(h) {
        if (w <= 0 || h <= 0) throw std::invalid_argument("ImageDims: non-positive dimension");
    }
};

using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;  // (height, width), 1 = subject

// Subject bounding box plus the binary mask it tightly encloses.
struct SubjectRegion {
    CropRect bbox;
    Mask mask;

    int mask_pixel_count() const {
        return static_cast<int>((mask != 0).count());
    }
};

// Tight normalized bounding box of a mask's nonzero pixels.
// Throws if the mask is empty.
CropRect mask_tight_bbox(const Mask& mask);

// Checks the SubjectRegion invariant: bbox matches the mask's tight box
// within one pixel per edge.
bool subject_region_consistent(const SubjectRegion& region, double pixel_tol = 1.0);

double iou(const CropRect& a, const CropRect& b);

// Mean normalized displacement over the four edges; 0 iff pred == gt.
double boundary_displacement(const CropRect& pred, const CropRect& gt);

struct MetricPair {
    double iou = 0.0;
    double disp = 0.0;
    int best_label = -1;
};

// Evaluates against the label with the highest IoU; Disp is computed
// against that same label.
MetricPair evaluate_against_labels(const CropRect& pred, const std::vector<CropRect>& labels);

// Pixel-space conversion helpers.
struct PixelRect {
    int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // half-open [x1,x2) x [y1,y2)
    int width() const { return x2 - x1; }
    int height() const { return y2 - y1; }
};

PixelRect to_pixels(const CropRect& r, const ImageDims& dims);
CropRect from_pixels(const PixelRect& r, const ImageDims& dims);

}  // namespace gencrop
