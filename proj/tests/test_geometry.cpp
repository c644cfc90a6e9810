#include "gencrop/geometry.hpp"
#include "gencrop/rng.hpp"

#include <doctest.h>

using namespace gencrop;

namespace {

// Independent pixel-count oracle: rasterize both rects on an NxN grid,
// counting each cell by its covered fraction.
double iou_pixel_oracle(const CropRect& a, const CropRect& b, int n) {
    auto coverage = [n](const CropRect& r, int x, int y) {
        const double px1 = static_cast<double>(x) / n, px2 = static_cast<double>(x + 1) / n;
        const double py1 = static_cast<double>(y) / n, py2 = static_cast<double>(y + 1) / n;
        const double w = std::max(0.0, std::min(px2, r.x2) - std::max(px1, r.x1));
        const double h = std::max(0.0, std::min(py2, r.y2) - std::max(py1, r.y1));
        return w * h * n * n;
    };
    // per-cell footprints of a and b are axis-aligned rects, so the
    // in-cell intersection is the footprint of the clipped rect a∩b
    const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    const bool overlap = ix1 < ix2 && iy1 < iy2;
    double inter = 0, uni = 0;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double ca = coverage(a, x, y);
            const double cb = coverage(b, x, y);
            double ci = 0.0;
            if (overlap) {
                const double px1 = static_cast<double>(x) / n, px2 = static_cast<double>(x + 1) / n;
                const double py1 = static_cast<double>(y) / n, py2 = static_cast<double>(y + 1) / n;
                const double w = std::max(0.0, std::min(px2, ix2) - std::max(px1, ix1));
                const double h = std::max(0.0, std::min(py2, iy2) - std::max(py1, iy1));
                ci = w * h * n * n;
            }
            inter += ci;
            uni += ca + cb - ci;
        }
    }
    return uni > 0 ? inter / uni : 0.0;
}

CropRect random_rect(Rng& rng, double min_side = 0.05) {
    for (;;) {
        double x1 = rng.uniform(0.0, 1.0 - min_side);
        double y1 = rng.uniform(0.0, 1.0 - min_side);
        double x2 = rng.uniform(x1 + min_side, 1.0);
        double y2 = rng.uniform(y1 + min_side, 1.0);
        CropRect r(x1, y1, x2, y2);
        if (r.is_valid()) return r;
    }
}

}  // namespace

TEST_CASE("CropRect rejects degenerate rectangles") {
    CHECK_THROWS_AS(CropRect(0.5, 0.2, 0.5, 0.8), std::invalid_argument);
    CHECK_THROWS_AS(CropRect(0.2, 0.8, 0.8, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(CropRect(-0.1, 0.0, 0.5, 0.5), std::invalid_argument);
    CHECK_NOTHROW(CropRect(0.0, 0.0, 1.0, 1.0));
}

TEST_CASE("iou basic cases") {
    CropRect a(0.0, 0.0, 0.4, 0.4);
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(a, CropRect(0.6, 0.6, 1.0, 1.0)) == doctest::Approx(0.0));
    // overlapping squares: intersection 0.01, union 0.07
    CropRect c(0.0, 0.0, 0.2, 0.2), d(0.1, 0.1, 0.3, 0.3);
    const double expected = iou_pixel_oracle(c, d, 1000);
    CHECK(iou(c, d) == doctest::Approx(1.0 / 7.0).epsilon(1e-9));
    CHECK(iou(c, d) == doctest::Approx(expected).epsilon(2e-3));
}

TEST_CASE("iou symmetric and matches pixel oracle on random pairs") {
    Rng rng(42);
    for (int i = 0; i < 200; ++i) {
        CropRect a = random_rect(rng), b = random_rect(rng);
        CHECK(iou(a, b) == doctest::Approx(iou(b, a)).epsilon(1e-12));
        CHECK(std::abs(iou(a, b) - iou_pixel_oracle(a, b, 512)) < 5e-3);
    }
}

TEST_CASE("boundary displacement") {
    CropRect gt(0.2, 0.1, 0.9, 0.9);
    CHECK(boundary_displacement(gt, gt) == doctest::Approx(0.0));
    CHECK(boundary_displacement(CropRect(0.1, 0.1, 0.9, 0.9), gt) == doctest::Approx(0.025));
    CHECK(boundary_displacement(CropRect(0.0, 0.0, 1.0, 1.0), CropRect(0.1, 0.1, 0.9, 0.9)) ==
          doctest::Approx(0.1));
}

TEST_CASE("boundary displacement is a pseudo-distance") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        CropRect a = random_rect(rng), b = random_rect(rng);
        CHECK(boundary_displacement(a, b) >= 0.0);
        CHECK(boundary_displacement(a, b) == doctest::Approx(boundary_displacement(b, a)));
        CHECK(boundary_displacement(a, a) == doctest::Approx(0.0));
        if (!(a == b)) CHECK(boundary_displacement(a, b) > 0.0);
    }
}

TEST_CASE("evaluate_against_labels picks the top-IoU label") {
    CropRect pred(0.1, 0.1, 0.5, 0.5);
    SUBCASE("single label equals pairwise metrics") {
        CropRect gt(0.2, 0.2, 0.6, 0.6);
        auto m = evaluate_against_labels(pred, {gt});
        CHECK(m.iou == doctest::Approx(iou(pred, gt)));
        CHECK(m.disp == doctest::Approx(boundary_displacement(pred, gt)));
    }
    SUBCASE("exact match among three labels") {
        std::vector<CropRect> labels = {CropRect(0.3, 0.3, 0.9, 0.9), pred,
                                        CropRect(0.0, 0.0, 0.2, 0.2)};
        auto m = evaluate_against_labels(pred, labels);
        CHECK(m.iou == doctest::Approx(1.0));
        CHECK(m.disp == doctest::Approx(0.0));
        CHECK(m.best_label == 1);
    }
    SUBCASE("is the maximum over labels (exhaustive oracle)") {
        Rng rng(99);
        for (int i = 0; i < 50; ++i) {
            CropRect p = random_rect(rng);
            std::vector<CropRect> labels;
            for (int k = 0; k < 5; ++k) labels.push_back(random_rect(rng));
            auto m = evaluate_against_labels(p, labels);
            double best = 0.0;
            for (const auto& l : labels) best = std::max(best, iou(p, l));
            CHECK(m.iou == doctest::Approx(best));
            for (const auto& l : labels) CHECK(m.iou >= iou(p, l) - 1e-12);
        }
    }
    SUBCASE("empty labels is an error") {
        CHECK_THROWS_AS(evaluate_against_labels(pred, {}), std::invalid_argument);
    }
}

TEST_CASE("subject region consistency check") {
    Mask m = Mask::Zero(100, 100);
    m.block(30, 30, 40, 40).setConstant(1);
    SubjectRegion region;
    region.mask = m;
    region.bbox = mask_tight_bbox(m);
    CHECK(region.bbox.x1 == doctest::Approx(0.3));
    CHECK(region.bbox.x2 == doctest::Approx(0.7));
    CHECK(subject_region_consistent(region));
    region.bbox = CropRect(0.1, 0.1, 0.9, 0.9);
    CHECK_FALSE(subject_region_consistent(region));
    Mask empty = Mask::Zero(10, 10);
    CHECK_THROWS_AS(mask_tight_bbox(empty), std::invalid_argument);
}
