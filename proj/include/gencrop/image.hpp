#pragma once

#include "gencrop/geometry.hpp"

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace gencrop {

using Plane = Eigen::ArrayXXd;  // (height, width), values in [0,1]

// Planar floating-point image. 1 channel = gray, 3 = RGB.
struct Image {
    std::vector<Plane> ch;

    Image() = default;
    Image(int width, int height, int channels, double fill = 0.0) {
        ch.assign(channels, Plane::Constant(height, width, fill));
    }

    int width() const { return ch.empty() ? 0 : static_cast<int>(ch[0].cols()); }
    int height() const { return ch.empty() ? 0 : static_cast<int>(ch[0].rows()); }
    int channels() const { return static_cast<int>(ch.size()); }
    bool empty() const { return ch.empty() || ch[0].size() == 0; }
    ImageDims dims() const { return ImageDims(width(), height()); }

    void clamp01() {
        for (auto& p : ch) p = p.cwiseMax(0.0).cwiseMin(1.0);
    }
};

Image load_png(const std::string& path);
void save_png(const Image& img, const std::string& path);

Mask load_mask_png(const std::string& path);
void save_mask_png(const Mask& mask, const std::string& path);

Image resize_bilinear(const Image& img, int new_width, int new_height);
Plane resize_plane_bilinear(const Plane& p, int new_width, int new_height);
Mask resize_mask_nearest(const Mask& m, int new_width, int new_height);

Image gaussian_blur(const Image& img, double sigma);
Image to_grayscale3(const Image& img);  // keeps 3 channels

Image crop_image(const Image& img, const PixelRect& r);
Mask crop_mask(const Mask& m, const PixelRect& r);
void paste(Image& dst, const Image& src, int off_x, int off_y);

// Seeded smooth value noise in [0,1], per channel.
Plane value_noise(int width, int height, int cell, std::uint64_t seed);

// Overlay drawing: rectangle outline in the given RGB color, thickness in px.
void draw_rect(Image& img, const CropRect& r, double cr, double cg, double cb, int thickness = 3);

bool images_equal(const Image& a, const Image& b, double tol = 0.0);

}  // namespace gencrop
