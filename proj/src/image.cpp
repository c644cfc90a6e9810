#include "gencrop/image.hpp"

#include "gencrop/rng.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace gencrop {

namespace {

std::vector<std::uint8_t> read_png_bytes(const std::string& path, int& w, int& h, int& c) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str())) {
        throw std::runtime_error("load_png: cannot read " + path + ": " + pi.message);
    }
    const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
    pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    c = gray ? 1 : 3;
    w = static_cast<int>(pi.width);
    h = static_cast<int>(pi.height);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(PNG_IMAGE_SIZE(pi)));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
        throw std::runtime_error("load_png: decode failed for " + path + ": " + pi.message);
    }
    return buf;
}

void write_png_bytes(const std::string& path, const std::uint8_t* data, int w, int h, int c) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(w);
    pi.height = static_cast<png_uint_32>(h);
    pi.format = (c == 1) ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, data, 0, nullptr)) {
        throw std::runtime_error("save_png: cannot write " + path + ": " + pi.message);
    }
}

inline std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image load_png(const std::string& path) {
    int w = 0, h = 0, c = 0;
    auto buf = read_png_bytes(path, w, h, c);
    Image img(w, h, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                img.ch[k](y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + k] / 255.0;
            }
        }
    }
    return img;
}

void save_png(const Image& img, const std::string& path) {
    if (img.empty()) throw std::invalid_argument("save_png: empty image");
    const int w = img.width(), h = img.height(), c = img.channels();
    if (c != 1 && c != 3) throw std::invalid_argument("save_png: need 1 or 3 channels");
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                buf[(static_cast<std::size_t>(y) * w + x) * c + k] = to_u8(img.ch[k](y, x));
            }
        }
    }
    write_png_bytes(path, buf.data(), w, h, c);
}

Mask load_mask_png(const std::string& path) {
    int w = 0, h = 0, c = 0;
    auto buf = read_png_bytes(path, w, h, c);
    Mask m(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            m(y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c] >= 128 ? 1 : 0;
        }
    }
    return m;
}

void save_mask_png(const Mask& mask, const std::string& path) {
    const int w = static_cast<int>(mask.cols()), h = static_cast<int>(mask.rows());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            buf[static_cast<std::size_t>(y) * w + x] = mask(y, x) ? 255 : 0;
        }
    }
    write_png_bytes(path, buf.data(), w, h, 1);
}

Plane resize_plane_bilinear(const Plane& p, int new_width, int new_height) {
    const int w = static_cast<int>(p.cols()), h = static_cast<int>(p.rows());
    Plane out(new_height, new_width);
    const double sx = static_cast<double>(w) / new_width;
    const double sy = static_cast<double>(h) / new_height;
    for (int y = 0; y < new_height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            out(y, x) = (1 - wy) * ((1 - wx) * p(y0, x0) + wx * p(y0, x1)) +
                        wy * ((1 - wx) * p(y1, x0) + wx * p(y1, x1));
        }
    }
    return out;
}

Image resize_bilinear(const Image& img, int new_width, int new_height) {
    Image out;
    out.ch.reserve(img.ch.size());
    for (const auto& p : img.ch) out.ch.push_back(resize_plane_bilinear(p, new_width, new_height));
    return out;
}

Mask resize_mask_nearest(const Mask& m, int new_width, int new_height) {
    const int w = static_cast<int>(m.cols()), h = static_cast<int>(m.rows());
    Mask out(new_height, new_width);
    for (int y = 0; y < new_height; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / new_height));
        for (int x = 0; x < new_width; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / new_width));
            out(y, x) = m(sy, sx);
        }
    }
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;

    const int w = img.width(), h = img.height();
    Image out = img;
    for (auto& plane : out.ch) {
        Plane tmp(h, w);
        // horizontal
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::clamp(x + i, 0, w - 1);
                    acc += kernel[i + radius] * plane(y, xx);
                }
                tmp(y, x) = acc;
            }
        }
        // vertical
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, h - 1);
                    acc += kernel[i + radius] * tmp(yy, x);
                }
                plane(y, x) = acc;
            }
        }
    }
    return out;
}

Image to_grayscale3(const Image& img) {
    if (img.channels() < 3) return img;
    Plane g = 0.299 * img.ch[0] + 0.587 * img.ch[1] + 0.114 * img.ch[2];
    Image out;
    out.ch = {g, g, g};
    return out;
}

Image crop_image(const Image& img, const PixelRect& r) {
    Image out;
    out.ch.reserve(img.ch.size());
    for (const auto& p : img.ch) {
        out.ch.push_back(p.block(r.y1, r.x1, r.height(), r.width()));
    }
    return out;
}

Mask crop_mask(const Mask& m, const PixelRect& r) {
    return m.block(r.y1, r.x1, r.height(), r.width());
}

void paste(Image& dst, const Image& src, int off_x, int off_y) {
    if (dst.channels() != src.channels()) throw std::invalid_argument("paste: channel mismatch");
    if (off_x < 0 || off_y < 0 || off_x + src.width() > dst.width() ||
        off_y + src.height() > dst.height()) {
        throw std::invalid_argument("paste: source exceeds destination bounds");
    }
    for (int c = 0; c < dst.channels(); ++c) {
        dst.ch[c].block(off_y, off_x, src.height(), src.width()) = src.ch[c];
    }
}

Plane value_noise(int width, int height, int cell, std::uint64_t seed) {
    const int gw = width / cell + 2, gh = height / cell + 2;
    Plane grid(gh, gw);
    for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
            grid(y, x) = (mix64(hash_combine(seed, (static_cast<std::uint64_t>(y) << 32) | x)) >> 11) *
                         (1.0 / 9007199254740992.0);
        }
    }
    Plane out(height, width);
    for (int y = 0; y < height; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(fy);
        const double ty = fy - y0;
        const double sy = ty * ty * (3 - 2 * ty);
        for (int x = 0; x < width; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(fx);
            const double tx = fx - x0;
            const double sx = tx * tx * (3 - 2 * tx);
            out(y, x) = (1 - sy) * ((1 - sx) * grid(y0, x0) + sx * grid(y0, x0 + 1)) +
                        sy * ((1 - sx) * grid(y0 + 1, x0) + sx * grid(y0 + 1, x0 + 1));
        }
    }
    return out;
}

void draw_rect(Image& img, const CropRect& r, double cr, double cg, double cb, int thickness) {
    if (img.channels() != 3) throw std::invalid_argument("draw_rect: RGB image required");
    const PixelRect p = to_pixels(r, img.dims());
    const double color[3] = {cr, cg, cb};
    auto set = [&](int y, int x) {
        if (y >= 0 && y < img.height() && x >= 0 && x < img.width()) {
            for (int c = 0; c < 3; ++c) img.ch[c](y, x) = color[c];
        }
    };
    for (int t = 0; t < thickness; ++t) {
        for (int x = p.x1; x < p.x2; ++x) {
            set(p.y1 + t, x);
            set(p.y2 - 1 - t, x);
        }
        for (int y = p.y1; y < p.y2; ++y) {
            set(y, p.x1 + t);
            set(y, p.x2 - 1 - t);
        }
    }
}

bool images_equal(const Image& a, const Image& b, double tol) {
    if (a.channels() != b.channels() || a.width() != b.width() || a.height() != b.height()) {
        return false;
    }
    for (int c = 0; c < a.channels(); ++c) {
        if ((a.ch[c] - b.ch[c]).abs().maxCoeff() > tol) return false;
    }
    return true;
}

}  // namespace gencrop
