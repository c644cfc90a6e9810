#include "gencrop/backends.hpp"

#include "gencrop/rng.hpp"
#include "gencrop/scenegen.hpp"

#define CPPHTTPLIB_NO_EXCEPTIONS  // errors surface through httplib::Error
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <png.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <queue>

namespace gencrop {

const char* OutpaintRequest::default_negative_prompt() {
    return "unrealistic, unnatural, collage, multiple images, ugly, deformed, disfigured, "
           "watermark, signature, picture-frame, image border, photo album, photo gallery";
}

void OutpaintRequest::validate() const {
    if (image.empty() || image.channels() != 3) {
        throw std::invalid_argument("OutpaintRequest: RGB image required");
    }
    if (valid_mask.rows() != image.height() || valid_mask.cols() != image.width()) {
        throw std::invalid_argument("OutpaintRequest: mask/image dimension mismatch");
    }
}

// ---------------------------------------------------------------------------
// Mock outpainter

Image MockOutpainter::outpaint(const OutpaintRequest& req) {
    req.validate();
    const int w = req.image.width(), h = req.image.height();

    // Bounding box of the valid region drives the mirror reflection.
    int vx1 = w, vx2 = -1, vy1 = h, vy2 = -1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (req.valid_mask(y, x)) {
                vx1 = std::min(vx1, x);
                vx2 = std::max(vx2, x);
                vy1 = std::min(vy1, y);
                vy2 = std::max(vy2, y);
            }
        }
    }
    if (vx2 < 0) throw std::invalid_argument("MockOutpainter: empty valid mask");

    auto reflect = [](int v, int lo, int hi) {
        const int n = hi - lo + 1;
        if (n == 1) return lo;
        int t = v - lo;
        const int period = 2 * (n - 1);
        t = ((t % period) + period) % period;
        if (t >= n) t = period - t;
        return lo + t;
    };

    Image out(w, h, 3);
    for (int y = 0; y < h; ++y) {
        const int sy = reflect(y, vy1, vy2);
        for (int x = 0; x < w; ++x) {
            const int sx = reflect(x, vx1, vx2);
            for (int c = 0; c < 3; ++c) out.ch[c](y, x) = req.image.ch[c](sy, sx);
        }
    }

    // Seeded value noise on the synthesized region, then a light blur.
    for (int c = 0; c < 3; ++c) {
        Plane noise = value_noise(w, h, 24, hash_combine(req.seed, static_cast<std::uint64_t>(c)));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!req.valid_mask(y, x)) {
                    out.ch[c](y, x) = 0.75 * out.ch[c](y, x) + 0.25 * noise(y, x);
                }
            }
        }
    }
    out = gaussian_blur(out, 1.5);
    out.clamp01();

    // Valid pixels are passed through untouched.
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (req.valid_mask(y, x)) {
                for (int c = 0; c < 3; ++c) out.ch[c](y, x) = req.image.ch[c](y, x);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mock detector / captioner

namespace {

int palette_match(const Image& img, int y, int x, double tol) {
    const auto& palette = scene_palette();
    for (int i = 0; i < static_cast<int>(palette.size()); ++i) {
        const double dr = img.ch[0](y, x) - palette[i].r;
        const double dg = img.ch[1](y, x) - palette[i].g;
        const double db = img.ch[2](y, x) - palette[i].b;
        if (dr * dr + dg * dg + db * db <= tol * tol) return i;
    }
    return -1;
}

struct Component {
    int color = -1;
    Mask mask;
    int pixels = 0;
};

std::vector<Component> palette_components(const Image& img, double tol, int min_pixels) {
    const int w = img.width(), h = img.height();
    Eigen::ArrayXXi labels = Eigen::ArrayXXi::Constant(h, w, -1);
    Eigen::ArrayXXi colors(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) colors(y, x) = palette_match(img, y, x, tol);
    }
    std::vector<Component> comps;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (colors(y, x) < 0 || labels(y, x) >= 0) continue;
            const int id = static_cast<int>(comps.size());
            Component comp;
            comp.color = colors(y, x);
            comp.mask = Mask::Zero(h, w);
            std::queue<std::pair<int, int>> frontier;
            frontier.push({y, x});
            labels(y, x) = id;
            while (!frontier.empty()) {
                auto [cy, cx] = frontier.front();
                frontier.pop();
                comp.mask(cy, cx) = 1;
                ++comp.pixels;
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = cy + dy[k], nx = cx + dx[k];
                    if (ny >= 0 && ny < h && nx >= 0 && nx < w && labels(ny, nx) < 0 &&
                        colors(ny, nx) == comp.color) {
                        labels(ny, nx) = id;
                        frontier.push({ny, nx});
                    }
                }
            }
            if (comp.pixels >= min_pixels) comps.push_back(std::move(comp));
        }
    }
    return comps;
}

}  // namespace

std::vector<Detection> MockDetector::detect(const Image& image, const std::string& class_label) {
    if (image.empty() || image.channels() != 3) return {};
    auto comps = palette_components(image, color_tol_, min_pixels_);
    std::vector<Detection> dets;
    dets.reserve(comps.size());
    for (auto& comp : comps) {
        Detection d;
        d.class_label = class_label;
        d.score = 1.0;
        d.region.mask = std::move(comp.mask);
        d.region.bbox = mask_tight_bbox(d.region.mask);
        dets.push_back(std::move(d));
    }
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        return a.region.bbox.area() > b.region.bbox.area();
    });
    return dets;
}

std::string MockCaptioner::caption(const Image& image) {
    if (image.empty() || image.channels() != 3) return "a photograph";
    auto comps = palette_components(image, 0.08, 16);
    if (comps.empty()) return "a photograph";
    const Component* best = &comps[0];
    for (const auto& c : comps) {
        if (c.pixels > best->pixels) best = &c;
    }
    const CropRect bbox = mask_tight_bbox(best->mask);
    const double fill = best->pixels /
                        (bbox.area() * best->mask.rows() * best->mask.cols());
    const char* shape;
    if (fill > 0.88) {
        shape = "rounded-rect";
    } else {
        // ellipses are vertically symmetric; silhouettes are head-heavy at the
        // bottom, so the top half of the bbox holds visibly less mass
        const int h = static_cast<int>(best->mask.rows());
        const int w = static_cast<int>(best->mask.cols());
        const int y_lo = static_cast<int>(bbox.y1 * h);
        const int y_hi = std::min(h, static_cast<int>(bbox.y2 * h) + 1);
        const int y_mid = (y_lo + y_hi) / 2;
        long top = 0, bottom = 0;
        for (int y = y_lo; y < y_hi; ++y) {
            for (int x = 0; x < w; ++x) {
                if (best->mask(y, x)) (y < y_mid ? top : bottom) += 1;
            }
        }
        const double ratio = bottom > 0 ? static_cast<double>(top) / bottom : 1.0;
        shape = ratio < 0.85 ? "silhouette" : "ellipse";
    }
    return std::string("a ") + scene_palette()[best->color].name + " " + shape +
           " on a gradient background";
}

// ---------------------------------------------------------------------------
// Base64 + PNG byte helpers

std::string base64_encode(const std::vector<std::uint8_t>& data) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < data.size(); i += 3) {
        std::uint32_t v = data[i] << 16;
        if (i + 1 < data.size()) v |= data[i + 1] << 8;
        if (i + 2 < data.size()) v |= data[i + 2];
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(i + 1 < data.size() ? table[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < data.size() ? table[v & 63] : '=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto decode_char = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    int buffer = 0, bits = 0;
    for (char c : text) {
        const int v = decode_char(c);
        if (v < 0) continue;  // skips '=' and whitespace
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((buffer >> bits) & 0xff));
        }
    }
    return out;
}

std::vector<std::uint8_t> encode_png_bytes(const Image& img) {
    if (img.empty() || (img.channels() != 1 && img.channels() != 3)) {
        throw std::invalid_argument("encode_png_bytes: need 1 or 3 channel image");
    }
    const int w = img.width(), h = img.height(), c = img.channels();
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                raw[(static_cast<std::size_t>(y) * w + x) * c + k] = static_cast<std::uint8_t>(
                    std::lround(std::clamp(img.ch[k](y, x), 0.0, 1.0) * 255.0));
            }
        }
    }
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(w);
    pi.height = static_cast<png_uint_32>(h);
    pi.format = (c == 1) ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    png_image_write_to_memory(&pi, nullptr, &size, 0, raw.data(), 0, nullptr);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, raw.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("encode_png_bytes: ") + pi.message);
    }
    out.resize(size);
    return out;
}

Image decode_png_bytes(const std::vector<std::uint8_t>& bytes) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) {
        throw std::runtime_error(std::string("decode_png_bytes: ") + pi.message);
    }
    const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
    pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const int c = gray ? 1 : 3;
    const int w = static_cast<int>(pi.width), h = static_cast<int>(pi.height);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(PNG_IMAGE_SIZE(pi)));
    if (!png_image_finish_read(&pi, nullptr, raw.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("decode_png_bytes: ") + pi.message);
    }
    Image img(w, h, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k) {
                img.ch[k](y, x) = raw[(static_cast<std::size_t>(y) * w + x) * c + k] / 255.0;
            }
        }
    }
    return img;
}

std::vector<std::uint8_t> encode_mask_png_bytes(const Mask& mask) {
    Image m(static_cast<int>(mask.cols()), static_cast<int>(mask.rows()), 1);
    m.ch[0] = mask.cast<double>();
    return encode_png_bytes(m);
}

Mask decode_mask_png_bytes(const std::vector<std::uint8_t>& bytes) {
    Image m = decode_png_bytes(bytes);
    Mask out(m.height(), m.width());
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) out(y, x) = m.ch[0](y, x) >= 0.5 ? 1 : 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// HTTP adapter

HttpOutpainter::HttpOutpainter(std::string base_url, int timeout_seconds)
    : base_url_(std::move(base_url)), timeout_seconds_(timeout_seconds) {}

std::string HttpOutpainter::encode_request(const OutpaintRequest& req) {
    nlohmann::json body;
    body["image_b64"] = base64_encode(encode_png_bytes(req.image));
    body["mask_b64"] = base64_encode(encode_mask_png_bytes(req.valid_mask));
    body["prompt"] = req.prompt;
    body["negative_prompt"] = req.negative_prompt;
    body["guidance_scale"] = req.guidance_scale;
    body["steps"] = req.steps;
    body["seed"] = req.seed;
    return body.dump();
}

OutpaintRequest HttpOutpainter::decode_request(const std::string& body) {
    const auto j = nlohmann::json::parse(body);
    OutpaintRequest req;
    req.image = decode_png_bytes(base64_decode(j.at("image_b64").get<std::string>()));
    req.valid_mask = decode_mask_png_bytes(base64_decode(j.at("mask_b64").get<std::string>()));
    req.prompt = j.at("prompt").get<std::string>();
    req.negative_prompt = j.at("negative_prompt").get<std::string>();
    req.guidance_scale = j.at("guidance_scale").get<double>();
    req.steps = j.at("steps").get<int>();
    req.seed = j.at("seed").get<std::uint64_t>();
    return req;
}

Image HttpOutpainter::decode_response(const std::string& body) {
    const auto j = nlohmann::json::parse(body);
    return decode_png_bytes(base64_decode(j.at("image_b64").get<std::string>()));
}

Image HttpOutpainter::outpaint(const OutpaintRequest& req) {
    req.validate();
    httplib::Client client(base_url_);
    client.set_connection_timeout(timeout_seconds_);
    client.set_read_timeout(timeout_seconds_);
    auto res = client.Post("/outpaint", encode_request(req), "application/json");
    if (!res) {
        throw BackendUnavailable("outpaint backend unreachable at " + base_url_ + ": " +
                                 httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw BackendUnavailable("outpaint backend returned status " +
                                 std::to_string(res->status));
    }
    try {
        return decode_response(res->body);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("outpaint backend: malformed response: ") + e.what());
    }
}

std::optional<std::string> backend_url_from_env() {
    const char* url = std::getenv("GENCROP_BACKEND_URL");
    if (url == nullptr || url[0] == '\0') return std::nullopt;
    return std::string(url);
}

Backends Backends::make_mock() {
    Backends b;
    b.outpainter = std::make_shared<MockOutpainter>();
    b.captioner = std::make_shared<MockCaptioner>();
    b.detector = std::make_shared<MockDetector>();
    return b;
}

Backends Backends::make_http(const std::string& url) {
    Backends b = make_mock();
    b.outpainter = std::make_shared<HttpOutpainter>(url);
    return b;
}

}  // namespace gencrop
