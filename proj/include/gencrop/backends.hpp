#pragma once

#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace gencrop {

struct OutpaintRequest {
    Image image;       // 512x512 canvas with the source pasted in
    Mask valid_mask;   // 1 = keep, 0 = synthesize
    std::string prompt;
    std::string negative_prompt = default_negative_prompt();
    double guidance_scale = 4.0;
    int steps = 50;
    std::uint64_t seed = 0;

    static const char* default_negative_prompt();
    void validate() const;
};

struct Detection {
    std::string class_label;
    double score = 0.0;  // in [0,1]
    SubjectRegion region;
};

// Retryable backend failure (service down, timeout).
struct BackendUnavailable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Outpainter {
  public:
    virtual ~Outpainter() = default;
    virtual Image outpaint(const OutpaintRequest& req) = 0;
};

class Captioner {
  public:
    virtual ~Captioner() = default;
    virtual std::string caption(const Image& image) = 0;
};

class SubjectDetector {
  public:
    virtual ~SubjectDetector() = default;
    // Sorted by bbox area, largest first.
    virtual std::vector<Detection> detect(const Image& image, const std::string& class_label) = 0;
};

// Mirror-pad + seeded value noise + light blur; preserves valid pixels exactly
// and is deterministic in (request, seed).
class MockOutpainter : public Outpainter {
  public:
    Image outpaint(const OutpaintRequest& req) override;
};

// Recovers the scenegen template caption by palette matching; empty-image
// fallback is a fixed string.
class MockCaptioner : public Captioner {
  public:
    std::string caption(const Image& image) override;
};

// Flat-color template matching against the scene palette; connected
// components of palette-colored pixels become detections with score 1.
class MockDetector : public SubjectDetector {
  public:
    explicit MockDetector(double color_tol = 0.08, int min_pixels = 16)
        : color_tol_(color_tol), min_pixels_(min_pixels) {}
    std::vector<Detection> detect(const Image& image, const std::string& class_label) override;

  private:
    double color_tol_;
    int min_pixels_;
};

// JSON-over-HTTP adapter for a real diffusion service.
// Request: {image_b64, mask_b64, prompt, negative_prompt, guidance_scale, steps, seed}
// Response: {image_b64}
class HttpOutpainter : public Outpainter {
  public:
    explicit HttpOutpainter(std::string base_url, int timeout_seconds = 120);
    Image outpaint(const OutpaintRequest& req) override;

    // Wire-format helpers, exposed for round-trip testing.
    static std::string encode_request(const OutpaintRequest& req);
    static OutpaintRequest decode_request(const std::string& body);
    static Image decode_response(const std::string& body);

  private:
    std::string base_url_;
    int timeout_seconds_;
};

// Reads GENCROP_BACKEND_URL; empty optional when unset.
std::optional<std::string> backend_url_from_env();

std::string base64_encode(const std::vector<std::uint8_t>& data);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// PNG bytes in memory, for the wire format.
std::vector<std::uint8_t> encode_png_bytes(const Image& img);
Image decode_png_bytes(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_mask_png_bytes(const Mask& mask);
Mask decode_mask_png_bytes(const std::vector<std::uint8_t>& bytes);

struct Backends {
    std::shared_ptr<Outpainter> outpainter;
    std::shared_ptr<Captioner> captioner;
    std::shared_ptr<SubjectDetector> detector;

    static Backends make_mock();
    static Backends make_http(const std::string& url);
};

}  // namespace gencrop
