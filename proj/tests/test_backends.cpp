#include "gencrop/backends.hpp"

#include "gencrop/rng.hpp"
#include "gencrop/scenegen.hpp"

#include <doctest.h>
#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <thread>

using namespace gencrop;

namespace {

Image quantized_random_image(int w, int h, std::uint64_t seed) {
    Image img(w, h, 3);
    Rng rng(seed);
    for (auto& p : img.ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) p(y, x) = rng.uniform_int(0, 255) / 255.0;
        }
    }
    return img;
}

OutpaintRequest scene_request(std::uint64_t seed) {
    Scene scene = generate_scene(SceneSpec::randomized(seed, ImageDims(128, 128)));
    OutpaintRequest req;
    req.image = scene.image;
    req.valid_mask = Mask::Zero(128, 128);
    req.valid_mask.block(32, 40, 64, 48).setConstant(1);
    req.prompt = scene.caption;
    req.seed = seed;
    return req;
}

}  // namespace

TEST_CASE("request validation") {
    OutpaintRequest req;
    CHECK_THROWS_AS(req.validate(), std::invalid_argument);  // empty image
    req.image = Image(16, 16, 3);
    req.valid_mask = Mask::Zero(8, 16);
    CHECK_THROWS_AS(req.validate(), std::invalid_argument);  // mask mismatch
    req.valid_mask = Mask::Ones(16, 16);
    CHECK_NOTHROW(req.validate());
    CHECK(req.guidance_scale == 4.0);
    CHECK(req.steps == 50);
    CHECK(std::string(OutpaintRequest::default_negative_prompt()).find("watermark") !=
          std::string::npos);
}

TEST_CASE("mock outpainter preserves valid pixels and is deterministic") {
    OutpaintRequest req = scene_request(11);
    MockOutpainter op;
    Image out1 = op.outpaint(req);
    Image out2 = op.outpaint(req);
    CHECK(images_equal(out1, out2));

    REQUIRE(out1.width() == 128);
    for (int y = 0; y < 128; ++y) {
        for (int x = 0; x < 128; ++x) {
            if (req.valid_mask(y, x)) {
                for (int c = 0; c < 3; ++c) {
                    CHECK(out1.ch[c](y, x) == req.image.ch[c](y, x));
                }
            }
        }
    }

    OutpaintRequest other = req;
    other.seed = 12;
    Image out3 = op.outpaint(other);
    CHECK_FALSE(images_equal(out1, out3));
    // but valid pixels agree regardless of seed
    bool synthesized_differs = false;
    for (int y = 0; y < 128 && !synthesized_differs; ++y) {
        for (int x = 0; x < 128; ++x) {
            if (!req.valid_mask(y, x) && out1.ch[0](y, x) != out3.ch[0](y, x)) {
                synthesized_differs = true;
                break;
            }
        }
    }
    CHECK(synthesized_differs);

    OutpaintRequest empty = req;
    empty.valid_mask.setZero();
    CHECK_THROWS_AS(op.outpaint(empty), std::invalid_argument);
}

TEST_CASE("mock detector finds the scene subject") {
    for (std::uint64_t seed : {3u, 14u, 15u, 92u}) {
        Scene scene = generate_scene(SceneSpec::randomized(seed, ImageDims(192, 192)));
        MockDetector det;
        auto dets = det.detect(scene.image, "shape");
        REQUIRE_FALSE(dets.empty());
        CHECK(dets[0].class_label == "shape");
        CHECK(dets[0].score == 1.0);
        CHECK(iou(dets[0].region.bbox, scene.subject.bbox) > 0.9);
        CHECK(subject_region_consistent(dets[0].region));
    }
    MockDetector det;
    CHECK(det.detect(Image(), "shape").empty());
    CHECK(det.detect(Image(32, 32, 3, 0.5), "shape").empty());  // gray, no palette match
}

TEST_CASE("detections come back sorted by bbox area") {
    // two palette-colored rects of different sizes on gray
    Image img(128, 128, 3, 0.5);
    const auto& pal = scene_palette();
    for (int y = 10; y < 30; ++y) {
        for (int x = 10; x < 30; ++x) {
            img.ch[0](y, x) = pal[0].r;
            img.ch[1](y, x) = pal[0].g;
            img.ch[2](y, x) = pal[0].b;
        }
    }
    for (int y = 60; y < 120; ++y) {
        for (int x = 50; x < 120; ++x) {
            img.ch[0](y, x) = pal[2].r;
            img.ch[1](y, x) = pal[2].g;
            img.ch[2](y, x) = pal[2].b;
        }
    }
    auto dets = MockDetector().detect(img, "shape");
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].region.bbox.area() > dets[1].region.bbox.area());
    CHECK(dets[0].region.bbox.x1 > 0.3);  // the big blue one
}

TEST_CASE("mock captioner recovers scene captions") {
    for (auto shape : {SubjectShape::Ellipse, SubjectShape::RoundedRect, SubjectShape::Silhouette}) {
        SceneSpec spec;
        spec.seed = 21;
        spec.canvas = ImageDims(256, 256);
        spec.subject_shape = shape;
        spec.subject_color = 3;
        Scene scene = generate_scene(spec);
        CHECK(MockCaptioner().caption(scene.image) == scene.caption);
    }
    CHECK(MockCaptioner().caption(Image(32, 32, 3, 0.5)) == "a photograph");
    CHECK(MockCaptioner().caption(Image()) == "a photograph");
}

TEST_CASE("base64 round trip") {
    CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
    CHECK(base64_encode({'M', 'a'}) == "TWE=");
    CHECK(base64_encode({'M'}) == "TQ==");
    Rng rng(5);
    for (int len : {0, 1, 2, 3, 17, 256, 1000}) {
        std::vector<std::uint8_t> data(len);
        for (auto& b : data) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        CHECK(base64_decode(base64_encode(data)) == data);
    }
}

TEST_CASE("png byte round trip is exact on 8-bit data") {
    Image img = quantized_random_image(37, 23, 8);
    Image back = decode_png_bytes(encode_png_bytes(img));
    REQUIRE(back.width() == 37);
    REQUIRE(back.height() == 23);
    REQUIRE(back.channels() == 3);
    CHECK(images_equal(img, back, 1e-12));

    Mask mask = Mask::Zero(19, 31);
    mask.block(3, 5, 7, 11).setConstant(1);
    Mask mback = decode_mask_png_bytes(encode_mask_png_bytes(mask));
    CHECK((mask == mback).all());
}

TEST_CASE("http wire format round trip") {
    OutpaintRequest req;
    req.image = quantized_random_image(48, 48, 3);
    req.valid_mask = Mask::Zero(48, 48);
    req.valid_mask.block(8, 8, 24, 30).setConstant(1);
    req.prompt = "a red ellipse on a gradient background";
    req.guidance_scale = 4.0;
    req.steps = 50;
    req.seed = 12345;

    OutpaintRequest back = HttpOutpainter::decode_request(HttpOutpainter::encode_request(req));
    CHECK(images_equal(req.image, back.image, 1e-12));
    CHECK((req.valid_mask == back.valid_mask).all());
    CHECK(back.prompt == req.prompt);
    CHECK(back.negative_prompt == std::string(OutpaintRequest::default_negative_prompt()));
    CHECK(back.guidance_scale == 4.0);
    CHECK(back.steps == 50);
    CHECK(back.seed == 12345);
}

TEST_CASE("http outpainter against an in-process service") {
    httplib::Server server;
    MockOutpainter mock;
    server.Post("/outpaint", [&](const httplib::Request& hreq, httplib::Response& hres) {
        OutpaintRequest req = HttpOutpainter::decode_request(hreq.body);
        nlohmann::json out;
        out["image_b64"] = base64_encode(encode_png_bytes(mock.outpaint(req)));
        hres.set_content(out.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    // 8-bit-exact input so the only wire loss is the response quantization
    OutpaintRequest req;
    req.image = quantized_random_image(96, 96, 33);
    req.valid_mask = Mask::Zero(96, 96);
    req.valid_mask.block(20, 16, 48, 60).setConstant(1);
    req.prompt = "a photograph";
    req.seed = 33;
    HttpOutpainter client("http://127.0.0.1:" + std::to_string(port), 10);
    Image remote = client.outpaint(req);
    Image local = MockOutpainter().outpaint(req);
    CHECK(remote.width() == local.width());
    CHECK(images_equal(remote, local, 0.5 / 255.0 + 1e-9));

    server.stop();
    server_thread.join();
}

TEST_CASE("unreachable backend raises BackendUnavailable") {
    OutpaintRequest req = scene_request(2);
    HttpOutpainter client("http://127.0.0.1:9", 1);
    CHECK_THROWS_AS(client.outpaint(req), BackendUnavailable);
}

TEST_CASE("backend url comes from the environment") {
    unsetenv("GENCROP_BACKEND_URL");
    CHECK_FALSE(backend_url_from_env().has_value());
    setenv("GENCROP_BACKEND_URL", "http://localhost:9999", 1);
    CHECK(backend_url_from_env() == std::string("http://localhost:9999"));
    unsetenv("GENCROP_BACKEND_URL");
}
