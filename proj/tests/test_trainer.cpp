#include "gencrop/trainer.hpp"

#include "gencrop/nn.hpp"
#include "gencrop/scenegen.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

namespace fs = std::filesystem;
using namespace gencrop;

namespace {

ModelConfig tiny_model(ModelVariant variant = ModelVariant::Base) {
    ModelConfig cfg;
    cfg.input_size = 64;
    cfg.backbone_channels = {8, 16};
    cfg.fused_channels = 16;
    cfg.encoder_heads = 4;
    cfg.encoder_ff_hidden = 32;
    cfg.composition_hidden = 32;
    cfg.unet_input_size = 32;
    cfg.variant = variant;
    return cfg;
}

// Small on-disk dataset shared by the training tests.
struct DatasetFixture {
    std::string out_dir = "/tmp/gencrop_trainer_test";
    std::vector<DatasetRecord> records;

    DatasetFixture() {
        fs::remove_all(out_dir);
        DatagenConfig cfg;
        cfg.out_dir = out_dir;
        cfg.seed = 404;
        cfg.amplify = 2;
        Backends backends = Backends::make_mock();
        std::vector<SourceImage> sources;
        for (int i = 0; i < 10; ++i) {
            SourceImage s;
            s.id = "scene" + std::to_string(i);
            s.image = generate_scene(SceneSpec::randomized(900 + i, ImageDims(160, 160))).image;
            sources.push_back(std::move(s));
        }
        const std::string manifest = out_dir + "/manifest.jsonl";
        generate_dataset(sources, backends, cfg, manifest);
        records = read_manifest(manifest);
    }
    ~DatasetFixture() { fs::remove_all(out_dir); }
};

TrainingPair sample_fixture_pair(const DatasetRecord& rec, std::uint64_t seed) {
    Rng rng(seed);
    return sample_enclosing_view(rec, rng);
}

}  // namespace

TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.val_fraction = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    TrainConfig rank = ranking_defaults();
    CHECK(rank.epochs == 10);
    CHECK(rank.batch_size == 32);
    CHECK(rank.lr == 1e-4);
}

TEST_CASE("learning rate trace: warm up to peak, cosine down to zero") {
    const int total = 2000, warmup = 500;
    const double peak = 1e-4;
    CHECK(nn::cosine_warmup_lr(0, total, warmup, peak) <= 1e-6);
    CHECK(nn::cosine_warmup_lr(warmup, total, warmup, peak) == doctest::Approx(peak).epsilon(1e-6));
    CHECK(nn::cosine_warmup_lr(total, total, warmup, peak) < 1e-6);
    double prev = 0.0;
    for (int s = 0; s <= warmup; ++s) {
        const double lr = nn::cosine_warmup_lr(s, total, warmup, peak);
        CHECK(lr >= prev - 1e-12);  // monotone up
        prev = lr;
    }
    for (int s = warmup; s <= total; ++s) {
        const double lr = nn::cosine_warmup_lr(s, total, warmup, peak);
        CHECK(lr <= prev + 1e-12);  // monotone down
        prev = lr;
    }
}

TEST_CASE("source id parsing and label conditioning") {
    CHECK(source_id_of("scene12_r3") == "scene12");
    CHECK(source_id_of("img_r0") == "img");
    CHECK(source_id_of("noRepeatSuffix") == "noRepeatSuffix");

    Conditioning c = conditioning_from_label(CropRect(0.1, 0.1, 0.6, 0.35));
    CHECK(c.area == doctest::Approx(0.125));
    CHECK(c.aspect_hw == doctest::Approx(0.5));
    CHECK(c.aspect_wh == doctest::Approx(2.0));
}

TEST_CASE("negative crops stay in range and never equal the label") {
    Rng rng(3);
    const CropRect label(0.25, 0.25, 0.75, 0.75);
    for (int i = 0; i < 500; ++i) {
        const CropRect neg = random_negative_crop(label, rng);
        CHECK(neg.is_valid());
        CHECK(neg.x1 >= 0.0);
        CHECK(neg.y1 >= 0.0);
        CHECK(neg.x2 <= 1.0);
        CHECK(neg.y2 <= 1.0);
        CHECK(neg.area() >= 0.1 - 1e-9);
        CHECK(neg.area() <= 0.9 + 1e-9);
        CHECK_FALSE(neg == label);
    }
}

TEST_CASE("elastic distortion is mild and keeps shapes") {
    Image img(64, 64, 3, 0.2);
    img.ch[0].block(20, 20, 24, 24).setConstant(0.9);
    Mask mask = Mask::Constant(64, 64, false);
    mask.block(20, 20, 24, 24).setConstant(true);
    const int before = static_cast<int>((mask != 0).count());
    elastic_distort(img, &mask, 2.0, 5);
    CHECK(img.width() == 64);
    CHECK(img.height() == 64);
    const int after = static_cast<int>((mask != 0).count());
    // a 2 px warp cannot change a 24x24 square's pixel count by more than its rim
    CHECK(std::abs(after - before) < 24 * 4 * 3);
    CHECK(after > 0);
    // alpha 0 is the identity
    Image img2(32, 32, 3, 0.5);
    Image copy = img2;
    elastic_distort(img2, nullptr, 0.0, 1);
    CHECK(images_equal(img2, copy));
}

TEST_CASE("horizontal flip transforms image, mask, label, and bbox together") {
    DatasetFixture fixture;
    REQUIRE_FALSE(fixture.records.empty());
    TrainingPair pair = sample_fixture_pair(fixture.records[0], 7);
    TrainingPair original = pair;

    AugmentConfig cfg;  // force the flip, disable everything stochastic
    cfg.color_jitter = false;
    cfg.blur = false;
    cfg.grayscale = false;
    cfg.elastic = false;
    cfg.hflip_prob = 1.0;
    cfg.bbox_jitter = 0.0;
    Rng rng(1);
    augment_pair(pair, cfg, rng);

    CHECK(pair.label.x1 == doctest::Approx(1.0 - original.label.x2));
    CHECK(pair.label.x2 == doctest::Approx(1.0 - original.label.x1));
    CHECK(pair.label.y1 == original.label.y1);
    CHECK(pair.view_subject.bbox.x1 == doctest::Approx(1.0 - original.view_subject.bbox.x2));
    const int w = pair.view_image.width();
    CHECK(pair.view_image.ch[0](0, 0) == original.view_image.ch[0](0, w - 1));
    CHECK(pair.view_subject.mask(5, 0) == original.view_subject.mask(5, w - 1));
    // flipping twice restores everything
    augment_pair(pair, cfg, rng);
    CHECK(pair.label.x1 == doctest::Approx(original.label.x1));
    CHECK(images_equal(pair.view_image, original.view_image));
}

TEST_CASE("augmentations keep the pair invariants") {
    DatasetFixture fixture;
    AugmentConfig cfg;  // everything on, default magnitudes
    for (int i = 0; i < 20; ++i) {
        TrainingPair pair = sample_fixture_pair(fixture.records[i % fixture.records.size()], 50 + i);
        Rng rng(1000 + i);
        augment_pair(pair, cfg, rng);
        CHECK(pair.label.is_valid());
        CHECK(pair.label.x1 >= 0.0);
        CHECK(pair.label.y1 >= 0.0);
        CHECK(pair.label.x2 <= 1.0);
        CHECK(pair.label.y2 <= 1.0);
        CHECK(pair.view_subject.bbox.is_valid());
        CHECK(pair.view_subject.bbox.x2 <= 1.0);
        for (const auto& plane : pair.view_image.ch) {
            CHECK(plane.minCoeff() >= 0.0);
            CHECK(plane.maxCoeff() <= 1.0);
        }
    }
    // deterministic under the same rng seed
    TrainingPair a = sample_fixture_pair(fixture.records[0], 9);
    TrainingPair b = sample_fixture_pair(fixture.records[0], 9);
    Rng r1(4), r2(4);
    augment_pair(a, cfg, r1);
    augment_pair(b, cfg, r2);
    CHECK(images_equal(a.view_image, b.view_image));
    CHECK(a.label == b.label);
    CHECK(a.view_subject.bbox == b.view_subject.bbox);
}

TEST_CASE("training loop: determinism, metrics, checkpointing") {
    DatasetFixture fixture;
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.warmup_steps = 2;
    cfg.val_fraction = 0.2;
    cfg.seed = 77;
    cfg.workdir = fixture.out_dir + "/run";

    TrainResult r1 = train(fixture.records, tiny_model(), cfg);
    CHECK(r1.train_sources == 8);
    CHECK(r1.val_sources == 2);
    CHECK(r1.steps_per_epoch == 2);  // ceil(8 / 4)
    REQUIRE(r1.epochs.size() == 3);
    for (const auto& m : r1.epochs) {
        CHECK(std::isfinite(m.train_total));
        CHECK(std::isfinite(m.val_total));
        CHECK(m.lr_last >= 0.0);
        CHECK(m.train_total >= m.main_l1);  // total includes the weighted extras
    }
    CHECK(r1.epochs[0].lr_last > 0.0);
    CHECK(r1.best_epoch >= 0);
    CHECK(fs::exists(r1.checkpoint_path));
    CHECK(fs::exists(r1.metrics_path));

    // bit-stable rerun
    TrainConfig cfg2 = cfg;
    cfg2.workdir.clear();
    TrainResult r2 = train(fixture.records, tiny_model(), cfg2);
    for (std::size_t e = 0; e < r1.epochs.size(); ++e) {
        CHECK(r1.epochs[e].train_total == r2.epochs[e].train_total);
        CHECK(r1.epochs[e].val_total == r2.epochs[e].val_total);
    }

    // checkpoint round trip: the stored model reproduces the best val loss
    nlohmann::json stats;
    CropModel loaded = load_model(r1.checkpoint_path, &stats);
    CHECK(stats.at("train_sources").get<int>() == 8);
    CHECK(stats.at("mean_label_area").get<double>() > 0.0);
    const double best = r1.epochs[r1.best_epoch].val_total;
    CHECK(r1.best_val == doctest::Approx(best).epsilon(1e-12));
    CHECK(loaded.params.parameter_count() == r1.model.params.parameter_count());

    SUBCASE("errors") {
        CHECK_THROWS_AS(train({}, tiny_model(), cfg2), std::invalid_argument);
        CHECK_THROWS_AS(train(fixture.records, tiny_model(ModelVariant::Unet), cfg2),
                        std::invalid_argument);
        std::vector<DatasetRecord> all_filtered = fixture.records;
        for (auto& rec : all_filtered) rec.filter_flags.kept = false;
        CHECK_THROWS_AS(train(all_filtered, tiny_model(), cfg2), std::invalid_argument);
    }
}

TEST_CASE("max_sources caps the training set") {
    DatasetFixture fixture;
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.val_fraction = 0.0;
    cfg.max_sources = 5;
    TrainResult r = train(fixture.records, tiny_model(), cfg);
    CHECK(r.train_sources == 5);
    CHECK(r.val_sources == 0);
}

TEST_CASE("conditional variant trains end to end") {
    DatasetFixture fixture;
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.val_fraction = 0.2;
    TrainResult r = train(fixture.records, tiny_model(ModelVariant::Conditional), cfg);
    CHECK(r.epochs.size() == 1);
    CHECK(std::isfinite(r.epochs[0].val_total));
}

TEST_CASE("ranking training: balanced pairs, finite losses, saved checkpoint") {
    DatasetFixture fixture;
    TrainConfig cfg = ranking_defaults();
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.val_fraction = 0.2;
    cfg.workdir = fixture.out_dir + "/rank";
    RankingTrainResult r = train_ranking(fixture.records, tiny_model(ModelVariant::Ranking), cfg);
    REQUIRE(r.epoch_loss.size() == 2);
    for (double l : r.epoch_loss) CHECK(std::isfinite(l));
    CHECK(r.val_accuracy >= 0.0);
    CHECK(r.val_accuracy <= 1.0);
    CHECK(fs::exists(r.checkpoint_path));
    CHECK_THROWS_AS(train_ranking(fixture.records, tiny_model(), cfg), std::invalid_argument);
}
