#include "gencrop/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace gencrop {

namespace {

std::uint64_t scene_seed(const PipelineConfig& cfg, int index) {
    return hash_combine(hash_combine(cfg.data_seed, std::string("scene")),
                        static_cast<std::uint64_t>(index));
}

// Classifier training data drawn from the same distribution it will filter:
// mock-outpainted canvases, clean vs bordered/tiled.
std::vector<LabeledImage> classifier_corpus(const PipelineConfig& cfg) {
    const std::string qc_dir = (fs::path(cfg.workdir) / "qc_data").string();
    DatagenConfig dcfg;
    dcfg.out_dir = qc_dir;
    dcfg.seed = hash_combine(cfg.data_seed, std::string("qc"));
    dcfg.amplify = 1;
    Backends backends = Backends::make_mock();

    std::vector<LabeledImage> corpus;
    Rng rng = Rng::derive(cfg.data_seed, std::string("qc_aug"));
    const int per_class = 30;
    for (int j = 0; corpus.size() < 2 * per_class && j < 3 * per_class; ++j) {
        SceneSpec spec = SceneSpec::randomized(hash_combine(dcfg.seed, 7000 + j),
                                               ImageDims(cfg.scene_size, cfg.scene_size));
        spec.framing_rule = FramingRule::Centered;
        Scene scene = generate_scene(spec);
        SourceImage source;
        source.id = "qc" + std::to_string(j);
        source.image = crop_image(scene.image, to_pixels(scene.ideal_crop, scene.image.dims()));
        auto rec = generate_record(source, backends, 0, dcfg);
        if (!rec.has_value()) continue;
        Image canvas = load_png(rec->outpainted_path);
        corpus.push_back({canvas, false});
        LabeledImage bad;
        bad.is_bad = true;
        if (rng.bernoulli(0.5)) {
            bad.image = add_border(canvas, rng.uniform_int(8, 24), rng.uniform(), rng.uniform(),
                                   rng.uniform());
        } else {
            bad.image = tile_2x2(canvas, canvas, canvas, canvas);
        }
        corpus.push_back(std::move(bad));
    }
    return corpus;
}

void write_records_manifest(const std::string& path, const std::vector<DatasetRecord>& records) {
    write_manifest(path, records);
}

}  // namespace

void PipelineConfig::validate() const {
    if (workdir.empty()) throw std::invalid_argument("pipeline: workdir required");
    if (n_sources <= 0 || n_eval <= 0 || amplify <= 0 || scene_size < 64) {
        throw std::invalid_argument("pipeline: counts must be positive, scene_size >= 64");
    }
    if (planted_bad_fraction < 0.0 || planted_bad_fraction > 1.0) {
        throw std::invalid_argument("pipeline: planted_bad_fraction must be in [0,1]");
    }
    model.validate();
    train.validate();
}

nlohmann::json PipelineConfig::to_json() const {
    return nlohmann::json{{"workdir", workdir},
                          {"n_sources", n_sources},
                          {"n_eval", n_eval},
                          {"amplify", amplify},
                          {"scene_size", scene_size},
                          {"data_seed", data_seed},
                          {"seed", seed},
                          {"use_filters", use_filters},
                          {"planted_bad_fraction", planted_bad_fraction},
                          {"skip_train", skip_train},
                          {"model", model.to_json()},
                          {"train",
                           {{"epochs", train.epochs},
                            {"batch_size", train.batch_size},
                            {"lr", train.lr},
                            {"warmup_steps", train.warmup_steps},
                            {"val_fraction", train.val_fraction},
                            {"max_sources", train.max_sources}}}};
}

PipelineConfig demo_pipeline_config(const std::string& workdir, std::uint64_t seed) {
    PipelineConfig cfg;
    cfg.workdir = workdir;
    cfg.seed = seed;
    cfg.data_seed = hash_combine(seed, std::string("data"));
    cfg.model.input_size = 64;
    cfg.model.backbone_channels = {8, 16};
    cfg.train.epochs = 5;
    cfg.train.batch_size = 4;
    cfg.train.lr = 1e-3;
    cfg.train.warmup_steps = 50;
    cfg.train.seed = seed;
    return cfg;
}

SceneSpec pipeline_scene_spec(const PipelineConfig& cfg, int index) {
    SceneSpec spec = SceneSpec::randomized(scene_seed(cfg, index),
                                           ImageDims(cfg.scene_size, cfg.scene_size));
    spec.framing_rule = FramingRule::Centered;
    return spec;
}

SourceImage pipeline_source(const PipelineConfig& cfg, int index) {
    Scene scene = generate_scene(pipeline_scene_spec(cfg, index));
    SourceImage source;
    source.id = "scene" + std::to_string(index);
    source.image = crop_image(scene.image, to_pixels(scene.ideal_crop, scene.image.dims()));
    return source;
}

std::string pipeline_generate(const PipelineConfig& cfg, GenerateStats* stats) {
    const std::string data_dir = (fs::path(cfg.workdir) / "data").string();
    const std::string manifest_path = (fs::path(data_dir) / "manifest.jsonl").string();
    DatagenConfig dcfg;
    dcfg.out_dir = data_dir;
    dcfg.seed = cfg.data_seed;
    dcfg.amplify = cfg.amplify;
    std::vector<SourceImage> sources;
    sources.reserve(cfg.n_sources);
    for (int i = 0; i < cfg.n_sources; ++i) {
        sources.push_back(pipeline_source(cfg, i));
    }
    GenerateStats gen = generate_dataset(sources, Backends::make_mock(), dcfg, manifest_path);
    if (stats != nullptr) *stats = gen;
    return manifest_path;
}

std::vector<std::string> plant_bad_outpaintings(std::vector<DatasetRecord>& records,
                                                double fraction, std::uint64_t seed) {
    std::vector<std::string> planted;
    for (auto& rec : records) {
        Rng rng = Rng::derive(seed, std::string("plant"), rec.id);
        if (!rng.bernoulli(fraction)) continue;
        const fs::path src(rec.outpainted_path);
        const fs::path dst = src.parent_path() / (src.stem().string() + "_planted.png");
        if (!fs::exists(dst)) {
            Image canvas = load_png(rec.outpainted_path);
            Image bad;
            if (rng.bernoulli(0.5)) {
                bad = add_border(canvas, rng.uniform_int(8, 24), rng.uniform(), rng.uniform(),
                                 rng.uniform());
            } else {
                bad = tile_2x2(canvas, canvas, canvas, canvas);
            }
            save_png(bad, dst.string());
        }
        rec.outpainted_path = dst.string();
        planted.push_back(rec.id);
    }
    return planted;
}

FilterStats pipeline_filter(std::vector<DatasetRecord>& records, const PipelineConfig& cfg) {
    std::string clf_path = cfg.quality_classifier_path;
    if (clf_path.empty()) {
        clf_path = (fs::path(cfg.workdir) / "quality_clf.json").string();
    }
    QualityClassifier clf = [&] {
        if (fs::exists(clf_path)) return load_quality_classifier(clf_path);
        QualityTrainConfig qcfg;
        qcfg.input_size = 64;
        qcfg.epochs = 120;
        qcfg.batch_size = 16;
        qcfg.lr = 1e-3;
        qcfg.seed = hash_combine(cfg.data_seed, std::string("qclf"));
        QualityClassifier trained = train_quality_classifier(classifier_corpus(cfg), qcfg);
        if (!fs::path(clf_path).parent_path().empty()) {
            fs::create_directories(fs::path(clf_path).parent_path());
        }
        save_quality_classifier(clf_path, trained);
        return trained;
    }();
    MockDetector detector;
    return filter_manifest(records, &detector, true, &clf);
}

// Held-out scenes pushed through the same generation path as training data:
// outpainted canvas, then one enclosing view per scene. Ground truth is the
// pasted ideal-crop region in view coordinates.
std::vector<EvalExample> pipeline_eval_set(const PipelineConfig& cfg) {
    DatagenConfig dcfg;
    dcfg.out_dir = (fs::path(cfg.workdir) / "eval_data").string();
    dcfg.seed = hash_combine(cfg.data_seed, std::string("eval"));
    dcfg.amplify = 1;
    Backends backends = Backends::make_mock();
    std::vector<EvalExample> examples;
    examples.reserve(cfg.n_eval);
    const int max_attempts = 2 * cfg.n_eval;
    for (int i = 0; i < max_attempts && static_cast<int>(examples.size()) < cfg.n_eval; ++i) {
        const int scene_index = cfg.n_sources + i;
        SourceImage source = pipeline_source(cfg, scene_index);
        source.id = "eval" + std::to_string(scene_index);
        auto rec = generate_record(source, backends, 0, dcfg);
        if (!rec.has_value()) continue;
        Rng rng = Rng::derive(cfg.data_seed, std::string("evalview"), rec->id);
        TrainingPair pair = sample_enclosing_view(*rec, rng);
        EvalExample ex;
        ex.id = rec->id;
        ex.image = std::move(pair.view_image);
        ex.labels.push_back(pair.label);
        examples.push_back(std::move(ex));
    }
    return examples;
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.workdir);
    {
        std::ofstream out((fs::path(cfg.workdir) / "pipeline_config.json").string());
        out << cfg.to_json().dump(2) << '\n';
    }

    PipelineResult result;
    try {
        result.manifest_path = pipeline_generate(cfg, &result.gen_stats);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("generate: ") + e.what());
    }
    std::vector<DatasetRecord> records = read_manifest(result.manifest_path);
    if (cfg.planted_bad_fraction > 0.0) {
        plant_bad_outpaintings(records, cfg.planted_bad_fraction, cfg.data_seed);
    }
    if (cfg.use_filters) {
        try {
            result.filter_stats = pipeline_filter(records, cfg);
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("filter: ") + e.what());
        }
    } else {
        result.filter_stats.total = static_cast<int>(records.size());
    }
    write_records_manifest((fs::path(cfg.workdir) / "manifest_run.jsonl").string(), records);

    const std::string train_dir = (fs::path(cfg.workdir) / "train").string();
    result.checkpoint_path = (fs::path(train_dir) / "model_best.json").string();
    nlohmann::json stats;
    CropModel model = [&] {
        if (cfg.skip_train && fs::exists(result.checkpoint_path)) {
            return load_model(result.checkpoint_path, &stats);
        }
        TrainConfig tcfg = cfg.train;
        tcfg.workdir = train_dir;
        tcfg.seed = cfg.seed;
        try {
            TrainResult tr = train(records, cfg.model, tcfg);
            result.best_epoch = tr.best_epoch;
            result.best_val = tr.best_val;
            return load_model(tr.checkpoint_path, &stats);
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("train: ") + e.what());
        }
    }();
    result.mean_label_area = stats.value("mean_view_label_area", 0.65);

    try {
        const std::vector<EvalExample> eval_set = pipeline_eval_set(cfg);
        MockDetector detector;
        result.report = evaluate(eval_set, make_model_predictor(model, &detector),
                                 nlohmann::json{{"method", "model"}, {"seed", cfg.seed}});
        result.baseline_report =
            evaluate(eval_set, center_crop_baseline(result.mean_label_area),
                     nlohmann::json{{"method", "center_crop"},
                                    {"area", result.mean_label_area}});
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("evaluate: ") + e.what());
    }

    {
        std::ofstream out((fs::path(cfg.workdir) / "report.json").string());
        out << nlohmann::json{{"model", result.report.to_json()},
                              {"baseline", result.baseline_report.to_json()}}
                   .dump(2)
            << '\n';
    }
    return result;
}

}  // namespace gencrop
