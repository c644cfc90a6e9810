#include "gencrop/backends.hpp"
#include "gencrop/cropmodel.hpp"
#include "gencrop/datagen.hpp"
#include "gencrop/evalkit.hpp"
#include "gencrop/pairsampler.hpp"
#include "gencrop/pipeline.hpp"
#include "gencrop/qualityfilter.hpp"
#include "gencrop/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace gencrop;

namespace {

// Exit codes: 0 success, 1 user error, 2 internal error.
struct UserError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Resolved settings are written next to each command's primary output so a run
// can be reproduced from its artifacts alone.
void persist_resolved(const CLI::App& cmd, const std::string& near_path) {
    fs::path dir = fs::path(near_path).parent_path();
    if (dir.empty()) dir = ".";
    fs::create_directories(dir);
    std::ofstream out((dir / ("resolved_" + cmd.get_name() + ".toml")).string());
    out << cmd.config_to_str(true, true);
}

Backends make_backends(const std::string& backend, const std::string& url_flag) {
    if (backend == "mock") return Backends::make_mock();
    if (backend == "http") {
        std::string url = url_flag;
        if (url.empty()) url = backend_url_from_env().value_or("");
        if (url.empty()) {
            throw UserError("http backend needs --backend-url or GENCROP_BACKEND_URL");
        }
        return Backends::make_http(url);
    }
    throw UserError("unknown backend: " + backend);
}

CropRect parse_rect(const std::string& text) {
    double v[4];
    if (std::sscanf(text.c_str(), "%lf,%lf,%lf,%lf", &v[0], &v[1], &v[2], &v[3]) != 4) {
        throw UserError("expected x1,y1,x2,y2 but got: " + text);
    }
    return CropRect(v[0], v[1], v[2], v[3]);
}

// Subject detection shared by crop/evaluate/sweep: largest detection wins.
struct SubjectLookup {
    CropRect bbox{0.0, 0.0, 1.0, 1.0};
    const Mask* mask = nullptr;
    std::vector<Detection> detections;
    bool found = false;
};

SubjectLookup find_subject(MockDetector& detector, const Image& image,
                           const std::string& class_label) {
    SubjectLookup out;
    out.detections = detector.detect(image, class_label);
    if (!out.detections.empty()) {
        out.bbox = out.detections.front().region.bbox;
        out.mask = &out.detections.front().region.mask;
        out.found = true;
    }
    return out;
}

CropRect predict_any_variant(CropModel& model, const Image& image, const Mask* mask,
                             const CropRect& bbox, const std::optional<Conditioning>& cond) {
    switch (model.cfg.variant) {
        case ModelVariant::Unet:
            return unet_predict(model, image, mask);
        case ModelVariant::Ranking: {
            const std::vector<CropRect> candidates = candidate_grid();
            CropRect best = candidates.front();
            double best_score = -1.0;
            for (const auto& c : candidates) {
                const double s = ranking_score(model, image, mask, c);
                if (s > best_score) {
                    best_score = s;
                    best = c;
                }
            }
            return best;
        }
        default:
            return predict(model, image, mask, bbox, cond).crop;
    }
}

std::optional<Conditioning> conditioning_from_flags(const CropModel& model, double area,
                                                   double aspect_hw) {
    if (model.cfg.variant != ModelVariant::Conditional) return std::nullopt;
    return Conditioning::make(area, aspect_hw);
}

int cmd_generate(const CLI::App& cmd, const std::string& source_dir,
                 const std::string& out_manifest, const std::string& backend,
                 const std::string& backend_url, DatagenConfig dcfg) {
    if (!fs::is_directory(source_dir)) {
        throw UserError("source dir not found: " + source_dir);
    }
    std::vector<SourceImage> sources;
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(source_dir)) {
        if (entry.path().extension() == ".png") paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        SourceImage src;
        src.id = p.stem().string();
        src.path = p.string();
        src.image = load_png(p.string());
        sources.push_back(std::move(src));
    }
    if (sources.empty()) throw UserError("no .png sources in " + source_dir);
    if (dcfg.out_dir.empty()) dcfg.out_dir = fs::path(out_manifest).parent_path().string();
    if (dcfg.out_dir.empty()) dcfg.out_dir = ".";
    persist_resolved(cmd, out_manifest);
    const GenerateStats stats =
        generate_dataset(sources, make_backends(backend, backend_url), dcfg, out_manifest);
    std::cout << "sources=" << stats.sources_seen << " discarded=" << stats.sources_discarded
              << " written=" << stats.records_written << " skipped=" << stats.records_skipped
              << " failed=" << stats.records_failed << '\n'
              << "manifest: " << out_manifest << '\n';
    return 0;
}

int cmd_filter(const CLI::App& cmd, const std::string& manifest_path, const std::string& out_path,
               bool no_heuristic, bool no_classifier, const std::string& classifier_path,
               double threshold, const std::string& class_label) {
    if (!fs::exists(manifest_path)) throw UserError("manifest not found: " + manifest_path);
    std::vector<DatasetRecord> records = read_manifest(manifest_path);
    std::optional<QualityClassifier> clf;
    if (!no_classifier) {
        if (classifier_path.empty()) {
            throw UserError("--classifier-path required unless --no-classifier is set");
        }
        if (!fs::exists(classifier_path)) {
            throw UserError("classifier not found: " + classifier_path);
        }
        clf = load_quality_classifier(classifier_path);
    }
    MockDetector detector;
    const FilterStats stats =
        filter_manifest(records, no_heuristic ? nullptr : &detector, !no_heuristic,
                        clf ? &*clf : nullptr, threshold, class_label);
    const std::string out = out_path.empty() ? manifest_path : out_path;
    persist_resolved(cmd, out);
    write_manifest(out, records);
    std::cout << "total=" << stats.total << " rejected=" << stats.rejected
              << " extra_subject=" << stats.extra_subject
              << " classifier=" << stats.classifier_reject << '\n'
              << "manifest: " << out << '\n';
    return 0;
}

int cmd_sample_pairs(const CLI::App& cmd, const std::string& manifest_path,
                     const std::string& out_dir, int n, std::uint64_t seed) {
    if (!fs::exists(manifest_path)) throw UserError("manifest not found: " + manifest_path);
    const std::vector<DatasetRecord> records = read_manifest(manifest_path);
    std::vector<const DatasetRecord*> kept;
    for (const auto& r : records) {
        if (r.filter_flags.kept) kept.push_back(&r);
    }
    if (kept.empty()) throw UserError("no kept records in " + manifest_path);
    fs::create_directories(out_dir);
    persist_resolved(cmd, (fs::path(out_dir) / "pairs.jsonl").string());
    std::ofstream meta((fs::path(out_dir) / "pairs.jsonl").string());
    for (int i = 0; i < n; ++i) {
        const DatasetRecord& rec = *kept[i % kept.size()];
        Rng rng = Rng::derive(seed, std::string("pair"), rec.id, static_cast<std::uint64_t>(i));
        TrainingPair pair = sample_enclosing_view(rec, rng);
        const std::string name = "pair" + std::to_string(i);
        Image overlay = pair.view_image;
        draw_rect(overlay, pair.label, 1.0, 0.1, 0.1);
        draw_rect(overlay, pair.view_subject.bbox, 0.1, 1.0, 0.1);
        save_png(overlay, (fs::path(out_dir) / (name + ".png")).string());
        meta << nlohmann::json{
                    {"name", name},
                    {"record", rec.id},
                    {"label", {pair.label.x1, pair.label.y1, pair.label.x2, pair.label.y2}},
                    {"scale", pair.view_spec.scale},
                    {"aspect", pair.view_spec.aspect},
                    {"orientation_flipped", pair.view_spec.orientation_flipped},
                    {"edge_snapped", pair.view_spec.edge_snapped}}
             << '\n';
    }
    std::cout << "wrote " << n << " pairs to " << out_dir << '\n';
    return 0;
}

int cmd_train(const CLI::App& cmd, const std::string& manifest_path, const std::string& out_dir,
              const std::string& variant, ModelConfig mcfg, TrainConfig tcfg) {
    if (!fs::exists(manifest_path)) throw UserError("manifest not found: " + manifest_path);
    const std::vector<DatasetRecord> records = read_manifest(manifest_path);
    mcfg.variant = variant_from_string(variant);
    tcfg.workdir = out_dir;
    persist_resolved(cmd, (fs::path(out_dir) / "x").string());
    if (mcfg.variant == ModelVariant::Ranking) {
        const RankingTrainResult r = train_ranking(records, mcfg, tcfg);
        std::cout << "val_accuracy=" << r.val_accuracy << '\n'
                  << "checkpoint: " << r.checkpoint_path << '\n';
    } else {
        const TrainResult r = train(records, mcfg, tcfg);
        std::cout << "best_epoch=" << r.best_epoch << " best_val=" << r.best_val
                  << " train_sources=" << r.train_sources << " val_sources=" << r.val_sources
                  << '\n'
                  << "checkpoint: " << r.checkpoint_path << '\n'
                  << "metrics: " << r.metrics_path << '\n';
    }
    return 0;
}

int cmd_evaluate(const CLI::App& cmd, const std::string& manifest_path,
                 const std::string& checkpoint, const std::string& out_path, double baseline_area,
                 const std::string& class_label, double cond_area, double cond_aspect) {
    if (!fs::exists(manifest_path)) throw UserError("eval manifest not found: " + manifest_path);
    const std::vector<EvalExample> examples = read_eval_manifest(manifest_path);
    EvalReport report;
    if (!checkpoint.empty()) {
        if (!fs::exists(checkpoint)) throw UserError("checkpoint not found: " + checkpoint);
        CropModel model = load_model(checkpoint);
        MockDetector detector;
        const auto cond = conditioning_from_flags(model, cond_area, cond_aspect);
        const CropPredictor pred = [&](const Image& image) {
            const SubjectLookup subject = find_subject(detector, image, class_label);
            return predict_any_variant(model, image, subject.mask, subject.bbox, cond);
        };
        report = evaluate(examples, pred,
                          nlohmann::json{{"checkpoint", checkpoint}, {"class", class_label}});
    } else if (baseline_area > 0.0) {
        report = evaluate(examples, center_crop_baseline(baseline_area),
                          nlohmann::json{{"baseline_area", baseline_area}});
    } else {
        throw UserError("provide --checkpoint or --baseline-area");
    }
    persist_resolved(cmd, out_path);
    std::ofstream out(out_path);
    out << report.to_json().dump(2) << '\n';
    std::ofstream csv((fs::path(out_path).replace_extension(".csv")).string());
    csv << report.to_csv();
    std::cout << "n=" << report.n << " skipped=" << report.skipped
              << " mean_iou=" << report.mean_iou << " mean_disp=" << report.mean_disp << '\n'
              << "report: " << out_path << '\n';
    return 0;
}

int cmd_crop(const CLI::App& cmd, const std::string& checkpoint, const std::string& image_path,
             const std::string& out_overlay, const std::string& subject_bbox_flag,
             const std::string& class_label, double cond_area, double cond_aspect) {
    if (!fs::exists(checkpoint)) throw UserError("checkpoint not found: " + checkpoint);
    if (!fs::exists(image_path)) throw UserError("image not found: " + image_path);
    CropModel model = load_model(checkpoint);
    const Image image = load_png(image_path);

    CropRect bbox(0.0, 0.0, 1.0, 1.0);
    const Mask* mask = nullptr;
    MockDetector detector;
    SubjectLookup subject;
    if (!subject_bbox_flag.empty()) {
        bbox = parse_rect(subject_bbox_flag);
    } else {
        subject = find_subject(detector, image, class_label);
        if (!subject.found && model.cfg.subject_aware && model.cfg.variant != ModelVariant::Unet) {
            throw UserError("no subject detected; pass --subject-bbox x1,y1,x2,y2 to override");
        }
        bbox = subject.bbox;
        mask = subject.mask;
    }

    const auto cond = conditioning_from_flags(model, cond_area, cond_aspect);
    const CropRect crop = predict_any_variant(model, image, mask, bbox, cond);
    const PixelRect px = to_pixels(crop, image.dims());
    std::cout << "crop normalized: " << crop.x1 << ',' << crop.y1 << ',' << crop.x2 << ','
              << crop.y2 << '\n'
              << "crop pixels: " << px.x1 << ',' << px.y1 << ',' << px.x2 << ',' << px.y2 << '\n';

    if (!out_overlay.empty()) {
        persist_resolved(cmd, out_overlay);
        Image overlay = image;
        draw_rect(overlay, crop, 1.0, 0.1, 0.1);
        draw_rect(overlay, bbox, 0.1, 1.0, 0.1);
        save_png(overlay, out_overlay);
        std::cout << "overlay: " << out_overlay << '\n';
    }
    return 0;
}

int cmd_sweep(const CLI::App& cmd, const std::string& checkpoint, const std::string& image_path,
              const std::string& axis, std::vector<double> values, const std::string& out_path,
              const std::string& class_label) {
    if (!fs::exists(checkpoint)) throw UserError("checkpoint not found: " + checkpoint);
    if (!fs::exists(image_path)) throw UserError("image not found: " + image_path);
    CropModel model = load_model(checkpoint);
    if (model.cfg.variant != ModelVariant::Conditional) {
        throw UserError("sweep needs a conditional-variant checkpoint");
    }
    const Image image = load_png(image_path);
    MockDetector detector;
    const SubjectLookup subject = find_subject(detector, image, class_label);
    if (!subject.found && model.cfg.subject_aware) {
        throw UserError("no subject detected in " + image_path);
    }
    const SweepResult result =
        conditioning_sweep(model, image, subject.mask, subject.bbox, axis, values);
    persist_resolved(cmd, out_path);
    save_png(result.overlay_strip, out_path);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const CropRect& c = result.crops[i];
        std::cout << axis << '=' << values[i] << " -> " << c.x1 << ',' << c.y1 << ',' << c.x2
                  << ',' << c.y2 << " (area " << c.area() << ")\n";
    }
    std::cout << "strip: " << out_path << '\n';
    return 0;
}

int cmd_pipeline(const CLI::App& cmd, PipelineConfig cfg) {
    persist_resolved(cmd, (fs::path(cfg.workdir) / "x").string());
    const PipelineResult r = run_pipeline(cfg);
    std::cout << "generated=" << r.gen_stats.records_written
              << " filtered_out=" << r.filter_stats.rejected << '\n'
              << "best_epoch=" << r.best_epoch << " best_val=" << r.best_val << '\n'
              << "model mean_iou=" << r.report.mean_iou << " mean_disp=" << r.report.mean_disp
              << '\n'
              << "baseline mean_iou=" << r.baseline_report.mean_iou << '\n'
              << "checkpoint: " << r.checkpoint_path << '\n'
              << "report: " << (fs::path(cfg.workdir) / "report.json").string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Subject-aware image cropping toolkit"};
    app.require_subcommand(1);
    std::string workdir = ".";
    app.add_option("--workdir", workdir, "Directory all relative paths resolve against");

    auto add_config = [](CLI::App* cmd) {
        cmd->set_config("--config", "", "TOML/INI config file; flags override it");
    };

    // generate
    auto* gen = app.add_subcommand("generate", "Outpaint sources into a training manifest");
    std::string gen_sources, gen_manifest = "data/manifest.jsonl", gen_backend = "mock";
    std::string gen_url;
    DatagenConfig dcfg;
    gen->add_option("--source-dir", gen_sources, "Directory of source .png images")->required();
    gen->add_option("--out-manifest", gen_manifest, "Output manifest path");
    gen->add_option("--backend", gen_backend, "mock or http");
    gen->add_option("--backend-url", gen_url, "HTTP outpainting service URL");
    gen->add_option("--amplify", dcfg.amplify, "Outpainted variants per source");
    gen->add_option("--seed", dcfg.seed, "Generation seed");
    gen->add_option("--class", dcfg.class_label, "Subject class label");
    add_config(gen);

    // filter
    auto* flt = app.add_subcommand("filter", "Flag bad records in a manifest");
    std::string flt_manifest, flt_out, flt_clf, flt_class = "shape";
    bool flt_no_heur = false, flt_no_clf = false;
    double flt_threshold = 0.5;
    flt->add_option("--manifest", flt_manifest, "Manifest to filter")->required();
    flt->add_option("--out", flt_out, "Output manifest (default: in place)");
    flt->add_flag("--no-heuristic", flt_no_heur, "Disable the extra-subject heuristic");
    flt->add_flag("--no-classifier", flt_no_clf, "Disable the learned quality classifier");
    flt->add_option("--classifier-path", flt_clf, "Quality classifier checkpoint");
    flt->add_option("--threshold", flt_threshold, "Bad-class score rejection threshold");
    flt->add_option("--class", flt_class, "Subject class label");
    add_config(flt);

    // sample-pairs
    auto* pairs = app.add_subcommand("sample-pairs", "Dump enclosing-view pairs for inspection");
    std::string pairs_manifest, pairs_out = "pairs";
    int pairs_n = 16;
    std::uint64_t pairs_seed = 0;
    pairs->add_option("--manifest", pairs_manifest, "Training manifest")->required();
    pairs->add_option("--out-dir", pairs_out, "Output directory");
    pairs->add_option("--n", pairs_n, "Number of pairs");
    pairs->add_option("--seed", pairs_seed, "Sampling seed");
    add_config(pairs);

    // train
    auto* trn = app.add_subcommand("train", "Train a crop model on a manifest");
    std::string trn_manifest, trn_out = "train", trn_variant = "base";
    ModelConfig trn_model;
    TrainConfig trn_cfg;
    trn->add_option("--manifest", trn_manifest, "Training manifest")->required();
    trn->add_option("--out", trn_out, "Output directory");
    trn->add_option("--variant", trn_variant, "base, conditional, unet or ranking");
    trn->add_option("--input-size", trn_model.input_size, "Model input resolution");
    trn->add_option("--channels", trn_model.backbone_channels, "Backbone stage widths");
    trn->add_option("--epochs", trn_cfg.epochs, "Training epochs");
    trn->add_option("--batch", trn_cfg.batch_size, "Batch size");
    trn->add_option("--lr", trn_cfg.lr, "Peak learning rate");
    trn->add_option("--warmup", trn_cfg.warmup_steps, "Warmup steps");
    trn->add_option("--seed", trn_cfg.seed, "Training seed");
    trn->add_option("--val-fraction", trn_cfg.val_fraction, "Validation split fraction");
    trn->add_option("--max-sources", trn_cfg.max_sources, "Source-count cap (0 = unlimited)");
    add_config(trn);

    // evaluate
    auto* evl = app.add_subcommand("evaluate", "Score a model or baseline on an eval manifest");
    std::string evl_manifest, evl_ckpt, evl_out = "report.json", evl_class = "shape";
    double evl_baseline = 0.0, evl_cond_area = 0.34, evl_cond_aspect = 1.0;
    evl->add_option("--manifest", evl_manifest, "Eval manifest (id, image_path, labels)")
        ->required();
    evl->add_option("--checkpoint", evl_ckpt, "Model checkpoint");
    evl->add_option("--baseline-area", evl_baseline, "Center-crop baseline area fraction");
    evl->add_option("--out", evl_out, "Report JSON path (CSV written alongside)");
    evl->add_option("--class", evl_class, "Subject class label");
    evl->add_option("--cond-area", evl_cond_area, "Area conditioning (conditional variant)");
    evl->add_option("--cond-aspect", evl_cond_aspect, "H/W conditioning (conditional variant)");
    add_config(evl);

    // crop
    auto* crp = app.add_subcommand("crop", "Predict a crop for one image");
    std::string crp_ckpt, crp_image, crp_overlay, crp_bbox, crp_class = "shape";
    double crp_cond_area = 0.34, crp_cond_aspect = 1.0;
    crp->add_option("--checkpoint", crp_ckpt, "Model checkpoint")->required();
    crp->add_option("--image", crp_image, "Input image (.png)")->required();
    crp->add_option("--out", crp_overlay, "Overlay PNG path");
    crp->add_option("--subject-bbox", crp_bbox, "x1,y1,x2,y2 override, skips detection");
    crp->add_option("--class", crp_class, "Subject class label");
    crp->add_option("--cond-area", crp_cond_area, "Area conditioning (conditional variant)");
    crp->add_option("--cond-aspect", crp_cond_aspect, "H/W conditioning (conditional variant)");
    add_config(crp);

    // sweep
    auto* swp = app.add_subcommand("sweep", "Conditioning sweep strip for one image");
    std::string swp_ckpt, swp_image, swp_axis = "area", swp_out = "sweep.png";
    std::string swp_class = "shape";
    std::vector<double> swp_values = {0.2, 0.3, 0.4, 0.5, 0.6};
    swp->add_option("--checkpoint", swp_ckpt, "Conditional model checkpoint")->required();
    swp->add_option("--image", swp_image, "Input image (.png)")->required();
    swp->add_option("--axis", swp_axis, "area or aspect");
    swp->add_option("--values", swp_values, "Swept conditioning values");
    swp->add_option("--out", swp_out, "Overlay strip PNG path");
    swp->add_option("--class", swp_class, "Subject class label");
    add_config(swp);

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Self-contained demo: generate, filter, train, "
                                                "evaluate");
    PipelineConfig pcfg = demo_pipeline_config("pipeline", 0);
    bool pipe_no_filters = false;
    pipe->add_option("--out", pcfg.workdir, "Pipeline working directory");
    pipe->add_option("--sources", pcfg.n_sources, "Number of generated scenes");
    pipe->add_option("--eval", pcfg.n_eval, "Held-out scene count");
    pipe->add_option("--amplify", pcfg.amplify, "Outpainted variants per source");
    pipe->add_option("--seed", pcfg.seed, "Run seed");
    pipe->add_option("--epochs", pcfg.train.epochs, "Training epochs");
    pipe->add_flag("--no-filters", pipe_no_filters, "Skip the quality filters");
    pipe->add_flag("--skip-train", pcfg.skip_train, "Reuse an existing checkpoint");
    pipe->add_option("--planted-bad", pcfg.planted_bad_fraction,
                     "Fraction of outpaintings to corrupt (for ablations)");
    add_config(pipe);

    CLI11_PARSE(app, argc, argv);

    try {
        fs::create_directories(workdir);
        fs::current_path(workdir);
        if (gen->parsed()) {
            return cmd_generate(*gen, gen_sources, gen_manifest, gen_backend, gen_url, dcfg);
        }
        if (flt->parsed()) {
            return cmd_filter(*flt, flt_manifest, flt_out, flt_no_heur, flt_no_clf, flt_clf,
                              flt_threshold, flt_class);
        }
        if (pairs->parsed()) {
            return cmd_sample_pairs(*pairs, pairs_manifest, pairs_out, pairs_n, pairs_seed);
        }
        if (trn->parsed()) {
            return cmd_train(*trn, trn_manifest, trn_out, trn_variant, trn_model, trn_cfg);
        }
        if (evl->parsed()) {
            return cmd_evaluate(*evl, evl_manifest, evl_ckpt, evl_out, evl_baseline, evl_class,
                                evl_cond_area, evl_cond_aspect);
        }
        if (crp->parsed()) {
            return cmd_crop(*crp, crp_ckpt, crp_image, crp_overlay, crp_bbox, crp_class,
                            crp_cond_area, crp_cond_aspect);
        }
        if (swp->parsed()) {
            return cmd_sweep(*swp, swp_ckpt, swp_image, swp_axis, swp_values, swp_out, swp_class);
        }
        if (pipe->parsed()) {
            pcfg.data_seed = hash_combine(pcfg.seed, std::string("data"));
            pcfg.train.seed = pcfg.seed;
            pcfg.use_filters = !pipe_no_filters;
            return cmd_pipeline(*pipe, pcfg);
        }
        return 1;
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
}
