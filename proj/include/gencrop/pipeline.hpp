#pragma once

#include "gencrop/datagen.hpp"
#include "gencrop/evalkit.hpp"
#include "gencrop/qualityfilter.hpp"
#include "gencrop/scenegen.hpp"
#include "gencrop/trainer.hpp"

#include <string>
#include <vector>

namespace gencrop {

// Self-contained demo run: procedural scenes -> mock outpainting -> filtering
// -> training -> evaluation against the scenes' ideal crops.
struct PipelineConfig {
    std::string workdir;
    int n_sources = 500;
    int n_eval = 100;
    int amplify = 4;
    int scene_size = 384;
    std::uint64_t data_seed = 0;  // corpus identity; shared across ablation arms
    std::uint64_t seed = 0;       // training / init / split
    bool use_filters = true;
    double planted_bad_fraction = 0.0;  // corrupt this share of outpaintings
    bool skip_train = false;            // reuse an existing checkpoint
    std::string quality_classifier_path;  // default: <workdir>/quality_clf.json
    ModelConfig model;
    TrainConfig train;

    void validate() const;
    nlohmann::json to_json() const;
};

// Reference demo configuration: small backbone, 5 epochs.
PipelineConfig demo_pipeline_config(const std::string& workdir, std::uint64_t seed = 0);

// Scene i of a pipeline corpus. Centered framing only: the corner choice of
// the thirds rule is unobservable from a single image, so it cannot be
// learned or fairly scored.
SceneSpec pipeline_scene_spec(const PipelineConfig& cfg, int index);

// The scene's ideally framed region becomes the "stock photo" source, so the
// label-to-subject relation in the outpainted canvas carries the framing rule.
SourceImage pipeline_source(const PipelineConfig& cfg, int index);

// Generates (or resumes) the corpus; returns the manifest path.
std::string pipeline_generate(const PipelineConfig& cfg, GenerateStats* stats = nullptr);

// Rewrites a fraction of outpainted canvases as bordered/tiled failures
// (deterministic choice by record id); returns the ids that were corrupted.
std::vector<std::string> plant_bad_outpaintings(std::vector<DatasetRecord>& records,
                                                double fraction, std::uint64_t seed);

// Heuristic + desk-scale classifier (trained on a synthetic corpus, cached in
// the workdir); mutates filter flags in place.
FilterStats pipeline_filter(std::vector<DatasetRecord>& records, const PipelineConfig& cfg);

// Held-out scenes run through the same outpaint-then-view path as training
// data; labels are the pasted ideal-crop regions in view coordinates.
std::vector<EvalExample> pipeline_eval_set(const PipelineConfig& cfg);

struct PipelineResult {
    std::string manifest_path;
    std::string checkpoint_path;
    GenerateStats gen_stats;
    FilterStats filter_stats;
    int best_epoch = -1;
    double best_val = 0.0;
    EvalReport report;           // trained model
    EvalReport baseline_report;  // center crop at the training labels' mean area
    double mean_label_area = 0.0;
};

PipelineResult run_pipeline(const PipelineConfig& cfg);

}  // namespace gencrop
