#pragma once

#include "gencrop/cropmodel.hpp"
#include "gencrop/datagen.hpp"
#include "gencrop/losses.hpp"
#include "gencrop/pairsampler.hpp"
#include "gencrop/rng.hpp"

#include <string>
#include <vector>

namespace gencrop {

struct AugmentConfig {
    bool color_jitter = true;
    double jitter_strength = 0.1;
    bool blur = true;
    double blur_prob = 0.2;
    double blur_sigma = 1.0;
    bool grayscale = true;
    double grayscale_prob = 0.1;
    bool hflip = true;
    double hflip_prob = 0.5;
    bool elastic = true;
    double elastic_alpha = 2.0;  // max displacement in pixels, kept mild
    double bbox_jitter = 0.02;   // max per-edge shift as a fraction of the view
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr = 1e-4;
    int warmup_steps = 500;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    double val_fraction = 0.1;  // split by source id
    int max_sources = 0;        // 0 = unlimited; dataset-size cap for ablations
    AugmentConfig augment;
    losses::LossWeights loss_weights;
    std::string workdir;  // empty = keep results in memory only

    void validate() const;
};

// Reference schedule for the ranking variant.
TrainConfig ranking_defaults();

// Pixel-space warp by a smooth displacement field; the mask warps with the
// image, rects are left to the caller.
void elastic_distort(Image& img, Mask* mask, double alpha, std::uint64_t seed);

// In-place augmentation; keeps label containment and bbox validity.
void augment_pair(TrainingPair& pair, const AugmentConfig& cfg, Rng& rng);

// Conditioning derived from a training label (area + aspect).
Conditioning conditioning_from_label(const CropRect& label);

// "sceneN_rK" -> "sceneN".
std::string source_id_of(const std::string& record_id);

// Uniform valid crop with area fraction in [0.1, 0.9], never the label rect.
CropRect random_negative_crop(const CropRect& label, Rng& rng);

struct EpochMetrics {
    int epoch = 0;
    double train_total = 0.0;
    double main_l1 = 0.0;
    double per_anchor_l1 = 0.0;
    double subject_boundary = 0.0;
    double val_total = 0.0;
    double lr_last = 0.0;
};

struct TrainResult {
    CropModel model;  // best-validation weights
    std::vector<EpochMetrics> epochs;
    std::string checkpoint_path;  // empty when workdir unset
    std::string metrics_path;
    int best_epoch = -1;
    double best_val = 0.0;
    int steps_per_epoch = 0;
    int train_sources = 0;
    int val_sources = 0;
};

// One pass over source ids per epoch: one amplification repeat and one fresh
// enclosing view per id. Kept records only. Throws on an empty manifest and
// on non-finite loss (message lists the offending batch's record ids).
TrainResult train(const std::vector<DatasetRecord>& manifest, const ModelConfig& model_cfg,
                  const TrainConfig& cfg);

struct RankingTrainResult {
    CropModel model;
    std::string checkpoint_path;
    double val_accuracy = 0.0;  // pseudo-label crop outscores a random crop
    std::vector<double> epoch_loss;
};

// Real-vs-random crop discrimination: positives are pseudo-label crops,
// negatives uniform valid crops with area in [0.1, 0.9], never the label.
RankingTrainResult train_ranking(const std::vector<DatasetRecord>& manifest,
                                 const ModelConfig& model_cfg, const TrainConfig& cfg);

}  // namespace gencrop
