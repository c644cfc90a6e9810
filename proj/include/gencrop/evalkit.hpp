#pragma once

#include "gencrop/backends.hpp"
#include "gencrop/cropmodel.hpp"
#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gencrop {

// One evaluation example: an image plus one or more acceptable crops.
struct EvalExample {
    std::string id;
    std::string image_path;  // may be empty when image is held in memory
    std::vector<CropRect> labels;
    Image image;  // optional in-memory payload; loaded from image_path otherwise
};

std::vector<EvalExample> read_eval_manifest(const std::string& path);
void write_eval_manifest(const std::string& path, const std::vector<EvalExample>& examples);

struct EvalItem {
    std::string id;
    CropRect pred;
    double iou = 0.0;
    double disp = 0.0;
    int best_label = -1;
    bool skipped = false;
    std::string warning;
};

struct EvalReport {
    std::vector<EvalItem> items;
    double mean_iou = 0.0;  // over evaluated items only
    double mean_disp = 0.0;
    int n = 0;
    int skipped = 0;
    nlohmann::json config_snapshot;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

using CropPredictor = std::function<CropRect(const Image& image)>;

// Top-IoU label protocol; unreadable images are skipped with a warning item.
// Throws std::invalid_argument on an empty manifest.
EvalReport evaluate(const std::vector<EvalExample>& manifest, const CropPredictor& predictor,
                    nlohmann::json config_snapshot = nlohmann::json::object());

// Subject-aware inference: detect the subject, then run the regressor.
CropPredictor make_model_predictor(CropModel& model, SubjectDetector* detector,
                                   const std::string& class_label = "shape",
                                   std::optional<Conditioning> cond = std::nullopt);

// Fixed centered crop covering the given area fraction, square by default.
CropPredictor center_crop_baseline(double area_fraction, double aspect_wh = 1.0);

struct RankingMetrics {
    double srcc = 0.0;
    bool srcc_defined = true;  // false for constant score lists
    int acc_k = 0;             // 1 iff top prediction is in the ground-truth top K
};

// Spearman correlation with average-rank ties; throws on length mismatch or
// fewer than 2 entries.
RankingMetrics ranking_metrics(const std::vector<double>& pred_scores,
                               const std::vector<double>& gt_scores, int k);

// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(const std::vector<double>& scores);

struct SweepResult {
    std::vector<double> values;
    std::vector<CropRect> crops;
    Image overlay_strip;  // one panel per value, crop drawn on the image
};

// axis is "area" or "aspect" (aspect holds the area conditioning at 0.34).
// Throws std::invalid_argument unless the model is the conditional variant.
SweepResult conditioning_sweep(CropModel& model, const Image& image, const Mask* subject_mask,
                               const CropRect& subject_bbox, const std::string& axis,
                               const std::vector<double>& values);

// Human annotation record; V1-V5 are non-exclusive yes/no judgments.
struct QualitativeRecord {
    std::string image_id;
    std::string method_id;
    bool v[5] = {false, false, false, false, false};
    std::string annotator_id;
    std::string notes;
};

void to_json(nlohmann::json& j, const QualitativeRecord& r);
void from_json(const nlohmann::json& j, QualitativeRecord& r);
std::vector<QualitativeRecord> read_qualitative(const std::string& path);
void write_qualitative(const std::string& path, const std::vector<QualitativeRecord>& records);

}  // namespace gencrop
