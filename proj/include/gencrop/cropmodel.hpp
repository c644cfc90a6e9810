#pragma once

#include "gencrop/autograd.hpp"
#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"
#include "gencrop/nn.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace gencrop {

enum class ModelVariant { Base, Conditional, Unet, Ranking };

const char* to_string(ModelVariant v);
ModelVariant variant_from_string(const std::string& s);

struct ModelConfig {
    int input_size = 256;
    int grid = 16;  // grid^2 anchors
    int fused_channels = 32;
    int encoder_heads = 8;
    int encoder_layers = 2;
    int encoder_ff_hidden = 64;
    int roi_pool = 5;  // 5x5 inside + 5x5 outside pooling
    int composition_hidden = 128;
    int conditioning_hidden = 32;
    double conditioning_dropout = 0.1;
    std::vector<int> backbone_channels = {12, 16, 24, 32};  // stride-2 stages
    int unet_input_size = 224;
    ModelVariant variant = ModelVariant::Base;
    bool subject_aware = true;

    int anchors() const { return grid * grid; }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Area/aspect conditioning for the conditional variant.
struct Conditioning {
    double area = 0.34;
    double aspect_hw = 1.0;  // height / width
    double aspect_wh = 1.0;  // width / height

    static Conditioning make(double area, double h_over_w);
    void validate() const;
};

// Preprocessed 4-channel input: aspect-preserving resize, zero-pad to square.
// Model-frame coordinates cover the padded square; the content occupies
// [0, fx] x [0, fy].
struct ModelInput {
    ag::Matrix channels;  // (4, size*size)
    int size = 0;
    int content_w = 0, content_h = 0;
    double fx = 1.0, fy = 1.0;  // content fraction per axis
    CropRect valid_region() const { return CropRect(0.0, 0.0, fx, fy); }
};

ModelInput preprocess(const Image& view, const Mask* subject_mask, const ModelConfig& cfg);

CropRect view_to_model(const CropRect& r, const ModelInput& in);
CropRect model_to_view(const CropRect& r, const ModelInput& in);

struct ProposalGrid {
    int grid = 16;
    std::vector<CropRect> proposals;  // anchors row-major (index = iy*grid+ix), view coords
    std::vector<double> weights;      // post-softmax; exactly 0 on masked anchors
    std::vector<char> anchor_mask;    // 1 = participates in blending
    bool degenerate_subject = false;  // subject bbox covered no anchors
};

struct ForwardOutput {
    ag::Value blended;      // (4,1) view coords, clamped to the valid region
    ag::Value blended_raw;  // (4,1) view coords, unclamped; the clamp has zero
                            // gradient outside the valid region, so losses
                            // attach here
    ag::Value proposals;    // (4, anchors) view coords
    ProposalGrid grid;
};

class CropModel {
  public:
    ModelConfig cfg;
    nn::ParamStore params;

    explicit CropModel(ModelConfig config = {}, std::uint64_t init_seed = 1);

    // Anchor-grid regressor (variants base/conditional).
    // conditioning is required iff variant == Conditional.
    ForwardOutput forward(nn::Ctx& ctx, const ModelInput& in, const CropRect& subject_bbox_view,
                          const std::optional<Conditioning>& cond = std::nullopt);

    // Per-pixel inclusion scores on the unet input grid, (1, S*S) after sigmoid.
    ag::Value unet_forward(nn::Ctx& ctx, const ModelInput& in);

    // Realness score for a candidate crop already rendered as the input view.
    ag::Value ranking_forward(nn::Ctx& ctx, const ModelInput& in);
};

// Convenience inference on a fresh tape in eval mode.
struct Prediction {
    CropRect crop;  // view coords
    ProposalGrid grid;
};
Prediction predict(CropModel& model, const Image& view, const Mask* subject_mask,
                   const CropRect& subject_bbox_view,
                   const std::optional<Conditioning>& cond = std::nullopt);

// Threshold + largest 4-connected component + bbox; empty -> full frame.
struct MaskCrop {
    CropRect rect;
    bool fallback = false;
};
MaskCrop crop_from_mask(const Plane& scores, double threshold = 0.5);

CropRect unet_predict(CropModel& model, const Image& view, const Mask* subject_mask,
                      bool* fallback = nullptr);

double ranking_score(CropModel& model, const Image& view, const Mask* subject_mask,
                     const CropRect& candidate);

// At least min_count candidates spanning area fractions 0.3 to 1.0.
std::vector<CropRect> candidate_grid(int min_count = 64);

void save_model(const std::string& path, const CropModel& model,
                const nlohmann::json& dataset_stats = nlohmann::json::object());
CropModel load_model(const std::string& path, nlohmann::json* dataset_stats = nullptr);

}  // namespace gencrop
