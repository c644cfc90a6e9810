#pragma once

#include "gencrop/autograd.hpp"
#include "gencrop/backends.hpp"
#include "gencrop/datagen.hpp"
#include "gencrop/image.hpp"
#include "gencrop/nn.hpp"
#include "gencrop/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gencrop {

struct QualityVerdict {
    bool extra_subject = false;
    double classifier_score = 0.0;  // bad-class probability
    bool rejected = false;
    std::vector<std::string> reasons;
};

// Reject iff a non-dominant same-class detection larger than a quarter of the
// subject's area sits (by bbox center) outside the pseudo-label.
bool extra_subject_heuristic(const DatasetRecord& record,
                             const std::vector<Detection>& detections_post);

struct QualityTrainConfig {
    int input_size = 128;
    int epochs = 100;
    int batch_size = 64;
    double lr = 1e-4;  // peak of the cosine schedule
    std::uint64_t seed = 0;
    std::vector<int> channels = {6, 8, 12, 16};  // stride-2 conv stages
    int hidden = 32;
};

// Small CNN scoring how likely an image is a bad (bordered/tiled/composite)
// outpainting. Score 1 = bad.
class QualityClassifier {
  public:
    QualityTrainConfig cfg;
    nn::ParamStore params;

    explicit QualityClassifier(QualityTrainConfig config = {}, std::uint64_t init_seed = 1);

    ag::Value forward(nn::Ctx& ctx, const ag::Matrix& input);  // (1,1) sigmoid
    double score(const Image& image);
};

// Downsampled zero-centered (3, input_size^2) classifier input.
ag::Matrix quality_input(const Image& image, int input_size);

struct LabeledImage {
    Image image;
    bool is_bad = false;
};

struct QualityTrainStats {
    std::vector<double> epoch_loss;  // mean per-sample loss
};

// Binary training with AdamW and cosine-annealed learning rate.
// Throws std::invalid_argument unless both classes are present.
QualityClassifier train_quality_classifier(const std::vector<LabeledImage>& labeled,
                                           const QualityTrainConfig& cfg,
                                           QualityTrainStats* stats = nullptr);

void save_quality_classifier(const std::string& path, const QualityClassifier& clf);
QualityClassifier load_quality_classifier(const std::string& path);

QualityVerdict assess_record(const DatasetRecord& record,
                             const std::vector<Detection>& detections_post,
                             QualityClassifier* classifier, const Image* outpainted,
                             double threshold = 0.5);

struct FilterStats {
    int total = 0;
    int rejected = 0;
    int extra_subject = 0;
    int classifier_reject = 0;
};

// Flags records in place; only filter_flags is mutated. The detector runs on
// each record's outpainted image when the heuristic is enabled; the classifier
// scores the same image when provided.
FilterStats filter_manifest(std::vector<DatasetRecord>& records, SubjectDetector* detector,
                            bool heuristic_on, QualityClassifier* classifier,
                            double threshold = 0.5, const std::string& class_label = "shape");

// Synthetic failure modes for desk-scale classifier training.
Image add_border(const Image& img, int thickness, double r, double g, double b);
Image tile_2x2(const Image& a, const Image& b, const Image& c, const Image& d);

// Procedural good/bad corpus: good = clean scenes, bad = bordered or tiled.
std::vector<LabeledImage> make_quality_corpus(int n_per_class, std::uint64_t seed,
                                              const ImageDims& dims = ImageDims(128, 128));

}  // namespace gencrop
