#include "gencrop/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace gencrop {

namespace {

nlohmann::json rect_to_json(const CropRect& r) {
    return nlohmann::json::array({r.x1, r.y1, r.x2, r.y2});
}

CropRect rect_from_json(const nlohmann::json& j) {
    return CropRect(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                    j.at(3).get<double>());
}

}  // namespace

std::vector<EvalExample> read_eval_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_eval_manifest: cannot open " + path);
    std::vector<EvalExample> examples;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        EvalExample ex;
        ex.id = j.at("id").get<std::string>();
        ex.image_path = j.at("image_path").get<std::string>();
        for (const auto& l : j.at("labels")) ex.labels.push_back(rect_from_json(l));
        examples.push_back(std::move(ex));
    }
    return examples;
}

void write_eval_manifest(const std::string& path, const std::vector<EvalExample>& examples) {
    if (!fs::path(path).parent_path().empty()) {
        fs::create_directories(fs::path(path).parent_path());
    }
    std::ofstream out(path);
    for (const auto& ex : examples) {
        nlohmann::json labels = nlohmann::json::array();
        for (const auto& l : ex.labels) labels.push_back(rect_to_json(l));
        out << nlohmann::json{{"id", ex.id}, {"image_path", ex.image_path}, {"labels", labels}}
            << '\n';
    }
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json items_json = nlohmann::json::array();
    for (const auto& item : items) {
        items_json.push_back(nlohmann::json{{"id", item.id},
                                            {"pred", rect_to_json(item.pred)},
                                            {"iou", item.iou},
                                            {"disp", item.disp},
                                            {"best_label", item.best_label},
                                            {"skipped", item.skipped},
                                            {"warning", item.warning}});
    }
    return nlohmann::json{{"items", items_json}, {"mean_iou", mean_iou},
                          {"mean_disp", mean_disp}, {"n", n},
                          {"skipped", skipped},     {"config", config_snapshot}};
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << "id,iou,disp,best_label,skipped,warning\n";
    for (const auto& item : items) {
        out << item.id << ',' << item.iou << ',' << item.disp << ',' << item.best_label << ','
            << (item.skipped ? 1 : 0) << ',' << item.warning << '\n';
    }
    return out.str();
}

EvalReport evaluate(const std::vector<EvalExample>& manifest, const CropPredictor& predictor,
                    nlohmann::json config_snapshot) {
    if (manifest.empty()) {
        throw std::invalid_argument("evaluate: empty manifest");
    }
    EvalReport report;
    report.config_snapshot = std::move(config_snapshot);
    for (const auto& ex : manifest) {
        EvalItem item;
        item.id = ex.id;
        Image image = ex.image;
        if (image.empty()) {
            if (ex.image_path.empty() || !fs::exists(ex.image_path)) {
                item.skipped = true;
                item.warning = "image missing: " + ex.image_path;
                ++report.skipped;
                report.items.push_back(std::move(item));
                continue;
            }
            image = load_png(ex.image_path);
        }
        if (ex.labels.empty()) {
            item.skipped = true;
            item.warning = "no labels";
            ++report.skipped;
            report.items.push_back(std::move(item));
            continue;
        }
        item.pred = predictor(image);
        const MetricPair metric = evaluate_against_labels(item.pred, ex.labels);
        item.iou = metric.iou;
        item.disp = metric.disp;
        item.best_label = metric.best_label;
        report.mean_iou += item.iou;
        report.mean_disp += item.disp;
        ++report.n;
        report.items.push_back(std::move(item));
    }
    if (report.n > 0) {
        report.mean_iou /= report.n;
        report.mean_disp /= report.n;
    }
    return report;
}

CropPredictor make_model_predictor(CropModel& model, SubjectDetector* detector,
                                   const std::string& class_label,
                                   std::optional<Conditioning> cond) {
    return [&model, detector, class_label, cond](const Image& image) {
        CropRect bbox(0.0, 0.0, 1.0, 1.0);
        const Mask* mask = nullptr;
        std::vector<Detection> detections;
        if (detector != nullptr) {
            detections = detector->detect(image, class_label);
            if (!detections.empty()) {
                bbox = detections.front().region.bbox;
                mask = &detections.front().region.mask;
            }
        }
        return predict(model, image, mask, bbox, cond).crop;
    };
}

CropPredictor center_crop_baseline(double area_fraction, double aspect_wh) {
    if (!(area_fraction > 0.0 && area_fraction <= 1.0) || aspect_wh <= 0.0) {
        throw std::invalid_argument("center_crop_baseline: invalid area or aspect");
    }
    const double w = std::min(1.0, std::sqrt(area_fraction * aspect_wh));
    const double h = std::min(1.0, std::sqrt(area_fraction / aspect_wh));
    const CropRect rect(0.5 - w / 2, 0.5 - h / 2, 0.5 + w / 2, 0.5 + h / 2);
    return [rect](const Image&) { return rect; };
}

std::vector<double> average_ranks(const std::vector<double>& scores) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double shared = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

RankingMetrics ranking_metrics(const std::vector<double>& pred_scores,
                               const std::vector<double>& gt_scores, int k) {
    if (pred_scores.size() != gt_scores.size()) {
        throw std::invalid_argument("ranking_metrics: length mismatch");
    }
    if (pred_scores.size() < 2) {
        throw std::invalid_argument("ranking_metrics: need at least 2 scores");
    }
    if (k <= 0) {
        throw std::invalid_argument("ranking_metrics: k must be positive");
    }
    const std::size_t n = pred_scores.size();
    RankingMetrics out;

    const std::vector<double> pr = average_ranks(pred_scores);
    const std::vector<double> gr = average_ranks(gt_scores);
    double mean_p = 0.0, mean_g = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_p += pr[i];
        mean_g += gr[i];
    }
    mean_p /= n;
    mean_g /= n;
    double cov = 0.0, var_p = 0.0, var_g = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cov += (pr[i] - mean_p) * (gr[i] - mean_g);
        var_p += (pr[i] - mean_p) * (pr[i] - mean_p);
        var_g += (gr[i] - mean_g) * (gr[i] - mean_g);
    }
    if (var_p == 0.0 || var_g == 0.0) {
        out.srcc = 0.0;
        out.srcc_defined = false;
    } else {
        out.srcc = cov / std::sqrt(var_p * var_g);
    }

    const std::size_t top_pred =
        std::distance(pred_scores.begin(), std::max_element(pred_scores.begin(), pred_scores.end()));
    std::vector<std::size_t> by_gt(n);
    std::iota(by_gt.begin(), by_gt.end(), 0);
    std::sort(by_gt.begin(), by_gt.end(),
              [&](std::size_t a, std::size_t b) { return gt_scores[a] > gt_scores[b]; });
    const std::size_t cutoff = std::min<std::size_t>(k, n);
    out.acc_k = 0;
    for (std::size_t i = 0; i < cutoff; ++i) {
        if (by_gt[i] == top_pred) {
            out.acc_k = 1;
            break;
        }
    }
    return out;
}

SweepResult conditioning_sweep(CropModel& model, const Image& image, const Mask* subject_mask,
                               const CropRect& subject_bbox, const std::string& axis,
                               const std::vector<double>& values) {
    if (model.cfg.variant != ModelVariant::Conditional) {
        throw std::invalid_argument("conditioning_sweep: conditional checkpoint required");
    }
    if (axis != "area" && axis != "aspect") {
        throw std::invalid_argument("conditioning_sweep: axis must be area or aspect");
    }
    constexpr double kHeldArea = 0.34;
    SweepResult result;
    result.values = values;
    const int w = image.width(), h = image.height();
    result.overlay_strip = Image(w * static_cast<int>(values.size()), h, 3);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const Conditioning cond = axis == "area" ? Conditioning::make(values[i], 1.0)
                                                 : Conditioning::make(kHeldArea, values[i]);
        const CropRect crop = predict(model, image, subject_mask, subject_bbox, cond).crop;
        result.crops.push_back(crop);
        Image panel = image;
        draw_rect(panel, crop, 1.0, 0.1, 0.1);
        paste(result.overlay_strip, panel, static_cast<int>(i) * w, 0);
    }
    return result;
}

void to_json(nlohmann::json& j, const QualitativeRecord& r) {
    j = nlohmann::json{{"image_id", r.image_id},
                       {"method_id", r.method_id},
                       {"v1", r.v[0]},
                       {"v2", r.v[1]},
                       {"v3", r.v[2]},
                       {"v4", r.v[3]},
                       {"v5", r.v[4]},
                       {"annotator_id", r.annotator_id},
                       {"notes", r.notes}};
}

void from_json(const nlohmann::json& j, QualitativeRecord& r) {
    r.image_id = j.at("image_id").get<std::string>();
    r.method_id = j.at("method_id").get<std::string>();
    for (int i = 0; i < 5; ++i) r.v[i] = j.at("v" + std::to_string(i + 1)).get<bool>();
    r.annotator_id = j.at("annotator_id").get<std::string>();
    r.notes = j.at("notes").get<std::string>();
}

std::vector<QualitativeRecord> read_qualitative(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_qualitative: cannot open " + path);
    std::vector<QualitativeRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(nlohmann::json::parse(line).get<QualitativeRecord>());
    }
    return records;
}

void write_qualitative(const std::string& path, const std::vector<QualitativeRecord>& records) {
    std::ofstream out(path);
    for (const auto& r : records) {
        out << nlohmann::json(r) << '\n';
    }
}

}  // namespace gencrop
