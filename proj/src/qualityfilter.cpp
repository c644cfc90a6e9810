#include "gencrop/qualityfilter.hpp"

#include "gencrop/losses.hpp"
#include "gencrop/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gencrop {

namespace {

nlohmann::json config_to_json(const QualityTrainConfig& cfg) {
    return nlohmann::json{{"input_size", cfg.input_size}, {"epochs", cfg.epochs},
                          {"batch_size", cfg.batch_size}, {"lr", cfg.lr},
                          {"seed", cfg.seed},            {"channels", cfg.channels},
                          {"hidden", cfg.hidden}};
}

QualityTrainConfig config_from_json(const nlohmann::json& j) {
    QualityTrainConfig cfg;
    cfg.input_size = j.at("input_size").get<int>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.channels = j.at("channels").get<std::vector<int>>();
    cfg.hidden = j.at("hidden").get<int>();
    return cfg;
}

}  // namespace

bool extra_subject_heuristic(const DatasetRecord& record,
                             const std::vector<Detection>& detections_post) {
    if (detections_post.empty()) return false;

    // the dominant subject is the detection matching the record's subject bbox
    std::size_t dominant = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < detections_post.size(); ++i) {
        const double overlap = iou(detections_post[i].region.bbox, record.subject_bbox);
        if (overlap > best) {
            best = overlap;
            dominant = i;
        }
    }
    const double subject_area = detections_post[dominant].region.bbox.area();
    for (std::size_t i = 0; i < detections_post.size(); ++i) {
        if (i == dominant) continue;
        const CropRect& bbox = detections_post[i].region.bbox;
        if (bbox.area() <= subject_area / 4.0) continue;
        if (!record.pseudo_label.contains_point(bbox.center_x(), bbox.center_y())) {
            return true;
        }
    }
    return false;
}

QualityClassifier::QualityClassifier(QualityTrainConfig config, std::uint64_t init_seed)
    : cfg(std::move(config)) {
    if (cfg.input_size <= 0 || cfg.channels.empty() || cfg.hidden <= 0) {
        throw std::invalid_argument("QualityClassifier: dimensions must be positive");
    }
    if (cfg.input_size % (1 << cfg.channels.size()) != 0) {
        throw std::invalid_argument("QualityClassifier: stages must divide input_size");
    }
    params.init_seed = init_seed;
}

ag::Value QualityClassifier::forward(nn::Ctx& ctx, const ag::Matrix& input) {
    ag::Value x = ctx.tape.input(input, false);
    int h = cfg.input_size, w = cfg.input_size, in_c = 3;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        x = ag::relu(
            nn::conv2d(ctx, "cls.s" + std::to_string(s), x, h, w, in_c, cfg.channels[s], 3, 2, 1));
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        in_c = cfg.channels[s];
    }
    ag::Value pooled =
        ag::matmul(x, ctx.tape.constant(ag::Matrix::Constant(h * w, 1, 1.0 / (h * w))));
    ag::Value hid = ag::relu(nn::linear(ctx, "cls.fc1", pooled, cfg.hidden));
    return ag::sigmoid(nn::linear(ctx, "cls.fc2", hid, 1));
}

double QualityClassifier::score(const Image& image) {
    ag::Tape tape;
    nn::Ctx ctx{tape, params, false, 0};
    return forward(ctx, quality_input(image, cfg.input_size)).scalar();
}

ag::Matrix quality_input(const Image& image, int input_size) {
    if (image.empty() || image.channels() != 3) {
        throw std::invalid_argument("quality_input: RGB image required");
    }
    Image resized = resize_bilinear(image, input_size, input_size);
    ag::Matrix m(3, static_cast<Eigen::Index>(input_size) * input_size);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < input_size; ++y) {
            for (int x = 0; x < input_size; ++x) {
                m(c, static_cast<Eigen::Index>(y) * input_size + x) = resized.ch[c](y, x) - 0.5;
            }
        }
    }
    return m;
}

QualityClassifier train_quality_classifier(const std::vector<LabeledImage>& labeled,
                                           const QualityTrainConfig& cfg,
                                           QualityTrainStats* stats) {
    bool any_good = false, any_bad = false;
    for (const auto& item : labeled) (item.is_bad ? any_bad : any_good) = true;
    if (!any_good || !any_bad) {
        throw std::invalid_argument("train_quality_classifier: both classes required");
    }

    QualityClassifier clf(cfg, hash_combine(cfg.seed, std::uint64_t{0xC1A55}));
    std::vector<ag::Matrix> inputs;
    inputs.reserve(labeled.size());
    for (const auto& item : labeled) inputs.push_back(quality_input(item.image, cfg.input_size));

    const int n = static_cast<int>(labeled.size());
    const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * batches_per_epoch;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    nn::AdamWConfig opt;
    int step = 0;
    if (stats != nullptr) stats->epoch_loss.clear();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng = Rng::derive(cfg.seed, std::uint64_t{0x5FF1E}, epoch);
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, n - start);
            clf.params.zero_grads();
            for (int k = 0; k < count; ++k) {
                const int idx = order[start + k];
                ag::Tape tape;
                nn::Ctx ctx{tape, clf.params, true, hash_combine(cfg.seed, epoch * n + idx)};
                ag::Value loss = losses::binary_ce(clf.forward(ctx, inputs[idx]),
                                                   labeled[idx].is_bad ? 1.0 : 0.0);
                epoch_loss += loss.scalar();
                tape.backward(loss);
                tape.accumulate_param_grads(clf.params.grads);
            }
            for (auto& [name, g] : clf.params.grads) g /= count;
            ++step;
            opt.lr = nn::cosine_warmup_lr(step, total_steps, 0, cfg.lr);
            nn::adamw_step(clf.params, opt, step);
        }
        if (stats != nullptr) stats->epoch_loss.push_back(epoch_loss / n);
    }
    return clf;
}

void save_quality_classifier(const std::string& path, const QualityClassifier& clf) {
    nn::save_checkpoint(path, clf.params, nlohmann::json{{"quality_config", config_to_json(clf.cfg)}});
}

QualityClassifier load_quality_classifier(const std::string& path) {
    nn::ParamStore store;
    nlohmann::json meta = nn::load_checkpoint(path, store);
    QualityClassifier clf(config_from_json(meta.at("quality_config")));
    clf.params = std::move(store);
    return clf;
}

QualityVerdict assess_record(const DatasetRecord& record,
                             const std::vector<Detection>& detections_post,
                             QualityClassifier* classifier, const Image* outpainted,
                             double threshold) {
    QualityVerdict v;
    v.extra_subject = extra_subject_heuristic(record, detections_post);
    if (v.extra_subject) v.reasons.push_back("extra_subject");
    if (classifier != nullptr) {
        if (outpainted == nullptr) {
            throw std::invalid_argument("assess_record: classifier needs the outpainted image");
        }
        v.classifier_score = classifier->score(*outpainted);
        if (v.classifier_score >= threshold) v.reasons.push_back("classifier");
    }
    v.rejected = v.extra_subject || (classifier != nullptr && v.classifier_score >= threshold);
    return v;
}

FilterStats filter_manifest(std::vector<DatasetRecord>& records, SubjectDetector* detector,
                            bool heuristic_on, QualityClassifier* classifier, double threshold,
                            const std::string& class_label) {
    if (heuristic_on && detector == nullptr) {
        throw std::invalid_argument("filter_manifest: heuristic requires a detector");
    }
    FilterStats stats;
    for (auto& record : records) {
        ++stats.total;
        record.filter_flags = FilterFlags{};
        Image canvas;
        if (heuristic_on || classifier != nullptr) {
            canvas = load_png(record.outpainted_path);
        }
        if (heuristic_on) {
            record.filter_flags.extra_subject =
                extra_subject_heuristic(record, detector->detect(canvas, class_label));
        }
        if (classifier != nullptr) {
            record.filter_flags.quality_reject = classifier->score(canvas) >= threshold;
        }
        record.filter_flags.kept =
            !(record.filter_flags.extra_subject || record.filter_flags.quality_reject);
        if (record.filter_flags.extra_subject) ++stats.extra_subject;
        if (record.filter_flags.quality_reject) ++stats.classifier_reject;
        if (!record.filter_flags.kept) ++stats.rejected;
    }
    return stats;
}

Image add_border(const Image& img, int thickness, double r, double g, double b) {
    Image out = img;
    const int w = out.width(), h = out.height();
    const double color[3] = {r, g, b};
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (x < thickness || y < thickness || x >= w - thickness || y >= h - thickness) {
                    out.ch[c](y, x) = color[c];
                }
            }
        }
    }
    return out;
}

Image tile_2x2(const Image& a, const Image& b, const Image& c, const Image& d) {
    const int w = a.width(), h = a.height();
    const int hw = w / 2, hh = h / 2;
    Image out(w, h, 3);
    paste(out, resize_bilinear(a, hw, hh), 0, 0);
    paste(out, resize_bilinear(b, w - hw, hh), hw, 0);
    paste(out, resize_bilinear(c, hw, h - hh), 0, hh);
    paste(out, resize_bilinear(d, w - hw, h - hh), hw, hh);
    return out;
}

std::vector<LabeledImage> make_quality_corpus(int n_per_class, std::uint64_t seed,
                                              const ImageDims& dims) {
    std::vector<LabeledImage> corpus;
    corpus.reserve(2 * static_cast<std::size_t>(n_per_class));
    Rng rng = Rng::derive(seed, std::uint64_t{0xC0F5});
    auto scene_at = [&](std::uint64_t s) {
        return generate_scene(SceneSpec::randomized(s, dims)).image;
    };
    for (int i = 0; i < n_per_class; ++i) {
        corpus.push_back({scene_at(hash_combine(seed, 2 * i)), false});
        LabeledImage bad;
        bad.is_bad = true;
        if (rng.bernoulli(0.5)) {
            const int thickness = rng.uniform_int(2, std::max(2, dims.height / 16));
            bad.image = add_border(scene_at(hash_combine(seed, 2 * i + 1)), thickness,
                                   rng.uniform(), rng.uniform(), rng.uniform());
        } else {
            const std::uint64_t base = hash_combine(seed, 1000003 + i);
            bad.image = tile_2x2(scene_at(hash_combine(base, 0)), scene_at(hash_combine(base, 1)),
                                 scene_at(hash_combine(base, 2)), scene_at(hash_combine(base, 3)));
        }
        corpus.push_back(std::move(bad));
    }
    return corpus;
}

}  // namespace gencrop
