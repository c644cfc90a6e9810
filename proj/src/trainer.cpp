#include "gencrop/trainer.hpp"

#include "gencrop/nn.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace gencrop {

namespace {

struct SourceGroup {
    std::string id;
    std::vector<const DatasetRecord*> records;  // sorted by repeat_index
};

std::vector<SourceGroup> group_sources(const std::vector<DatasetRecord>& manifest,
                                       const TrainConfig& cfg) {
    std::map<std::string, SourceGroup> by_id;
    for (const auto& rec : manifest) {
        if (!rec.filter_flags.kept) continue;
        const std::string sid = source_id_of(rec.id);
        by_id[sid].id = sid;
        by_id[sid].records.push_back(&rec);
    }
    std::vector<SourceGroup> groups;
    groups.reserve(by_id.size());
    for (auto& [sid, group] : by_id) {
        std::sort(group.records.begin(), group.records.end(),
                  [](const DatasetRecord* a, const DatasetRecord* b) {
                      return a->repeat_index < b->repeat_index;
                  });
        groups.push_back(std::move(group));
    }
    if (groups.empty()) {
        throw std::invalid_argument("train: no kept records in the manifest");
    }
    if (cfg.max_sources > 0 && static_cast<int>(groups.size()) > cfg.max_sources) {
        Rng rng = Rng::derive(cfg.seed, std::string("cap"));
        std::shuffle(groups.begin(), groups.end(), rng.engine());
        groups.resize(cfg.max_sources);
        std::sort(groups.begin(), groups.end(),
                  [](const SourceGroup& a, const SourceGroup& b) { return a.id < b.id; });
    }
    return groups;
}

void split_train_val(std::vector<SourceGroup>& groups, const TrainConfig& cfg,
                     std::vector<SourceGroup>& val) {
    const int n = static_cast<int>(groups.size());
    int n_val = 0;
    if (cfg.val_fraction > 0.0 && n > 1) {
        n_val = std::max(1, static_cast<int>(std::lround(cfg.val_fraction * n)));
        n_val = std::min(n_val, n - 1);
    }
    Rng rng = Rng::derive(cfg.seed, std::string("split"));
    std::shuffle(groups.begin(), groups.end(), rng.engine());
    val.assign(groups.end() - n_val, groups.end());
    groups.resize(n - n_val);
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ", ";
        out += id;
    }
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& epochs) {
    std::ofstream out(path);
    out << "epoch,train_total,main_l1,per_anchor_l1,subject_boundary,val_total,lr\n";
    for (const auto& m : epochs) {
        out << m.epoch << ',' << m.train_total << ',' << m.main_l1 << ',' << m.per_anchor_l1
            << ',' << m.subject_boundary << ',' << m.val_total << ',' << m.lr_last << '\n';
    }
}

nlohmann::json dataset_stats_for(const std::vector<SourceGroup>& train_groups,
                                 std::uint64_t seed) {
    double area_sum = 0.0;
    double view_area_sum = 0.0;  // label area within an enclosing view (geometry only)
    int count = 0;
    for (const auto& group : train_groups) {
        for (const DatasetRecord* rec : group.records) {
            area_sum += rec->pseudo_label.area();
            Rng rng = Rng::derive(seed, std::string("areastat"), rec->id);
            const ViewSpec view = sample_view_rect(rec->pseudo_label, rng);
            view_area_sum += rec->pseudo_label.area() / view.rect.area();
            ++count;
        }
    }
    return nlohmann::json{{"mean_label_area", count > 0 ? area_sum / count : 0.0},
                          {"mean_view_label_area", count > 0 ? view_area_sum / count : 0.0},
                          {"train_records", count},
                          {"train_sources", train_groups.size()}};
}

ag::Value ranking_score_on_tape(CropModel& model, nn::Ctx& ctx, const Image& canvas,
                                const Mask& mask, const CropRect& rect) {
    const PixelRect pr = to_pixels(rect, canvas.dims());
    Image crop = crop_image(canvas, pr);
    Mask cmask = crop_mask(mask, pr);
    return model.ranking_forward(ctx, preprocess(crop, &cmask, model.cfg));
}

}  // namespace

CropRect random_negative_crop(const CropRect& label, Rng& rng) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double a = rng.uniform(0.1, 0.9);
        const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
        const double w = std::sqrt(a * aspect);
        const double h = std::sqrt(a / aspect);
        if (w > 1.0 || h > 1.0) continue;
        const double x1 = rng.uniform(0.0, 1.0 - w);
        const double y1 = rng.uniform(0.0, 1.0 - h);
        CropRect cand(x1, y1, x1 + w, y1 + h);
        const bool same = std::abs(cand.x1 - label.x1) < 1e-9 &&
                          std::abs(cand.y1 - label.y1) < 1e-9 &&
                          std::abs(cand.x2 - label.x2) < 1e-9 &&
                          std::abs(cand.y2 - label.y2) < 1e-9;
        if (!same) return cand;
    }
    // label would have to occupy one exact rect for 100 straight rejections
    return CropRect(0.05, 0.05, 0.95, 0.95);
}

void TrainConfig::validate() const {
    if (epochs <= 0 || batch_size <= 0 || warmup_steps < 0) {
        throw std::invalid_argument("TrainConfig: counts must be positive");
    }
    if (lr <= 0.0 || weight_decay < 0.0) {
        throw std::invalid_argument("TrainConfig: lr must be positive");
    }
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
        throw std::invalid_argument("TrainConfig: val_fraction must be in [0,1)");
    }
}

TrainConfig ranking_defaults() {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 32;
    cfg.lr = 1e-4;
    cfg.warmup_steps = 0;
    return cfg;
}

std::string source_id_of(const std::string& record_id) {
    const std::size_t pos = record_id.rfind("_r");
    return pos == std::string::npos ? record_id : record_id.substr(0, pos);
}

Conditioning conditioning_from_label(const CropRect& label) {
    const double area = std::clamp(label.area(), 1e-6, 1.0);
    return Conditioning::make(area, label.height() / label.width());
}

void elastic_distort(Image& img, Mask* mask, double alpha, std::uint64_t seed) {
    const int w = img.width(), h = img.height();
    if (w < 2 || h < 2 || alpha <= 0.0) return;
    const int cell = std::max(8, std::min(w, h) / 4);
    const Plane dx = (value_noise(w, h, cell, hash_combine(seed, std::uint64_t{1})) - 0.5) *
                     (2.0 * alpha);
    const Plane dy = (value_noise(w, h, cell, hash_combine(seed, std::uint64_t{2})) - 0.5) *
                     (2.0 * alpha);

    auto sample = [&](const Plane& p, double sx, double sy) {
        sx = std::clamp(sx, 0.0, w - 1.0);
        sy = std::clamp(sy, 0.0, h - 1.0);
        const int x0 = std::min(static_cast<int>(sx), w - 2);
        const int y0 = std::min(static_cast<int>(sy), h - 2);
        const double tx = sx - x0, ty = sy - y0;
        return (1 - tx) * (1 - ty) * p(y0, x0) + tx * (1 - ty) * p(y0, x0 + 1) +
               (1 - tx) * ty * p(y0 + 1, x0) + tx * ty * p(y0 + 1, x0 + 1);
    };

    Image out = img;
    Mask mout;
    if (mask != nullptr) mout = *mask;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double sx = x + dx(y, x);
            const double sy = y + dy(y, x);
            for (int c = 0; c < img.channels(); ++c) {
                out.ch[c](y, x) = sample(img.ch[c], sx, sy);
            }
            if (mask != nullptr) {
                const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
                const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
                mout(y, x) = (*mask)(ny, nx);
            }
        }
    }
    img = std::move(out);
    if (mask != nullptr) *mask = std::move(mout);
}

void augment_pair(TrainingPair& pair, const AugmentConfig& cfg, Rng& rng) {
    Image& img = pair.view_image;
    if (cfg.color_jitter) {
        for (auto& plane : img.ch) {
            const double gain = 1.0 + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength);
            const double bias = rng.uniform(-cfg.jitter_strength, cfg.jitter_strength) * 0.5;
            plane = plane * gain + bias;
        }
        img.clamp01();
    }
    if (cfg.blur && rng.bernoulli(cfg.blur_prob)) {
        img = gaussian_blur(img, cfg.blur_sigma);
    }
    if (cfg.grayscale && rng.bernoulli(cfg.grayscale_prob)) {
        img = to_grayscale3(img);
    }
    if (cfg.elastic) {
        elastic_distort(img, &pair.view_subject.mask, cfg.elastic_alpha, rng.next_u64());
    }
    if (cfg.hflip && rng.bernoulli(cfg.hflip_prob)) {
        for (auto& plane : img.ch) plane = plane.rowwise().reverse().eval();
        pair.view_subject.mask = pair.view_subject.mask.rowwise().reverse().eval();
        const CropRect l = pair.label;
        pair.label = CropRect(1.0 - l.x2, l.y1, 1.0 - l.x1, l.y2);
        const CropRect b = pair.view_subject.bbox;
        pair.view_subject.bbox = CropRect(1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2);
    }
    if (cfg.bbox_jitter > 0.0) {
        const double j = cfg.bbox_jitter;
        CropRect b = pair.view_subject.bbox;
        double x1 = std::clamp(b.x1 + rng.uniform(-j, j), 0.0, 1.0);
        double y1 = std::clamp(b.y1 + rng.uniform(-j, j), 0.0, 1.0);
        double x2 = std::clamp(b.x2 + rng.uniform(-j, j), 0.0, 1.0);
        double y2 = std::clamp(b.y2 + rng.uniform(-j, j), 0.0, 1.0);
        if (x2 - x1 > 1e-6 && y2 - y1 > 1e-6) {
            pair.view_subject.bbox = CropRect(x1, y1, x2, y2);
        }
    }
}

TrainResult train(const std::vector<DatasetRecord>& manifest, const ModelConfig& model_cfg,
                  const TrainConfig& cfg) {
    cfg.validate();
    model_cfg.validate();
    if (model_cfg.variant == ModelVariant::Unet || model_cfg.variant == ModelVariant::Ranking) {
        throw std::invalid_argument("train: anchor-grid variants only; see train_ranking");
    }
    std::vector<SourceGroup> train_groups = group_sources(manifest, cfg);
    std::vector<SourceGroup> val_groups;
    split_train_val(train_groups, cfg, val_groups);

    TrainResult result{CropModel(model_cfg, hash_combine(cfg.seed, std::string("init")))};
    result.train_sources = static_cast<int>(train_groups.size());
    result.val_sources = static_cast<int>(val_groups.size());
    result.steps_per_epoch =
        (result.train_sources + cfg.batch_size - 1) / cfg.batch_size;
    CropModel& model = result.model;
    const bool conditional = model_cfg.variant == ModelVariant::Conditional;

    // validation views are fixed once so epoch losses are comparable
    std::vector<TrainingPair> val_pairs;
    for (const auto& group : val_groups) {
        const DatasetRecord* rec = group.records.front();
        Rng vr = Rng::derive(cfg.seed, std::string("valview"), rec->id);
        val_pairs.push_back(sample_enclosing_view(*rec, vr));
    }

    const int total_steps = cfg.epochs * result.steps_per_epoch;
    nn::AdamWConfig opt;
    opt.weight_decay = cfg.weight_decay;
    int step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    nn::ParamStore best_params;
    std::vector<int> order(train_groups.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng epoch_rng = Rng::derive(cfg.seed, std::string("order"), epoch);
        std::shuffle(order.begin(), order.end(), epoch_rng.engine());

        EpochMetrics metrics;
        metrics.epoch = epoch;
        int samples = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            model.params.zero_grads();
            std::vector<std::string> batch_ids;
            double batch_loss = 0.0;
            for (std::size_t k = start; k < stop; ++k) {
                const SourceGroup& group = train_groups[order[k]];
                Rng rng = Rng::derive(cfg.seed, std::string("sample"), epoch, group.id);
                const DatasetRecord* rec =
                    group.records[rng.uniform_int(0, static_cast<int>(group.records.size()) - 1)];
                batch_ids.push_back(rec->id);
                TrainingPair pair = sample_enclosing_view(*rec, rng);
                augment_pair(pair, cfg.augment, rng);

                ag::Tape tape;
                nn::Ctx ctx{tape, model.params, true, rng.next_u64()};
                ModelInput in = preprocess(pair.view_image, &pair.view_subject.mask, model_cfg);
                std::optional<Conditioning> cond;
                if (conditional) cond = conditioning_from_label(pair.label);
                ForwardOutput out = model.forward(ctx, in, pair.view_subject.bbox, cond);
                losses::LossBreakdown breakdown;
                ag::Value loss = losses::total_loss(out.blended_raw, out.proposals, pair.label,
                                                    pair.view_subject.bbox, cfg.loss_weights,
                                                    &breakdown);
                batch_loss = loss.scalar();
                if (!std::isfinite(batch_loss)) {
                    throw std::runtime_error("train: non-finite loss at epoch " +
                                             std::to_string(epoch) + ", batch records [" +
                                             join_ids(batch_ids) + "]");
                }
                metrics.train_total += breakdown.total;
                metrics.main_l1 += breakdown.main_l1;
                metrics.per_anchor_l1 += breakdown.per_anchor_l1;
                metrics.subject_boundary += breakdown.subject_boundary;
                ++samples;
                tape.backward(loss);
                tape.accumulate_param_grads(model.params.grads);
            }
            const double count = static_cast<double>(stop - start);
            for (auto& [name, g] : model.params.grads) g /= count;
            ++step;
            opt.lr = nn::cosine_warmup_lr(step, total_steps, cfg.warmup_steps, cfg.lr);
            metrics.lr_last = opt.lr;
            nn::adamw_step(model.params, opt, step);
        }
        metrics.train_total /= samples;
        metrics.main_l1 /= samples;
        metrics.per_anchor_l1 /= samples;
        metrics.subject_boundary /= samples;

        if (!val_pairs.empty()) {
            double val_total = 0.0;
            for (const auto& pair : val_pairs) {
                ag::Tape tape;
                nn::Ctx ctx{tape, model.params, false, 0};
                ModelInput in = preprocess(pair.view_image, &pair.view_subject.mask, model_cfg);
                std::optional<Conditioning> cond;
                if (conditional) cond = conditioning_from_label(pair.label);
                ForwardOutput out = model.forward(ctx, in, pair.view_subject.bbox, cond);
                val_total += losses::total_loss(out.blended_raw, out.proposals, pair.label,
                                                pair.view_subject.bbox, cfg.loss_weights)
                                 .scalar();
            }
            metrics.val_total = val_total / val_pairs.size();
        } else {
            metrics.val_total = metrics.train_total;
        }
        if (metrics.val_total < best_val) {
            best_val = metrics.val_total;
            best_params = model.params;
            result.best_epoch = epoch;
        }
        result.epochs.push_back(metrics);
    }
    result.best_val = best_val;
    model.params = std::move(best_params);

    if (!cfg.workdir.empty()) {
        fs::create_directories(cfg.workdir);
        result.checkpoint_path = (fs::path(cfg.workdir) / "model_best.json").string();
        save_model(result.checkpoint_path, model, dataset_stats_for(train_groups, cfg.seed));
        result.metrics_path = (fs::path(cfg.workdir) / "metrics.csv").string();
        write_metrics_csv(result.metrics_path, result.epochs);
    }
    return result;
}

RankingTrainResult train_ranking(const std::vector<DatasetRecord>& manifest,
                                 const ModelConfig& model_cfg, const TrainConfig& cfg) {
    cfg.validate();
    model_cfg.validate();
    if (model_cfg.variant != ModelVariant::Ranking) {
        throw std::invalid_argument("train_ranking: requires variant=ranking");
    }
    std::vector<SourceGroup> train_groups = group_sources(manifest, cfg);
    std::vector<SourceGroup> val_groups;
    split_train_val(train_groups, cfg, val_groups);

    RankingTrainResult result{CropModel(model_cfg, hash_combine(cfg.seed, std::string("rinit")))};
    CropModel& model = result.model;
    const int steps_per_epoch =
        (static_cast<int>(train_groups.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * steps_per_epoch;
    nn::AdamWConfig opt;
    opt.weight_decay = cfg.weight_decay;
    int step = 0;
    std::vector<int> order(train_groups.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng epoch_rng = Rng::derive(cfg.seed, std::string("rorder"), epoch);
        std::shuffle(order.begin(), order.end(), epoch_rng.engine());
        double epoch_loss = 0.0;
        int samples = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            model.params.zero_grads();
            std::vector<std::string> batch_ids;
            for (std::size_t k = start; k < stop; ++k) {
                const SourceGroup& group = train_groups[order[k]];
                Rng rng = Rng::derive(cfg.seed, std::string("rsample"), epoch, group.id);
                const DatasetRecord* rec =
                    group.records[rng.uniform_int(0, static_cast<int>(group.records.size()) - 1)];
                batch_ids.push_back(rec->id);
                Image canvas = load_png(rec->outpainted_path);
                Mask mask = load_mask_png(rec->subject_mask_path);
                const CropRect negative = random_negative_crop(rec->pseudo_label, rng);
                // one positive and one negative per source keeps classes 1:1
                const std::pair<CropRect, double> items[2] = {{rec->pseudo_label, 1.0},
                                                              {negative, 0.0}};
                for (const auto& [rect, target] : items) {
                    ag::Tape tape;
                    nn::Ctx ctx{tape, model.params, true, rng.next_u64()};
                    ag::Value score = ranking_score_on_tape(model, ctx, canvas, mask, rect);
                    ag::Value loss = losses::binary_ce(score, target);
                    const double lv = loss.scalar();
                    if (!std::isfinite(lv)) {
                        throw std::runtime_error("train_ranking: non-finite loss at epoch " +
                                                 std::to_string(epoch) + ", batch records [" +
                                                 join_ids(batch_ids) + "]");
                    }
                    epoch_loss += lv;
                    ++samples;
                    tape.backward(loss);
                    tape.accumulate_param_grads(model.params.grads);
                }
            }
            const double count = 2.0 * (stop - start);
            for (auto& [name, g] : model.params.grads) g /= count;
            ++step;
            opt.lr = nn::cosine_warmup_lr(step, total_steps, cfg.warmup_steps, cfg.lr);
            nn::adamw_step(model.params, opt, step);
        }
        result.epoch_loss.push_back(epoch_loss / std::max(1, samples));
    }

    int correct = 0, total = 0;
    for (const auto& group : val_groups) {
        const DatasetRecord* rec = group.records.front();
        Rng rng = Rng::derive(cfg.seed, std::string("rval"), rec->id);
        Image canvas = load_png(rec->outpainted_path);
        Mask mask = load_mask_png(rec->subject_mask_path);
        const CropRect negative = random_negative_crop(rec->pseudo_label, rng);
        const double pos = ranking_score(model, canvas, &mask, rec->pseudo_label);
        const double neg = ranking_score(model, canvas, &mask, negative);
        correct += pos > neg;
        ++total;
    }
    result.val_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;

    if (!cfg.workdir.empty()) {
        fs::create_directories(cfg.workdir);
        result.checkpoint_path = (fs::path(cfg.workdir) / "model_ranking.json").string();
        save_model(result.checkpoint_path, model,
                   nlohmann::json{{"val_accuracy", result.val_accuracy}});
    }
    return result;
}

}  // namespace gencrop
