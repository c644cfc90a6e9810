#include "gencrop/datagen.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

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

bool DatasetRecord::invariants_hold() const {
    if (!pseudo_label.is_valid() || !subject_bbox.is_valid()) return false;
    if (!subject_bbox.intersects(pseudo_label)) return false;
    if (filter_flags.kept && (filter_flags.extra_subject || filter_flags.quality_reject)) {
        return false;
    }
    return true;
}

void to_json(nlohmann::json& j, const DatasetRecord& r) {
    j = nlohmann::json{
        {"version", kManifestVersion},
        {"id", r.id},
        {"source_path", r.source_path},
        {"outpainted_path", r.outpainted_path},
        {"subject_mask_path", r.subject_mask_path},
        {"caption", r.caption},
        {"caption_fallback", r.caption_fallback},
        {"subject_bbox", rect_to_json(r.subject_bbox)},
        {"pseudo_label", rect_to_json(r.pseudo_label)},
        {"placement",
         {{"area_fraction", r.placement.area_fraction},
          {"scale", r.placement.scale},
          {"offset_x", r.placement.offset_x},
          {"offset_y", r.placement.offset_y},
          {"scaled_width", r.placement.scaled_width},
          {"scaled_height", r.placement.scaled_height},
          {"longest_side_fallback", r.placement.longest_side_fallback}}},
        {"repeat_index", r.repeat_index},
        {"filter_flags",
         {{"extra_subject", r.filter_flags.extra_subject},
          {"quality_reject", r.filter_flags.quality_reject},
          {"kept", r.filter_flags.kept}}},
        {"seed", r.seed},
    };
}

void from_json(const nlohmann::json& j, DatasetRecord& r) {
    r.id = j.at("id").get<std::string>();
    r.source_path = j.at("source_path").get<std::string>();
    r.outpainted_path = j.at("outpainted_path").get<std::string>();
    r.subject_mask_path = j.at("subject_mask_path").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    r.caption_fallback = j.at("caption_fallback").get<bool>();
    r.subject_bbox = rect_from_json(j.at("subject_bbox"));
    r.pseudo_label = rect_from_json(j.at("pseudo_label"));
    const auto& p = j.at("placement");
    r.placement.area_fraction = p.at("area_fraction").get<double>();
    r.placement.scale = p.at("scale").get<double>();
    r.placement.offset_x = p.at("offset_x").get<int>();
    r.placement.offset_y = p.at("offset_y").get<int>();
    r.placement.scaled_width = p.at("scaled_width").get<int>();
    r.placement.scaled_height = p.at("scaled_height").get<int>();
    r.placement.longest_side_fallback = p.at("longest_side_fallback").get<bool>();
    r.repeat_index = j.at("repeat_index").get<int>();
    const auto& f = j.at("filter_flags");
    r.filter_flags.extra_subject = f.at("extra_subject").get<bool>();
    r.filter_flags.quality_reject = f.at("quality_reject").get<bool>();
    r.filter_flags.kept = f.at("kept").get<bool>();
    r.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<DatasetRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
    std::vector<DatasetRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(nlohmann::json::parse(line).get<DatasetRecord>());
    }
    return records;
}

void write_manifest(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& r : records) {
        out << nlohmann::json(r).dump() << "\n";
    }
}

void append_manifest_line(const std::string& path, const DatasetRecord& record) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("append_manifest_line: cannot open " + path);
    out << nlohmann::json(record).dump() << "\n";
}

PrefilterResult prefilter_source(const Image& image, const std::vector<Detection>& detections,
                                 const DatagenConfig& cfg) {
    PrefilterResult res;
    if (detections.empty()) {
        res.reason = "no_subject";
        return res;
    }
    if (static_cast<int>(detections.size()) > cfg.max_subjects) {
        res.reason = "too_many";
        return res;
    }
    int dominant = 0;
    for (int i = 1; i < static_cast<int>(detections.size()); ++i) {
        if (detections[i].region.bbox.area() > detections[dominant].region.bbox.area()) {
            dominant = i;
        }
    }
    const CropRect& bbox = detections[dominant].region.bbox;
    if (bbox.height() < cfg.min_height_fraction) {
        res.reason = "too_small";
        return res;
    }
    if (bbox.area() > cfg.max_area_fraction) {
        res.reason = "too_large";
        return res;
    }
    res.keep = true;
    res.dominant = dominant;
    (void)image;
    return res;
}

Placement sample_canvas_placement(const ImageDims& src_dims, Rng& rng) {
    Placement p;
    p.area_fraction = rng.uniform(0.1, 0.5);
    const double canvas_area = static_cast<double>(kCanvasSize) * kCanvasSize;
    const double src_area = static_cast<double>(src_dims.width) * src_dims.height;
    p.scale = std::sqrt(p.area_fraction * canvas_area / src_area);
    int sw = std::max(1, static_cast<int>(std::lround(src_dims.width * p.scale)));
    int sh = std::max(1, static_cast<int>(std::lround(src_dims.height * p.scale)));
    if (sw > kCanvasSize || sh > kCanvasSize) {
        p.longest_side_fallback = true;
        p.scale = static_cast<double>(kCanvasSize) / std::max(src_dims.width, src_dims.height);
        sw = std::min(kCanvasSize, static_cast<int>(std::lround(src_dims.width * p.scale)));
        sh = std::min(kCanvasSize, static_cast<int>(std::lround(src_dims.height * p.scale)));
    }
    p.scaled_width = sw;
    p.scaled_height = sh;
    p.offset_x = rng.uniform_int(0, kCanvasSize - sw);
    p.offset_y = rng.uniform_int(0, kCanvasSize - sh);
    return p;
}

std::optional<DatasetRecord> generate_record(const SourceImage& source, const Backends& backends,
                                             int repeat_index, const DatagenConfig& cfg) {
    DatasetRecord rec;
    rec.id = source.id + "_r" + std::to_string(repeat_index);
    rec.source_path = source.path;
    rec.repeat_index = repeat_index;
    rec.seed = hash_combine(hash_combine(cfg.seed, source.id), static_cast<std::uint64_t>(repeat_index));
    Rng rng(rec.seed);

    try {
        rec.caption = backends.captioner->caption(source.image);
        if (rec.caption.empty()) rec.caption_fallback = true;
    } catch (const std::exception&) {
        // captionless outpainting degrades but functions; record the fallback
        rec.caption.clear();
        rec.caption_fallback = true;
    }

    rec.placement = sample_canvas_placement(source.image.dims(), rng);
    const Placement& p = rec.placement;

    Image canvas(kCanvasSize, kCanvasSize, 3, 0.5);
    Image scaled = resize_bilinear(source.image, p.scaled_width, p.scaled_height);
    paste(canvas, scaled, p.offset_x, p.offset_y);
    Mask valid = Mask::Zero(kCanvasSize, kCanvasSize);
    valid.block(p.offset_y, p.offset_x, p.scaled_height, p.scaled_width).setConstant(1);

    OutpaintRequest req;
    req.image = std::move(canvas);
    req.valid_mask = std::move(valid);
    req.prompt = rec.caption;
    req.seed = rec.seed;
    Image outpainted;
    try {
        outpainted = backends.outpainter->outpaint(req);
    } catch (const std::exception& e) {
        throw std::runtime_error("record " + rec.id + ": " + e.what());
    }

    rec.pseudo_label = CropRect(
        static_cast<double>(p.offset_x) / kCanvasSize, static_cast<double>(p.offset_y) / kCanvasSize,
        static_cast<double>(p.offset_x + p.scaled_width) / kCanvasSize,
        static_cast<double>(p.offset_y + p.scaled_height) / kCanvasSize);

    // Re-detect on the outpainted canvas; pick the largest detection that
    // intersects the pasted region.
    auto detections = backends.detector->detect(outpainted, cfg.class_label);
    const Detection* subject = nullptr;
    for (const auto& d : detections) {
        if (d.region.bbox.intersects(rec.pseudo_label)) {
            subject = &d;
            break;  // already sorted by area
        }
    }
    if (subject == nullptr) return std::nullopt;
    rec.subject_bbox = subject->region.bbox;

    const fs::path images_dir = fs::path(cfg.out_dir) / "images";
    fs::create_directories(images_dir);
    rec.outpainted_path = (images_dir / (rec.id + ".png")).string();
    rec.subject_mask_path = (images_dir / (rec.id + "_mask.png")).string();
    save_png(outpainted, rec.outpainted_path);
    save_mask_png(subject->region.mask, rec.subject_mask_path);
    return rec;
}

GenerateStats generate_dataset(const std::vector<SourceImage>& sources, const Backends& backends,
                               const DatagenConfig& cfg, const std::string& manifest_path) {
    GenerateStats stats;
    std::set<std::string> existing;
    if (fs::exists(manifest_path)) {
        for (const auto& r : read_manifest(manifest_path)) existing.insert(r.id);
    }
    fs::create_directories(fs::path(manifest_path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(manifest_path).parent_path());

    for (const auto& source : sources) {
        ++stats.sources_seen;
        auto detections = backends.detector->detect(source.image, cfg.class_label);
        auto pre = prefilter_source(source.image, detections, cfg);
        if (!pre.keep) {
            ++stats.sources_discarded;
            continue;
        }
        for (int repeat = 0; repeat < cfg.amplify; ++repeat) {
            const std::string id = source.id + "_r" + std::to_string(repeat);
            if (existing.count(id)) {
                ++stats.records_skipped;
                continue;
            }
            auto rec = generate_record(source, backends, repeat, cfg);
            if (!rec) {
                ++stats.records_failed;
                continue;
            }
            append_manifest_line(manifest_path, *rec);
            ++stats.records_written;
        }
    }
    return stats;
}

}  // namespace gencrop
