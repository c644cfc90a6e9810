#pragma once

#include "gencrop/backends.hpp"
#include "gencrop/geometry.hpp"
#include "gencrop/image.hpp"
#include "gencrop/rng.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace gencrop {

constexpr int kCanvasSize = 512;
constexpr int kManifestVersion = 1;

struct Placement {
    double area_fraction = 0.0;
    double scale = 0.0;  // applied to the source image
    int offset_x = 0;
    int offset_y = 0;
    int scaled_width = 0;
    int scaled_height = 0;
    bool longest_side_fallback = false;
};

struct FilterFlags {
    bool extra_subject = false;
    bool quality_reject = false;
    bool kept = true;
};

// One outpainted training sample plus provenance.
struct DatasetRecord {
    std::string id;
    std::string source_path;
    std::string outpainted_path;
    std::string subject_mask_path;
    std::string caption;
    bool caption_fallback = false;
    CropRect subject_bbox;      // post-outpaint, normalized to the canvas
    CropRect pseudo_label;      // the pasted original-image region
    Placement placement;
    int repeat_index = 0;
    FilterFlags filter_flags;
    std::uint64_t seed = 0;

    bool invariants_hold() const;
};

void to_json(nlohmann::json& j, const DatasetRecord& r);
void from_json(const nlohmann::json& j, DatasetRecord& r);

std::vector<DatasetRecord> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<DatasetRecord>& records);
void append_manifest_line(const std::string& path, const DatasetRecord& record);

struct DatagenConfig {
    std::string out_dir;
    std::string class_label = "shape";
    int amplify = 4;
    std::uint64_t seed = 0;
    int max_subjects = 5;
    double min_height_fraction = 0.1;
    double max_area_fraction = 0.8;
};

struct PrefilterResult {
    bool keep = false;
    std::string reason;  // too_many / too_small / too_large / no_subject
    int dominant = -1;   // index into detections when kept
};

PrefilterResult prefilter_source(const Image& image, const std::vector<Detection>& detections,
                                 const DatagenConfig& cfg);

Placement sample_canvas_placement(const ImageDims& src_dims, Rng& rng);

struct SourceImage {
    std::string id;
    std::string path;  // empty for in-memory sources
    Image image;
};

// Runs caption -> placement -> outpaint -> re-detect and writes the
// outpainted PNG and subject mask beside the manifest.
// Returns nullopt when no subject is found post-outpaint.
std::optional<DatasetRecord> generate_record(const SourceImage& source, const Backends& backends,
                                             int repeat_index, const DatagenConfig& cfg);

struct GenerateStats {
    int sources_seen = 0;
    int sources_discarded = 0;
    int records_written = 0;
    int records_skipped = 0;  // already present (restart)
    int records_failed = 0;   // no subject post-outpaint
};

// Amplified generation over a source list; restart-safe via existing ids.
GenerateStats generate_dataset(const std::vector<SourceImage>& sources, const Backends& backends,
                               const DatagenConfig& cfg, const std::string& manifest_path);

}  // namespace gencrop
