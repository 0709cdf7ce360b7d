#pragma once

#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "a4unet/nifti.hpp"
#include "a4unet/tensor.hpp"

namespace a4 {

using Json = nlohmann::ordered_json;

enum class DatasetLayout { brats2019, brats2020, brats2021, flat };
enum class LabelPolicy { whole_tumor_binary, raw_labels };
enum class Split { train, val, test, unassigned };

std::string to_string(DatasetLayout layout);
std::string to_string(LabelPolicy policy);
std::string to_string(Split split);
DatasetLayout layout_from_string(const std::string& s);
LabelPolicy policy_from_string(const std::string& s);
Split split_from_string(const std::string& s);

/// Modality names in stacking order for a layout.
std::vector<std::string> default_modalities(DatasetLayout layout);

struct VolumeRecord {
    std::string subject_id;
    std::map<std::string, std::string> modality_paths;
    std::optional<std::string> label_path;
    Split split = Split::unassigned;
    int64_t depth = 0, height = 0, width = 0;  // axial slices, in-plane dims
};

struct DatasetManifest {
    std::vector<VolumeRecord> records;
    std::vector<std::string> modalities;  // stacking order
    LabelPolicy label_policy = LabelPolicy::whole_tumor_binary;
    int64_t slices_per_volume = 0;  // common depth, 0 when volumes differ
    int64_t total_slices = 0;

    std::vector<const VolumeRecord*> split_records(Split s) const;
};

/// Walks a dataset tree, validates per-subject files and header shapes, and
/// returns records sorted by subject id. Missing files or inconsistent
/// shapes raise a DataError naming every offending subject.
DatasetManifest scan_dataset(const std::string& root, DatasetLayout layout,
                             std::vector<std::string> modalities = {},
                             LabelPolicy policy = LabelPolicy::whole_tumor_binary);

struct LoadedVolume {
    int64_t channels = 0, depth = 0, height = 0, width = 0;
    std::vector<float> voxels;        // [C, D, H, W]
    bool has_labels = false;
    std::vector<int32_t> labels;      // [D, H, W]
    NiftiHeader source_header;        // first modality, for write-back
    double spacing_y = 1.0, spacing_x = 1.0;

    float& at(int64_t c, int64_t z, int64_t y, int64_t x) {
        return voxels[static_cast<size_t>(((c * depth + z) * height + y) * width + x)];
    }
};

LoadedVolume load_volume(const VolumeRecord& record, const std::vector<std::string>& modalities);

/// Per-modality z-score over nonzero voxels; all-zero modalities pass
/// through; non-finite input raises a DataError.
void normalize_volume(LoadedVolume& vol);

struct SliceSample {
    Tensor image;               // [C, H, W]
    std::vector<int32_t> mask;  // H*W, empty when the volume has no labels
    std::string subject_id;
    int64_t slice_index = 0;
    int64_t height = 0, width = 0;
};

std::vector<SliceSample> slice_volume(const LoadedVolume& vol, LabelPolicy policy, const std::string& subject_id);

/// Subject-level split assignment, deterministic in `seed`.
void make_splits(DatasetManifest& manifest, uint64_t seed, double train_fraction, double val_fraction);

/// JSON-lines manifest: one header line, then one record per line.
void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

/// Center crop/pad of an [C, H, W] image (zero fill) to a square grid.
Tensor center_crop_pad(const Tensor& image, int64_t target);
std::vector<int32_t> center_crop_pad_mask(const std::vector<int32_t>& mask, int64_t h, int64_t w, int64_t target);
/// Inverse mapping for predictions: model-grid mask back to the original
/// H x W frame (cropped-away regions read as 0).
std::vector<uint8_t> restore_mask_frame(const std::vector<int64_t>& pred, int64_t target, int64_t h, int64_t w);

}  // namespace a4
