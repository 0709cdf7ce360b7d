#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "a4unet/dataset.hpp"
#include "a4unet/model.hpp"

namespace a4 {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

ConfusionCounts binary_confusion(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt);

/// DSC = 2TP / (FN + FP + 2TP); both masks empty -> 1.
double dice(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt);

/// Mean IoU over classes 0..k (background included). A class absent from
/// both masks contributes 1.
double miou(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int64_t k);

/// Boundary pixels: foreground with at least one 4-neighbor background
/// (outside the image counts as background).
std::vector<std::pair<int64_t, int64_t>> boundary_pixels(const std::vector<int32_t>& mask, int64_t h, int64_t w);

/// Linear-interpolation percentile of an unsorted sample (NumPy style).
double percentile_value(std::vector<double> values, double q);

/// Percentile Hausdorff distance between mask boundaries in millimetres:
/// max of the q-th percentiles of the two directed distance sets, exact
/// Euclidean distances via a two-pass distance transform scaled by the
/// pixel spacing. Either mask empty -> nullopt. q = 100 gives the exact
/// Hausdorff distance.
std::optional<double> hd95(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int64_t h, int64_t w,
                           double spacing_y = 1.0, double spacing_x = 1.0, double q = 95.0);

struct CaseMetrics {
    std::string subject_id;
    double dsc = 0.0;
    double miou_value = 0.0;
    std::optional<double> hd95_mm;
    int64_t slices = 0;
};

struct MetricReport {
    std::vector<CaseMetrics> per_case;
    double dsc_mean = 0.0, dsc_std = 0.0;
    double miou_mean = 0.0, miou_std = 0.0;
    std::optional<double> hd95_mean, hd95_std;
    int64_t hd95_undefined_count = 0;
    Json run_meta;
};

struct EvalConfig {
    int64_t batch_size = 8;
    double percentile = 95.0;
};

/// Slices every split subject through the model, scores per-slice, reduces
/// per subject (slice mean; HD95 over defined slices), then aggregates.
MetricReport evaluate_dataset(A4Unet& model, const DatasetManifest& manifest, Split split, const EvalConfig& cfg);

Json report_to_json(const MetricReport& report);
void write_report(const std::string& path, const MetricReport& report);
std::string report_table(const MetricReport& report);

}  // namespace a4
