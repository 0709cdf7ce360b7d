#include "a4unet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace a4 {

namespace {

void check_same_size(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
    if (pred.size() != gt.size())
        throw ShapeError("mask size mismatch: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
}

}  // namespace

ConfusionCounts binary_confusion(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
    check_same_size(pred, gt);
    ConfusionCounts c;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

double dice(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
    check_same_size(pred, gt);
    for (size_t i = 0; i < pred.size(); ++i)
        if ((pred[i] != 0 && pred[i] != 1) || (gt[i] != 0 && gt[i] != 1))
            throw ShapeError("dice expects binary masks");
    const ConfusionCounts c = binary_confusion(pred, gt);
    const int64_t denom = c.fn + c.fp + 2 * c.tp;
    if (denom == 0) return 1.0;  // both masks empty: perfect agreement
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double miou(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int64_t k) {
    check_same_size(pred, gt);
    std::vector<int64_t> inter(static_cast<size_t>(k + 1), 0), in_pred(static_cast<size_t>(k + 1), 0),
        in_gt(static_cast<size_t>(k + 1), 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] > k || gt[i] < 0 || gt[i] > k)
            throw ShapeError("label out of range 0.." + std::to_string(k));
        ++in_pred[static_cast<size_t>(pred[i])];
        ++in_gt[static_cast<size_t>(gt[i])];
        if (pred[i] == gt[i]) ++inter[static_cast<size_t>(pred[i])];
    }
    double total = 0.0;
    for (int64_t c = 0; c <= k; ++c) {
        const int64_t uni = in_pred[static_cast<size_t>(c)] + in_gt[static_cast<size_t>(c)] - inter[static_cast<size_t>(c)];
        total += uni == 0 ? 1.0 : static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
    }
    return total / static_cast<double>(k + 1);
}

std::vector<std::pair<int64_t, int64_t>> boundary_pixels(const std::vector<int32_t>& mask, int64_t h, int64_t w) {
    std::vector<std::pair<int64_t, int64_t>> out;
    auto fg = [&](int64_t y, int64_t x) {
        return y >= 0 && y < h && x >= 0 && x < w && mask[static_cast<size_t>(y * w + x)] != 0;
    };
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (!fg(y, x)) continue;
            if (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)) out.emplace_back(y, x);
        }
    return out;
}

double percentile_value(std::vector<double> values, double q) {
    if (values.empty()) throw ShapeError("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values[0];
    const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(rank));
    const auto hi = static_cast<size_t>(std::ceil(rank));
    const double frac = rank - std::floor(rank);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared-distance transform over parabolas at positions pos[i]
// (Felzenszwalb & Huttenlocher), supporting anisotropic grids.
void sq_dist_1d(const std::vector<double>& f, const std::vector<double>& pos, std::vector<double>& out) {
    const int64_t n = static_cast<int64_t>(f.size());
    std::vector<int64_t> v(static_cast<size_t>(n));
    std::vector<double> z(static_cast<size_t>(n + 1));
    int64_t k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    auto intersect = [&](int64_t q, int64_t p) {
        return ((f[static_cast<size_t>(q)] + pos[static_cast<size_t>(q)] * pos[static_cast<size_t>(q)]) -
                (f[static_cast<size_t>(p)] + pos[static_cast<size_t>(p)] * pos[static_cast<size_t>(p)])) /
               (2.0 * pos[static_cast<size_t>(q)] - 2.0 * pos[static_cast<size_t>(p)]);
    };
    for (int64_t q = 1; q < n; ++q) {
        if (f[static_cast<size_t>(q)] == kInf) continue;
        if (k == 0 && f[v[0]] == kInf) {
            v[0] = q;
            continue;
        }
        double s = intersect(q, v[static_cast<size_t>(k)]);
        while (k > 0 && s <= z[static_cast<size_t>(k)]) {
            --k;
            s = intersect(q, v[static_cast<size_t>(k)]);
        }
        ++k;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = s;
        z[static_cast<size_t>(k + 1)] = kInf;
    }
    if (f[v[0]] == kInf) {  // the whole row is empty
        std::fill(out.begin(), out.end(), kInf);
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(j + 1)] < pos[static_cast<size_t>(q)]) ++j;
        const double d = pos[static_cast<size_t>(q)] - pos[static_cast<size_t>(v[static_cast<size_t>(j)])];
        out[static_cast<size_t>(q)] = d * d + f[v[static_cast<size_t>(j)]];
    }
}

// exact squared Euclidean distance (in mm^2) to the nearest seed pixel
std::vector<double> sq_dist_transform(const std::vector<std::pair<int64_t, int64_t>>& seeds, int64_t h, int64_t w,
                                      double sy, double sx) {
    std::vector<double> d(static_cast<size_t>(h * w), kInf);
    for (const auto& [y, x] : seeds) d[static_cast<size_t>(y * w + x)] = 0.0;

    std::vector<double> pos_x(static_cast<size_t>(w)), pos_y(static_cast<size_t>(h));
    for (int64_t x = 0; x < w; ++x) pos_x[static_cast<size_t>(x)] = static_cast<double>(x) * sx;
    for (int64_t y = 0; y < h; ++y) pos_y[static_cast<size_t>(y)] = static_cast<double>(y) * sy;

    std::vector<double> row(static_cast<size_t>(w)), row_out(static_cast<size_t>(w));
    for (int64_t y = 0; y < h; ++y) {
        std::copy(d.begin() + y * w, d.begin() + (y + 1) * w, row.begin());
        sq_dist_1d(row, pos_x, row_out);
        std::copy(row_out.begin(), row_out.end(), d.begin() + y * w);
    }
    std::vector<double> col(static_cast<size_t>(h)), col_out(static_cast<size_t>(h));
    for (int64_t x = 0; x < w; ++x) {
        for (int64_t y = 0; y < h; ++y) col[static_cast<size_t>(y)] = d[static_cast<size_t>(y * w + x)];
        sq_dist_1d(col, pos_y, col_out);
        for (int64_t y = 0; y < h; ++y) d[static_cast<size_t>(y * w + x)] = col_out[static_cast<size_t>(y)];
    }
    return d;
}

}  // namespace

std::optional<double> hd95(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int64_t h, int64_t w,
                           double spacing_y, double spacing_x, double q) {
    check_same_size(pred, gt);
    if (static_cast<int64_t>(pred.size()) != h * w) throw ShapeError("mask size does not match h*w");
    if (spacing_y <= 0.0 || spacing_x <= 0.0) throw ShapeError("pixel spacing must be positive");
    const auto a = boundary_pixels(pred, h, w);
    const auto b = boundary_pixels(gt, h, w);
    if (a.empty() || b.empty()) return std::nullopt;

    const auto dist_to_b = sq_dist_transform(b, h, w, spacing_y, spacing_x);
    const auto dist_to_a = sq_dist_transform(a, h, w, spacing_y, spacing_x);
    std::vector<double> da;
    da.reserve(a.size());
    for (const auto& [y, x] : a) da.push_back(std::sqrt(dist_to_b[static_cast<size_t>(y * w + x)]));
    std::vector<double> db;
    db.reserve(b.size());
    for (const auto& [y, x] : b) db.push_back(std::sqrt(dist_to_a[static_cast<size_t>(y * w + x)]));
    return std::max(percentile_value(std::move(da), q), percentile_value(std::move(db), q));
}

namespace {

double sample_std(const std::vector<double>& xs, double mean) {
    if (xs.size() < 2) return 0.0;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

MetricReport evaluate_dataset(A4Unet& model, const DatasetManifest& manifest, Split split, const EvalConfig& cfg) {
    const auto records = manifest.split_records(split);
    if (records.empty()) throw DataError("split '" + to_string(split) + "' is empty");
    const ModelConfig& mc = model.config();
    const int64_t size = mc.input_size;
    const int64_t k = mc.num_classes - 1;

    MetricReport report;
    for (const VolumeRecord* rec : records) {
        if (!rec->label_path) throw DataError(rec->subject_id + ": cannot evaluate without labels");
        LoadedVolume vol = load_volume(*rec, manifest.modalities);
        normalize_volume(vol);
        auto slices = slice_volume(vol, manifest.label_policy, rec->subject_id);

        std::vector<double> dscs, mious, hd95s;
        for (size_t s0 = 0; s0 < slices.size(); s0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t s1 = std::min(slices.size(), s0 + static_cast<size_t>(cfg.batch_size));
            const int64_t n = static_cast<int64_t>(s1 - s0);
            Tensor batch({n, vol.channels, size, size});
            std::vector<std::vector<int32_t>> masks(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) {
                const auto& sl = slices[s0 + static_cast<size_t>(i)];
                Tensor img = center_crop_pad(sl.image, size);
                std::copy(img.data(), img.data() + img.numel(), batch.data() + i * img.numel());
                masks[static_cast<size_t>(i)] = center_crop_pad_mask(sl.mask, sl.height, sl.width, size);
            }
            Tensor logits = model.infer(batch);
            const auto pred = argmax_over_channel(logits);
            const int64_t hw = size * size;
            for (int64_t i = 0; i < n; ++i) {
                std::vector<int32_t> p(static_cast<size_t>(hw));
                for (int64_t j = 0; j < hw; ++j) p[static_cast<size_t>(j)] = static_cast<int32_t>(pred[static_cast<size_t>(i * hw + j)]);
                const auto& g = masks[static_cast<size_t>(i)];
                std::vector<int32_t> pb(p), gb(g);
                for (auto& v : pb) v = v != 0 ? 1 : 0;
                for (auto& v : gb) v = v != 0 ? 1 : 0;
                dscs.push_back(dice(pb, gb));
                mious.push_back(miou(p, g, k));
                auto hd = hd95(pb, gb, size, size, vol.spacing_y, vol.spacing_x, cfg.percentile);
                if (hd) hd95s.push_back(*hd);
            }
        }

        CaseMetrics cm;
        cm.subject_id = rec->subject_id;
        cm.slices = static_cast<int64_t>(slices.size());
        cm.dsc = mean_of(dscs);
        cm.miou_value = mean_of(mious);
        if (!hd95s.empty())
            cm.hd95_mm = mean_of(hd95s);
        else
            ++report.hd95_undefined_count;
        report.per_case.push_back(std::move(cm));
    }

    std::vector<double> dscs, mious, hds;
    for (const auto& c : report.per_case) {
        dscs.push_back(c.dsc);
        mious.push_back(c.miou_value);
        if (c.hd95_mm) hds.push_back(*c.hd95_mm);
    }
    report.dsc_mean = mean_of(dscs);
    report.dsc_std = sample_std(dscs, report.dsc_mean);
    report.miou_mean = mean_of(mious);
    report.miou_std = sample_std(mious, report.miou_mean);
    if (!hds.empty()) {
        report.hd95_mean = mean_of(hds);
        report.hd95_std = sample_std(hds, *report.hd95_mean);
    }
    return report;
}

Json report_to_json(const MetricReport& report) {
    Json cases = Json::array();
    for (const auto& c : report.per_case) {
        Json jc{{"subject_id", c.subject_id}, {"dsc", c.dsc}, {"miou", c.miou_value}};
        jc["hd95_mm"] = c.hd95_mm ? Json(*c.hd95_mm) : Json(nullptr);
        jc["slices"] = c.slices;
        cases.push_back(std::move(jc));
    }
    Json agg{{"cases", static_cast<int64_t>(report.per_case.size())},
             {"dsc_mean", report.dsc_mean},
             {"dsc_std", report.dsc_std},
             {"miou_mean", report.miou_mean},
             {"miou_std", report.miou_std}};
    agg["hd95_mean"] = report.hd95_mean ? Json(*report.hd95_mean) : Json(nullptr);
    agg["hd95_std"] = report.hd95_std ? Json(*report.hd95_std) : Json(nullptr);
    agg["hd95_undefined_count"] = report.hd95_undefined_count;
    return Json{{"run", report.run_meta}, {"per_case", cases}, {"aggregate", agg}};
}

void write_report(const std::string& path, const MetricReport& report) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << report_to_json(report).dump(2) << "\n";
    if (!os) throw DataError("write failed for " + path);
}

std::string report_table(const MetricReport& report) {
    std::ostringstream os;
    os << "subject            dsc      miou     hd95_mm\n";
    auto line = [&](const std::string& id, double d, double m, const std::optional<double>& h) {
        char buf[160];
        if (h)
            std::snprintf(buf, sizeof(buf), "%-18s %.4f   %.4f   %.3f\n", id.c_str(), d, m, *h);
        else
            std::snprintf(buf, sizeof(buf), "%-18s %.4f   %.4f   undefined\n", id.c_str(), d, m);
        os << buf;
    };
    for (const auto& c : report.per_case) line(c.subject_id, c.dsc, c.miou_value, c.hd95_mm);
    line("mean", report.dsc_mean, report.miou_mean, report.hd95_mean);
    return os.str();
}

}  // namespace a4
