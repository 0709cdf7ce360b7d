#include "a4unet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace a4 {

std::string to_string(DatasetLayout layout) {
    switch (layout) {
        case DatasetLayout::brats2019: return "brats2019";
        case DatasetLayout::brats2020: return "brats2020";
        case DatasetLayout::brats2021: return "brats2021";
        case DatasetLayout::flat: return "flat";
    }
    return "flat";
}

std::string to_string(LabelPolicy policy) {
    return policy == LabelPolicy::whole_tumor_binary ? "whole_tumor_binary" : "raw_labels";
}

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

DatasetLayout layout_from_string(const std::string& s) {
    if (s == "brats2019") return DatasetLayout::brats2019;
    if (s == "brats2020") return DatasetLayout::brats2020;
    if (s == "brats2021") return DatasetLayout::brats2021;
    if (s == "flat") return DatasetLayout::flat;
    throw ConfigError("unknown dataset layout '" + s + "' (brats2019|brats2020|brats2021|flat)");
}

LabelPolicy policy_from_string(const std::string& s) {
    if (s == "whole_tumor_binary") return LabelPolicy::whole_tumor_binary;
    if (s == "raw_labels") return LabelPolicy::raw_labels;
    throw ConfigError("unknown label policy '" + s + "' (whole_tumor_binary|raw_labels)");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw ConfigError("unknown split '" + s + "'");
}

std::vector<std::string> default_modalities(DatasetLayout layout) {
    if (layout == DatasetLayout::brats2021) return {"t1n", "t1c", "t2w", "t2f"};
    return {"flair", "t1ce", "t1", "t2"};
}

std::vector<const VolumeRecord*> DatasetManifest::split_records(Split s) const {
    std::vector<const VolumeRecord*> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(&r);
    return out;
}

namespace {

std::optional<std::string> find_file(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        fs::path p = dir / (stem + ext);
        if (fs::exists(p)) return p.string();
    }
    return std::nullopt;
}

std::vector<fs::path> subject_directories(const std::string& root, DatasetLayout layout) {
    const fs::path rp(root);
    if (!fs::exists(rp) || !fs::is_directory(rp)) throw DataError("dataset root " + root + " is not a directory");
    std::vector<fs::path> groups;
    if (layout == DatasetLayout::brats2019) {
        for (const char* grade : {"HGG", "LGG"})
            if (fs::is_directory(rp / grade)) groups.push_back(rp / grade);
        if (groups.empty()) groups.push_back(rp);  // already-flattened 2019 extracts
    } else {
        groups.push_back(rp);
    }
    std::vector<fs::path> subjects;
    for (const auto& g : groups)
        for (const auto& entry : fs::directory_iterator(g))
            if (entry.is_directory()) subjects.push_back(entry.path());
    std::sort(subjects.begin(), subjects.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    return subjects;
}

}  // namespace

DatasetManifest scan_dataset(const std::string& root, DatasetLayout layout, std::vector<std::string> modalities,
                             LabelPolicy policy) {
    DatasetManifest manifest;
    manifest.modalities = modalities.empty() ? default_modalities(layout) : std::move(modalities);
    manifest.label_policy = policy;

    const auto subjects = subject_directories(root, layout);
    if (subjects.empty()) throw DataError("no subjects found under " + root);

    std::vector<std::string> issues;
    for (const auto& dir : subjects) {
        const std::string id = dir.filename().string();
        VolumeRecord rec;
        rec.subject_id = id;
        bool complete = true;
        for (const auto& mod : manifest.modalities) {
            auto p = find_file(dir, id + "_" + mod);
            if (!p) {
                issues.push_back(id + ": missing modality '" + mod + "'");
                complete = false;
                continue;
            }
            rec.modality_paths[mod] = *p;
        }
        rec.label_path = find_file(dir, id + "_seg");
        if (!complete) continue;

        // header-level shape consistency
        int64_t nx = -1, ny = -1, nz = -1;
        bool shapes_ok = true;
        auto check = [&](const std::string& path, const std::string& what) {
            try {
                NiftiHeader h = read_nifti_header(path);
                if (nx < 0) {
                    nx = h.nx;
                    ny = h.ny;
                    nz = h.nz;
                } else if (h.nx != nx || h.ny != ny || h.nz != nz) {
                    issues.push_back(id + ": " + what + " shape " + std::to_string(h.nx) + "x" +
                                     std::to_string(h.ny) + "x" + std::to_string(h.nz) + " differs from " +
                                     std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz));
                    shapes_ok = false;
                }
            } catch (const DataError& e) {
                issues.push_back(id + ": " + e.what());
                shapes_ok = false;
            }
        };
        for (const auto& mod : manifest.modalities) check(rec.modality_paths.at(mod), mod);
        if (rec.label_path) check(*rec.label_path, "seg");
        if (!shapes_ok) continue;

        rec.depth = nz;
        rec.height = ny;
        rec.width = nx;
        manifest.records.push_back(std::move(rec));
    }

    if (!issues.empty()) {
        std::string msg = "dataset scan failed:";
        for (const auto& i : issues) msg += "\n  " + i;
        throw DataError(msg);
    }
    if (manifest.records.empty()) throw DataError("no subjects found under " + root);

    manifest.total_slices = 0;
    manifest.slices_per_volume = manifest.records.front().depth;
    for (const auto& r : manifest.records) {
        manifest.total_slices += r.depth;
        if (r.depth != manifest.slices_per_volume) manifest.slices_per_volume = 0;
    }
    return manifest;
}

LoadedVolume load_volume(const VolumeRecord& record, const std::vector<std::string>& modalities) {
    LoadedVolume vol;
    vol.channels = static_cast<int64_t>(modalities.size());
    bool first = true;
    int64_t c = 0;
    for (const auto& mod : modalities) {
        auto it = record.modality_paths.find(mod);
        if (it == record.modality_paths.end())
            throw DataError(record.subject_id + ": record has no path for modality '" + mod + "'");
        NiftiVolume nv = read_nifti(it->second);
        if (first) {
            vol.depth = nv.header.nz;
            vol.height = nv.header.ny;
            vol.width = nv.header.nx;
            vol.voxels.resize(static_cast<size_t>(vol.channels * vol.depth * vol.height * vol.width));
            vol.source_header = nv.header;
            vol.spacing_x = nv.header.pixdim[1];
            vol.spacing_y = nv.header.pixdim[2];
            first = false;
        } else if (nv.header.nz != vol.depth || nv.header.ny != vol.height || nv.header.nx != vol.width) {
            throw DataError(record.subject_id + ": modality '" + mod + "' shape " + std::to_string(nv.header.nx) +
                            "x" + std::to_string(nv.header.ny) + "x" + std::to_string(nv.header.nz) +
                            " does not match " + std::to_string(vol.width) + "x" + std::to_string(vol.height) +
                            "x" + std::to_string(vol.depth));
        }
        // NIfTI stores x fastest; an axial slice is one contiguous z-plane
        std::copy(nv.data.begin(), nv.data.end(),
                  vol.voxels.begin() + static_cast<int64_t>(c) * vol.depth * vol.height * vol.width);
        ++c;
    }
    if (record.label_path) {
        NiftiVolume seg = read_nifti(*record.label_path);
        if (seg.header.nz != vol.depth || seg.header.ny != vol.height || seg.header.nx != vol.width)
            throw DataError(record.subject_id + ": label shape " + std::to_string(seg.header.nx) + "x" +
                            std::to_string(seg.header.ny) + "x" + std::to_string(seg.header.nz) +
                            " does not match image " + std::to_string(vol.width) + "x" +
                            std::to_string(vol.height) + "x" + std::to_string(vol.depth));
        vol.has_labels = true;
        vol.labels.resize(seg.data.size());
        for (size_t i = 0; i < seg.data.size(); ++i) vol.labels[i] = static_cast<int32_t>(std::lround(seg.data[i]));
    }
    return vol;
}

void normalize_volume(LoadedVolume& vol) {
    const int64_t per_mod = vol.depth * vol.height * vol.width;
    for (int64_t c = 0; c < vol.channels; ++c) {
        float* p = vol.voxels.data() + c * per_mod;
        double sum = 0.0, count = 0.0;
        for (int64_t i = 0; i < per_mod; ++i) {
            if (!std::isfinite(p[i])) throw DataError("non-finite voxel in modality " + std::to_string(c));
            if (p[i] != 0.0f) {
                sum += p[i];
                count += 1.0;
            }
        }
        if (count == 0.0) continue;  // all-zero modality passes through
        const double mean = sum / count;
        double ss = 0.0;
        for (int64_t i = 0; i < per_mod; ++i)
            if (p[i] != 0.0f) {
                const double d = p[i] - mean;
                ss += d * d;
            }
        const double stddev = std::sqrt(ss / count);
        for (int64_t i = 0; i < per_mod; ++i)
            if (p[i] != 0.0f) p[i] = stddev > 0.0 ? static_cast<float>((p[i] - mean) / stddev) : 0.0f;
    }
}

std::vector<SliceSample> slice_volume(const LoadedVolume& vol, LabelPolicy policy, const std::string& subject_id) {
    std::vector<SliceSample> out;
    out.reserve(static_cast<size_t>(vol.depth));
    const int64_t hw = vol.height * vol.width;
    for (int64_t z = 0; z < vol.depth; ++z) {
        SliceSample s;
        s.subject_id = subject_id;
        s.slice_index = z;
        s.height = vol.height;
        s.width = vol.width;
        s.image = Tensor({vol.channels, vol.height, vol.width});
        for (int64_t c = 0; c < vol.channels; ++c) {
            const float* src = vol.voxels.data() + (c * vol.depth + z) * hw;
            double* dst = s.image.data() + c * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = static_cast<double>(src[i]);
        }
        if (vol.has_labels) {
            s.mask.resize(static_cast<size_t>(hw));
            const int32_t* src = vol.labels.data() + z * hw;
            if (policy == LabelPolicy::whole_tumor_binary) {
                for (int64_t i = 0; i < hw; ++i) s.mask[static_cast<size_t>(i)] = src[i] > 0 ? 1 : 0;
            } else {
                std::copy(src, src + hw, s.mask.begin());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

void make_splits(DatasetManifest& manifest, uint64_t seed, double train_fraction, double val_fraction) {
    if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0 + 1e-12)
        throw DataError("split fractions exceed 1 (train " + std::to_string(train_fraction) + " + val " +
                        std::to_string(val_fraction) + ")");
    const int64_t n = static_cast<int64_t>(manifest.records.size());
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const int64_t n_train = static_cast<int64_t>(std::floor(train_fraction * static_cast<double>(n)));
    const bool exhaustive = train_fraction + val_fraction >= 1.0 - 1e-12;
    const int64_t n_val =
        exhaustive ? n - n_train : static_cast<int64_t>(std::floor(val_fraction * static_cast<double>(n)));
    if ((train_fraction > 0.0 && n_train == 0) || (val_fraction > 0.0 && n_val == 0))
        throw DataError("fewer subjects (" + std::to_string(n) + ") than splits requested");

    for (int64_t i = 0; i < n; ++i) {
        auto& rec = manifest.records[static_cast<size_t>(order[static_cast<size_t>(i)])];
        rec.split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    }
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    Json head{{"modalities", manifest.modalities},
              {"label_policy", to_string(manifest.label_policy)},
              {"slices_per_volume", manifest.slices_per_volume},
              {"total_slices", manifest.total_slices}};
    os << head.dump() << "\n";
    for (const auto& r : manifest.records) {
        Json mods = Json::object();
        for (const auto& mod : manifest.modalities) mods[mod] = r.modality_paths.at(mod);
        Json line{{"subject_id", r.subject_id}, {"split", to_string(r.split)},
                  {"depth", r.depth},           {"height", r.height},
                  {"width", r.width},           {"modalities", mods}};
        line["label"] = r.label_path ? Json(*r.label_path) : Json(nullptr);
        os << line.dump() << "\n";
    }
    if (!os) throw DataError("write failed for " + path);
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError(path + " is empty");
    Json head = Json::parse(line, nullptr, false);
    if (head.is_discarded()) throw DataError(path + ": bad manifest header");
    DatasetManifest m;
    m.modalities = head.value("modalities", std::vector<std::string>{});
    m.label_policy = policy_from_string(head.value("label_policy", std::string("whole_tumor_binary")));
    m.slices_per_volume = head.value("slices_per_volume", int64_t{0});
    m.total_slices = head.value("total_slices", int64_t{0});
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DataError(path + ": bad manifest record '" + line + "'");
        VolumeRecord r;
        r.subject_id = j.at("subject_id").get<std::string>();
        r.split = split_from_string(j.value("split", std::string("unassigned")));
        r.depth = j.value("depth", int64_t{0});
        r.height = j.value("height", int64_t{0});
        r.width = j.value("width", int64_t{0});
        for (auto it = j.at("modalities").begin(); it != j.at("modalities").end(); ++it)
            r.modality_paths[it.key()] = it.value().get<std::string>();
        if (j.contains("label") && !j.at("label").is_null()) r.label_path = j.at("label").get<std::string>();
        m.records.push_back(std::move(r));
    }
    return m;
}

namespace {

// source index range mapping for one axis: target t <- source t + off
struct AxisMap {
    int64_t src_begin, dst_begin, count;
};

AxisMap axis_map(int64_t src, int64_t dst) {
    if (src >= dst) {
        const int64_t off = (src - dst) / 2;
        return {off, 0, dst};
    }
    const int64_t off = (dst - src) / 2;
    return {0, off, src};
}

}  // namespace

Tensor center_crop_pad(const Tensor& image, int64_t target) {
    const int64_t c = image.size(0), h = image.size(1), w = image.size(2);
    if (h == target && w == target) return image;
    Tensor out({c, target, target});
    const AxisMap ym = axis_map(h, target), xm = axis_map(w, target);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < ym.count; ++y) {
            const double* src = image.data() + (ch * h + ym.src_begin + y) * w + xm.src_begin;
            double* dst = out.data() + (ch * target + ym.dst_begin + y) * target + xm.dst_begin;
            std::copy(src, src + xm.count, dst);
        }
    return out;
}

std::vector<int32_t> center_crop_pad_mask(const std::vector<int32_t>& mask, int64_t h, int64_t w, int64_t target) {
    if (h == target && w == target) return mask;
    std::vector<int32_t> out(static_cast<size_t>(target * target), 0);
    const AxisMap ym = axis_map(h, target), xm = axis_map(w, target);
    for (int64_t y = 0; y < ym.count; ++y)
        std::copy(mask.begin() + (ym.src_begin + y) * w + xm.src_begin,
                  mask.begin() + (ym.src_begin + y) * w + xm.src_begin + xm.count,
                  out.begin() + (ym.dst_begin + y) * target + xm.dst_begin);
    return out;
}

std::vector<uint8_t> restore_mask_frame(const std::vector<int64_t>& pred, int64_t target, int64_t h, int64_t w) {
    std::vector<uint8_t> out(static_cast<size_t>(h * w), 0);
    const AxisMap ym = axis_map(h, target), xm = axis_map(w, target);
    // axis_map describes original -> model grid; walk it backwards
    for (int64_t y = 0; y < ym.count; ++y)
        for (int64_t x = 0; x < xm.count; ++x)
            out[static_cast<size_t>((ym.src_begin + y) * w + xm.src_begin + x)] =
                static_cast<uint8_t>(pred[static_cast<size_t>((ym.dst_begin + y) * target + xm.dst_begin + x)]);
    return out;
}

}  // namespace a4
