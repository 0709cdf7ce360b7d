#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "a4unet/nifti.hpp"

namespace a4::testutil {

/// One synthetic subject: a bright "brain" disc per modality with an
/// elliptical tumor blob per slice, plus the matching segmentation.
/// Labels use the BraTS-style set {1, 2, 4} so whole-tumor binarization has
/// something to collapse.
inline void write_blob_subject(const std::string& dir, const std::string& id,
                               const std::vector<std::string>& modalities, int64_t h, int64_t w, int64_t depth,
                               uint64_t seed, double sx = 1.0, double sy = 1.0, double sz = 1.0) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(-0.15, 0.15);
    std::uniform_real_distribution<double> noise(0.0, 20.0);

    const int64_t hw = h * w;
    std::vector<int16_t> seg(static_cast<size_t>(depth * hw), 0);
    std::vector<std::vector<int16_t>> mods(modalities.size(),
                                           std::vector<int16_t>(static_cast<size_t>(depth * hw), 0));

    const double cy0 = static_cast<double>(h) / 2.0, cx0 = static_cast<double>(w) / 2.0;
    const double brain_r = 0.42 * static_cast<double>(std::min(h, w));
    for (int64_t z = 0; z < depth; ++z) {
        const double ty = cy0 * (1.0 + jitter(rng));
        const double tx = cx0 * (1.0 + jitter(rng));
        const double ra = 0.10 * static_cast<double>(std::min(h, w)) * (1.0 + 0.5 * std::fabs(jitter(rng)) * 4.0);
        const double rb = 0.7 * ra + 0.5;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const double dy = static_cast<double>(y) - cy0, dx = static_cast<double>(x) - cx0;
                const bool brain = dy * dy + dx * dx <= brain_r * brain_r;
                if (!brain) continue;
                const double uy = (static_cast<double>(y) - ty) / ra, ux = (static_cast<double>(x) - tx) / rb;
                const double q = uy * uy + ux * ux;
                for (size_t m = 0; m < modalities.size(); ++m) {
                    double v = 300.0 + 60.0 * static_cast<double>(m) + noise(rng);
                    if (q <= 1.0) v += 220.0 + 40.0 * static_cast<double>(m);
                    mods[m][static_cast<size_t>(z * hw + y * w + x)] = static_cast<int16_t>(v);
                }
                if (q <= 0.25)
                    seg[static_cast<size_t>(z * hw + y * w + x)] = 4;  // enhancing core
                else if (q <= 0.7)
                    seg[static_cast<size_t>(z * hw + y * w + x)] = 1;  // necrotic
                else if (q <= 1.0)
                    seg[static_cast<size_t>(z * hw + y * w + x)] = 2;  // edema
            }
        }
    }
    NiftiHeader hdr = make_nifti_header(w, h, depth, sx, sy, sz, /*int16*/ 4);
    for (size_t m = 0; m < modalities.size(); ++m)
        write_nifti_i16(dir + "/" + id + "_" + modalities[m] + ".nii.gz", hdr, mods[m]);
    write_nifti_i16(dir + "/" + id + "_seg.nii.gz", hdr, seg);
}

/// Flat tree of blob subjects; returns the root.
inline std::string make_blob_tree(const std::string& root, int64_t subjects,
                                  const std::vector<std::string>& modalities, int64_t h, int64_t w, int64_t depth,
                                  uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    for (int64_t s = 0; s < subjects; ++s) {
        char id[32];
        std::snprintf(id, sizeof(id), "sub%03lld", static_cast<long long>(s));
        write_blob_subject(root + "/" + id, id, modalities, h, w, depth, seed + static_cast<uint64_t>(s));
    }
    return root;
}

/// Minimal all-zero volumes, for scans where only headers matter.
inline void write_empty_subject(const std::string& dir, const std::string& id,
                                const std::vector<std::string>& modalities, int64_t h, int64_t w, int64_t depth) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    NiftiHeader hdr = make_nifti_header(w, h, depth, 1.0, 1.0, 1.0, /*uint8*/ 2);
    std::vector<uint8_t> zeros(static_cast<size_t>(h * w * depth), 0);
    for (const auto& m : modalities) write_nifti_u8(dir + "/" + id + "_" + m + ".nii.gz", hdr, zeros);
    write_nifti_u8(dir + "/" + id + "_seg.nii.gz", hdr, zeros);
}

inline std::string unique_temp_dir(const std::string& tag) {
    namespace fs = std::filesystem;
    static std::atomic<uint64_t> counter{0};
    fs::path p = fs::temp_directory_path() /
                 ("a4unet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(p);
    return p.string();
}

}  // namespace a4::testutil
