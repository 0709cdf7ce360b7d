#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "a4unet/dataset.hpp"
#include "a4unet/nifti.hpp"
#include "synthetic_data.hpp"
#include "test_util.hpp"

using namespace a4;
using namespace a4::testutil;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

struct TempTree {
    std::string root;
    explicit TempTree(const std::string& tag) : root(unique_temp_dir(tag)) {}
    ~TempTree() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("nifti round trip") {
    TempTree tmp("nifti");
    SUBCASE("float32, gz and plain") {
        NiftiHeader hdr = make_nifti_header(3, 4, 5, 0.5, 2.0, 3.0, 16);
        std::vector<float> data(60);
        for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i) * 0.25f - 3.0f;
        for (const char* name : {"a.nii.gz", "b.nii"}) {
            const std::string path = tmp.root + "/" + name;
            write_nifti_f32(path, hdr, data);
            NiftiVolume v = read_nifti(path);
            CHECK(v.header.nx == 3);
            CHECK(v.header.ny == 4);
            CHECK(v.header.nz == 5);
            CHECK(v.header.pixdim[1] == doctest::Approx(0.5));
            CHECK(v.header.pixdim[2] == doctest::Approx(2.0));
            for (size_t i = 0; i < data.size(); ++i) CHECK(v.data[i] == doctest::Approx(data[i]));
        }
    }
    SUBCASE("int16 with scaling applied") {
        NiftiHeader hdr = make_nifti_header(2, 2, 2, 1, 1, 1, 4);
        const float slope = 2.0f, inter = 5.0f;
        std::memcpy(hdr.raw.data() + 112, &slope, 4);
        std::memcpy(hdr.raw.data() + 116, &inter, 4);
        std::vector<int16_t> data{0, 1, 2, 3, 4, 5, 6, 7};
        const std::string path = tmp.root + "/scaled.nii.gz";
        write_nifti_i16(path, hdr, data);
        NiftiVolume v = read_nifti(path);
        for (size_t i = 0; i < data.size(); ++i)
            CHECK(v.data[i] == doctest::Approx(static_cast<float>(data[i]) * 2.0f + 5.0f));
    }
    SUBCASE("uint8 mask keeps source geometry") {
        NiftiHeader src = make_nifti_header(4, 5, 6, 0.7, 0.8, 0.9, 16);
        std::vector<uint8_t> mask(120, 0);
        mask[7] = 1;
        const std::string path = tmp.root + "/mask.nii.gz";
        write_nifti_u8(path, src, mask);
        NiftiVolume v = read_nifti(path);
        CHECK(v.header.nx == 4);
        CHECK(v.header.pixdim[1] == doctest::Approx(0.7));
        CHECK(v.header.pixdim[3] == doctest::Approx(0.9));
        CHECK(v.data[7] == doctest::Approx(1.0f));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(read_nifti(tmp.root + "/missing.nii.gz"), DataError);
        const std::string junk = tmp.root + "/junk.nii";
        std::ofstream(junk) << "definitely not nifti data, padded to header size ........................";
        CHECK_THROWS_AS(read_nifti_header(junk), DataError);
    }
}

TEST_CASE("scan_dataset") {
    SUBCASE("flat blob tree") {
        TempTree tmp("scan");
        make_blob_tree(tmp.root, 3, default_modalities(DatasetLayout::flat), 24, 20, 5, 42);
        DatasetManifest m = scan_dataset(tmp.root, DatasetLayout::flat);
        REQUIRE(m.records.size() == 3);
        CHECK(m.records[0].subject_id == "sub000");
        CHECK(m.records[1].subject_id == "sub001");
        CHECK(m.total_slices == 15);
        CHECK(m.slices_per_volume == 5);
        CHECK(m.records[0].depth == 5);
        CHECK(m.records[0].height == 24);
        CHECK(m.records[0].width == 20);
        CHECK(m.records[0].label_path.has_value());

        // byte-identical manifests across rescans
        const std::string m1 = tmp.root + "/m1.jsonl", m2 = tmp.root + "/m2.jsonl";
        write_manifest(m1, m);
        write_manifest(m2, scan_dataset(tmp.root, DatasetLayout::flat));
        CHECK(read_file(m1) == read_file(m2));

        DatasetManifest back = read_manifest(m1);
        CHECK(back.records.size() == 3);
        CHECK(back.total_slices == 15);
        CHECK(back.slices_per_volume == 5);
        CHECK(back.records[2].modality_paths.size() == 4);
    }
    SUBCASE("2019 grade directories") {
        TempTree tmp("scan19");
        write_empty_subject(tmp.root + "/HGG/caseA", "caseA", default_modalities(DatasetLayout::brats2019), 6, 6, 3);
        write_empty_subject(tmp.root + "/LGG/caseB", "caseB", default_modalities(DatasetLayout::brats2019), 6, 6, 3);
        DatasetManifest m = scan_dataset(tmp.root, DatasetLayout::brats2019);
        REQUIRE(m.records.size() == 2);
        CHECK(m.total_slices == 6);
    }
    SUBCASE("missing modality is reported by name") {
        TempTree tmp("scanmiss");
        write_empty_subject(tmp.root + "/s1", "s1", {"flair", "t1ce", "t1", "t2"}, 6, 6, 2);
        fs::remove(tmp.root + "/s1/s1_t1ce.nii.gz");
        CHECK_THROWS_WITH_AS(scan_dataset(tmp.root, DatasetLayout::flat), doctest::Contains("t1ce"), DataError);
    }
    SUBCASE("empty root") {
        TempTree tmp("scanempty");
        CHECK_THROWS_WITH_AS(scan_dataset(tmp.root, DatasetLayout::flat), doctest::Contains("no subjects"),
                             DataError);
    }
    SUBCASE("header shape mismatch") {
        TempTree tmp("scanshape");
        write_empty_subject(tmp.root + "/s1", "s1", {"flair", "t1ce", "t1", "t2"}, 6, 6, 3);
        NiftiHeader odd = make_nifti_header(6, 6, 2, 1, 1, 1, 2);
        std::vector<uint8_t> zeros(72, 0);
        write_nifti_u8(tmp.root + "/s1/s1_t2.nii.gz", odd, zeros);
        CHECK_THROWS_WITH_AS(scan_dataset(tmp.root, DatasetLayout::flat), doctest::Contains("differs from"),
                             DataError);
    }
}

TEST_CASE("load_volume") {
    TempTree tmp("load");
    const auto mods = default_modalities(DatasetLayout::flat);
    write_blob_subject(tmp.root + "/s1", "s1", mods, 16, 12, 4, 7);
    DatasetManifest m = scan_dataset(tmp.root, DatasetLayout::flat);
    LoadedVolume vol = load_volume(m.records[0], m.modalities);
    CHECK(vol.channels == 4);
    CHECK(vol.depth == 4);
    CHECK(vol.height == 16);
    CHECK(vol.width == 12);
    CHECK(vol.has_labels);
    CHECK(vol.voxels.size() == 4u * 4u * 16u * 12u);
    CHECK(vol.labels.size() == 4u * 16u * 12u);

    SUBCASE("label-free record loads with no labels") {
        fs::remove(tmp.root + "/s1/s1_seg.nii.gz");
        DatasetManifest m2 = scan_dataset(tmp.root, DatasetLayout::flat);
        LoadedVolume v2 = load_volume(m2.records[0], m2.modalities);
        CHECK_FALSE(v2.has_labels);
    }
    SUBCASE("mismatched modality shape fails with both shapes named") {
        NiftiHeader odd = make_nifti_header(12, 16, 3, 1, 1, 1, 2);
        std::vector<uint8_t> zeros(static_cast<size_t>(12 * 16 * 3), 0);
        write_nifti_u8(tmp.root + "/s1/s1_t2.nii.gz", odd, zeros);
        VolumeRecord rec = m.records[0];  // pre-mismatch manifest still points at the files
        CHECK_THROWS_WITH_AS(load_volume(rec, m.modalities), doctest::Contains("does not match"), DataError);
    }
}

TEST_CASE("normalize_volume") {
    LoadedVolume vol;
    vol.channels = 2;
    vol.depth = 1;
    vol.height = 2;
    vol.width = 2;
    vol.voxels = {10, 20, 0, 0, /*second modality all zero*/ 0, 0, 0, 0};

    SUBCASE("z-score over nonzero voxels") {
        normalize_volume(vol);
        CHECK(vol.voxels[0] == doctest::Approx(-1.0));  // (10-15)/5
        CHECK(vol.voxels[1] == doctest::Approx(1.0));
        CHECK(vol.voxels[2] == 0.0f);
        for (int i = 4; i < 8; ++i) CHECK(vol.voxels[static_cast<size_t>(i)] == 0.0f);
    }
    SUBCASE("idempotent on normalized data") {
        normalize_volume(vol);
        LoadedVolume again = vol;
        normalize_volume(again);
        for (size_t i = 0; i < vol.voxels.size(); ++i)
            CHECK(std::fabs(again.voxels[i] - vol.voxels[i]) < 1e-6);
    }
    SUBCASE("non-finite input is rejected") {
        vol.voxels[1] = std::numeric_limits<float>::infinity();
        CHECK_THROWS_WITH_AS(normalize_volume(vol), doctest::Contains("non-finite"), DataError);
    }
    SUBCASE("normalization statistics invariant") {
        std::mt19937_64 rng(3);
        LoadedVolume big;
        big.channels = 1;
        big.depth = 2;
        big.height = 20;
        big.width = 20;
        big.voxels.resize(800);
        for (auto& v : big.voxels) {
            const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            v = u < 0.3 ? 0.0f : static_cast<float>(50.0 + 300.0 * u);
        }
        std::vector<bool> nz(big.voxels.size());
        for (size_t i = 0; i < big.voxels.size(); ++i) nz[i] = big.voxels[i] != 0.0f;
        normalize_volume(big);
        double sum = 0.0, count = 0.0;
        for (size_t i = 0; i < big.voxels.size(); ++i)
            if (nz[i]) {
                sum += big.voxels[i];
                count += 1.0;
            }
        const double mean = sum / count;
        double ss = 0.0;
        for (size_t i = 0; i < big.voxels.size(); ++i)
            if (nz[i]) ss += (big.voxels[i] - mean) * (big.voxels[i] - mean);
        const double stddev = std::sqrt(ss / count);
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(std::fabs(stddev - 1.0) < 1e-4);
    }
}

TEST_CASE("slice_volume") {
    LoadedVolume vol;
    vol.channels = 1;
    vol.depth = 3;
    vol.height = 2;
    vol.width = 2;
    vol.voxels.resize(12);
    for (size_t i = 0; i < 12; ++i) vol.voxels[i] = static_cast<float>(i);
    vol.has_labels = true;
    vol.labels = {0, 1, 2, 4, /*z1*/ 0, 0, 0, 0, /*z2*/ 4, 4, 0, 0};

    SUBCASE("one sample per axial slice, binarized") {
        auto slices = slice_volume(vol, LabelPolicy::whole_tumor_binary, "s");
        REQUIRE(slices.size() == 3);
        for (size_t z = 0; z < 3; ++z) CHECK(slices[z].slice_index == static_cast<int64_t>(z));
        CHECK(slices[0].mask == std::vector<int32_t>({0, 1, 1, 1}));
        CHECK(slices[1].mask == std::vector<int32_t>({0, 0, 0, 0}));
        CHECK(slices[2].mask == std::vector<int32_t>({1, 1, 0, 0}));
        CHECK(slices[1].image.at({0, 1, 1}) == doctest::Approx(7.0));
    }
    SUBCASE("raw labels pass through") {
        auto slices = slice_volume(vol, LabelPolicy::raw_labels, "s");
        CHECK(slices[0].mask == std::vector<int32_t>({0, 1, 2, 4}));
    }
    SUBCASE("slice count conservation across a tree") {
        TempTree tmp("conserve");
        make_blob_tree(tmp.root, 2, {"t1", "t2"}, 10, 10, 7, 11);
        DatasetManifest m = scan_dataset(tmp.root, DatasetLayout::flat, {"t1", "t2"});
        int64_t emitted = 0;
        for (const auto& r : m.records) {
            LoadedVolume v = load_volume(r, m.modalities);
            emitted += static_cast<int64_t>(slice_volume(v, m.label_policy, r.subject_id).size());
        }
        CHECK(emitted == m.total_slices);
    }
    SUBCASE("single-slice volume") {
        vol.depth = 1;
        vol.voxels.resize(4);
        vol.labels.resize(4);
        CHECK(slice_volume(vol, LabelPolicy::whole_tumor_binary, "s").size() == 1);
    }
}

TEST_CASE("make_splits") {
    auto fake_manifest = [](int64_t n) {
        DatasetManifest m;
        for (int64_t i = 0; i < n; ++i) {
            VolumeRecord r;
            r.subject_id = "s" + std::to_string(1000 + i);
            m.records.push_back(r);
        }
        return m;
    };

    SUBCASE("deterministic 8/2 split") {
        DatasetManifest a = fake_manifest(10), b = fake_manifest(10);
        make_splits(a, 7, 0.8, 0.2);
        make_splits(b, 7, 0.8, 0.2);
        int64_t train = 0, val = 0;
        for (size_t i = 0; i < a.records.size(); ++i) {
            CHECK(a.records[i].split == b.records[i].split);
            if (a.records[i].split == Split::train) ++train;
            if (a.records[i].split == Split::val) ++val;
        }
        CHECK(train == 8);
        CHECK(val == 2);
    }
    SUBCASE("194 subjects split 155/39") {
        DatasetManifest m = fake_manifest(194);
        make_splits(m, 1, 0.8, 0.2);
        int64_t train = 0, val = 0;
        for (const auto& r : m.records) {
            if (r.split == Split::train) ++train;
            if (r.split == Split::val) ++val;
        }
        CHECK(train == 155);
        CHECK(val == 39);
    }
    SUBCASE("fractions over one are rejected") {
        DatasetManifest m = fake_manifest(10);
        CHECK_THROWS_WITH_AS(make_splits(m, 1, 0.8, 0.3), doctest::Contains("exceed 1"), DataError);
    }
    SUBCASE("fewer subjects than splits") {
        DatasetManifest m = fake_manifest(1);
        CHECK_THROWS_WITH_AS(make_splits(m, 1, 0.5, 0.5), doctest::Contains("fewer subjects"), DataError);
    }
    SUBCASE("subject-level purity") {
        DatasetManifest m = fake_manifest(25);
        make_splits(m, 3, 0.6, 0.2);
        std::map<std::string, Split> seen;
        for (const auto& r : m.records) {
            auto [it, inserted] = seen.emplace(r.subject_id, r.split);
            CHECK(inserted);  // each subject appears once, in one split
        }
    }
}

TEST_CASE("center crop and pad") {
    Tensor img({1, 4, 6});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(i);

    SUBCASE("crop") {
        Tensor out = center_crop_pad(img, 2);
        CHECK(out.shape() == std::vector<int64_t>({1, 2, 2}));
        CHECK(out.at({0, 0, 0}) == img.at({0, 1, 2}));
        CHECK(out.at({0, 1, 1}) == img.at({0, 2, 3}));
    }
    SUBCASE("pad") {
        Tensor out = center_crop_pad(img, 8);
        CHECK(out.shape() == std::vector<int64_t>({1, 8, 8}));
        CHECK(out.at({0, 0, 0}) == 0.0);
        CHECK(out.at({0, 2, 1}) == img.at({0, 0, 0}));
        CHECK(out.at({0, 5, 6}) == img.at({0, 3, 5}));
    }
    SUBCASE("mask round trip through the model frame") {
        std::vector<int32_t> mask(4 * 6, 0);
        mask[1 * 6 + 2] = 1;
        mask[2 * 6 + 3] = 1;
        auto cropped = center_crop_pad_mask(mask, 4, 6, 8);
        std::vector<int64_t> pred(cropped.begin(), cropped.end());
        auto restored = restore_mask_frame(pred, 8, 4, 6);
        for (size_t i = 0; i < mask.size(); ++i) CHECK(static_cast<int32_t>(restored[i]) == mask[i]);
    }
}
