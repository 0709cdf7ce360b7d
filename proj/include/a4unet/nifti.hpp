#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "a4unet/tensor.hpp"

namespace a4 {

/// Parsed NIfTI-1 header. The raw 348 bytes are kept (already byte-swapped
/// to native order when needed) so masks can be written back with the source
/// geometry.
struct NiftiHeader {
    std::array<char, 348> raw{};
    int64_t nx = 1, ny = 1, nz = 1, nt = 1;
    int16_t datatype = 0;
    int16_t bitpix = 0;
    double pixdim[4] = {1.0, 1.0, 1.0, 1.0};  // [0] unused, then x/y/z spacing
    double scl_slope = 0.0, scl_inter = 0.0;
    double vox_offset = 352.0;
    bool swapped = false;
};

/// One scalar volume; data in file order (x fastest, then y, then z),
/// scl_slope/scl_inter already applied.
struct NiftiVolume {
    NiftiHeader header;
    std::vector<float> data;  // nx*ny*nz

    float at(int64_t x, int64_t y, int64_t z) const {
        return data[static_cast<size_t>((z * header.ny + y) * header.nx + x)];
    }
};

/// Reads .nii or .nii.gz (zlib handles both transparently).
NiftiVolume read_nifti(const std::string& path);
/// Header-only read; cheap even on compressed files.
NiftiHeader read_nifti_header(const std::string& path);

NiftiHeader make_nifti_header(int64_t nx, int64_t ny, int64_t nz, double sx, double sy, double sz,
                              int16_t datatype);

void write_nifti_f32(const std::string& path, const NiftiHeader& header, const std::vector<float>& data);
void write_nifti_i16(const std::string& path, const NiftiHeader& header, const std::vector<int16_t>& data);
/// Writes a uint8 volume reusing `source` geometry (dims + pixdim + raw
/// header fields); used for predicted masks.
void write_nifti_u8(const std::string& path, const NiftiHeader& source, const std::vector<uint8_t>& data);

}  // namespace a4
