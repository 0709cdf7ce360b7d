#include "a4unet/nifti.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace a4 {

namespace {

constexpr int64_t kHeaderSize = 348;
constexpr int64_t kDataOffset = 352;

template <class T>
T byteswap_value(T v) {
    char* p = reinterpret_cast<char*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
}

struct RawView {
    const char* p;
    bool swap;
    int16_t i16(int64_t off) const {
        int16_t v;
        std::memcpy(&v, p + off, 2);
        return swap ? byteswap_value(v) : v;
    }
    int32_t i32(int64_t off) const {
        int32_t v;
        std::memcpy(&v, p + off, 4);
        return swap ? byteswap_value(v) : v;
    }
    float f32(int64_t off) const {
        float v;
        std::memcpy(&v, p + off, 4);
        return swap ? byteswap_value(v) : v;
    }
};

NiftiHeader parse_header(const char* raw, const std::string& path) {
    int32_t size_field;
    std::memcpy(&size_field, raw, 4);
    bool swap = false;
    if (size_field != kHeaderSize) {
        if (byteswap_value(size_field) == kHeaderSize)
            swap = true;
        else
            throw DataError(path + ": not a NIfTI-1 file (sizeof_hdr " + std::to_string(size_field) + ")");
    }
    RawView view{raw, swap};
    NiftiHeader h;
    std::memcpy(h.raw.data(), raw, kHeaderSize);
    h.swapped = swap;
    const int16_t ndim = view.i16(40);
    if (ndim < 1 || ndim > 7) throw DataError(path + ": bad dim[0] = " + std::to_string(ndim));
    auto dim_at = [&](int i) { return static_cast<int64_t>(view.i16(40 + 2 * i)); };
    h.nx = ndim >= 1 ? std::max<int64_t>(dim_at(1), 1) : 1;
    h.ny = ndim >= 2 ? std::max<int64_t>(dim_at(2), 1) : 1;
    h.nz = ndim >= 3 ? std::max<int64_t>(dim_at(3), 1) : 1;
    h.nt = ndim >= 4 ? std::max<int64_t>(dim_at(4), 1) : 1;
    if (h.nt != 1) throw DataError(path + ": expected a 3D volume, got nt = " + std::to_string(h.nt));
    h.datatype = view.i16(70);
    h.bitpix = view.i16(72);
    for (int i = 1; i <= 3; ++i) {
        const double pd = view.f32(76 + 4 * i);
        h.pixdim[i] = pd > 0.0 ? pd : 1.0;
    }
    h.vox_offset = view.f32(108);
    if (h.vox_offset < kHeaderSize) h.vox_offset = kDataOffset;
    h.scl_slope = view.f32(112);
    h.scl_inter = view.f32(116);
    const char* magic = raw + 344;
    if (std::strncmp(magic, "n+1", 3) != 0 && std::strncmp(magic, "ni1", 3) != 0)
        throw DataError(path + ": missing NIfTI magic");
    return h;
}

class GzFile {
public:
    GzFile(const std::string& path, const char* mode) : path_(path), f_(gzopen(path.c_str(), mode)) {
        if (!f_) throw DataError("cannot open " + path);
    }
    ~GzFile() {
        if (f_) gzclose(f_);
    }
    void read(void* dst, int64_t bytes) {
        const int got = gzread(f_, dst, static_cast<unsigned>(bytes));
        if (got != bytes) throw DataError(path_ + ": truncated read (" + std::to_string(got) + " of " +
                                          std::to_string(bytes) + " bytes)");
    }
    void skip(int64_t bytes) {
        if (bytes > 0 && gzseek(f_, bytes, SEEK_CUR) < 0) throw DataError(path_ + ": seek failed");
    }
    void write(const void* src, int64_t bytes) {
        if (gzwrite(f_, src, static_cast<unsigned>(bytes)) != bytes) throw DataError(path_ + ": write failed");
    }

private:
    std::string path_;
    gzFile f_;
};

template <class T>
void decode_into(GzFile& f, std::vector<float>& out, int64_t count, bool swap, double slope, double inter) {
    std::vector<T> buf(static_cast<size_t>(count));
    f.read(buf.data(), count * static_cast<int64_t>(sizeof(T)));
    for (int64_t i = 0; i < count; ++i) {
        T v = buf[static_cast<size_t>(i)];
        if (swap && sizeof(T) > 1) v = byteswap_value(v);
        double d = static_cast<double>(v);
        if (slope != 0.0 && !(slope == 1.0 && inter == 0.0)) d = d * slope + inter;
        out[static_cast<size_t>(i)] = static_cast<float>(d);
    }
}

}  // namespace

NiftiHeader read_nifti_header(const std::string& path) {
    GzFile f(path, "rb");
    char raw[kHeaderSize];
    f.read(raw, kHeaderSize);
    return parse_header(raw, path);
}

NiftiVolume read_nifti(const std::string& path) {
    GzFile f(path, "rb");
    char raw[kHeaderSize];
    f.read(raw, kHeaderSize);
    NiftiVolume vol;
    vol.header = parse_header(raw, path);
    const NiftiHeader& h = vol.header;
    f.skip(static_cast<int64_t>(h.vox_offset) - kHeaderSize);
    const int64_t count = h.nx * h.ny * h.nz;
    vol.data.resize(static_cast<size_t>(count));
    switch (h.datatype) {
        case 2:  // uint8
            decode_into<uint8_t>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 4:  // int16
            decode_into<int16_t>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 8:  // int32
            decode_into<int32_t>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 16:  // float32
            decode_into<float>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 64:  // float64
            decode_into<double>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 256:  // int8
            decode_into<int8_t>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        case 512:  // uint16
            decode_into<uint16_t>(f, vol.data, count, h.swapped, h.scl_slope, h.scl_inter);
            break;
        default:
            throw DataError(path + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
    }
    return vol;
}

NiftiHeader make_nifti_header(int64_t nx, int64_t ny, int64_t nz, double sx, double sy, double sz,
                              int16_t datatype) {
    NiftiHeader h;
    h.nx = nx;
    h.ny = ny;
    h.nz = nz;
    h.datatype = datatype;
    switch (datatype) {
        case 2:
        case 256:
            h.bitpix = 8;
            break;
        case 4:
        case 512:
            h.bitpix = 16;
            break;
        case 8:
        case 16:
            h.bitpix = 32;
            break;
        case 64:
            h.bitpix = 64;
            break;
        default:
            throw DataError("unsupported datatype for writing: " + std::to_string(datatype));
    }
    h.pixdim[1] = sx;
    h.pixdim[2] = sy;
    h.pixdim[3] = sz;
    h.vox_offset = kDataOffset;
    h.scl_slope = 1.0;
    h.scl_inter = 0.0;

    char* raw = h.raw.data();
    std::memset(raw, 0, kHeaderSize);
    const int32_t size = kHeaderSize;
    std::memcpy(raw, &size, 4);
    raw[38] = 'r';
    int16_t dims[8] = {3, static_cast<int16_t>(nx), static_cast<int16_t>(ny), static_cast<int16_t>(nz), 1, 1, 1, 1};
    std::memcpy(raw + 40, dims, 16);
    std::memcpy(raw + 70, &h.datatype, 2);
    std::memcpy(raw + 72, &h.bitpix, 2);
    float pixdim[8] = {1.0f, static_cast<float>(sx), static_cast<float>(sy), static_cast<float>(sz), 1, 1, 1, 1};
    std::memcpy(raw + 76, pixdim, 32);
    const float vox_offset = static_cast<float>(kDataOffset);
    std::memcpy(raw + 108, &vox_offset, 4);
    const float slope = 1.0f, inter = 0.0f;
    std::memcpy(raw + 112, &slope, 4);
    std::memcpy(raw + 116, &inter, 4);
    std::memcpy(raw + 344, "n+1\0", 4);
    return h;
}

namespace {

void write_raw(const std::string& path, const char* header, const void* data, int64_t bytes) {
    const char pad[4] = {0, 0, 0, 0};
    if (path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0) {
        GzFile f(path, "wb");
        f.write(header, kHeaderSize);
        f.write(pad, 4);
        f.write(data, bytes);
    } else {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open " + path + " for writing");
        os.write(header, kHeaderSize);
        os.write(pad, 4);
        os.write(static_cast<const char*>(data), bytes);
        if (!os) throw DataError("write failed for " + path);
    }
}

}  // namespace

void write_nifti_f32(const std::string& path, const NiftiHeader& header, const std::vector<float>& data) {
    if (static_cast<int64_t>(data.size()) != header.nx * header.ny * header.nz)
        throw DataError("data size does not match header dims for " + path);
    write_raw(path, header.raw.data(), data.data(), static_cast<int64_t>(data.size() * 4));
}

void write_nifti_i16(const std::string& path, const NiftiHeader& header, const std::vector<int16_t>& data) {
    if (static_cast<int64_t>(data.size()) != header.nx * header.ny * header.nz)
        throw DataError("data size does not match header dims for " + path);
    write_raw(path, header.raw.data(), data.data(), static_cast<int64_t>(data.size() * 2));
}

void write_nifti_u8(const std::string& path, const NiftiHeader& source, const std::vector<uint8_t>& data) {
    if (static_cast<int64_t>(data.size()) != source.nx * source.ny * source.nz)
        throw DataError("mask size does not match source dims for " + path);
    NiftiHeader h = make_nifti_header(source.nx, source.ny, source.nz, source.pixdim[1], source.pixdim[2],
                                      source.pixdim[3], /*uint8*/ 2);
    if (!source.swapped) {
        // carry the source orientation block (qform/sform) through verbatim
        std::memcpy(h.raw.data() + 252, source.raw.data() + 252, 344 - 252);
    }
    write_raw(path, h.raw.data(), data.data(), static_cast<int64_t>(data.size()));
}

}  // namespace a4
