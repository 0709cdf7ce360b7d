#pragma once

#include <cstdint>

namespace a4::kernels {

/// The heavy numeric loops come in two flavors: a plain serial reference and
/// an OpenMP version. The OpenMP code uses static schedules and per-slice
/// ownership only, so results are run-to-run deterministic for a fixed
/// thread count. The serial flavor is kept as the correctness baseline for
/// the parity tests and the benchmark tool.
enum class Backend { serial, openmp };

void set_backend(Backend b);
Backend active_backend();
const char* backend_name(Backend b);
int thread_count();

// ---------------------------------------------------------------------------
// Matrix products (row-major).
// ---------------------------------------------------------------------------

/// c[m,n] = a[m,k] * b[k,n]; accumulates into c when `accumulate` is set.
void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate = false);
/// c[m,n] = a[k,m]^T * b[k,n]
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate = false);
/// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate = false);

// ---------------------------------------------------------------------------
// Dense 2D convolution, NCHW.
// ---------------------------------------------------------------------------

struct ConvGeom {
    int64_t batch = 0;
    int64_t in_ch = 0, in_h = 0, in_w = 0;
    int64_t out_ch = 0;
    int64_t k_h = 0, k_w = 0;
    int64_t stride = 1;
    int64_t pad_h = 0, pad_w = 0;
    int64_t dilation = 1;
    int64_t groups = 1;

    int64_t out_h() const { return (in_h + 2 * pad_h - dilation * (k_h - 1) - 1) / stride + 1; }
    int64_t out_w() const { return (in_w + 2 * pad_w - dilation * (k_w - 1) - 1) / stride + 1; }
};

/// y[n, oc, oy, ox]; weight layout [out_ch, in_ch/groups, k_h, k_w]; bias may be null.
void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const ConvGeom& g);
/// dx += conv backward; dx must be pre-zeroed by the caller.
void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeom& g);
/// dw / db accumulate; caller pre-zeroes.
void conv2d_backward_weights(const double* x, const double* dy, double* dw, double* db, const ConvGeom& g);

// ---------------------------------------------------------------------------
// Deformable 2D convolution (stride 1), NCHW. Offsets hold per-tap (dy, dx)
// displacements in pixels: [batch, 2*k_h*k_w, H, W]; samples are read with
// bilinear interpolation and positions outside the image read as zero.
// ---------------------------------------------------------------------------

struct DeformGeom {
    int64_t batch = 0;
    int64_t in_ch = 0, in_h = 0, in_w = 0;
    int64_t out_ch = 0;
    int64_t k_h = 0, k_w = 0;
    int64_t pad_h = 0, pad_w = 0;
    int64_t dilation = 1;
    int64_t groups = 1;
    // stride fixed at 1: output spatial dims equal input dims when
    // pad = dilation*(k-1)/2, which is how the blocks use it.
    int64_t out_h() const { return in_h + 2 * pad_h - dilation * (k_h - 1); }
    int64_t out_w() const { return in_w + 2 * pad_w - dilation * (k_w - 1); }
};

void deform_conv2d_forward(const double* x, const double* offsets, const double* w, const double* bias,
                           double* y, const DeformGeom& g);
void deform_conv2d_backward_input(const double* dy, const double* offsets, const double* w, double* dx,
                                  const DeformGeom& g);
void deform_conv2d_backward_offsets(const double* x, const double* dy, const double* offsets, const double* w,
                                    double* doffsets, const DeformGeom& g);
void deform_conv2d_backward_weights(const double* x, const double* offsets, const double* dy, double* dw,
                                    double* db, const DeformGeom& g);

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false), NCHW.
// ---------------------------------------------------------------------------

void resize_bilinear_forward(const double* x, double* y, int64_t planes, int64_t in_h, int64_t in_w,
                             int64_t out_h, int64_t out_w);
/// dx accumulates; caller pre-zeroes.
void resize_bilinear_backward(const double* dy, double* dx, int64_t planes, int64_t in_h, int64_t in_w,
                              int64_t out_h, int64_t out_w);

// ---------------------------------------------------------------------------
// Row-wise softmax over the last dimension.
// ---------------------------------------------------------------------------

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
/// dx = y * (dy - sum(y*dy)) per row.
void softmax_backward_rows(const double* y, const double* dy, double* dx, int64_t rows, int64_t cols);

}  // namespace a4::kernels
