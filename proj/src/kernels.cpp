#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "a4unet/kernels.hpp"

namespace a4::kernels {

namespace serial_impl {
void matmul_nn(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void matmul_tn(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void matmul_nt(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void conv2d_forward(const double*, const double*, const double*, double*, const ConvGeom&);
void conv2d_backward_input(const double*, const double*, double*, const ConvGeom&);
void conv2d_backward_weights(const double*, const double*, double*, double*, const ConvGeom&);
void deform_conv2d_forward(const double*, const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_input(const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_offsets(const double*, const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_weights(const double*, const double*, const double*, double*, double*, const DeformGeom&);
void resize_bilinear_forward(const double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t);
void resize_bilinear_backward(const double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t);
void softmax_rows(const double*, double*, int64_t, int64_t);
void softmax_backward_rows(const double*, const double*, double*, int64_t, int64_t);
}  // namespace serial_impl

namespace omp_impl {
void matmul_nn(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void matmul_tn(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void matmul_nt(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
void conv2d_forward(const double*, const double*, const double*, double*, const ConvGeom&);
void conv2d_backward_input(const double*, const double*, double*, const ConvGeom&);
void conv2d_backward_weights(const double*, const double*, double*, double*, const ConvGeom&);
void deform_conv2d_forward(const double*, const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_input(const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_offsets(const double*, const double*, const double*, const double*, double*, const DeformGeom&);
void deform_conv2d_backward_weights(const double*, const double*, const double*, double*, double*, const DeformGeom&);
void resize_bilinear_forward(const double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t);
void resize_bilinear_backward(const double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t);
void softmax_rows(const double*, double*, int64_t, int64_t);
void softmax_backward_rows(const double*, const double*, double*, int64_t, int64_t);
}  // namespace omp_impl

namespace {
std::atomic<Backend> g_backend{Backend::openmp};
}

void set_backend(Backend b) { g_backend.store(b); }
Backend active_backend() { return g_backend.load(); }

const char* backend_name(Backend b) { return b == Backend::serial ? "serial" : "openmp"; }

int thread_count() {
#ifdef _OPENMP
    return active_backend() == Backend::openmp ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

#define A4_DISPATCH(fn, ...)                        \
    if (g_backend.load() == Backend::serial)       \
        serial_impl::fn(__VA_ARGS__);               \
    else                                            \
        omp_impl::fn(__VA_ARGS__)

void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
    A4_DISPATCH(matmul_nn, a, b, c, m, k, n, acc);
}
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
    A4_DISPATCH(matmul_tn, a, b, c, m, k, n, acc);
}
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool acc) {
    A4_DISPATCH(matmul_nt, a, b, c, m, k, n, acc);
}
void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const ConvGeom& g) {
    A4_DISPATCH(conv2d_forward, x, w, bias, y, g);
}
void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeom& g) {
    A4_DISPATCH(conv2d_backward_input, dy, w, dx, g);
}
void conv2d_backward_weights(const double* x, const double* dy, double* dw, double* db, const ConvGeom& g) {
    A4_DISPATCH(conv2d_backward_weights, x, dy, dw, db, g);
}
void deform_conv2d_forward(const double* x, const double* off, const double* w, const double* bias, double* y,
                           const DeformGeom& g) {
    A4_DISPATCH(deform_conv2d_forward, x, off, w, bias, y, g);
}
void deform_conv2d_backward_input(const double* dy, const double* off, const double* w, double* dx,
                                  const DeformGeom& g) {
    A4_DISPATCH(deform_conv2d_backward_input, dy, off, w, dx, g);
}
void deform_conv2d_backward_offsets(const double* x, const double* dy, const double* off, const double* w,
                                    double* doff, const DeformGeom& g) {
    A4_DISPATCH(deform_conv2d_backward_offsets, x, dy, off, w, doff, g);
}
void deform_conv2d_backward_weights(const double* x, const double* off, const double* dy, double* dw, double* db,
                                    const DeformGeom& g) {
    A4_DISPATCH(deform_conv2d_backward_weights, x, off, dy, dw, db, g);
}
void resize_bilinear_forward(const double* x, double* y, int64_t planes, int64_t ih, int64_t iw, int64_t oh,
                             int64_t ow) {
    A4_DISPATCH(resize_bilinear_forward, x, y, planes, ih, iw, oh, ow);
}
void resize_bilinear_backward(const double* dy, double* dx, int64_t planes, int64_t ih, int64_t iw, int64_t oh,
                              int64_t ow) {
    A4_DISPATCH(resize_bilinear_backward, dy, dx, planes, ih, iw, oh, ow);
}
void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
    A4_DISPATCH(softmax_rows, x, y, rows, cols);
}
void softmax_backward_rows(const double* y, const double* dy, double* dx, int64_t rows, int64_t cols) {
    A4_DISPATCH(softmax_backward_rows, y, dy, dx, rows, cols);
}

#undef A4_DISPATCH

}  // namespace a4::kernels
