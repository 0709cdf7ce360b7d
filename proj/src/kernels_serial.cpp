#include <cmath>

#include "a4unet/kernels.hpp"

// Reference implementations: plain loops, no tiling, no threading. These
// define the semantics the OpenMP backend is tested against.

namespace a4::kernels::serial_impl {

void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = accumulate ? c[i * n + j] : 0.0;
            for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = accumulate ? c[i * n + j] : 0.0;
            for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = accumulate ? c[i * n + j] : 0.0;
            for (int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
    }
}

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const ConvGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    for (int64_t n = 0; n < g.batch; ++n) {
        for (int64_t oc = 0; oc < g.out_ch; ++oc) {
            const int64_t grp = oc / ocg;
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = bias ? bias[oc] : 0.0;
                    for (int64_t ic = 0; ic < icg; ++ic) {
                        const double* xp = x + ((n * g.in_ch + grp * icg + ic) * g.in_h) * g.in_w;
                        const double* wp = w + ((oc * icg + ic) * g.k_h) * g.k_w;
                        for (int64_t ky = 0; ky < g.k_h; ++ky) {
                            const int64_t iy = oy * g.stride - g.pad_h + ky * g.dilation;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (int64_t kx = 0; kx < g.k_w; ++kx) {
                                const int64_t ix = ox * g.stride - g.pad_w + kx * g.dilation;
                                if (ix < 0 || ix >= g.in_w) continue;
                                acc += wp[ky * g.k_w + kx] * xp[iy * g.in_w + ix];
                            }
                        }
                    }
                    y[((n * g.out_ch + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    // gather form: every input pixel sums the output positions it fed
    for (int64_t n = 0; n < g.batch; ++n) {
        for (int64_t ic = 0; ic < g.in_ch; ++ic) {
            const int64_t grp = ic / icg, icl = ic % icg;
            for (int64_t iy = 0; iy < g.in_h; ++iy) {
                for (int64_t ix = 0; ix < g.in_w; ++ix) {
                    double acc = 0.0;
                    for (int64_t ky = 0; ky < g.k_h; ++ky) {
                        const int64_t ty = iy + g.pad_h - ky * g.dilation;
                        if (ty < 0 || ty % g.stride != 0) continue;
                        const int64_t oy = ty / g.stride;
                        if (oy >= oh) continue;
                        for (int64_t kx = 0; kx < g.k_w; ++kx) {
                            const int64_t tx = ix + g.pad_w - kx * g.dilation;
                            if (tx < 0 || tx % g.stride != 0) continue;
                            const int64_t ox = tx / g.stride;
                            if (ox >= ow) continue;
                            for (int64_t oc = grp * ocg; oc < (grp + 1) * ocg; ++oc) {
                                acc += dy[((n * g.out_ch + oc) * oh + oy) * ow + ox] *
                                       w[((oc * icg + icl) * g.k_h + ky) * g.k_w + kx];
                            }
                        }
                    }
                    dx[((n * g.in_ch + ic) * g.in_h + iy) * g.in_w + ix] += acc;
                }
            }
        }
    }
}

void conv2d_backward_weights(const double* x, const double* dy, double* dw, double* db, const ConvGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    for (int64_t oc = 0; oc < g.out_ch; ++oc) {
        const int64_t grp = oc / ocg;
        for (int64_t ic = 0; ic < icg; ++ic) {
            for (int64_t ky = 0; ky < g.k_h; ++ky) {
                for (int64_t kx = 0; kx < g.k_w; ++kx) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < g.batch; ++n) {
                        const double* xp = x + ((n * g.in_ch + grp * icg + ic) * g.in_h) * g.in_w;
                        const double* dyp = dy + ((n * g.out_ch + oc) * oh) * ow;
                        for (int64_t oy = 0; oy < oh; ++oy) {
                            const int64_t iy = oy * g.stride - g.pad_h + ky * g.dilation;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (int64_t ox = 0; ox < ow; ++ox) {
                                const int64_t ix = ox * g.stride - g.pad_w + kx * g.dilation;
                                if (ix < 0 || ix >= g.in_w) continue;
                                acc += dyp[oy * ow + ox] * xp[iy * g.in_w + ix];
                            }
                        }
                    }
                    dw[((oc * icg + ic) * g.k_h + ky) * g.k_w + kx] += acc;
                }
            }
        }
    }
    if (db) {
        for (int64_t oc = 0; oc < g.out_ch; ++oc) {
            double acc = 0.0;
            for (int64_t n = 0; n < g.batch; ++n) {
                const double* dyp = dy + ((n * g.out_ch + oc) * oh) * ow;
                for (int64_t p = 0; p < oh * ow; ++p) acc += dyp[p];
            }
            db[oc] += acc;
        }
    }
}

namespace {

inline double bilinear_sample(const double* plane, int64_t h, int64_t w, double py, double px) {
    const int64_t y0 = static_cast<int64_t>(std::floor(py));
    const int64_t x0 = static_cast<int64_t>(std::floor(px));
    const double wy = py - static_cast<double>(y0);
    const double wx = px - static_cast<double>(x0);
    double v = 0.0;
    for (int dy = 0; dy <= 1; ++dy) {
        const int64_t yy = y0 + dy;
        if (yy < 0 || yy >= h) continue;
        const double fy = dy ? wy : 1.0 - wy;
        for (int dx = 0; dx <= 1; ++dx) {
            const int64_t xx = x0 + dx;
            if (xx < 0 || xx >= w) continue;
            const double fx = dx ? wx : 1.0 - wx;
            v += fy * fx * plane[yy * w + xx];
        }
    }
    return v;
}

// d(sample)/d(py), d(sample)/d(px)
inline void bilinear_pos_grad(const double* plane, int64_t h, int64_t w, double py, double px, double& gy,
                              double& gx) {
    const int64_t y0 = static_cast<int64_t>(std::floor(py));
    const int64_t x0 = static_cast<int64_t>(std::floor(px));
    const double wy = py - static_cast<double>(y0);
    const double wx = px - static_cast<double>(x0);
    auto pix = [&](int64_t yy, int64_t xx) -> double {
        return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : plane[yy * w + xx];
    };
    const double p00 = pix(y0, x0), p01 = pix(y0, x0 + 1);
    const double p10 = pix(y0 + 1, x0), p11 = pix(y0 + 1, x0 + 1);
    gy = -(1.0 - wx) * p00 - wx * p01 + (1.0 - wx) * p10 + wx * p11;
    gx = -(1.0 - wy) * p00 + (1.0 - wy) * p01 - wy * p10 + wy * p11;
}

inline void bilinear_scatter(double* plane, int64_t h, int64_t w, double py, double px, double g) {
    const int64_t y0 = static_cast<int64_t>(std::floor(py));
    const int64_t x0 = static_cast<int64_t>(std::floor(px));
    const double wy = py - static_cast<double>(y0);
    const double wx = px - static_cast<double>(x0);
    for (int dy = 0; dy <= 1; ++dy) {
        const int64_t yy = y0 + dy;
        if (yy < 0 || yy >= h) continue;
        const double fy = dy ? wy : 1.0 - wy;
        for (int dx = 0; dx <= 1; ++dx) {
            const int64_t xx = x0 + dx;
            if (xx < 0 || xx >= w) continue;
            const double fx = dx ? wx : 1.0 - wx;
            plane[yy * w + xx] += fy * fx * g;
        }
    }
}

}  // namespace

void deform_conv2d_forward(const double* x, const double* offsets, const double* w, const double* bias,
                           double* y, const DeformGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    const int64_t taps = g.k_h * g.k_w;
    for (int64_t n = 0; n < g.batch; ++n) {
        const double* off = offsets + n * 2 * taps * oh * ow;
        for (int64_t oc = 0; oc < g.out_ch; ++oc) {
            const int64_t grp = oc / ocg;
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = bias ? bias[oc] : 0.0;
                    for (int64_t ky = 0; ky < g.k_h; ++ky) {
                        for (int64_t kx = 0; kx < g.k_w; ++kx) {
                            const int64_t t = ky * g.k_w + kx;
                            const double py = static_cast<double>(oy - g.pad_h + ky * g.dilation) +
                                              off[(2 * t) * oh * ow + oy * ow + ox];
                            const double px = static_cast<double>(ox - g.pad_w + kx * g.dilation) +
                                              off[(2 * t + 1) * oh * ow + oy * ow + ox];
                            for (int64_t ic = 0; ic < icg; ++ic) {
                                const double* xp = x + ((n * g.in_ch + grp * icg + ic) * g.in_h) * g.in_w;
                                acc += w[((oc * icg + ic) * g.k_h + ky) * g.k_w + kx] *
                                       bilinear_sample(xp, g.in_h, g.in_w, py, px);
                            }
                        }
                    }
                    y[((n * g.out_ch + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

void deform_conv2d_backward_input(const double* dy, const double* offsets, const double* w, double* dx,
                                  const DeformGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    const int64_t taps = g.k_h * g.k_w;
    for (int64_t n = 0; n < g.batch; ++n) {
        const double* off = offsets + n * 2 * taps * oh * ow;
        for (int64_t ic = 0; ic < g.in_ch; ++ic) {
            const int64_t grp = ic / icg, icl = ic % icg;
            double* dxp = dx + ((n * g.in_ch + ic) * g.in_h) * g.in_w;
            for (int64_t oc = grp * ocg; oc < (grp + 1) * ocg; ++oc) {
                const double* dyp = dy + ((n * g.out_ch + oc) * oh) * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const double gout = dyp[oy * ow + ox];
                        if (gout == 0.0) continue;
                        for (int64_t ky = 0; ky < g.k_h; ++ky) {
                            for (int64_t kx = 0; kx < g.k_w; ++kx) {
                                const int64_t t = ky * g.k_w + kx;
                                const double py = static_cast<double>(oy - g.pad_h + ky * g.dilation) +
                                                  off[(2 * t) * oh * ow + oy * ow + ox];
                                const double px = static_cast<double>(ox - g.pad_w + kx * g.dilation) +
                                                  off[(2 * t + 1) * oh * ow + oy * ow + ox];
                                bilinear_scatter(dxp, g.in_h, g.in_w, py, px,
                                                 gout * w[((oc * icg + icl) * g.k_h + ky) * g.k_w + kx]);
                            }
                        }
                    }
                }
            }
        }
    }
}

void deform_conv2d_backward_offsets(const double* x, const double* dy, const double* offsets, const double* w,
                                    double* doffsets, const DeformGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    const int64_t taps = g.k_h * g.k_w;
    for (int64_t n = 0; n < g.batch; ++n) {
        const double* off = offsets + n * 2 * taps * oh * ow;
        double* doff = doffsets + n * 2 * taps * oh * ow;
        for (int64_t t = 0; t < taps; ++t) {
            const int64_t ky = t / g.k_w, kx = t % g.k_w;
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    const double py = static_cast<double>(oy - g.pad_h + ky * g.dilation) +
                                      off[(2 * t) * oh * ow + oy * ow + ox];
                    const double px = static_cast<double>(ox - g.pad_w + kx * g.dilation) +
                                      off[(2 * t + 1) * oh * ow + oy * ow + ox];
                    double gy_total = 0.0, gx_total = 0.0;
                    for (int64_t oc = 0; oc < g.out_ch; ++oc) {
                        const int64_t grp = oc / ocg;
                        const double gout = dy[((n * g.out_ch + oc) * oh + oy) * ow + ox];
                        if (gout == 0.0) continue;
                        for (int64_t ic = 0; ic < icg; ++ic) {
                            const double* xp = x + ((n * g.in_ch + grp * icg + ic) * g.in_h) * g.in_w;
                            double gy, gx;
                            bilinear_pos_grad(xp, g.in_h, g.in_w, py, px, gy, gx);
                            const double wv = w[((oc * icg + ic) * g.k_h + ky) * g.k_w + kx];
                            gy_total += gout * wv * gy;
                            gx_total += gout * wv * gx;
                        }
                    }
                    doff[(2 * t) * oh * ow + oy * ow + ox] += gy_total;
                    doff[(2 * t + 1) * oh * ow + oy * ow + ox] += gx_total;
                }
            }
        }
    }
}

void deform_conv2d_backward_weights(const double* x, const double* offsets, const double* dy, double* dw,
                                    double* db, const DeformGeom& g) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t icg = g.in_ch / g.groups, ocg = g.out_ch / g.groups;
    const int64_t taps = g.k_h * g.k_w;
    for (int64_t oc = 0; oc < g.out_ch; ++oc) {
        const int64_t grp = oc / ocg;
        for (int64_t ic = 0; ic < icg; ++ic) {
            for (int64_t ky = 0; ky < g.k_h; ++ky) {
                for (int64_t kx = 0; kx < g.k_w; ++kx) {
                    const int64_t t = ky * g.k_w + kx;
                    double acc = 0.0;
                    for (int64_t n = 0; n < g.batch; ++n) {
                        const double* off = offsets + n * 2 * taps * oh * ow;
                        const double* xp = x + ((n * g.in_ch + grp * icg + ic) * g.in_h) * g.in_w;
                        const double* dyp = dy + ((n * g.out_ch + oc) * oh) * ow;
                        for (int64_t oy = 0; oy < oh; ++oy) {
                            for (int64_t ox = 0; ox < ow; ++ox) {
                                const double gout = dyp[oy * ow + ox];
                                if (gout == 0.0) continue;
                                const double py = static_cast<double>(oy - g.pad_h + ky * g.dilation) +
                                                  off[(2 * t) * oh * ow + oy * ow + ox];
                                const double px = static_cast<double>(ox - g.pad_w + kx * g.dilation) +
                                                  off[(2 * t + 1) * oh * ow + oy * ow + ox];
                                acc += gout * bilinear_sample(xp, g.in_h, g.in_w, py, px);
                            }
                        }
                    }
                    dw[((oc * icg + ic) * g.k_h + ky) * g.k_w + kx] += acc;
                }
            }
        }
    }
    if (db) {
        for (int64_t oc = 0; oc < g.out_ch; ++oc) {
            double acc = 0.0;
            for (int64_t n = 0; n < g.batch; ++n) {
                const double* dyp = dy + ((n * g.out_ch + oc) * oh) * ow;
                for (int64_t p = 0; p < oh * ow; ++p) acc += dyp[p];
            }
            db[oc] += acc;
        }
    }
}

void resize_bilinear_forward(const double* x, double* y, int64_t planes, int64_t in_h, int64_t in_w,
                             int64_t out_h, int64_t out_w) {
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (int64_t p = 0; p < planes; ++p) {
        const double* xp = x + p * in_h * in_w;
        double* yp = y + p * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            fy = fy < 0.0 ? 0.0 : fy;
            int64_t y0 = static_cast<int64_t>(fy);
            if (y0 > in_h - 1) y0 = in_h - 1;
            const int64_t y1 = y0 + 1 < in_h ? y0 + 1 : in_h - 1;
            const double wy = fy - static_cast<double>(y0);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                fx = fx < 0.0 ? 0.0 : fx;
                int64_t x0 = static_cast<int64_t>(fx);
                if (x0 > in_w - 1) x0 = in_w - 1;
                const int64_t x1 = x0 + 1 < in_w ? x0 + 1 : in_w - 1;
                const double wx = fx - static_cast<double>(x0);
                yp[oy * out_w + ox] = (1.0 - wy) * ((1.0 - wx) * xp[y0 * in_w + x0] + wx * xp[y0 * in_w + x1]) +
                                      wy * ((1.0 - wx) * xp[y1 * in_w + x0] + wx * xp[y1 * in_w + x1]);
            }
        }
    }
}

void resize_bilinear_backward(const double* dy, double* dx, int64_t planes, int64_t in_h, int64_t in_w,
                              int64_t out_h, int64_t out_w) {
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (int64_t p = 0; p < planes; ++p) {
        const double* dyp = dy + p * out_h * out_w;
        double* dxp = dx + p * in_h * in_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            fy = fy < 0.0 ? 0.0 : fy;
            int64_t y0 = static_cast<int64_t>(fy);
            if (y0 > in_h - 1) y0 = in_h - 1;
            const int64_t y1 = y0 + 1 < in_h ? y0 + 1 : in_h - 1;
            const double wy = fy - static_cast<double>(y0);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                fx = fx < 0.0 ? 0.0 : fx;
                int64_t x0 = static_cast<int64_t>(fx);
                if (x0 > in_w - 1) x0 = in_w - 1;
                const int64_t x1 = x0 + 1 < in_w ? x0 + 1 : in_w - 1;
                const double wx = fx - static_cast<double>(x0);
                const double gv = dyp[oy * out_w + ox];
                dxp[y0 * in_w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                dxp[y0 * in_w + x1] += (1.0 - wy) * wx * gv;
                dxp[y1 * in_w + x0] += wy * (1.0 - wx) * gv;
                dxp[y1 * in_w + x1] += wy * wx * gv;
            }
        }
    }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double m = xr[0];
        for (int64_t c = 1; c < cols; ++c) m = xr[c] > m ? xr[c] : m;
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - m);
            s += yr[c];
        }
        const double inv = 1.0 / s;
        for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
}

void softmax_backward_rows(const double* y, const double* dy, double* dx, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y + r * cols;
        const double* dyr = dy + r * cols;
        double* dxr = dx + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += yr[c] * dyr[c];
        for (int64_t c = 0; c < cols; ++c) dxr[c] = yr[c] * (dyr[c] - dot);
    }
}

}  // namespace a4::kernels::serial_impl
