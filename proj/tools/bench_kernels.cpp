// Times the serial reference kernels against the OpenMP backend on
// representative layer shapes and prints the speedups.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "a4unet/kernels.hpp"
#include "a4unet/tensor.hpp"

using namespace a4;
namespace k = a4::kernels;

namespace {

double time_of(const std::function<void()>& fn, int repeats) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < repeats; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / repeats;
}

void report(const char* name, const std::function<void()>& fn, int repeats) {
    k::set_backend(k::Backend::serial);
    const double serial_ms = time_of(fn, repeats);
    k::set_backend(k::Backend::openmp);
    const double omp_ms = time_of(fn, repeats);
    std::printf("%-28s serial %9.2f ms   openmp %9.2f ms   speedup %.2fx\n", name, serial_ms, omp_ms,
                serial_ms / omp_ms);
}

Tensor randu(std::vector<int64_t> shape, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

}  // namespace

int main() {
    std::mt19937_64 rng(42);
    std::printf("threads available: %d\n\n", k::thread_count());

    {
        const int64_t m = 256, kk = 576, n = 3136;
        Tensor a = randu({m, kk}, rng), b = randu({kk, n}, rng), c({m, n});
        report("matmul 256x576x3136", [&] { k::matmul_nn(a.data(), b.data(), c.data(), m, kk, n, false); }, 3);
    }
    {
        k::ConvGeom g;
        g.batch = 1;
        g.in_ch = 64;
        g.in_h = 56;
        g.in_w = 56;
        g.out_ch = 64;
        g.k_h = 3;
        g.k_w = 3;
        g.stride = 1;
        g.pad_h = 1;
        g.pad_w = 1;
        Tensor x = randu({g.batch, g.in_ch, g.in_h, g.in_w}, rng);
        Tensor w = randu({g.out_ch, g.in_ch, 3, 3}, rng);
        Tensor bias = randu({g.out_ch}, rng);
        Tensor y({g.batch, g.out_ch, g.out_h(), g.out_w()});
        Tensor dy = randu(y.shape(), rng);
        Tensor dx(x.shape()), dw(w.shape()), db(bias.shape());
        report("conv2d fwd 64x56x56 k3", [&] { k::conv2d_forward(x.data(), w.data(), bias.data(), y.data(), g); },
               3);
        report("conv2d bwd input", [&] {
            dx.fill(0.0);
            k::conv2d_backward_input(dy.data(), w.data(), dx.data(), g);
        }, 3);
        report("conv2d bwd weights", [&] {
            dw.fill(0.0);
            db.fill(0.0);
            k::conv2d_backward_weights(x.data(), dy.data(), dw.data(), db.data(), g);
        }, 3);
    }
    {
        k::DeformGeom g;
        g.batch = 1;
        g.in_ch = 64;
        g.in_h = 56;
        g.in_w = 56;
        g.out_ch = 64;
        g.k_h = 5;
        g.k_w = 5;
        g.pad_h = 2;
        g.pad_w = 2;
        g.groups = 64;  // depth-wise, as used by the encoder blocks
        Tensor x = randu({g.batch, g.in_ch, g.in_h, g.in_w}, rng);
        Tensor off = randu({g.batch, 50, 56, 56}, rng);
        Tensor w = randu({64, 1, 5, 5}, rng);
        Tensor bias = randu({64}, rng);
        Tensor y({1, 64, 56, 56});
        report("deform dw-conv fwd 5x5", [&] {
            k::deform_conv2d_forward(x.data(), off.data(), w.data(), bias.data(), y.data(), g);
        }, 3);
        Tensor dx(x.shape());
        Tensor dy = randu(y.shape(), rng);
        report("deform dw-conv bwd input", [&] {
            dx.fill(0.0);
            k::deform_conv2d_backward_input(dy.data(), off.data(), w.data(), dx.data(), g);
        }, 3);
    }
    {
        Tensor x = randu({4 * 64, 56, 56}, rng);
        Tensor y({4 * 64, 112, 112});
        report("bilinear resize x2", [&] {
            k::resize_bilinear_forward(x.data(), y.data(), 4 * 64, 56, 56, 112, 112);
        }, 5);
    }
    {
        Tensor x = randu({4096, 196}, rng), y({4096, 196});
        report("softmax 4096x196", [&] { k::softmax_rows(x.data(), y.data(), 4096, 196); }, 10);
    }
    return 0;
}
