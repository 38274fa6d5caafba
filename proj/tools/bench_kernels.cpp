// Times the serial and OpenMP matrix kernels on the shapes the training
// pipeline actually hits (token-embedding projections, vocab logits, entity
// scoring) and verifies the two paths agree bitwise on every run.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "mktod/autodiff.hpp"
#include "mktod/kernels.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

struct Case {
    const char* label;
    int m, k, n;
};

}  // namespace

int main(int argc, char** argv) {
    int reps = 20;
    if (argc > 1) reps = std::max(1, std::atoi(argv[1]));

    const std::vector<Case> cases = {
        {"embed-project  ", 200, 64, 64},
        {"vocab-logits   ", 64, 64, 2000},
        {"entity-scores  ", 1, 64, 4096},
        {"grad-accumulate", 64, 2000, 64},
        {"large-square   ", 512, 512, 512},
    };

    std::printf("threads=%d  reps=%d\n", mktod::kernels::max_threads(), reps);
    std::printf("%-16s %10s %12s %12s %8s %s\n", "case", "shape", "serial(ms)", "omp(ms)",
                "speedup", "bitwise");

    bool all_equal = true;
    for (const auto& c : cases) {
        mktod::ad::Rng rng(42);
        std::vector<double> a(static_cast<size_t>(c.m) * c.k);
        std::vector<double> b(static_cast<size_t>(c.k) * c.n);
        for (auto& v : a) v = rng.uniform(-1.0, 1.0);
        for (auto& v : b) v = rng.uniform(-1.0, 1.0);
        std::vector<double> out_serial(static_cast<size_t>(c.m) * c.n);
        std::vector<double> out_omp(out_serial.size());

        const double ts = time_ms(
            [&] { mktod::kernels::matmul_nn_serial(a.data(), b.data(), out_serial.data(), c.m, c.k, c.n, false); },
            reps);
        const double tp = time_ms(
            [&] { mktod::kernels::matmul_nn_omp(a.data(), b.data(), out_omp.data(), c.m, c.k, c.n, false); },
            reps);
        const bool equal =
            std::memcmp(out_serial.data(), out_omp.data(), out_serial.size() * sizeof(double)) == 0;
        all_equal = all_equal && equal;

        char shape[32];
        std::snprintf(shape, sizeof(shape), "%dx%dx%d", c.m, c.k, c.n);
        std::printf("%-16s %10s %12.3f %12.3f %7.2fx %s\n", c.label, shape, ts, tp,
                    tp > 0 ? ts / tp : 0.0, equal ? "yes" : "NO");
    }

    if (!all_equal) {
        std::fprintf(stderr, "serial and OpenMP outputs diverged\n");
        return 1;
    }
    return 0;
}
