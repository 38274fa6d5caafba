#include "mktod/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mktod::kernels {

namespace {

bool g_parallel =
#ifdef _OPENMP
    true;
#else
    false;
#endif

inline bool use_parallel(std::int64_t macs, int rows) {
#ifdef _OPENMP
    return g_parallel && rows > 1 && macs >= kMinParallelMacs;
#else
    (void)macs;
    (void)rows;
    return false;
#endif
}

}  // namespace

bool parallel_enabled() { return g_parallel; }

void set_parallel(bool enabled) {
#ifdef _OPENMP
    g_parallel = enabled;
#else
    g_parallel = false;
    (void)enabled;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::int64_t>(i) * k;
        double* ci = c + static_cast<std::int64_t>(i) * n;
        if (!acc) {
            for (int j = 0; j < n; ++j) ci[j] = 0.0;
        }
        for (int l = 0; l < k; ++l) {
            const double av = ai[l];
            const double* bl = b + static_cast<std::int64_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

void matmul_nn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
#ifdef _OPENMP
    if (m == 1) {
        // Single output row: split the columns instead. The accumulator seeds
        // from c[j] exactly as the serial loop does, keeping the floating-point
        // association order identical.
#pragma omp parallel for schedule(static)
        for (int j = 0; j < n; ++j) {
            double s = acc ? c[j] : 0.0;
            for (int l = 0; l < k; ++l) s += a[l] * b[static_cast<std::int64_t>(l) * n + j];
            c[j] = s;
        }
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        matmul_nn_serial(a + static_cast<std::int64_t>(i) * k, b,
                         c + static_cast<std::int64_t>(i) * n, 1, k, n, acc);
    }
#else
    matmul_nn_serial(a, b, c, m, k, n, acc);
#endif
}

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    const std::int64_t macs = static_cast<std::int64_t>(m) * k * n;
    if (use_parallel(macs, m == 1 ? n : m)) {
        matmul_nn_omp(a, b, c, m, k, n, acc);
    } else {
        matmul_nn_serial(a, b, c, m, k, n, acc);
    }
}

void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::int64_t>(i) * k;
        double* ci = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::int64_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
#ifdef _OPENMP
    if (m == 1) {
#pragma omp parallel for schedule(static)
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::int64_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += a[l] * bj[l];
            c[j] = acc ? c[j] + s : s;
        }
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        matmul_nt_serial(a + static_cast<std::int64_t>(i) * k, b,
                         c + static_cast<std::int64_t>(i) * n, 1, k, n, acc);
    }
#else
    matmul_nt_serial(a, b, c, m, k, n, acc);
#endif
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    const std::int64_t macs = static_cast<std::int64_t>(m) * k * n;
    if (use_parallel(macs, m == 1 ? n : m)) {
        matmul_nt_omp(a, b, c, m, k, n, acc);
    } else {
        matmul_nt_serial(a, b, c, m, k, n, acc);
    }
}

void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::int64_t>(i) * n;
        if (!acc) {
            for (int j = 0; j < n; ++j) ci[j] = 0.0;
        }
        for (int l = 0; l < k; ++l) {
            const double av = a[static_cast<std::int64_t>(l) * m + i];
            const double* bl = b + static_cast<std::int64_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::int64_t>(i) * n;
        if (!acc) {
            for (int j = 0; j < n; ++j) ci[j] = 0.0;
        }
        for (int l = 0; l < k; ++l) {
            const double av = a[static_cast<std::int64_t>(l) * m + i];
            const double* bl = b + static_cast<std::int64_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
#else
    matmul_tn_serial(a, b, c, m, k, n, acc);
#endif
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    const std::int64_t macs = static_cast<std::int64_t>(m) * k * n;
    if (use_parallel(macs, m)) {
        matmul_tn_omp(a, b, c, m, k, n, acc);
    } else {
        matmul_tn_serial(a, b, c, m, k, n, acc);
    }
}

}  // namespace mktod::kernels
