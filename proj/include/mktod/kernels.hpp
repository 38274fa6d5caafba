#pragma once

#include <cstdint>

// Dense f64 kernels behind the autodiff ops and the entity index build.
// Every kernel exists twice: a serial reference and an OpenMP variant that
// splits rows of the output across threads. Each output element is computed
// by exactly one thread with the same accumulation order as the serial
// reference, so the two variants are bitwise identical; tests assert this
// and tools/bench_kernels compares their throughput.
namespace mktod::kernels {

// Work threshold (multiply-accumulate count) below which the dispatching
// wrappers stay serial.
inline constexpr std::int64_t kMinParallelMacs = 1 << 15;

bool parallel_enabled();
void set_parallel(bool enabled);
int max_threads();

// c[m x n] = a[m x k] * b[k x n], row-major. acc adds into c instead of
// overwriting. c must not alias a or b.
void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_nn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_nt_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_tn_omp(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc = false);

}  // namespace mktod::kernels
