#pragma once

#include <cstddef>

namespace fedsdaf::kernels {

// The compute-heavy inner loops live here, on raw row-major double arrays.
// Every kernel exists twice: a plain serial loop under ref:: that serves as
// the comparison baseline, and a dispatching entry point that runs the
// OpenMP-parallel version when the openmp backend is selected. The parallel
// versions partition work by output row/element only, so both backends
// produce bit-identical results for any thread count.

enum class Backend { serial, openmp };

Backend backend() noexcept;
void set_backend(Backend b) noexcept;

// True when the build has OpenMP support compiled in.
bool openmp_enabled() noexcept;
int thread_count() noexcept;

namespace ref {

// c = a (m x k) * b (k x n)
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
// ga += gout (m x n) * b^T  -> (m x k)
void matmul_grad_a(const double* gout, const double* b, double* ga,
                   std::size_t m, std::size_t k, std::size_t n);
// gb += a^T * gout  -> (k x n)
void matmul_grad_b(const double* a, const double* gout, double* gb,
                   std::size_t m, std::size_t k, std::size_t n);

void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
void relu_grad(const double* x, const double* gy, double* gx, std::size_t n);

// Row-wise stable softmax over a (rows x width) matrix.
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width);
// gx += jacobian^T gy, given the forward output y.
void softmax_grad_rows(const double* y, const double* gy, double* gx,
                       std::size_t rows, std::size_t width);

// Row-wise layer norm; writes y plus the normalized rows and reciprocal
// stddevs needed by the backward pass.
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* xhat, double* rstd,
                     std::size_t rows, std::size_t width);
void layer_norm_grad_rows(const double* xhat, const double* rstd,
                          const double* gain, const double* gy, double* gx,
                          double* ggain, double* gbias,
                          std::size_t rows, std::size_t width);

}  // namespace ref

// Dispatching entry points; signatures mirror ref:: exactly.
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_grad_a(const double* gout, const double* b, double* ga,
                   std::size_t m, std::size_t k, std::size_t n);
void matmul_grad_b(const double* a, const double* gout, double* gb,
                   std::size_t m, std::size_t k, std::size_t n);
void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
void relu_grad(const double* x, const double* gy, double* gx, std::size_t n);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width);
void softmax_grad_rows(const double* y, const double* gy, double* gx,
                       std::size_t rows, std::size_t width);
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* xhat, double* rstd,
                     std::size_t rows, std::size_t width);
void layer_norm_grad_rows(const double* xhat, const double* rstd,
                          const double* gain, const double* gy, double* gx,
                          double* ggain, double* gbias,
                          std::size_t rows, std::size_t width);

}  // namespace fedsdaf::kernels
