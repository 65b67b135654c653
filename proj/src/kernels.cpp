#include "fedsdaf/kernels.hpp"

#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fedsdaf::kernels {

namespace {

Backend g_backend =
#ifdef _OPENMP
    Backend::openmp;
#else
    Backend::serial;
#endif

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

inline double gelu_one(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

inline double gelu_grad_one(double x) {
  double u = kGeluScale * (x + kGeluCubic * x * x * x);
  double t = std::tanh(u);
  double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// One output row of c = a * b, accumulated in a fixed k-order so the
// parallel version (which splits on i only) matches the serial one bitwise.
inline void matmul_row(const double* a, const double* b, double* c,
                       std::size_t i, std::size_t k, std::size_t n) {
  double* ci = c + i * n;
  const double* ai = a + i * k;
  for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    double av = ai[p];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void matmul_grad_a_row(const double* gout, const double* b, double* ga,
                              std::size_t i, std::size_t k, std::size_t n) {
  const double* gi = gout + i * n;
  double* gai = ga + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * n;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
    gai[p] += acc;
  }
}

// One row of gb += a^T * gout; row p of gb gathers over all m samples.
inline void matmul_grad_b_row(const double* a, const double* gout, double* gb,
                              std::size_t p, std::size_t m, std::size_t k,
                              std::size_t n) {
  double* gbp = gb + p * n;
  for (std::size_t i = 0; i < m; ++i) {
    double av = a[i * k + p];
    const double* gi = gout + i * n;
    for (std::size_t j = 0; j < n; ++j) gbp[j] += av * gi[j];
  }
}

inline void softmax_row(const double* x, double* y, std::size_t i, std::size_t w) {
  const double* xi = x + i * w;
  double* yi = y + i * w;
  double mx = xi[0];
  for (std::size_t j = 1; j < w; ++j)
    if (xi[j] > mx) mx = xi[j];
  double sum = 0.0;
  for (std::size_t j = 0; j < w; ++j) {
    yi[j] = std::exp(xi[j] - mx);
    sum += yi[j];
  }
  for (std::size_t j = 0; j < w; ++j) yi[j] /= sum;
}

inline void softmax_grad_row(const double* y, const double* gy, double* gx,
                             std::size_t i, std::size_t w) {
  const double* yi = y + i * w;
  const double* gi = gy + i * w;
  double* go = gx + i * w;
  double dot = 0.0;
  for (std::size_t j = 0; j < w; ++j) dot += yi[j] * gi[j];
  for (std::size_t j = 0; j < w; ++j) go[j] += yi[j] * (gi[j] - dot);
}

inline void layer_norm_row(const double* x, const double* gain,
                           const double* bias, double eps, double* y,
                           double* xhat, double* rstd, std::size_t i,
                           std::size_t w) {
  const double* xi = x + i * w;
  double* yi = y + i * w;
  double* hi = xhat + i * w;
  double mean = 0.0;
  for (std::size_t j = 0; j < w; ++j) mean += xi[j];
  mean /= static_cast<double>(w);
  double var = 0.0;
  for (std::size_t j = 0; j < w; ++j) {
    double d = xi[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(w);
  double r = 1.0 / std::sqrt(var + eps);
  rstd[i] = r;
  for (std::size_t j = 0; j < w; ++j) {
    hi[j] = (xi[j] - mean) * r;
    yi[j] = hi[j] * gain[j] + bias[j];
  }
}

inline void layer_norm_grad_row(const double* xhat, const double* rstd,
                                const double* gain, const double* gy,
                                double* gx, std::size_t i, std::size_t w) {
  const double* hi = xhat + i * w;
  const double* gi = gy + i * w;
  double* go = gx + i * w;
  double r = rstd[i];
  double sum_g = 0.0, sum_gh = 0.0;
  for (std::size_t j = 0; j < w; ++j) {
    double gj = gi[j] * gain[j];
    sum_g += gj;
    sum_gh += gj * hi[j];
  }
  double inv_w = 1.0 / static_cast<double>(w);
  for (std::size_t j = 0; j < w; ++j) {
    double gj = gi[j] * gain[j];
    go[j] += r * (gj - inv_w * sum_g - hi[j] * inv_w * sum_gh);
  }
}

inline bool use_omp() {
#ifdef _OPENMP
  return g_backend == Backend::openmp;
#else
  return false;
#endif
}

}  // namespace

Backend backend() noexcept { return g_backend; }

void set_backend(Backend b) noexcept { g_backend = b; }

bool openmp_enabled() noexcept {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int thread_count() noexcept {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace ref {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n);
}

void matmul_grad_a(const double* gout, const double* b, double* ga,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_grad_a_row(gout, b, ga, i, k, n);
}

void matmul_grad_b(const double* a, const double* gout, double* gb,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) matmul_grad_b_row(a, gout, gb, p, m, k, n);
}

void gelu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * gelu_grad_one(x[i]);
}

void relu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : 0.0;
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(x, y, i, width);
}

void softmax_grad_rows(const double* y, const double* gy, double* gx,
                       std::size_t rows, std::size_t width) {
  for (std::size_t i = 0; i < rows; ++i) softmax_grad_row(y, gy, gx, i, width);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* xhat, double* rstd,
                     std::size_t rows, std::size_t width) {
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_row(x, gain, bias, eps, y, xhat, rstd, i, width);
}

void layer_norm_grad_rows(const double* xhat, const double* rstd,
                          const double* gain, const double* gy, double* gx,
                          double* ggain, double* gbias,
                          std::size_t rows, std::size_t width) {
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_grad_row(xhat, rstd, gain, gy, gx, i, width);
  // Parameter grads reduce over rows; keep that loop serial in both
  // backends so accumulation order never depends on the schedule.
  for (std::size_t j = 0; j < width; ++j) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      sg += gy[i * width + j] * xhat[i * width + j];
      sb += gy[i * width + j];
    }
    ggain[j] += sg;
    gbias[j] += sb;
  }
}

}  // namespace ref

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
  if (!use_omp()) {
    ref::matmul(a, b, c, m, k, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n);
#endif
}

void matmul_grad_a(const double* gout, const double* b, double* ga,
                   std::size_t m, std::size_t k, std::size_t n) {
  if (!use_omp()) {
    ref::matmul_grad_a(gout, b, ga, m, k, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) matmul_grad_a_row(gout, b, ga, i, k, n);
#endif
}

void matmul_grad_b(const double* a, const double* gout, double* gb,
                   std::size_t m, std::size_t k, std::size_t n) {
  if (!use_omp()) {
    ref::matmul_grad_b(a, gout, gb, m, k, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < k; ++p) matmul_grad_b_row(a, gout, gb, p, m, k, n);
#endif
}

void gelu(const double* x, double* y, std::size_t n) {
  if (!use_omp()) {
    ref::gelu(x, y, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
#endif
}

void gelu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  if (!use_omp()) {
    ref::gelu_grad(x, gy, gx, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * gelu_grad_one(x[i]);
#endif
}

void relu(const double* x, double* y, std::size_t n) {
  if (!use_omp()) {
    ref::relu(x, y, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
#endif
}

void relu_grad(const double* x, const double* gy, double* gx, std::size_t n) {
  if (!use_omp()) {
    ref::relu_grad(x, gy, gx, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : 0.0;
#endif
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width) {
  if (!use_omp()) {
    ref::softmax_rows(x, y, rows, width);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < rows; ++i) softmax_row(x, y, i, width);
#endif
}

void softmax_grad_rows(const double* y, const double* gy, double* gx,
                       std::size_t rows, std::size_t width) {
  if (!use_omp()) {
    ref::softmax_grad_rows(y, gy, gx, rows, width);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < rows; ++i) softmax_grad_row(y, gy, gx, i, width);
#endif
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double eps, double* y, double* xhat, double* rstd,
                     std::size_t rows, std::size_t width) {
  if (!use_omp()) {
    ref::layer_norm_rows(x, gain, bias, eps, y, xhat, rstd, rows, width);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_row(x, gain, bias, eps, y, xhat, rstd, i, width);
#endif
}

void layer_norm_grad_rows(const double* xhat, const double* rstd,
                          const double* gain, const double* gy, double* gx,
                          double* ggain, double* gbias,
                          std::size_t rows, std::size_t width) {
  if (!use_omp()) {
    ref::layer_norm_grad_rows(xhat, rstd, gain, gy, gx, ggain, gbias, rows, width);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_grad_row(xhat, rstd, gain, gy, gx, i, width);
  for (std::size_t j = 0; j < width; ++j) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      sg += gy[i * width + j] * xhat[i * width + j];
      sb += gy[i * width + j];
    }
    ggain[j] += sg;
    gbias[j] += sb;
  }
#endif
}

}  // namespace fedsdaf::kernels
