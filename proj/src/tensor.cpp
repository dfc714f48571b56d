#include "revblind/tensor.hpp"

#include <cblas.h>
#include <cmath>
#include <mutex>
#include <sstream>

namespace revblind {

namespace {

// BLAS threading is pinned to one thread: reduction order inside sgemm/dgemm
// must not depend on the machine, or bit-reproducibility is lost.
void pin_blas_threads() {
    static std::once_flag once;
    std::call_once(once, [] { openblas_set_num_threads(1); });
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> s, Precision p)
    : shape(std::move(s)), v(shape_numel(shape), 0.0), precision(p) {}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape.size()) throw ValueError("tensor: dim index out of range");
    return shape[i];
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ")";
    return out.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, t.precision); }

void apply_precision(Tensor& t) {
    if (t.precision != Precision::train32) return;
    for (double& x : t.v) x = static_cast<double>(static_cast<float>(x));
}

void check_finite(const Tensor& t, const std::string& where) {
    for (double x : t.v) {
        if (!std::isfinite(x)) {
            throw NumericalError(where + ": non-finite value encountered");
        }
    }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc) {
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
                static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
                static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c,
                static_cast<blasint>(ldc));
}

} // namespace revblind
