#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "revblind/errors.hpp"

namespace revblind {

/// Numeric mode for network values. `train32` keeps every stored value on the
/// 32-bit float grid (storage stays double; results are rounded through float
/// after each operation), which makes checkpoints exact and training cheap to
/// reason about. `check64` runs in full double precision for gradient
/// verification.
enum class Precision { train32, check64 };

/// Dense row-major tensor of reals.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;
    Precision precision = Precision::train32;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, Precision p);

    std::size_t size() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const;

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

Tensor zeros_like(const Tensor& t);

/// Snap every entry to the nearest 32-bit float when the tensor is in
/// train32 mode; no-op in check64 mode.
void apply_precision(Tensor& t);

/// Throw NumericalError if any entry is NaN or infinite.
void check_finite(const Tensor& t, const std::string& where);

/// C = alpha * op(A) * op(B) + beta * C, row-major dense matrices.
/// op is identity or transpose. Dimensions: op(A) is m x k, op(B) is k x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc);

} // namespace revblind
