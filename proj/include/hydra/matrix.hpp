// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hydra {

/// Dense row-major f64 matrix. Value semantics; every kernel op below is a
/// pure function of its inputs, so results are bitwise reproducible.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix identity(int n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> values);

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }
    std::string shape_str() const;
    bool all_finite() const;
};

/// Counter-based RNG: output n is a pure function of (seed, pos + n), so the
/// stream is random-access and substreams can be split per purpose without
/// coupling. Same seed + same call sequence gives a bitwise-identical stream.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t pos = 0;

    RngState() = default;
    explicit RngState(std::uint64_t s) : seed(s) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double next_unit();
    /// One normal draw; consumes exactly two counter slots.
    double next_gaussian(double mean, double std);
    /// Independent child stream for a given purpose tag.
    RngState split(std::uint64_t tag) const;

    /// Stateless access used by the parallel fill kernels.
    static std::uint64_t value_at(std::uint64_t seed, std::uint64_t index);
};

/// Standard matrix product with deterministic left-to-right inner summation.
Matrix matmul(const Matrix& lhs, const Matrix& rhs);

/// alpha * x + y, elementwise.
Matrix axpy(double alpha, const Matrix& x, const Matrix& y);

/// Matrix of i.i.d. normal draws; advances rng by 2 * rows * cols slots.
Matrix seeded_gaussian(int rows, int cols, double mean, double std, RngState& rng);

Matrix transpose(const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scaled(double alpha, const Matrix& m);

/// Frobenius inner product sum_ij a_ij * b_ij (fixed-order summation).
double frobenius_dot(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool bitwise_equal(const Matrix& a, const Matrix& b);

/// Serial reference kernels used by tests and the benchmark. The parallel
/// kernels above must match these bitwise.
namespace ref {
Matrix matmul(const Matrix& lhs, const Matrix& rhs);
Matrix axpy(double alpha, const Matrix& x, const Matrix& y);
Matrix seeded_gaussian(int rows, int cols, double mean, double std, RngState& rng);
}  // namespace ref

}  // namespace hydra
