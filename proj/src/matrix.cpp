// SPDX-License-Identifier: Apache-2.0
#include "hydra/matrix.hpp"

#include <cmath>
#include <cstring>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

// splitmix64 finalizer; value_at(seed, i) is the i-th output of splitmix64
// seeded with `seed`.
std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

double unit_from_u64(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Box-Muller from two counter slots. u1 is mapped into (0, 1] so the log is
// always finite.
double gaussian_at(std::uint64_t seed, std::uint64_t index) {
    const double u1 = static_cast<double>((RngState::value_at(seed, index) >> 11) + 1) * 0x1.0p-53;
    const double u2 = unit_from_u64(RngState::value_at(seed, index + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> values) {
    const int r = static_cast<int>(values.size());
    const int c = r > 0 ? static_cast<int>(values.begin()->size()) : 0;
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : values) {
        if (static_cast<int>(row.size()) != c) {
            throw ShapeError("from_rows: ragged row lengths");
        }
        int j = 0;
        for (double v : row) m.at(i, j++) = v;
        ++i;
    }
    return m;
}

std::string Matrix::shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

bool Matrix::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::uint64_t RngState::value_at(std::uint64_t seed, std::uint64_t index) {
    return mix64(seed + (index + 1) * 0x9E3779B97F4A7C15ULL);
}

std::uint64_t RngState::next_u64() {
    return value_at(seed, pos++);
}

double RngState::next_unit() {
    return unit_from_u64(next_u64());
}

double RngState::next_gaussian(double mean, double std) {
    if (std < 0.0) {
        throw ParameterError("next_gaussian: std must be >= 0, got " + std::to_string(std));
    }
    const double z = gaussian_at(seed, pos);
    pos += 2;
    return mean + std * z;
}

RngState RngState::split(std::uint64_t tag) const {
    return RngState(mix64(seed ^ value_at(0xD1B54A32D192ED03ULL, tag)));
}

Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
    if (lhs.cols != rhs.rows) {
        throw ShapeError("matmul: inner dimensions differ, " + lhs.shape_str() + " x " + rhs.shape_str());
    }
    Matrix out(lhs.rows, rhs.cols);
    const int inner = lhs.cols;
    // Rows are independent; each output element keeps its fixed-order inner
    // sum, so the result is bitwise identical to ref::matmul for any thread
    // count.
#pragma omp parallel for schedule(static) if (static_cast<long>(lhs.rows) * rhs.cols * inner > 16384)
    for (int i = 0; i < lhs.rows; ++i) {
        for (int j = 0; j < out.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < inner; ++k) {
                acc += lhs.at(i, k) * rhs.at(k, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Matrix axpy(double alpha, const Matrix& x, const Matrix& y) {
    require_same_shape(x, y, "axpy");
    Matrix out(x.rows, x.cols);
    const std::size_t n = x.data.size();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::size_t i = 0; i < n; ++i) {
        out.data[i] = alpha * x.data[i] + y.data[i];
    }
    return out;
}

Matrix seeded_gaussian(int rows, int cols, double mean, double std, RngState& rng) {
    if (rows < 0 || cols < 0) {
        throw ParameterError("seeded_gaussian: dimensions must be >= 0, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (std < 0.0) {
        throw ParameterError("seeded_gaussian: std must be >= 0, got " + std::to_string(std));
    }
    Matrix out(rows, cols);
    const std::size_t n = out.data.size();
    const std::uint64_t base = rng.pos;
#pragma omp parallel for schedule(static) if (n > 8192)
    for (std::size_t i = 0; i < n; ++i) {
        out.data[i] = mean + std * gaussian_at(rng.seed, base + 2 * i);
    }
    rng.pos = base + 2 * n;
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i) {
        for (int j = 0; j < m.cols; ++j) {
            out.at(j, i) = m.at(i, j);
        }
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

Matrix scaled(double alpha, const Matrix& m) {
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = alpha * m.data[i];
    return out;
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

double max_abs(const Matrix& m) {
    double r = 0.0;
    for (double v : m.data) r = std::max(r, std::fabs(v));
    return r;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double r = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) r = std::max(r, std::fabs(a.data[i] - b.data[i]));
    return r;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

namespace ref {

Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
    if (lhs.cols != rhs.rows) {
        throw ShapeError("matmul: inner dimensions differ, " + lhs.shape_str() + " x " + rhs.shape_str());
    }
    Matrix out(lhs.rows, rhs.cols);
    for (int i = 0; i < lhs.rows; ++i) {
        for (int j = 0; j < out.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < lhs.cols; ++k) {
                acc += lhs.at(i, k) * rhs.at(k, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Matrix axpy(double alpha, const Matrix& x, const Matrix& y) {
    require_same_shape(x, y, "axpy");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = alpha * x.data[i] + y.data[i];
    return out;
}

Matrix seeded_gaussian(int rows, int cols, double mean, double std, RngState& rng) {
    if (rows < 0 || cols < 0) {
        throw ParameterError("seeded_gaussian: dimensions must be >= 0, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (std < 0.0) {
        throw ParameterError("seeded_gaussian: std must be >= 0, got " + std::to_string(std));
    }
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = rng.next_gaussian(mean, std);
    }
    return out;
}

}  // namespace ref

}  // namespace hydra
