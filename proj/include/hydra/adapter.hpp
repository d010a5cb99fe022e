// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <variant>
#include <vector>

#include "hydra/matrix.hpp"

namespace hydra {

enum class GateMode { FixedUniform, LearnableLogits };

/// Head-mixing weights. Emitted weights are always on the probability
/// simplex: uniform 1/N in fixed mode, softmax(logits) in learnable mode.
struct GateParams {
    GateMode mode = GateMode::LearnableLogits;
    std::vector<double> logits;  // length N; used only in learnable mode
};

std::vector<double> gate_weights(const GateParams& gate);

/// Plain low-rank adapter: delta = (alpha/r) * B * A with A (r x k) and
/// B (d x r). B is all-zero at construction so the adapted map starts exactly
/// at the base weight.
struct LoraAdapter {
    Matrix A;  // r x k
    Matrix B;  // d x r
    int rank = 0;
    double alpha = 0.0;

    double scale() const { return alpha / rank; }
    int out_dim() const { return B.rows; }
    int in_dim() const { return A.cols; }

    static LoraAdapter init(int d, int k, int r, double alpha, RngState& rng);
};

/// Multi-head variant: one shared down-projection A and N specialist
/// up-projections B_i mixed by gate weights,
/// delta = (alpha/r) * (sum_i w_i B_i) * A.
struct HydraAdapter {
    Matrix A_shared;            // r x k
    std::vector<Matrix> heads;  // N matrices, each d x r
    GateParams gate;
    int rank = 0;
    double alpha = 0.0;

    double scale() const { return alpha / rank; }
    int num_heads() const { return static_cast<int>(heads.size()); }
    int out_dim() const { return heads.front().rows; }
    int in_dim() const { return A_shared.cols; }

    static HydraAdapter init(int d, int k, int r, int n_heads, double alpha, GateMode mode,
                             RngState& rng);
};

using Adapter = std::variant<LoraAdapter, HydraAdapter>;

int adapter_out_dim(const Adapter& adapter);
int adapter_in_dim(const Adapter& adapter);

/// Dense materialization of the update. Used for merging and as the oracle
/// against the low-rank forward path; the forward path never calls this.
Matrix lora_delta(const LoraAdapter& adapter);
Matrix hydra_delta(const HydraAdapter& adapter);
Matrix adapter_delta(const Adapter& adapter);

/// (W0 + delta) x, with the delta path computed low-rank (A x first, then the
/// heads). Never materializes delta.
Matrix adapted_forward(const Matrix& x, const Matrix& W0, const LoraAdapter& adapter);
Matrix adapted_forward(const Matrix& x, const Matrix& W0, const HydraAdapter& adapter);
Matrix adapted_forward(const Matrix& x, const Matrix& W0, const Adapter& adapter);

/// W0 + delta as a new matrix; W0 is never mutated.
Matrix merge(const Matrix& W0, const Adapter& adapter);

/// Gradients of a scalar loss w.r.t. the trainable adapter parameters, given
/// grad_out = dL/dy of the adapted forward. The base weight is frozen and
/// receives no gradient. dB is length 1 for plain adapters; dlogits is empty
/// unless the gate is learnable.
struct AdapterGrads {
    Matrix dA;
    std::vector<Matrix> dB;
    std::vector<double> dlogits;
};

AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const LoraAdapter& adapter,
                              const Matrix& grad_out);
AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const HydraAdapter& adapter,
                              const Matrix& grad_out);
AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const Adapter& adapter,
                              const Matrix& grad_out);

/// dL/dx = (W0 + delta)^T grad_out, computed low-rank.
Matrix adapted_backward_input(const Matrix& grad_out, const Matrix& W0, const Adapter& adapter);

/// Binary checkpoint blob ("HYDRA1"): header {d, k, r, N, alpha, gate mode}
/// as little-endian i32 / f64, then A, B_1..B_N row-major f64, then N logits.
/// Round-trips bitwise. Plain adapters serialize as N=1 with a fixed gate.
void save_adapter(const Adapter& adapter, const std::string& path);
Adapter load_adapter(const std::string& path);

}  // namespace hydra
