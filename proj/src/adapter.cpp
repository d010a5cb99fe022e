// SPDX-License-Identifier: Apache-2.0
#include "hydra/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

constexpr char kMagic[6] = {'H', 'Y', 'D', 'R', 'A', '1'};

void check_rank(int d, int k, int r) {
    if (r < 1 || r > std::min(d, k)) {
        throw ParameterError("adapter rank must satisfy 1 <= r <= min(d, k); got r=" + std::to_string(r) +
                             ", d=" + std::to_string(d) + ", k=" + std::to_string(k));
    }
}

void check_forward_shapes(const Matrix& x, const Matrix& W0, int d, int k) {
    if (W0.rows != d || W0.cols != k) {
        throw ShapeError("adapted_forward: base weight " + W0.shape_str() + " does not match adapter " +
                         std::to_string(d) + "x" + std::to_string(k));
    }
    if (x.rows != k) {
        throw ShapeError("adapted_forward: input " + x.shape_str() + " incompatible with weight " +
                         W0.shape_str());
    }
}

// Weighted head mix sum_i w_i B_i, accumulated in head order.
Matrix head_mix(const HydraAdapter& ad, const std::vector<double>& w) {
    Matrix m = Matrix::zeros(ad.heads.front().rows, ad.heads.front().cols);
    for (int i = 0; i < ad.num_heads(); ++i) {
        m = axpy(w[i], ad.heads[i], m);
    }
    return m;
}

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_i32(std::ofstream& out, std::int32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xFF);
    write_bytes(out, b, 4);
}

void write_f64(std::ofstream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    write_bytes(out, b, 8);
}

void write_matrix(std::ofstream& out, const Matrix& m) {
    for (double v : m.data) write_f64(out, v);
}

std::int32_t read_i32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return static_cast<std::int32_t>(v);
}

double read_f64(std::ifstream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

Matrix read_matrix(std::ifstream& in, int rows, int cols) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = read_f64(in);
    return m;
}

}  // namespace

std::vector<double> gate_weights(const GateParams& gate) {
    if (gate.mode == GateMode::FixedUniform) {
        const int n = std::max<int>(1, static_cast<int>(gate.logits.size()));
        return std::vector<double>(static_cast<std::size_t>(n), 1.0 / n);
    }
    // Softmax with max subtraction; output is on the simplex by construction.
    const double mx = *std::max_element(gate.logits.begin(), gate.logits.end());
    std::vector<double> w(gate.logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp(gate.logits[i] - mx);
        z += w[i];
    }
    for (double& v : w) v /= z;
    return w;
}

LoraAdapter LoraAdapter::init(int d, int k, int r, double alpha, RngState& rng) {
    check_rank(d, k, r);
    LoraAdapter ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.A = seeded_gaussian(r, k, 0.0, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    ad.B = Matrix::zeros(d, r);
    return ad;
}

HydraAdapter HydraAdapter::init(int d, int k, int r, int n_heads, double alpha, GateMode mode,
                                RngState& rng) {
    check_rank(d, k, r);
    if (n_heads < 1) {
        throw ParameterError("HydraAdapter needs at least one head, got N=" + std::to_string(n_heads));
    }
    HydraAdapter ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.A_shared = seeded_gaussian(r, k, 0.0, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    ad.heads.assign(static_cast<std::size_t>(n_heads), Matrix::zeros(d, r));
    ad.gate.mode = mode;
    ad.gate.logits.assign(static_cast<std::size_t>(n_heads), 0.0);
    return ad;
}

int adapter_out_dim(const Adapter& adapter) {
    return std::visit([](const auto& a) { return a.out_dim(); }, adapter);
}

int adapter_in_dim(const Adapter& adapter) {
    return std::visit([](const auto& a) { return a.in_dim(); }, adapter);
}

Matrix lora_delta(const LoraAdapter& ad) {
    return scaled(ad.scale(), matmul(ad.B, ad.A));
}

Matrix hydra_delta(const HydraAdapter& ad) {
    const std::vector<double> w = gate_weights(ad.gate);
    return scaled(ad.scale(), matmul(head_mix(ad, w), ad.A_shared));
}

Matrix adapter_delta(const Adapter& adapter) {
    if (const auto* lora = std::get_if<LoraAdapter>(&adapter)) return lora_delta(*lora);
    return hydra_delta(std::get<HydraAdapter>(adapter));
}

Matrix adapted_forward(const Matrix& x, const Matrix& W0, const LoraAdapter& ad) {
    check_forward_shapes(x, W0, ad.out_dim(), ad.in_dim());
    const Matrix u = matmul(ad.A, x);
    const Matrix s = matmul(ad.B, u);
    return axpy(ad.scale(), s, matmul(W0, x));
}

Matrix adapted_forward(const Matrix& x, const Matrix& W0, const HydraAdapter& ad) {
    check_forward_shapes(x, W0, ad.out_dim(), ad.in_dim());
    const std::vector<double> w = gate_weights(ad.gate);
    const Matrix u = matmul(ad.A_shared, x);
    Matrix acc = Matrix::zeros(ad.out_dim(), x.cols);
    for (int i = 0; i < ad.num_heads(); ++i) {
        acc = axpy(w[i], matmul(ad.heads[i], u), acc);
    }
    return axpy(ad.scale(), acc, matmul(W0, x));
}

Matrix adapted_forward(const Matrix& x, const Matrix& W0, const Adapter& adapter) {
    return std::visit([&](const auto& a) { return adapted_forward(x, W0, a); }, adapter);
}

Matrix merge(const Matrix& W0, const Adapter& adapter) {
    const Matrix delta = adapter_delta(adapter);
    if (!W0.same_shape(delta)) {
        throw ShapeError("merge: base weight " + W0.shape_str() + " vs adapter delta " + delta.shape_str());
    }
    return axpy(1.0, delta, W0);
}

AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const LoraAdapter& ad,
                              const Matrix& grad_out) {
    check_forward_shapes(x, W0, ad.out_dim(), ad.in_dim());
    if (grad_out.rows != ad.out_dim() || grad_out.cols != x.cols) {
        throw ShapeError("adapter_backward: grad_out " + grad_out.shape_str() + " does not match output " +
                         std::to_string(ad.out_dim()) + "x" + std::to_string(x.cols));
    }
    const Matrix u = matmul(ad.A, x);
    AdapterGrads g;
    g.dB.push_back(scaled(ad.scale(), matmul(grad_out, transpose(u))));
    g.dA = scaled(ad.scale(), matmul(matmul(transpose(ad.B), grad_out), transpose(x)));
    return g;
}

AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const HydraAdapter& ad,
                              const Matrix& grad_out) {
    check_forward_shapes(x, W0, ad.out_dim(), ad.in_dim());
    if (grad_out.rows != ad.out_dim() || grad_out.cols != x.cols) {
        throw ShapeError("adapter_backward: grad_out " + grad_out.shape_str() + " does not match output " +
                         std::to_string(ad.out_dim()) + "x" + std::to_string(x.cols));
    }
    const std::vector<double> w = gate_weights(ad.gate);
    const double scale = ad.scale();
    const Matrix u = matmul(ad.A_shared, x);
    const Matrix g_ut = matmul(grad_out, transpose(u));

    AdapterGrads g;
    g.dB.reserve(ad.heads.size());
    for (int i = 0; i < ad.num_heads(); ++i) {
        g.dB.push_back(scaled(scale * w[i], g_ut));
    }
    const Matrix mixed = head_mix(ad, w);
    g.dA = scaled(scale, matmul(matmul(transpose(mixed), grad_out), transpose(x)));

    if (ad.gate.mode == GateMode::LearnableLogits) {
        std::vector<double> dw(w.size());
        for (int i = 0; i < ad.num_heads(); ++i) {
            dw[i] = scale * frobenius_dot(grad_out, matmul(ad.heads[i], u));
        }
        // Chain through the softmax Jacobian: dl_j = w_j (dw_j - sum_i dw_i w_i).
        double inner = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) inner += dw[i] * w[i];
        g.dlogits.resize(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) g.dlogits[j] = w[j] * (dw[j] - inner);
    }
    return g;
}

AdapterGrads adapter_backward(const Matrix& x, const Matrix& W0, const Adapter& adapter,
                              const Matrix& grad_out) {
    return std::visit([&](const auto& a) { return adapter_backward(x, W0, a, grad_out); }, adapter);
}

Matrix adapted_backward_input(const Matrix& grad_out, const Matrix& W0, const Adapter& adapter) {
    const Matrix base = matmul(transpose(W0), grad_out);
    if (const auto* lora = std::get_if<LoraAdapter>(&adapter)) {
        const Matrix t = matmul(transpose(lora->B), grad_out);
        return axpy(lora->scale(), matmul(transpose(lora->A), t), base);
    }
    const auto& ad = std::get<HydraAdapter>(adapter);
    const std::vector<double> w = gate_weights(ad.gate);
    Matrix t = Matrix::zeros(ad.rank, grad_out.cols);
    for (int i = 0; i < ad.num_heads(); ++i) {
        t = axpy(w[i], matmul(transpose(ad.heads[i]), grad_out), t);
    }
    return axpy(ad.scale(), matmul(transpose(ad.A_shared), t), base);
}

void save_adapter(const Adapter& adapter, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open adapter file for writing: " + path);

    const Matrix* A;
    std::vector<const Matrix*> heads;
    std::vector<double> logits;
    int rank;
    double alpha;
    std::int32_t gate_mode;

    if (const auto* lora = std::get_if<LoraAdapter>(&adapter)) {
        A = &lora->A;
        heads.push_back(&lora->B);
        logits.assign(1, 0.0);
        rank = lora->rank;
        alpha = lora->alpha;
        gate_mode = 0;
    } else {
        const auto& hy = std::get<HydraAdapter>(adapter);
        A = &hy.A_shared;
        for (const Matrix& b : hy.heads) heads.push_back(&b);
        logits = hy.gate.logits;
        rank = hy.rank;
        alpha = hy.alpha;
        gate_mode = hy.gate.mode == GateMode::FixedUniform ? 0 : 1;
    }

    write_bytes(out, kMagic, sizeof(kMagic));
    write_i32(out, heads.front()->rows);                      // d
    write_i32(out, A->cols);                                  // k
    write_i32(out, rank);                                     // r
    write_i32(out, static_cast<std::int32_t>(heads.size()));  // N
    write_f64(out, alpha);
    write_i32(out, gate_mode);
    write_matrix(out, *A);
    for (const Matrix* b : heads) write_matrix(out, *b);
    for (double l : logits) write_f64(out, l);
    if (!out) throw IoError("write failure on adapter file: " + path);
}

Adapter load_adapter(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open adapter file: " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0) {
        throw IoError("bad adapter magic in " + path);
    }
    const int d = read_i32(in);
    const int k = read_i32(in);
    const int r = read_i32(in);
    const int n = read_i32(in);
    const double alpha = read_f64(in);
    const std::int32_t gate_mode = read_i32(in);
    if (d < 1 || k < 1 || r < 1 || n < 1 || (gate_mode != 0 && gate_mode != 1)) {
        throw IoError("bad adapter header in " + path);
    }

    HydraAdapter ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.A_shared = read_matrix(in, r, k);
    ad.heads.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ad.heads.push_back(read_matrix(in, d, r));
    ad.gate.mode = gate_mode == 0 ? GateMode::FixedUniform : GateMode::LearnableLogits;
    ad.gate.logits.resize(static_cast<std::size_t>(n));
    for (double& l : ad.gate.logits) l = read_f64(in);
    if (!in) throw IoError("truncated adapter file: " + path);
    return Adapter(std::move(ad));
}

}  // namespace hydra
