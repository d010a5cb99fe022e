// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hydra/adapter.hpp"
#include "hydra/matrix.hpp"

namespace hydra {

/// Flattened toy video latent: z is D x batch with D = frames * channels
/// (frame f occupies rows [f*C, (f+1)*C)), one prompt class per column.
struct LatentBatch {
    Matrix z;
    std::vector<int> prompt_class;
};

struct Linear {
    Matrix W;
    std::vector<double> b;
};

struct LayerNormParams {
    std::vector<double> gamma;
    std::vector<double> beta;
};

struct DenoiserConfig {
    int frames = 8;
    int channels = 4;
    int d_model = 32;
    int mlp_hidden = 64;
    int n_blocks = 2;
    int num_classes = 4;

    int latent_dim() const { return frames * channels; }
};

/// One pre-norm transformer block: LN -> single-head self-attention over the
/// frame tokens -> residual, LN -> 2-layer MLP -> residual.
struct DenoiserBlock {
    LayerNormParams ln1, ln2;
    Linear q, k, v, o, mlp1, mlp2;
};

/// Tiny denoising network. Base weights are frozen after initialization;
/// the only trainable parameters live in the attached adapters.
struct DenoiserParams {
    DenoiserConfig cfg;
    Linear in_proj;   // d_model x channels
    Linear out_proj;  // channels x d_model
    LayerNormParams ln_f;
    std::vector<DenoiserBlock> blocks;
    Matrix class_emb;  // d_model x num_classes, frozen after init
    bool frozen = false;

    /// Adapter attachment map keyed by layer name ("blk0.q", "blk1.mlp2", ...).
    std::map<std::string, Adapter> adapters;

    static DenoiserParams init(const DenoiserConfig& cfg, RngState& rng);

    /// Linear-layer names in forward order.
    std::vector<std::string> layer_names() const;
    const Linear& layer(const std::string& name) const;
};

struct LayerNormCache {
    Matrix xhat;
    std::vector<double> inv_std;
};

struct BlockCache {
    Matrix h_in;
    LayerNormCache ln1;
    Matrix hn1, q, k, v, attn_out;
    std::vector<Matrix> probs;  // per-sample F x F attention rows
    Matrix h_mid;
    LayerNormCache ln2;
    Matrix hn2, mlp_pre, mlp_act;
};

struct ForwardCache {
    int batch = 0;
    Matrix tokens;  // channels x (batch * frames)
    Matrix h0;
    std::vector<BlockCache> blocks;
    Matrix hf_in;
    LayerNormCache lnf;
    Matrix hnf;
};

/// Full forward pass; one timestep and one prompt class per batch column.
/// Every linear routes through the adapted path when an adapter is attached.
Matrix denoise_forward(const Matrix& z_t, const std::vector<int>& t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params, ForwardCache* cache);

Matrix denoise_predict(const Matrix& z_t, const std::vector<int>& t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params);
Matrix denoise_predict(const Matrix& z_t, int t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params);

using AdapterGradsMap = std::map<std::string, AdapterGrads>;

/// Reverse pass from dL/d(eps_hat); returns gradients for every attached
/// adapter. Frozen base tensors receive no gradient.
AdapterGradsMap denoise_backward(const Matrix& grad_eps_hat, const ForwardCache& cache,
                                 const DenoiserParams& params);

/// Mean over all entries of (eps - eps_hat)^2.
double ldm_loss(const Matrix& eps, const Matrix& eps_hat);
Matrix ldm_loss_grad(const Matrix& eps, const Matrix& eps_hat);

/// Synthetic class-conditioned dataset: one parametric frame trajectory per
/// class plus Gaussian jitter. Returns one batch per class.
std::vector<LatentBatch> make_toy_dataset(int num_classes, int samples_per_class, int frames,
                                          int channels, double jitter, std::uint64_t seed);

/// Ordered view over every frozen base tensor (weights, biases, norms,
/// embeddings); shared by the digest and the freeze audit.
std::vector<std::pair<std::string, const std::vector<double>*>> base_tensors(const DenoiserParams& params);

/// sha-256 hex digest over all base tensors in fixed order.
std::string base_digest(const DenoiserParams& params);

}  // namespace hydra
