// SPDX-License-Identifier: Apache-2.0
#include "hydra/denoiser.hpp"

#include <cmath>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

constexpr double kLnEps = 1e-5;

Matrix col_slice(const Matrix& m, int c0, int n) {
    Matrix out(m.rows, n);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < n; ++c) out.at(r, c) = m.at(r, c0 + c);
    }
    return out;
}

void add_col_slice(Matrix& dst, const Matrix& src, int c0) {
    for (int r = 0; r < src.rows; ++r) {
        for (int c = 0; c < src.cols; ++c) dst.at(r, c0 + c) += src.at(r, c);
    }
}

Linear init_linear(int out_dim, int in_dim, RngState& rng) {
    Linear lin;
    lin.W = seeded_gaussian(out_dim, in_dim, 0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng);
    lin.b.assign(static_cast<std::size_t>(out_dim), 0.0);
    return lin;
}

LayerNormParams init_layernorm(int dim) {
    LayerNormParams ln;
    ln.gamma.assign(static_cast<std::size_t>(dim), 1.0);
    ln.beta.assign(static_cast<std::size_t>(dim), 0.0);
    return ln;
}

// y = W x (adapted when attached) + bias broadcast over columns.
Matrix linear_forward(const std::string& name, const Linear& lin, const Matrix& x,
                      const DenoiserParams& params) {
    auto it = params.adapters.find(name);
    Matrix y = it == params.adapters.end() ? matmul(lin.W, x) : adapted_forward(x, lin.W, it->second);
    for (int r = 0; r < y.rows; ++r) {
        const double b = lin.b[r];
        for (int c = 0; c < y.cols; ++c) y.at(r, c) += b;
    }
    return y;
}

// Accumulates adapter grads (if attached) and returns dL/dx.
Matrix linear_backward(const std::string& name, const Linear& lin, const Matrix& x, const Matrix& gy,
                       const DenoiserParams& params, AdapterGradsMap& grads) {
    auto it = params.adapters.find(name);
    if (it == params.adapters.end()) {
        return matmul(transpose(lin.W), gy);
    }
    grads.emplace(name, adapter_backward(x, lin.W, it->second, gy));
    return adapted_backward_input(gy, lin.W, it->second);
}

// Per-column layer norm over the feature dimension.
Matrix layernorm_forward(const LayerNormParams& ln, const Matrix& x, LayerNormCache* cache) {
    const int d = x.rows;
    Matrix y(d, x.cols);
    Matrix xhat(d, x.cols);
    std::vector<double> inv_std(static_cast<std::size_t>(x.cols));
    for (int c = 0; c < x.cols; ++c) {
        double mean = 0.0;
        for (int r = 0; r < d; ++r) mean += x.at(r, c);
        mean /= d;
        double var = 0.0;
        for (int r = 0; r < d; ++r) {
            const double t = x.at(r, c) - mean;
            var += t * t;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[c] = is;
        for (int r = 0; r < d; ++r) {
            const double xh = (x.at(r, c) - mean) * is;
            xhat.at(r, c) = xh;
            y.at(r, c) = ln.gamma[r] * xh + ln.beta[r];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Matrix layernorm_backward(const LayerNormParams& ln, const LayerNormCache& cache, const Matrix& gy) {
    const int d = gy.rows;
    Matrix gx(d, gy.cols);
    for (int c = 0; c < gy.cols; ++c) {
        double mean_g = 0.0;
        double mean_gx = 0.0;
        for (int r = 0; r < d; ++r) {
            const double gh = gy.at(r, c) * ln.gamma[r];
            mean_g += gh;
            mean_gx += gh * cache.xhat.at(r, c);
        }
        mean_g /= d;
        mean_gx /= d;
        const double is = cache.inv_std[c];
        for (int r = 0; r < d; ++r) {
            const double gh = gy.at(r, c) * ln.gamma[r];
            gx.at(r, c) = is * (gh - mean_g - cache.xhat.at(r, c) * mean_gx);
        }
    }
    return gx;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / M_SQRT2));
}

double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x / M_SQRT2)) + x * phi;
}

std::vector<double> time_embedding(int t, int dim) {
    std::vector<double> emb(static_cast<std::size_t>(dim), 0.0);
    const int half = dim / 2;
    for (int j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * j / half);
        emb[2 * j] = std::sin(t * freq);
        emb[2 * j + 1] = std::cos(t * freq);
    }
    return emb;
}

// z (D x B) -> tokens (C x B*F), column b*F + f.
Matrix latent_to_tokens(const Matrix& z, int frames, int channels) {
    const int batch = z.cols;
    Matrix tokens(channels, batch * frames);
    for (int b = 0; b < batch; ++b) {
        for (int f = 0; f < frames; ++f) {
            for (int ch = 0; ch < channels; ++ch) {
                tokens.at(ch, b * frames + f) = z.at(f * channels + ch, b);
            }
        }
    }
    return tokens;
}

Matrix tokens_to_latent(const Matrix& tokens, int frames, int channels) {
    const int batch = tokens.cols / frames;
    Matrix z(frames * channels, batch);
    for (int b = 0; b < batch; ++b) {
        for (int f = 0; f < frames; ++f) {
            for (int ch = 0; ch < channels; ++ch) {
                z.at(f * channels + ch, b) = tokens.at(ch, b * frames + f);
            }
        }
    }
    return z;
}

}  // namespace

DenoiserParams DenoiserParams::init(const DenoiserConfig& cfg, RngState& rng) {
    if (cfg.frames < 1 || cfg.channels < 1 || cfg.d_model < 1 || cfg.mlp_hidden < 1 ||
        cfg.n_blocks < 1 || cfg.num_classes < 1) {
        throw ParameterError("denoiser config requires all dimensions >= 1");
    }
    DenoiserParams p;
    p.cfg = cfg;
    p.in_proj = init_linear(cfg.d_model, cfg.channels, rng);
    p.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
    for (auto& blk : p.blocks) {
        blk.ln1 = init_layernorm(cfg.d_model);
        blk.q = init_linear(cfg.d_model, cfg.d_model, rng);
        blk.k = init_linear(cfg.d_model, cfg.d_model, rng);
        blk.v = init_linear(cfg.d_model, cfg.d_model, rng);
        blk.o = init_linear(cfg.d_model, cfg.d_model, rng);
        blk.ln2 = init_layernorm(cfg.d_model);
        blk.mlp1 = init_linear(cfg.mlp_hidden, cfg.d_model, rng);
        blk.mlp2 = init_linear(cfg.d_model, cfg.mlp_hidden, rng);
    }
    p.ln_f = init_layernorm(cfg.d_model);
    p.out_proj = init_linear(cfg.channels, cfg.d_model, rng);
    p.class_emb = seeded_gaussian(cfg.d_model, cfg.num_classes, 0.0, 1.0, rng);
    p.frozen = true;
    return p;
}

std::vector<std::string> DenoiserParams::layer_names() const {
    std::vector<std::string> names;
    names.push_back("in_proj");
    for (int i = 0; i < cfg.n_blocks; ++i) {
        const std::string prefix = "blk" + std::to_string(i) + ".";
        for (const char* s : {"q", "k", "v", "o", "mlp1", "mlp2"}) names.push_back(prefix + s);
    }
    names.push_back("out_proj");
    return names;
}

const Linear& DenoiserParams::layer(const std::string& name) const {
    if (name == "in_proj") return in_proj;
    if (name == "out_proj") return out_proj;
    if (name.rfind("blk", 0) == 0) {
        const auto dot = name.find('.');
        const int idx = std::stoi(name.substr(3, dot - 3));
        if (idx >= 0 && idx < cfg.n_blocks) {
            const std::string part = name.substr(dot + 1);
            const DenoiserBlock& blk = blocks[static_cast<std::size_t>(idx)];
            if (part == "q") return blk.q;
            if (part == "k") return blk.k;
            if (part == "v") return blk.v;
            if (part == "o") return blk.o;
            if (part == "mlp1") return blk.mlp1;
            if (part == "mlp2") return blk.mlp2;
        }
    }
    throw ParameterError("unknown denoiser layer: " + name);
}

Matrix denoise_forward(const Matrix& z_t, const std::vector<int>& t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params, ForwardCache* cache) {
    const DenoiserConfig& cfg = params.cfg;
    const int batch = z_t.cols;
    if (z_t.rows != cfg.latent_dim()) {
        throw ShapeError("denoise: latent " + z_t.shape_str() + " does not match F*C=" +
                         std::to_string(cfg.latent_dim()));
    }
    if (static_cast<int>(t.size()) != batch || static_cast<int>(prompt_class.size()) != batch) {
        throw ShapeError("denoise: need one timestep and one class per batch column");
    }
    for (int c : prompt_class) {
        if (c < 0 || c >= cfg.num_classes) {
            throw ParameterError("prompt class out of range: " + std::to_string(c) + " with num_classes=" +
                                 std::to_string(cfg.num_classes));
        }
    }

    const Matrix tokens = latent_to_tokens(z_t, cfg.frames, cfg.channels);
    Matrix h = linear_forward("in_proj", params.in_proj, tokens, params);

    // Additive conditioning at the input projection: every token of sample b
    // receives that sample's timestep and class embeddings.
    for (int b = 0; b < batch; ++b) {
        const std::vector<double> temb = time_embedding(t[b], cfg.d_model);
        for (int f = 0; f < cfg.frames; ++f) {
            const int col = b * cfg.frames + f;
            for (int r = 0; r < cfg.d_model; ++r) {
                h.at(r, col) += temb[r] + params.class_emb.at(r, prompt_class[b]);
            }
        }
    }

    if (cache) {
        cache->batch = batch;
        cache->tokens = tokens;
        cache->h0 = h;
        cache->blocks.assign(static_cast<std::size_t>(cfg.n_blocks), BlockCache{});
    }

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

    for (int i = 0; i < cfg.n_blocks; ++i) {
        const DenoiserBlock& blk = params.blocks[static_cast<std::size_t>(i)];
        const std::string prefix = "blk" + std::to_string(i) + ".";
        BlockCache* bc = cache ? &cache->blocks[static_cast<std::size_t>(i)] : nullptr;
        if (bc) bc->h_in = h;

        Matrix hn1 = layernorm_forward(blk.ln1, h, bc ? &bc->ln1 : nullptr);
        Matrix q = linear_forward(prefix + "q", blk.q, hn1, params);
        Matrix k = linear_forward(prefix + "k", blk.k, hn1, params);
        Matrix v = linear_forward(prefix + "v", blk.v, hn1, params);

        Matrix attn_out(cfg.d_model, batch * cfg.frames);
        std::vector<Matrix> probs;
        if (bc) probs.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            const int c0 = b * cfg.frames;
            const Matrix qb = col_slice(q, c0, cfg.frames);
            const Matrix kb = col_slice(k, c0, cfg.frames);
            const Matrix vb = col_slice(v, c0, cfg.frames);
            Matrix scores = scaled(attn_scale, matmul(transpose(qb), kb));
            // Row softmax: row fi holds query token fi against all keys.
            for (int fi = 0; fi < cfg.frames; ++fi) {
                double mx = scores.at(fi, 0);
                for (int fj = 1; fj < cfg.frames; ++fj) mx = std::max(mx, scores.at(fi, fj));
                double z = 0.0;
                for (int fj = 0; fj < cfg.frames; ++fj) {
                    const double e = std::exp(scores.at(fi, fj) - mx);
                    scores.at(fi, fj) = e;
                    z += e;
                }
                for (int fj = 0; fj < cfg.frames; ++fj) scores.at(fi, fj) /= z;
            }
            const Matrix ob = matmul(vb, transpose(scores));
            for (int r = 0; r < cfg.d_model; ++r) {
                for (int f = 0; f < cfg.frames; ++f) attn_out.at(r, c0 + f) = ob.at(r, f);
            }
            if (bc) probs.push_back(std::move(scores));
        }

        Matrix attn_proj = linear_forward(prefix + "o", blk.o, attn_out, params);
        Matrix h_mid = axpy(1.0, attn_proj, h);

        if (bc) {
            bc->hn1 = std::move(hn1);
            bc->q = std::move(q);
            bc->k = std::move(k);
            bc->v = std::move(v);
            bc->attn_out = std::move(attn_out);
            bc->probs = std::move(probs);
            bc->h_mid = h_mid;
        }

        Matrix hn2 = layernorm_forward(blk.ln2, h_mid, bc ? &bc->ln2 : nullptr);
        Matrix pre = linear_forward(prefix + "mlp1", blk.mlp1, hn2, params);
        Matrix act(pre.rows, pre.cols);
        for (std::size_t idx = 0; idx < pre.data.size(); ++idx) act.data[idx] = gelu(pre.data[idx]);
        Matrix mlp = linear_forward(prefix + "mlp2", blk.mlp2, act, params);
        h = axpy(1.0, mlp, h_mid);

        if (bc) {
            bc->hn2 = std::move(hn2);
            bc->mlp_pre = std::move(pre);
            bc->mlp_act = std::move(act);
        }
    }

    if (cache) cache->hf_in = h;
    Matrix hn_f = layernorm_forward(params.ln_f, h, cache ? &cache->lnf : nullptr);
    if (cache) cache->hnf = hn_f;
    Matrix out_tokens = linear_forward("out_proj", params.out_proj, hn_f, params);
    return tokens_to_latent(out_tokens, cfg.frames, cfg.channels);
}

Matrix denoise_predict(const Matrix& z_t, const std::vector<int>& t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params) {
    return denoise_forward(z_t, t, prompt_class, params, nullptr);
}

Matrix denoise_predict(const Matrix& z_t, int t, const std::vector<int>& prompt_class,
                       const DenoiserParams& params) {
    return denoise_forward(z_t, std::vector<int>(static_cast<std::size_t>(z_t.cols), t), prompt_class,
                           params, nullptr);
}

AdapterGradsMap denoise_backward(const Matrix& grad_eps_hat, const ForwardCache& cache,
                                 const DenoiserParams& params) {
    const DenoiserConfig& cfg = params.cfg;
    const int batch = cache.batch;
    AdapterGradsMap grads;

    Matrix g_tokens = latent_to_tokens(grad_eps_hat, cfg.frames, cfg.channels);
    Matrix g_hnf = linear_backward("out_proj", params.out_proj, cache.hnf, g_tokens, params, grads);
    Matrix g_h = layernorm_backward(params.ln_f, cache.lnf, g_hnf);

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

    for (int i = cfg.n_blocks - 1; i >= 0; --i) {
        const DenoiserBlock& blk = params.blocks[static_cast<std::size_t>(i)];
        const BlockCache& bc = cache.blocks[static_cast<std::size_t>(i)];
        const std::string prefix = "blk" + std::to_string(i) + ".";

        // MLP branch: h = h_mid + mlp2(gelu(mlp1(ln2(h_mid)))).
        Matrix g_act = linear_backward(prefix + "mlp2", blk.mlp2, bc.mlp_act, g_h, params, grads);
        Matrix g_pre(g_act.rows, g_act.cols);
        for (std::size_t idx = 0; idx < g_act.data.size(); ++idx) {
            g_pre.data[idx] = g_act.data[idx] * gelu_grad(bc.mlp_pre.data[idx]);
        }
        Matrix g_hn2 = linear_backward(prefix + "mlp1", blk.mlp1, bc.hn2, g_pre, params, grads);
        Matrix g_h_mid = axpy(1.0, layernorm_backward(blk.ln2, bc.ln2, g_hn2), g_h);

        // Attention branch: h_mid = h_in + o(attention(ln1(h_in))).
        Matrix g_attn_out = linear_backward(prefix + "o", blk.o, bc.attn_out, g_h_mid, params, grads);
        Matrix g_q(cfg.d_model, batch * cfg.frames);
        Matrix g_k(cfg.d_model, batch * cfg.frames);
        Matrix g_v(cfg.d_model, batch * cfg.frames);
        for (int b = 0; b < batch; ++b) {
            const int c0 = b * cfg.frames;
            const Matrix gob = col_slice(g_attn_out, c0, cfg.frames);
            const Matrix qb = col_slice(bc.q, c0, cfg.frames);
            const Matrix kb = col_slice(bc.k, c0, cfg.frames);
            const Matrix vb = col_slice(bc.v, c0, cfg.frames);
            const Matrix& p = bc.probs[static_cast<std::size_t>(b)];

            Matrix gp = matmul(transpose(gob), vb);
            Matrix gvb = matmul(gob, p);
            Matrix gs(cfg.frames, cfg.frames);
            for (int fi = 0; fi < cfg.frames; ++fi) {
                double dot = 0.0;
                for (int fj = 0; fj < cfg.frames; ++fj) dot += gp.at(fi, fj) * p.at(fi, fj);
                for (int fj = 0; fj < cfg.frames; ++fj) {
                    gs.at(fi, fj) = p.at(fi, fj) * (gp.at(fi, fj) - dot);
                }
            }
            const Matrix gqb = scaled(attn_scale, matmul(kb, transpose(gs)));
            const Matrix gkb = scaled(attn_scale, matmul(qb, gs));
            for (int r = 0; r < cfg.d_model; ++r) {
                for (int f = 0; f < cfg.frames; ++f) {
                    g_q.at(r, c0 + f) = gqb.at(r, f);
                    g_k.at(r, c0 + f) = gkb.at(r, f);
                    g_v.at(r, c0 + f) = gvb.at(r, f);
                }
            }
        }

        Matrix g_hn1 = linear_backward(prefix + "q", blk.q, bc.hn1, g_q, params, grads);
        add_col_slice(g_hn1, linear_backward(prefix + "k", blk.k, bc.hn1, g_k, params, grads), 0);
        add_col_slice(g_hn1, linear_backward(prefix + "v", blk.v, bc.hn1, g_v, params, grads), 0);
        g_h = axpy(1.0, layernorm_backward(blk.ln1, bc.ln1, g_hn1), g_h_mid);
    }

    // Input projection: only needed when an adapter is attached there; the
    // token gradient itself is not propagated further.
    if (params.adapters.count("in_proj") != 0) {
        linear_backward("in_proj", params.in_proj, cache.tokens, g_h, params, grads);
    }
    return grads;
}

double ldm_loss(const Matrix& eps, const Matrix& eps_hat) {
    if (!eps.same_shape(eps_hat)) {
        throw ShapeError("ldm_loss: eps " + eps.shape_str() + " vs eps_hat " + eps_hat.shape_str());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < eps.data.size(); ++i) {
        const double d = eps.data[i] - eps_hat.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(eps.data.size());
}

Matrix ldm_loss_grad(const Matrix& eps, const Matrix& eps_hat) {
    if (!eps.same_shape(eps_hat)) {
        throw ShapeError("ldm_loss: eps " + eps.shape_str() + " vs eps_hat " + eps_hat.shape_str());
    }
    Matrix g(eps.rows, eps.cols);
    const double c = 2.0 / static_cast<double>(eps.data.size());
    for (std::size_t i = 0; i < eps.data.size(); ++i) {
        g.data[i] = c * (eps_hat.data[i] - eps.data[i]);
    }
    return g;
}

std::vector<LatentBatch> make_toy_dataset(int num_classes, int samples_per_class, int frames,
                                          int channels, double jitter, std::uint64_t seed) {
    if (num_classes < 1 || samples_per_class < 1 || frames < 1 || channels < 1) {
        throw ParameterError("make_toy_dataset: all counts must be >= 1");
    }
    if (jitter < 0.0) throw ParameterError("make_toy_dataset: jitter must be >= 0");

    RngState rng = RngState(seed).split(0x7071);
    std::vector<LatentBatch> out;
    out.reserve(static_cast<std::size_t>(num_classes));
    const int dim = frames * channels;
    for (int c = 0; c < num_classes; ++c) {
        // Class-specific sinusoid: distinct frequency and phase per class.
        const double freq = 1.0 + 0.5 * c;
        const double phase = 2.0 * M_PI * c / num_classes;
        LatentBatch batch;
        batch.z = Matrix(dim, samples_per_class);
        batch.prompt_class.assign(static_cast<std::size_t>(samples_per_class), c);
        for (int s = 0; s < samples_per_class; ++s) {
            for (int f = 0; f < frames; ++f) {
                for (int ch = 0; ch < channels; ++ch) {
                    const double base =
                        std::sin(2.0 * M_PI * freq * f / frames + phase + M_PI * ch / channels);
                    batch.z.at(f * channels + ch, s) = base + jitter * rng.next_gaussian(0.0, 1.0);
                }
            }
        }
        out.push_back(std::move(batch));
    }
    return out;
}

std::vector<std::pair<std::string, const std::vector<double>*>> base_tensors(const DenoiserParams& p) {
    std::vector<std::pair<std::string, const std::vector<double>*>> out;
    out.emplace_back("in_proj.W", &p.in_proj.W.data);
    out.emplace_back("in_proj.b", &p.in_proj.b);
    for (int i = 0; i < p.cfg.n_blocks; ++i) {
        const std::string prefix = "blk" + std::to_string(i) + ".";
        const DenoiserBlock& blk = p.blocks[static_cast<std::size_t>(i)];
        out.emplace_back(prefix + "ln1.gamma", &blk.ln1.gamma);
        out.emplace_back(prefix + "ln1.beta", &blk.ln1.beta);
        for (auto [n, lin] : {std::pair<const char*, const Linear*>{"q", &blk.q},
                              {"k", &blk.k},
                              {"v", &blk.v},
                              {"o", &blk.o},
                              {"mlp1", &blk.mlp1},
                              {"mlp2", &blk.mlp2}}) {
            out.emplace_back(prefix + n + ".W", &lin->W.data);
            out.emplace_back(prefix + n + ".b", &lin->b);
        }
        out.emplace_back(prefix + "ln2.gamma", &blk.ln2.gamma);
        out.emplace_back(prefix + "ln2.beta", &blk.ln2.beta);
    }
    out.emplace_back("ln_f.gamma", &p.ln_f.gamma);
    out.emplace_back("ln_f.beta", &p.ln_f.beta);
    out.emplace_back("out_proj.W", &p.out_proj.W.data);
    out.emplace_back("out_proj.b", &p.out_proj.b);
    out.emplace_back("class_emb", &p.class_emb.data);
    return out;
}

}  // namespace hydra
