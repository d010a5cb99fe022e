// SPDX-License-Identifier: Apache-2.0
#include "hydra/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <variant>

#include "hydra/adapter.hpp"
#include "hydra/denoiser.hpp"
#include "hydra/errors.hpp"
#include "hydra/matrix.hpp"
#include "hydra/trainer.hpp"

namespace hydra {

namespace {

// Symmetric relative error with a floor that keeps finite-difference noise
// (~1e-11 on O(1) losses) far below the 1e-4 tolerance.
double rel_err(double analytic, double fd) {
    return std::fabs(analytic - fd) / std::max(1e-6, std::fabs(analytic) + std::fabs(fd));
}

double central_diff(double& param, double h, const std::function<double()>& loss) {
    const double orig = param;
    param = orig + h;
    const double lp = loss();
    param = orig - h;
    const double lm = loss();
    param = orig;
    return (lp - lm) / (2.0 * h);
}

}  // namespace

GradCheckReport run_gradcheck(const GradCheckOptions& opts) {
    if (opts.instances < 1) throw ParameterError("gradcheck: instances must be >= 1");
    if (opts.step <= 0.0) throw ParameterError("gradcheck: step must be positive");
    if (opts.tolerance <= 0.0) throw ParameterError("gradcheck: tolerance must be positive");

    GradCheckReport report;
    report.tolerance = opts.tolerance;
    auto note = [&](double& cls, double rel, const std::string& desc) {
        cls = std::max(cls, rel);
        if (rel > report.worst_rel) {
            report.worst_rel = rel;
            report.worst_param = desc;
        }
    };

    RngState root(opts.seed);

    // Standalone adapters: the probe loss <G, forward(x)> makes the exact
    // parameter gradient equal to adapter_backward evaluated at grad_out=G.
    for (int inst = 0; inst < opts.instances; ++inst) {
        RngState r = root.split(static_cast<std::uint64_t>(inst) + 1);
        const int d = 2 + static_cast<int>(r.next_u64() % 6);
        const int k = 2 + static_cast<int>(r.next_u64() % 6);
        const int rank = 1 + static_cast<int>(r.next_u64() % static_cast<std::uint64_t>(std::min(d, k)));
        const int heads = 1 + inst % 4;
        const double alpha = 1.0 + inst % 3;
        HydraAdapter ad = HydraAdapter::init(d, k, rank, heads, alpha, GateMode::LearnableLogits, r);
        for (Matrix& b : ad.heads) b = seeded_gaussian(d, rank, 0.0, 0.5, r);
        for (double& l : ad.gate.logits) l = r.next_gaussian(0.0, 0.5);

        const Matrix w0 = seeded_gaussian(d, k, 0.0, 0.5, r);
        const int batch = 1 + inst % 3;
        const Matrix x = seeded_gaussian(k, batch, 0.0, 1.0, r);
        const Matrix g = seeded_gaussian(d, batch, 0.0, 1.0, r);

        const AdapterGrads an = adapter_backward(x, w0, ad, g);
        const std::function<double()> loss = [&]() {
            return frobenius_dot(g, adapted_forward(x, w0, ad));
        };
        const std::string where = "adapter[" + std::to_string(inst) + "] ";

        for (std::size_t i = 0; i < ad.A_shared.data.size(); ++i) {
            const double fd = central_diff(ad.A_shared.data[i], opts.step, loss);
            note(report.max_rel_shared, rel_err(an.dA.data[i] * opts.inject_shared_error, fd),
                 where + "shared A elem " + std::to_string(i));
        }
        for (std::size_t h = 0; h < ad.heads.size(); ++h) {
            for (std::size_t i = 0; i < ad.heads[h].data.size(); ++i) {
                const double fd = central_diff(ad.heads[h].data[i], opts.step, loss);
                note(report.max_rel_heads, rel_err(an.dB[h].data[i], fd),
                     where + "head " + std::to_string(h) + " elem " + std::to_string(i));
            }
        }
        for (std::size_t i = 0; i < ad.gate.logits.size(); ++i) {
            const double fd = central_diff(ad.gate.logits[i], opts.step, loss);
            note(report.max_rel_gate, rel_err(an.dlogits[i], fd),
                 where + "gate logit " + std::to_string(i));
        }
    }

    // End-to-end: every adapter parameter of a small two-block network
    // against the full denoising loss.
    DenoiserConfig dc;
    dc.frames = 3;
    dc.channels = 2;
    dc.d_model = opts.d_model;
    dc.mlp_hidden = opts.d_model + opts.d_model / 2;
    dc.n_blocks = 2;
    dc.num_classes = 2;

    RngState nrng = root.split(0xE2E);
    DenoiserParams model = DenoiserParams::init(dc, nrng);
    TrainConfig tc;
    tc.adapter_kind = AdapterKind::Hydra;
    tc.rank = 2;
    tc.heads = 2;
    tc.alpha = 2.0;
    tc.gate = GateMode::LearnableLogits;
    tc.placement = {"attn", "mlp"};
    attach_adapters(model, tc, nrng);
    for (auto& [name, ad] : model.adapters) {
        HydraAdapter& h = std::get<HydraAdapter>(ad);
        for (Matrix& b : h.heads) b = seeded_gaussian(b.rows, b.cols, 0.0, 0.3, nrng);
        for (double& l : h.gate.logits) l = nrng.next_gaussian(0.0, 0.3);
    }

    const int batch = 2;
    const Matrix z_t = seeded_gaussian(dc.latent_dim(), batch, 0.0, 1.0, nrng);
    const Matrix eps = seeded_gaussian(dc.latent_dim(), batch, 0.0, 1.0, nrng);
    const std::vector<int> t = {3, 7};
    const std::vector<int> classes = {0, 1};

    ForwardCache cache;
    const Matrix pred = denoise_forward(z_t, t, classes, model, &cache);
    const AdapterGradsMap grads = denoise_backward(ldm_loss_grad(eps, pred), cache, model);
    const std::function<double()> net_loss = [&]() {
        return ldm_loss(eps, denoise_predict(z_t, t, classes, model));
    };

    for (auto& [name, ad] : model.adapters) {
        HydraAdapter& h = std::get<HydraAdapter>(ad);
        const AdapterGrads& an = grads.at(name);
        for (std::size_t i = 0; i < h.A_shared.data.size(); ++i) {
            const double fd = central_diff(h.A_shared.data[i], opts.step, net_loss);
            note(report.max_rel_network, rel_err(an.dA.data[i] * opts.inject_shared_error, fd),
                 "net " + name + " shared A elem " + std::to_string(i));
        }
        for (std::size_t hd = 0; hd < h.heads.size(); ++hd) {
            for (std::size_t i = 0; i < h.heads[hd].data.size(); ++i) {
                const double fd = central_diff(h.heads[hd].data[i], opts.step, net_loss);
                note(report.max_rel_network, rel_err(an.dB[hd].data[i], fd),
                     "net " + name + " head " + std::to_string(hd) + " elem " + std::to_string(i));
            }
        }
        for (std::size_t i = 0; i < h.gate.logits.size(); ++i) {
            const double fd = central_diff(h.gate.logits[i], opts.step, net_loss);
            note(report.max_rel_network, rel_err(an.dlogits[i], fd),
                 "net " + name + " gate logit " + std::to_string(i));
        }
    }
    return report;
}

}  // namespace hydra
