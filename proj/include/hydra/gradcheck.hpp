// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace hydra {

struct GradCheckOptions {
    std::uint64_t seed = 0;
    int instances = 10;      // random adapter instances to sweep
    int d_model = 8;         // width of the end-to-end network check
    double step = 1e-5;      // central-difference step
    double tolerance = 1e-4;

    // Test hook: scales the analytic shared-projection gradient before
    // comparison, so a deliberately wrong formula is provably caught.
    double inject_shared_error = 1.0;
};

/// Worst relative error per parameter class, against central differences.
struct GradCheckReport {
    double max_rel_shared = 0.0;   // shared down-projection A
    double max_rel_heads = 0.0;    // every up-projection head
    double max_rel_gate = 0.0;     // gate logits
    double max_rel_network = 0.0;  // end-to-end through the denoiser
    double tolerance = 1e-4;
    std::string worst_param;
    double worst_rel = 0.0;

    bool passed() const { return worst_rel <= tolerance; }
};

/// Finite-difference validation of the hand-derived adapter gradients: a
/// sweep over random standalone adapter instances, then every adapter
/// parameter of a small two-block network against the full loss.
GradCheckReport run_gradcheck(const GradCheckOptions& opts);

}  // namespace hydra
