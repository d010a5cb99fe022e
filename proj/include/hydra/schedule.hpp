// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "hydra/matrix.hpp"

namespace hydra {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string schedule_kind_to_string(ScheduleKind kind);

/// Per-timestep noise levels. alpha_bar[t-1] is the cumulative product of
/// (1 - beta_s) for s <= t; it is stored as exactly that product so explicit
/// recomputation matches bitwise.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
};

/// Linear: beta from 1e-4 to 0.02 inclusive. Cosine: betas derived from the
/// squared-cosine alpha_bar curve (s = 0.008), clipped at 0.999.
NoiseSchedule build_schedule(ScheduleKind kind, int T);

/// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps, t in [1, T].
Matrix forward_noise(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& sched);

/// Same formula with an independent timestep per column.
Matrix forward_noise_per_column(const Matrix& z0, const std::vector<int>& t, const Matrix& eps,
                                const NoiseSchedule& sched);

}  // namespace hydra
