// SPDX-License-Identifier: Apache-2.0
#include "hydra/schedule.hpp"

#include <cmath>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

double cosine_curve(double step, double total) {
    constexpr double s = 0.008;
    const double v = std::cos((step / total + s) / (1.0 + s) * M_PI / 2.0);
    return v * v;
}

}  // namespace

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw ConfigError("unknown schedule kind: " + s);
}

std::string schedule_kind_to_string(ScheduleKind kind) {
    return kind == ScheduleKind::Linear ? "linear" : "cosine";
}

NoiseSchedule build_schedule(ScheduleKind kind, int T) {
    if (T < 1) throw ParameterError("schedule needs T >= 1, got " + std::to_string(T));

    NoiseSchedule sched;
    sched.T = T;
    sched.beta.resize(static_cast<std::size_t>(T));
    sched.alpha_bar.resize(static_cast<std::size_t>(T));

    if (kind == ScheduleKind::Linear) {
        constexpr double beta_start = 1e-4;
        constexpr double beta_end = 0.02;
        for (int t = 0; t < T; ++t) {
            sched.beta[t] = T == 1 ? beta_start
                                   : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
        }
    } else {
        const double total = static_cast<double>(T);
        const double f0 = cosine_curve(0.0, total);
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            const double cur = cosine_curve(static_cast<double>(t + 1), total) / f0;
            sched.beta[t] = std::min(1.0 - cur / prev, 0.999);
            prev = cur;
        }
    }

    // alpha_bar is the running product of (1 - beta); storing the product
    // itself keeps recomputation checks exact.
    double acc = 1.0;
    for (int t = 0; t < T; ++t) {
        acc *= 1.0 - sched.beta[t];
        sched.alpha_bar[t] = acc;
    }
    return sched;
}

Matrix forward_noise(const Matrix& z0, int t, const Matrix& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) {
        throw ParameterError("timestep out of range: t=" + std::to_string(t) + ", T=" + std::to_string(sched.T));
    }
    if (!z0.same_shape(eps)) {
        throw ShapeError("forward_noise: z0 " + z0.shape_str() + " vs eps " + eps.shape_str());
    }
    const double ab = sched.alpha_bar[t - 1];
    return axpy(std::sqrt(1.0 - ab), eps, scaled(std::sqrt(ab), z0));
}

Matrix forward_noise_per_column(const Matrix& z0, const std::vector<int>& t, const Matrix& eps,
                                const NoiseSchedule& sched) {
    if (!z0.same_shape(eps)) {
        throw ShapeError("forward_noise: z0 " + z0.shape_str() + " vs eps " + eps.shape_str());
    }
    if (static_cast<int>(t.size()) != z0.cols) {
        throw ShapeError("forward_noise: " + std::to_string(t.size()) + " timesteps for " +
                         std::to_string(z0.cols) + " columns");
    }
    Matrix out(z0.rows, z0.cols);
    for (int c = 0; c < z0.cols; ++c) {
        if (t[c] < 1 || t[c] > sched.T) {
            throw ParameterError("timestep out of range: t=" + std::to_string(t[c]) +
                                 ", T=" + std::to_string(sched.T));
        }
        const double ab = sched.alpha_bar[t[c] - 1];
        const double sa = std::sqrt(ab);
        const double sn = std::sqrt(1.0 - ab);
        for (int r = 0; r < z0.rows; ++r) {
            out.at(r, c) = sn * eps.at(r, c) + sa * z0.at(r, c);
        }
    }
    return out;
}

}  // namespace hydra
