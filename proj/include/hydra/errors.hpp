// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hydra {

/// Shape mismatch between operands (message names both shapes).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid scalar/count argument (negative std, t out of range, ...).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Bad config file contents, unknown keys, unknown scorer names.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Filesystem and format failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite loss/gradient during training; message carries the step index.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// freeze_audit called on mismatched model topologies.
struct AuditError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Empty or unusable report input.
struct ReportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Records violating their type invariants (message names the offenders).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace hydra
