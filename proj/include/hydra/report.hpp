// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hydra/trainer.hpp"

namespace hydra {

/// One scored sample: four VideoScore sub-metrics for (method, prompt, sample).
struct MetricsRecord {
    std::string method;
    std::string prompt_id;
    std::string sample_id;
    double vsvq = 0.0;
    double vstc = 0.0;
    double vsdd = 0.0;
    double vstva = 0.0;

    bool operator==(const MetricsRecord&) const = default;
};

/// Names of the four retained sub-metrics, in display order.
const std::vector<std::string>& metric_columns();

struct ReportRow {
    std::string label;
    std::vector<double> values;  // one per column; empty when the row failed
    std::vector<bool> best;      // per column; set by mark_best
    std::string failed_reason;   // non-empty marks a failed row

    bool failed() const { return !failed_reason.empty(); }
    bool operator==(const ReportRow&) const = default;
};

struct ReportTable {
    std::vector<std::string> columns;
    std::vector<ReportRow> rows;

    bool operator==(const ReportTable&) const = default;
};

/// Flags, per column, every non-failed row holding the column maximum
/// (strictly greatest; ties flag all tied rows).
void mark_best(ReportTable& table);

/// Per-method arithmetic means over all (prompt, sample) records, rows in
/// first-appearance order. Empty input is a report error; a non-finite value
/// is a validation error naming the offending record.
ReportTable aggregate(const std::vector<MetricsRecord>& records);

/// Reads line-delimited MetricsRecord objects; malformed lines raise an I/O
/// error citing the line number.
std::vector<MetricsRecord> read_metrics_file(const std::string& path);

/// Deterministic rendering. "text" right-aligns values and prefixes best
/// cells with '*'; "csv" adds one best_<col> boolean column per metric and
/// omits failed rows. Values are printed with six decimals.
std::string render_table(const ReportTable& table, const std::string& format);

/// Inverse of render_table(table, "csv") at serialized precision.
ReportTable parse_csv(const std::string& csv_text);

/// Desk-scale ablation metric columns: early/late training loss windows,
/// their relative improvement, and held-out denoising error.
const std::vector<std::string>& ablation_columns();

/// Evaluates one configuration and returns one value per ablation column.
using AblationMetricFn = std::function<std::vector<double>(const TrainConfig&)>;

/// The default metric: a full deterministic run of the configuration, loss
/// windows of up to 20 steps, and eval_loss on a freshly drawn holdout set.
std::vector<double> desk_ablation_metric(const TrainConfig& cfg);

/// Sweeps the head count: one run per N with everything else identical.
/// A row whose run throws is marked failed (reason recorded) and the sweep
/// continues. Pass an empty fn to use desk_ablation_metric.
ReportTable ablation_run(const TrainConfig& base, const std::vector<int>& n_values,
                         const AblationMetricFn& metric_fn = {});

}  // namespace hydra
