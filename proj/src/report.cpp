// SPDX-License-Identifier: Apache-2.0
#include "hydra/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols = {"VSVQ", "VSTC", "VSDD", "VSTVA"};
    return cols;
}

void mark_best(ReportTable& table) {
    for (ReportRow& row : table.rows) {
        row.best.assign(table.columns.size(), false);
    }
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
        double best = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (const ReportRow& row : table.rows) {
            if (row.failed()) continue;
            best = std::max(best, row.values[c]);
            any = true;
        }
        if (!any) continue;
        for (ReportRow& row : table.rows) {
            if (!row.failed() && row.values[c] == best) row.best[c] = true;
        }
    }
}

ReportTable aggregate(const std::vector<MetricsRecord>& records) {
    if (records.empty()) throw ReportError("aggregate: no records");

    struct Acc {
        std::array<double, 4> sum{0.0, 0.0, 0.0, 0.0};
        long count = 0;
    };
    std::vector<std::string> order;
    std::map<std::string, Acc> acc;
    for (const MetricsRecord& r : records) {
        const std::array<double, 4> vals{r.vsvq, r.vstc, r.vsdd, r.vstva};
        for (double v : vals) {
            if (!std::isfinite(v)) {
                throw ValidationError("non-finite metric in record method=" + r.method +
                                      " prompt=" + r.prompt_id + " sample=" + r.sample_id);
            }
        }
        if (acc.find(r.method) == acc.end()) order.push_back(r.method);
        Acc& a = acc[r.method];
        for (std::size_t i = 0; i < 4; ++i) a.sum[i] += vals[i];
        a.count += 1;
    }

    ReportTable table;
    table.columns = metric_columns();
    for (const std::string& method : order) {
        const Acc& a = acc.at(method);
        ReportRow row;
        row.label = method;
        for (std::size_t i = 0; i < 4; ++i) {
            row.values.push_back(a.sum[i] / static_cast<double>(a.count));
        }
        table.rows.push_back(std::move(row));
    }
    mark_best(table);
    return table;
}

std::vector<MetricsRecord> read_metrics_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics file: " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            MetricsRecord r;
            r.method = j.at("method").get<std::string>();
            r.prompt_id = j.at("prompt_id").get<std::string>();
            r.sample_id = j.at("sample_id").get<std::string>();
            r.vsvq = j.at("vsvq").get<double>();
            r.vstc = j.at("vstc").get<double>();
            r.vsdd = j.at("vsdd").get<double>();
            r.vstva = j.at("vstva").get<double>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("metrics line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::string render_table(const ReportTable& table, const std::string& format) {
    if (format == "csv") {
        std::ostringstream out;
        out << "label";
        for (const std::string& col : table.columns) out << "," << col;
        for (const std::string& col : table.columns) out << ",best_" << col;
        out << "\n";
        for (const ReportRow& row : table.rows) {
            if (row.failed()) continue;
            out << row.label;
            for (double v : row.values) out << "," << fmt6(v);
            for (std::size_t c = 0; c < table.columns.size(); ++c) {
                out << "," << (c < row.best.size() && row.best[c] ? "true" : "false");
            }
            out << "\n";
        }
        return out.str();
    }
    if (format != "text") throw ConfigError("unknown report format \"" + format + "\"");

    std::size_t label_w = std::string("method").size();
    for (const ReportRow& row : table.rows) label_w = std::max(label_w, row.label.size());
    constexpr std::size_t cell_w = 12;

    std::ostringstream out;
    out << "method" << std::string(label_w - 6, ' ');
    for (const std::string& col : table.columns) {
        out << "  " << std::string(cell_w - col.size(), ' ') << col;
    }
    out << "\n";
    for (const ReportRow& row : table.rows) {
        out << row.label << std::string(label_w - row.label.size(), ' ');
        if (row.failed()) {
            out << "  FAILED: " << row.failed_reason << "\n";
            continue;
        }
        for (std::size_t c = 0; c < row.values.size(); ++c) {
            const std::string cell =
                std::string(c < row.best.size() && row.best[c] ? "*" : " ") + fmt6(row.values[c]);
            out << "  " << std::string(cell_w - cell.size(), ' ') << cell;
        }
        out << "\n";
    }
    return out.str();
}

ReportTable parse_csv(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw ReportError("csv: empty input");
    const std::vector<std::string> header = split_csv_line(line);
    if (header.empty() || header[0] != "label" || (header.size() - 1) % 2 != 0) {
        throw ReportError("csv: malformed header");
    }
    const std::size_t ncols = (header.size() - 1) / 2;
    ReportTable table;
    for (std::size_t c = 0; c < ncols; ++c) {
        table.columns.push_back(header[1 + c]);
        if (header[1 + ncols + c] != "best_" + header[1 + c]) {
            throw ReportError("csv: best_ column order does not match metric columns");
        }
    }
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ReportError("csv line " + std::to_string(lineno) + ": wrong field count");
        }
        ReportRow row;
        row.label = fields[0];
        for (std::size_t c = 0; c < ncols; ++c) {
            char* end = nullptr;
            const std::string& f = fields[1 + c];
            row.values.push_back(std::strtod(f.c_str(), &end));
            if (f.empty() || end != f.c_str() + f.size()) {
                throw ReportError("csv line " + std::to_string(lineno) + ": bad number \"" + f + "\"");
            }
            const std::string& flag = fields[1 + ncols + c];
            if (flag != "true" && flag != "false") {
                throw ReportError("csv line " + std::to_string(lineno) + ": bad boolean \"" + flag +
                                  "\"");
            }
            row.best.push_back(flag == "true");
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

const std::vector<std::string>& ablation_columns() {
    static const std::vector<std::string> cols = {"train_first", "train_last", "improvement",
                                                  "holdout_mse"};
    return cols;
}

std::vector<double> desk_ablation_metric(const TrainConfig& cfg) {
    const TrainRun run = run_training(cfg);
    const std::vector<double>& losses = run.result.losses;
    if (losses.empty()) throw TrainingError("ablation run produced no steps");
    const std::size_t window = std::min<std::size_t>(20, losses.size());
    const double first =
        std::accumulate(losses.begin(), losses.begin() + window, 0.0) / window;
    const double last = std::accumulate(losses.end() - window, losses.end(), 0.0) / window;
    const double improvement = (first - last) / first;

    const auto holdout =
        make_toy_dataset(cfg.classes, std::max(1, cfg.samples_per_class / 4), cfg.frames,
                         cfg.channels, cfg.jitter, cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    const NoiseSchedule sched = build_schedule(cfg.schedule, cfg.timesteps);
    const double holdout_mse = eval_loss(run.model, holdout, sched, cfg.seed + 1);
    return {first, last, improvement, holdout_mse};
}

ReportTable ablation_run(const TrainConfig& base, const std::vector<int>& n_values,
                         const AblationMetricFn& metric_fn) {
    if (n_values.empty()) throw ParameterError("ablation: need at least one head count");
    for (int n : n_values) {
        if (n < 1) throw ParameterError("ablation: head counts must be >= 1");
    }
    const AblationMetricFn& fn = metric_fn ? metric_fn : desk_ablation_metric;

    ReportTable table;
    table.columns = ablation_columns();
    for (int n : n_values) {
        TrainConfig cfg = base;
        cfg.adapter_kind = AdapterKind::Hydra;
        cfg.heads = n;
        ReportRow row;
        row.label = "N=" + std::to_string(n);
        try {
            row.values = fn(cfg);
            if (row.values.size() != table.columns.size()) {
                throw ReportError("ablation metric returned " + std::to_string(row.values.size()) +
                                  " values, expected " + std::to_string(table.columns.size()));
            }
        } catch (const std::exception& e) {
            row.values.clear();
            row.failed_reason = e.what();
        }
        table.rows.push_back(std::move(row));
    }
    mark_best(table);
    return table;
}

}  // namespace hydra
