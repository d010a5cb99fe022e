// SPDX-License-Identifier: Apache-2.0
#include "hydra/trainer.hpp"

#include <algorithm>
#include <cerrno>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <variant>

#include <json.hpp>

#include "hydra/errors.hpp"

namespace fs = std::filesystem;

namespace hydra {

namespace {

// Substream tags hung off the run seed. Each consumer owns one tag so adding
// a consumer never shifts the draws seen by the others.
constexpr std::uint64_t kStreamBaseInit = 0;
constexpr std::uint64_t kStreamAdapterInit = 1;
constexpr std::uint64_t kStreamShuffle = 2;
constexpr std::uint64_t kStreamTimestep = 3;
constexpr std::uint64_t kStreamNoise = 4;
constexpr std::uint64_t kStreamData = 5;
constexpr std::uint64_t kStreamHoldout = 6;

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& value, const std::string& key, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
        throw ConfigError("invalid number \"" + value + "\" for key " + key + " at " + where);
    }
    return v;
}

int parse_int(const std::string& value, const std::string& key, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE ||
        v < INT_MIN || v > INT_MAX) {
        throw ConfigError("invalid integer \"" + value + "\" for key " + key + " at " + where);
    }
    return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& value, const std::string& key, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    if (value.empty() || value[0] == '-') {
        throw ConfigError("invalid unsigned integer \"" + value + "\" for key " + key + " at " + where);
    }
    const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
    if (end != value.c_str() + value.size() || errno == ERANGE) {
        throw ConfigError("invalid unsigned integer \"" + value + "\" for key " + key + " at " + where);
    }
    return static_cast<std::uint64_t>(v);
}

std::vector<std::string> parse_placement(const std::string& value, const std::string& where) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) throw ConfigError("empty placement token at " + where);
        out.push_back(tok);
    }
    if (out.empty()) throw ConfigError("placement requires at least one token at " + where);
    return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

bool token_selects(const std::string& token, const std::string& layer_name) {
    if (token == layer_name) return true;
    const auto dot = layer_name.find('.');
    const std::string part = dot == std::string::npos ? layer_name : layer_name.substr(dot + 1);
    if (token == "attn") return part == "q" || part == "k" || part == "v" || part == "o";
    if (token == "mlp") return part == "mlp1" || part == "mlp2";
    return false;
}

void adamw_apply(std::vector<double>& param, const std::vector<double>& grad, std::vector<double>& m,
                 std::vector<double>& v, int step, const AdamwParams& opt) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const AdamwResult r = adamw_update(param[i], grad[i], m[i], v[i], step, opt);
        param[i] = r.param;
        m[i] = r.m;
        v[i] = r.v;
    }
}

void adamw_apply(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, int step,
                 const AdamwParams& opt) {
    adamw_apply(param.data, grad.data, m.data, v.data, step, opt);
}

double grad_sq_norm(const AdapterGradsMap& grads) {
    double acc = 0.0;
    for (const auto& [name, g] : grads) {
        for (double x : g.dA.data) acc += x * x;
        for (const Matrix& b : g.dB) {
            for (double x : b.data) acc += x * x;
        }
        for (double x : g.dlogits) acc += x * x;
    }
    return acc;
}

}  // namespace

AdapterKind adapter_kind_from_string(const std::string& s) {
    if (s == "lora") return AdapterKind::Lora;
    if (s == "hydra") return AdapterKind::Hydra;
    throw ConfigError("unknown adapter kind \"" + s + "\" (expected lora or hydra)");
}

std::string adapter_kind_to_string(AdapterKind kind) {
    return kind == AdapterKind::Lora ? "lora" : "hydra";
}

GateMode gate_mode_from_string(const std::string& s) {
    if (s == "fixed") return GateMode::FixedUniform;
    if (s == "learnable") return GateMode::LearnableLogits;
    throw ConfigError("unknown gate mode \"" + s + "\" (expected fixed or learnable)");
}

std::string gate_mode_to_string(GateMode mode) {
    return mode == GateMode::FixedUniform ? "fixed" : "learnable";
}

DenoiserConfig TrainConfig::denoiser_config() const {
    DenoiserConfig dc;
    dc.frames = frames;
    dc.channels = channels;
    dc.d_model = d_model;
    dc.mlp_hidden = mlp_hidden;
    dc.n_blocks = blocks;
    dc.num_classes = classes;
    return dc;
}

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value,
                        const std::string& where) {
    if (key == "epochs") cfg.epochs = parse_int(value, key, where);
    else if (key == "batch_size") cfg.batch_size = parse_int(value, key, where);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(value, key, where);
    else if (key == "beta1") cfg.beta1 = parse_double(value, key, where);
    else if (key == "beta2") cfg.beta2 = parse_double(value, key, where);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(value, key, where);
    else if (key == "adam_eps") cfg.adam_eps = parse_double(value, key, where);
    else if (key == "grad_clip") cfg.grad_clip = parse_double(value, key, where);
    else if (key == "max_steps") cfg.max_steps = parse_int(value, key, where);
    else if (key == "adapter") cfg.adapter_kind = adapter_kind_from_string(value);
    else if (key == "rank") cfg.rank = parse_int(value, key, where);
    else if (key == "alpha") cfg.alpha = parse_double(value, key, where);
    else if (key == "heads") cfg.heads = parse_int(value, key, where);
    else if (key == "gate") cfg.gate = gate_mode_from_string(value);
    else if (key == "placement") cfg.placement = parse_placement(value, where);
    else if (key == "schedule") cfg.schedule = schedule_kind_from_string(value);
    else if (key == "timesteps") cfg.timesteps = parse_int(value, key, where);
    else if (key == "d_model") cfg.d_model = parse_int(value, key, where);
    else if (key == "mlp_hidden") cfg.mlp_hidden = parse_int(value, key, where);
    else if (key == "blocks") cfg.blocks = parse_int(value, key, where);
    else if (key == "frames") cfg.frames = parse_int(value, key, where);
    else if (key == "channels") cfg.channels = parse_int(value, key, where);
    else if (key == "classes") cfg.classes = parse_int(value, key, where);
    else if (key == "samples_per_class") cfg.samples_per_class = parse_int(value, key, where);
    else if (key == "jitter") cfg.jitter = parse_double(value, key, where);
    else if (key == "seed") cfg.seed = parse_u64(value, key, where);
    else throw ConfigError("unknown config key \"" + key + "\" at " + where);
}

void validate_config(const TrainConfig& cfg) {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("config: " + what);
    };
    require(cfg.epochs >= 0, "epochs must be >= 0");
    require(cfg.batch_size >= 1, "batch_size must be >= 1");
    require(cfg.learning_rate >= 0.0, "learning_rate must be >= 0");
    require(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0, "beta1 must be in [0, 1)");
    require(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0, "beta2 must be in [0, 1)");
    require(cfg.weight_decay >= 0.0, "weight_decay must be >= 0");
    require(cfg.adam_eps > 0.0, "adam_eps must be > 0");
    require(cfg.grad_clip >= 0.0, "grad_clip must be >= 0");
    require(cfg.max_steps >= 0, "max_steps must be >= 0");
    require(cfg.rank >= 1, "rank must be >= 1");
    require(cfg.alpha > 0.0, "alpha must be > 0");
    require(cfg.heads >= 1, "heads must be >= 1");
    require(!cfg.placement.empty(), "placement must not be empty");
    require(cfg.timesteps >= 1, "timesteps must be >= 1");
    require(cfg.d_model >= 1, "d_model must be >= 1");
    require(cfg.mlp_hidden >= 1, "mlp_hidden must be >= 1");
    require(cfg.blocks >= 1, "blocks must be >= 1");
    require(cfg.frames >= 1, "frames must be >= 1");
    require(cfg.channels >= 1, "channels must be >= 1");
    require(cfg.classes >= 1, "classes must be >= 1");
    require(cfg.samples_per_class >= 1, "samples_per_class must be >= 1");
    require(cfg.jitter >= 0.0, "jitter must be >= 0");
}

TrainConfig parse_config_text(const std::string& text, const std::string& origin) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = origin + ":" + std::to_string(lineno);
        std::string stripped = line;
        const auto hash = stripped.find('#');
        if (hash != std::string::npos) stripped = stripped.substr(0, hash);
        stripped = trim(stripped);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key=value at " + where + ": \"" + trim(line) + "\"");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key at " + where);
        apply_config_entry(cfg, key, value, where);
    }
    validate_config(cfg);
    return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string config_to_text(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "adam_eps = " << fmt_double(cfg.adam_eps) << "\n";
    out << "adapter = " << adapter_kind_to_string(cfg.adapter_kind) << "\n";
    out << "alpha = " << fmt_double(cfg.alpha) << "\n";
    out << "batch_size = " << cfg.batch_size << "\n";
    out << "beta1 = " << fmt_double(cfg.beta1) << "\n";
    out << "beta2 = " << fmt_double(cfg.beta2) << "\n";
    out << "blocks = " << cfg.blocks << "\n";
    out << "channels = " << cfg.channels << "\n";
    out << "classes = " << cfg.classes << "\n";
    out << "d_model = " << cfg.d_model << "\n";
    out << "epochs = " << cfg.epochs << "\n";
    out << "frames = " << cfg.frames << "\n";
    out << "gate = " << gate_mode_to_string(cfg.gate) << "\n";
    out << "grad_clip = " << fmt_double(cfg.grad_clip) << "\n";
    out << "heads = " << cfg.heads << "\n";
    out << "jitter = " << fmt_double(cfg.jitter) << "\n";
    out << "learning_rate = " << fmt_double(cfg.learning_rate) << "\n";
    out << "max_steps = " << cfg.max_steps << "\n";
    out << "mlp_hidden = " << cfg.mlp_hidden << "\n";
    out << "placement = " << join(cfg.placement, ",") << "\n";
    out << "rank = " << cfg.rank << "\n";
    out << "samples_per_class = " << cfg.samples_per_class << "\n";
    out << "schedule = " << schedule_kind_to_string(cfg.schedule) << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "timesteps = " << cfg.timesteps << "\n";
    out << "weight_decay = " << fmt_double(cfg.weight_decay) << "\n";
    return out.str();
}

void write_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path);
    out << config_to_text(cfg);
    if (!out) throw IoError("failed while writing config file: " + path);
}

AdamwResult adamw_update(double param, double grad, double m, double v, int step,
                         const AdamwParams& opt) {
    if (step < 1) throw ParameterError("adamw_update: step must be >= 1");
    if (!std::isfinite(grad)) {
        throw TrainingError("non-finite gradient at step " + std::to_string(step));
    }
    const double m2 = opt.beta1 * m + (1.0 - opt.beta1) * grad;
    const double v2 = opt.beta2 * v + (1.0 - opt.beta2) * grad * grad;
    const double m_hat = m2 / (1.0 - std::pow(opt.beta1, step));
    const double v_hat = v2 / (1.0 - std::pow(opt.beta2, step));
    const double next = param - opt.lr * (m_hat / (std::sqrt(v_hat) + opt.eps) +
                                          opt.weight_decay * param);
    return {next, m2, v2};
}

TrainState make_train_state(const DenoiserParams& model, std::uint64_t seed) {
    TrainState state;
    RngState root(seed);
    state.t_rng = root.split(kStreamTimestep);
    state.noise_rng = root.split(kStreamNoise);
    for (const auto& [name, ad] : model.adapters) {
        AdamTensors slot;
        std::visit(overloaded{
                       [&](const LoraAdapter& l) {
                           slot.m_a = Matrix::zeros(l.A.rows, l.A.cols);
                           slot.v_a = Matrix::zeros(l.A.rows, l.A.cols);
                           slot.m_b.push_back(Matrix::zeros(l.B.rows, l.B.cols));
                           slot.v_b.push_back(Matrix::zeros(l.B.rows, l.B.cols));
                       },
                       [&](const HydraAdapter& h) {
                           slot.m_a = Matrix::zeros(h.A_shared.rows, h.A_shared.cols);
                           slot.v_a = Matrix::zeros(h.A_shared.rows, h.A_shared.cols);
                           for (const Matrix& b : h.heads) {
                               slot.m_b.push_back(Matrix::zeros(b.rows, b.cols));
                               slot.v_b.push_back(Matrix::zeros(b.rows, b.cols));
                           }
                           slot.m_logits.assign(h.gate.logits.size(), 0.0);
                           slot.v_logits.assign(h.gate.logits.size(), 0.0);
                       },
                   },
                   ad);
        state.adam.emplace(name, std::move(slot));
    }
    return state;
}

void attach_adapters(DenoiserParams& model, const TrainConfig& cfg, RngState& rng) {
    const std::vector<std::string> names = model.layer_names();
    for (const std::string& token : cfg.placement) {
        bool any = false;
        for (const std::string& name : names) any = any || token_selects(token, name);
        if (!any) throw ConfigError("placement token selects no layer: \"" + token + "\"");
    }
    for (const std::string& name : names) {
        bool selected = false;
        for (const std::string& token : cfg.placement) selected = selected || token_selects(token, name);
        if (!selected) continue;
        const Linear& lin = model.layer(name);
        if (cfg.adapter_kind == AdapterKind::Lora) {
            model.adapters[name] = LoraAdapter::init(lin.W.rows, lin.W.cols, cfg.rank, cfg.alpha, rng);
        } else {
            model.adapters[name] = HydraAdapter::init(lin.W.rows, lin.W.cols, cfg.rank, cfg.heads,
                                                      cfg.alpha, cfg.gate, rng);
        }
    }
}

double train_step(DenoiserParams& model, TrainState& state, const NoiseSchedule& sched,
                  const TrainConfig& cfg, const Matrix& z0, const std::vector<int>& classes) {
    const int batch = z0.cols;
    std::vector<int> t(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        t[static_cast<std::size_t>(i)] =
            1 + static_cast<int>(state.t_rng.next_u64() % static_cast<std::uint64_t>(sched.T));
    }
    const Matrix eps = seeded_gaussian(z0.rows, batch, 0.0, 1.0, state.noise_rng);
    const Matrix z_t = forward_noise_per_column(z0, t, eps, sched);

    ForwardCache cache;
    const Matrix eps_hat = denoise_forward(z_t, t, classes, model, &cache);
    const double loss = ldm_loss(eps, eps_hat);
    if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(state.step + 1));
    }

    AdapterGradsMap grads = denoise_backward(ldm_loss_grad(eps, eps_hat), cache, model);
    if (cfg.grad_clip > 0.0) {
        const double norm = std::sqrt(grad_sq_norm(grads));
        if (norm > cfg.grad_clip) {
            const double scale = cfg.grad_clip / norm;
            for (auto& [name, g] : grads) {
                for (double& x : g.dA.data) x *= scale;
                for (Matrix& b : g.dB) {
                    for (double& x : b.data) x *= scale;
                }
                for (double& x : g.dlogits) x *= scale;
            }
        }
    }

    state.step += 1;
    const AdamwParams opt{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps};
    for (const auto& [name, g] : grads) {
        Adapter& ad = model.adapters.at(name);
        AdamTensors& slot = state.adam.at(name);
        std::visit(overloaded{
                       [&](LoraAdapter& l) {
                           adamw_apply(l.A, g.dA, slot.m_a, slot.v_a, state.step, opt);
                           adamw_apply(l.B, g.dB[0], slot.m_b[0], slot.v_b[0], state.step, opt);
                       },
                       [&](HydraAdapter& h) {
                           adamw_apply(h.A_shared, g.dA, slot.m_a, slot.v_a, state.step, opt);
                           for (std::size_t i = 0; i < h.heads.size(); ++i) {
                               adamw_apply(h.heads[i], g.dB[i], slot.m_b[i], slot.v_b[i], state.step,
                                           opt);
                           }
                           if (h.gate.mode == GateMode::LearnableLogits && !g.dlogits.empty()) {
                               adamw_apply(h.gate.logits, g.dlogits, slot.m_logits, slot.v_logits,
                                           state.step, opt);
                           }
                       },
                   },
                   ad);
    }
    return loss;
}

TrainResult train(DenoiserParams& model, const std::vector<LatentBatch>& data,
                  const TrainConfig& cfg, const std::string& log_path,
                  const std::string& checkpoint_dir) {
    validate_config(cfg);
    if (model.adapters.empty()) {
        throw TrainingError("no adapters attached: the base is frozen, nothing would update");
    }
    if (data.empty()) throw ConfigError("empty dataset");

    const int dim = model.cfg.latent_dim();
    std::vector<std::pair<int, int>> pool;  // (dataset batch, column)
    for (std::size_t b = 0; b < data.size(); ++b) {
        if (data[b].z.rows != dim) {
            throw ShapeError("dataset latent " + data[b].z.shape_str() + " does not match model F*C=" +
                             std::to_string(dim));
        }
        for (int c = 0; c < data[b].z.cols; ++c) pool.emplace_back(static_cast<int>(b), c);
    }

    TrainResult result;
    result.digest_before = base_digest(model);

    const NoiseSchedule sched = build_schedule(cfg.schedule, cfg.timesteps);
    TrainState state = make_train_state(model, cfg.seed);
    RngState root(cfg.seed);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw IoError("cannot open training log for writing: " + log_path);
    }

    bool done = false;
    for (int epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
        RngState shuffle_rng = root.split(kStreamShuffle).split(static_cast<std::uint64_t>(epoch));
        for (std::size_t i = pool.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.next_u64() % i);
            std::swap(pool[i - 1], pool[j]);
        }
        for (std::size_t start = 0; start < pool.size() && !done; start += cfg.batch_size) {
            const int b = static_cast<int>(
                std::min(pool.size() - start, static_cast<std::size_t>(cfg.batch_size)));
            Matrix z0(dim, b);
            std::vector<int> classes(static_cast<std::size_t>(b));
            for (int c = 0; c < b; ++c) {
                const auto [bi, col] = pool[start + static_cast<std::size_t>(c)];
                const LatentBatch& src = data[static_cast<std::size_t>(bi)];
                for (int r = 0; r < dim; ++r) z0.at(r, c) = src.z.at(r, col);
                classes[static_cast<std::size_t>(c)] = src.prompt_class[static_cast<std::size_t>(col)];
            }
            const double loss = train_step(model, state, sched, cfg, z0, classes);
            result.losses.push_back(loss);
            if (log.is_open()) {
                nlohmann::json j;
                j["epoch"] = epoch;
                j["loss"] = loss;
                j["step"] = state.step;
                log << j.dump() << "\n";
            }
            if (cfg.max_steps > 0 && state.step >= cfg.max_steps) done = true;
        }
    }
    result.steps = state.step;

    result.digest_after = base_digest(model);
    if (result.digest_before != result.digest_after) {
        throw AuditError("frozen base drift: digest " + result.digest_before + " became " +
                         result.digest_after);
    }

    if (!checkpoint_dir.empty()) {
        save_checkpoint(model, checkpoint_dir, config_to_text(cfg));
    }
    return result;
}

TrainRun run_training(const TrainConfig& cfg, const std::string& log_path,
                      const std::string& checkpoint_dir) {
    validate_config(cfg);
    RngState root(cfg.seed);
    RngState base_rng = root.split(kStreamBaseInit);
    TrainRun run;
    run.model = DenoiserParams::init(cfg.denoiser_config(), base_rng);
    RngState adapter_rng = root.split(kStreamAdapterInit);
    attach_adapters(run.model, cfg, adapter_rng);
    const auto data = make_toy_dataset(cfg.classes, cfg.samples_per_class, cfg.frames, cfg.channels,
                                       cfg.jitter, root.split(kStreamData).seed);
    run.result = train(run.model, data, cfg, log_path, checkpoint_dir);
    return run;
}

bool freeze_audit(const DenoiserParams& before, const DenoiserParams& after) {
    const auto a = base_tensors(before);
    const auto b = base_tensors(after);
    if (a.size() != b.size()) {
        throw AuditError("frozen-base topology mismatch: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + " tensors");
    }
    bool identical = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second->size() != b[i].second->size()) {
            throw AuditError("frozen-base topology mismatch at tensor " + a[i].first);
        }
        const auto& xs = *a[i].second;
        const auto& ys = *b[i].second;
        for (std::size_t j = 0; j < xs.size(); ++j) {
            std::uint64_t xb, yb;
            std::memcpy(&xb, &xs[j], sizeof(xb));
            std::memcpy(&yb, &ys[j], sizeof(yb));
            if (xb != yb) identical = false;
        }
    }
    return identical;
}

double eval_loss(const DenoiserParams& model, const std::vector<LatentBatch>& data,
                 const NoiseSchedule& sched, std::uint64_t seed) {
    if (data.empty()) throw ParameterError("eval_loss: empty dataset");
    const int t_mid = std::max(1, (sched.T + 1) / 2);
    RngState rng = RngState(seed).split(kStreamHoldout);
    double total = 0.0;
    double count = 0.0;
    for (const LatentBatch& batch : data) {
        const Matrix eps = seeded_gaussian(batch.z.rows, batch.z.cols, 0.0, 1.0, rng);
        const Matrix z_t = forward_noise(batch.z, t_mid, eps, sched);
        const Matrix eps_hat = denoise_predict(z_t, t_mid, batch.prompt_class, model);
        const double n = static_cast<double>(eps.data.size());
        total += ldm_loss(eps, eps_hat) * n;
        count += n;
    }
    return total / count;
}

void save_checkpoint(const DenoiserParams& model, const std::string& dir,
                     const std::string& config_text) {
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root / "adapters", ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());

    nlohmann::json manifest;
    manifest["adapters"] = nlohmann::json::object();
    for (const auto& [name, ad] : model.adapters) {
        const std::string rel = "adapters/" + name + ".hydra";
        save_adapter(ad, (root / rel).string());
        manifest["adapters"][name] = rel;
    }
    manifest["base_digest"] = base_digest(model);
    manifest["format"] = "HYDRA1";
    if (!config_text.empty()) {
        std::ofstream cfg_out(root / "config.txt");
        if (!cfg_out) throw IoError("cannot write config snapshot in " + dir);
        cfg_out << config_text;
        manifest["config"] = "config.txt";
    }

    std::ofstream out(root / "manifest.json");
    if (!out) throw IoError("cannot write checkpoint manifest in " + dir);
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("failed while writing checkpoint manifest in " + dir);
}

std::map<std::string, Adapter> load_checkpoint(const std::string& dir,
                                               std::string* base_digest_out) {
    const fs::path root(dir);
    std::ifstream in(root / "manifest.json");
    if (!in) throw IoError("cannot open checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest in " + dir + ": " + e.what());
    }
    if (!manifest.contains("adapters") || !manifest["adapters"].is_object()) {
        throw IoError("checkpoint manifest in " + dir + " lacks an adapters map");
    }
    std::map<std::string, Adapter> out;
    for (const auto& [name, rel] : manifest["adapters"].items()) {
        out.emplace(name, load_adapter((root / rel.get<std::string>()).string()));
    }
    if (base_digest_out) {
        *base_digest_out = manifest.value("base_digest", std::string());
    }
    return out;
}

void attach_checkpoint(DenoiserParams& model, const std::string& dir) {
    std::string stored_digest;
    std::map<std::string, Adapter> loaded = load_checkpoint(dir, &stored_digest);
    const std::string current = base_digest(model);
    if (!stored_digest.empty() && stored_digest != current) {
        throw AuditError("checkpoint was trained against base " + stored_digest +
                         " but this model digests to " + current);
    }
    for (const auto& [name, ad] : loaded) {
        const Linear& lin = model.layer(name);  // throws on unknown layer
        if (adapter_out_dim(ad) != lin.W.rows || adapter_in_dim(ad) != lin.W.cols) {
            throw AuditError("checkpoint adapter " + name + " does not fit layer (" +
                             std::to_string(lin.W.rows) + "x" + std::to_string(lin.W.cols) + ")");
        }
    }
    model.adapters = std::move(loaded);
}

}  // namespace hydra
