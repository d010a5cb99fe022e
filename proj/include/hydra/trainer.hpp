// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hydra/adapter.hpp"
#include "hydra/denoiser.hpp"
#include "hydra/schedule.hpp"

namespace hydra {

enum class AdapterKind { Lora, Hydra };

AdapterKind adapter_kind_from_string(const std::string& s);
std::string adapter_kind_to_string(AdapterKind kind);
GateMode gate_mode_from_string(const std::string& s);
std::string gate_mode_to_string(GateMode mode);

/// Flat key=value training configuration. Every field has a usable default;
/// files override individual keys and any unknown key is a hard error.
struct TrainConfig {
    int epochs = 2;
    int batch_size = 16;
    double learning_rate = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // 0 disables clipping
    int max_steps = 0;       // 0 runs every epoch to completion

    AdapterKind adapter_kind = AdapterKind::Hydra;
    int rank = 32;
    double alpha = 32.0;
    int heads = 4;
    GateMode gate = GateMode::LearnableLogits;
    std::vector<std::string> placement = {"attn", "mlp"};

    ScheduleKind schedule = ScheduleKind::Linear;
    int timesteps = 1000;

    int d_model = 32;
    int mlp_hidden = 64;
    int blocks = 2;
    int frames = 8;
    int channels = 4;

    int classes = 4;
    int samples_per_class = 64;
    double jitter = 0.05;

    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
    DenoiserConfig denoiser_config() const;
};

/// Applies `key=value` to cfg; unknown keys and malformed values throw
/// ConfigError mentioning `where` (typically "file:line").
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value,
                        const std::string& where);

/// Throws ConfigError if any field is outside its valid range.
void validate_config(const TrainConfig& cfg);

TrainConfig parse_config_text(const std::string& text, const std::string& origin = "<inline>");
TrainConfig parse_config_file(const std::string& path);

/// Writes the full configuration as sorted key=value lines. Doubles are
/// written with round-trip precision so parse(write(cfg)) == cfg exactly.
void write_config(const TrainConfig& cfg, const std::string& path);
std::string config_to_text(const TrainConfig& cfg);

struct AdamwParams {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    double eps = 1e-8;
};

struct AdamwResult {
    double param;
    double m;
    double v;
};

/// One decoupled-weight-decay Adam step for a single scalar. `step` is the
/// 1-based update count used for bias correction.
AdamwResult adamw_update(double param, double grad, double m, double v, int step,
                         const AdamwParams& opt);

/// First/second moment buffers mirroring one adapter's tensors.
struct AdamTensors {
    Matrix m_a, v_a;
    std::vector<Matrix> m_b, v_b;
    std::vector<double> m_logits, v_logits;
};

/// Mutable loop state: one optimizer slot per adapter (never for the frozen
/// base) plus the timestep and noise sampling streams.
struct TrainState {
    int step = 0;
    std::map<std::string, AdamTensors> adam;
    RngState t_rng;
    RngState noise_rng;
};

TrainState make_train_state(const DenoiserParams& model, std::uint64_t seed);

/// Attaches freshly initialized adapters to the layers selected by
/// cfg.placement. Tokens: "attn" (q/k/v/o), "mlp" (mlp1/mlp2), "in_proj",
/// "out_proj", or an exact layer name such as "blk0.q". Layers are visited
/// in model.layer_names() order so RNG consumption is deterministic.
void attach_adapters(DenoiserParams& model, const TrainConfig& cfg, RngState& rng);

/// One optimization step on a minibatch: sample per-column timesteps and
/// noise, diffuse, predict, and update only the attached adapters.
double train_step(DenoiserParams& model, TrainState& state, const NoiseSchedule& sched,
                  const TrainConfig& cfg, const Matrix& z0, const std::vector<int>& classes);

struct TrainResult {
    std::vector<double> losses;  // one entry per optimization step
    int steps = 0;
    std::string digest_before;
    std::string digest_after;
};

/// Runs the full loop over `data` (shuffled each epoch from cfg.seed).
/// Writes one JSONL record {"epoch","loss","step"} per step when log_path is
/// non-empty and a checkpoint directory when checkpoint_dir is non-empty.
/// Throws AuditError if any frozen base tensor changed during training.
TrainResult train(DenoiserParams& model, const std::vector<LatentBatch>& data,
                  const TrainConfig& cfg, const std::string& log_path = "",
                  const std::string& checkpoint_dir = "");

struct TrainRun {
    DenoiserParams model;
    TrainResult result;
};

/// Convenience wrapper: build the base model, attach adapters, synthesize the
/// class-conditioned dataset, and train — all deterministically from cfg.
TrainRun run_training(const TrainConfig& cfg, const std::string& log_path = "",
                      const std::string& checkpoint_dir = "");

/// Bitwise comparison of every frozen tensor. Throws AuditError when the two
/// models do not even share a topology; returns false on any changed bit.
bool freeze_audit(const DenoiserParams& before, const DenoiserParams& after);

/// Mean squared denoising error over `data` at the mid-trajectory timestep,
/// with evaluation noise drawn deterministically from `seed`.
double eval_loss(const DenoiserParams& model, const std::vector<LatentBatch>& data,
                 const NoiseSchedule& sched, std::uint64_t seed);

/// Checkpoint directory layout: manifest.json mapping each adapter layer to
/// its blob under adapters/, plus the base digest and an optional config
/// snapshot (written when config_text is non-empty).
void save_checkpoint(const DenoiserParams& model, const std::string& dir,
                     const std::string& config_text = "");
std::map<std::string, Adapter> load_checkpoint(const std::string& dir,
                                               std::string* base_digest_out = nullptr);

/// Loads a checkpoint and attaches it to `model`, verifying that the stored
/// base digest matches the model's frozen weights. AuditError on mismatch.
void attach_checkpoint(DenoiserParams& model, const std::string& dir);

}  // namespace hydra
