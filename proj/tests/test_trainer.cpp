// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "hydra/errors.hpp"
#include "hydra/trainer.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace hydra;

namespace {

// Small, fast configuration used by most loop tests.
TrainConfig small_config() {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-3;
    cfg.rank = 2;
    cfg.alpha = 2.0;
    cfg.heads = 2;
    cfg.timesteps = 50;
    cfg.d_model = 8;
    cfg.mlp_hidden = 12;
    cfg.blocks = 1;
    cfg.frames = 4;
    cfg.channels = 2;
    cfg.classes = 2;
    cfg.samples_per_class = 8;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("defaults encode the published recipe") {
    TrainConfig cfg;
    CHECK(cfg.epochs == 2);
    CHECK(cfg.learning_rate == 2e-5);
    CHECK(cfg.beta1 == 0.9);
    CHECK(cfg.beta2 == 0.99);
    CHECK(cfg.weight_decay == 0.01);
    CHECK(cfg.rank == 32);
    CHECK(cfg.alpha == 32.0);
    CHECK(cfg.heads == 4);
    CHECK(cfg.adapter_kind == AdapterKind::Hydra);
    CHECK(cfg.gate == GateMode::LearnableLogits);
    CHECK(cfg.schedule == ScheduleKind::Linear);
    CHECK(cfg.timesteps == 1000);
    CHECK(cfg.placement == std::vector<std::string>{"attn", "mlp"});
    CHECK_NOTHROW(validate_config(cfg));
}

TEST_CASE("config text round-trips exactly") {
    TrainConfig cfg = small_config();
    cfg.adapter_kind = AdapterKind::Lora;
    cfg.gate = GateMode::FixedUniform;
    cfg.schedule = ScheduleKind::Cosine;
    cfg.placement = {"attn", "blk0.mlp2"};
    cfg.learning_rate = 3.14159e-5;
    cfg.jitter = 0.125;
    cfg.seed = 0xDEADBEEF;
    TrainConfig back = parse_config_text(config_to_text(cfg));
    CHECK(back == cfg);

    testutil::TempDir tmp;
    write_config(cfg, tmp.str("cfg.txt"));
    CHECK(parse_config_file(tmp.str("cfg.txt")) == cfg);
}

TEST_CASE("config parser accepts comments and blank lines") {
    TrainConfig cfg = parse_config_text(
        "# training recipe\n"
        "\n"
        "epochs = 3\n"
        "  learning_rate=1e-4  \n"
        "adapter = lora\n"
        "placement = attn,out_proj\n");
    CHECK(cfg.epochs == 3);
    CHECK(cfg.learning_rate == 1e-4);
    CHECK(cfg.adapter_kind == AdapterKind::Lora);
    CHECK(cfg.placement == std::vector<std::string>{"attn", "out_proj"});
}

TEST_CASE("config parser names the offending key and location") {
    try {
        parse_config_text("epochs = 1\nlerning_rate = 1e-4\n", "recipe.txt");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("lerning_rate") != std::string::npos);
        CHECK(msg.find("recipe.txt:2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_text("epochs = soon\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("epochs\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("adapter = tiger\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_file("/nonexistent/config.txt"), IoError);
}

TEST_CASE("config validation rejects out-of-range fields") {
    TrainConfig cfg;
    cfg.epochs = -1;
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.rank = 0;
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.placement.clear();
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.alpha = 0.0;
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);
}

TEST_CASE("optimizer step matches a hand-computed value") {
    // param 1, grad 1, first step, defaults: both bias-corrected moments are
    // exactly 1, so the update is lr * (1/(1+eps) + wd).
    AdamwParams opt;
    AdamwResult r = adamw_update(1.0, 1.0, 0.0, 0.0, 1, opt);
    CHECK(r.m == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(r.v == doctest::Approx(0.01).epsilon(1e-15));
    double want = 1.0 - 2e-5 * (1.0 / (1.0 + 1e-8) + 0.01);
    CHECK(r.param == doctest::Approx(want).epsilon(1e-15));
    CHECK(r.param == doctest::Approx(0.9999798).epsilon(1e-9));
}

TEST_CASE("optimizer matches an independent scalar reference over many steps") {
    AdamwParams opt{1e-3, 0.9, 0.999, 0.04, 1e-8};
    double param = 0.7, m = 0.0, v = 0.0;
    double rp = 0.7, rm = 0.0, rv = 0.0;
    RngState rng(4);
    for (int step = 1; step <= 200; ++step) {
        double g = rng.next_gaussian(0.0, 1.0);
        AdamwResult r = adamw_update(param, g, m, v, step, opt);
        param = r.param;
        m = r.m;
        v = r.v;

        rm = 0.9 * rm + 0.1 * g;
        rv = 0.999 * rv + 0.001 * g * g;
        double mh = rm / (1.0 - std::pow(0.9, step));
        double vh = rv / (1.0 - std::pow(0.999, step));
        rp = rp - 1e-3 * (mh / (std::sqrt(vh) + 1e-8) + 0.04 * rp);
        CHECK(std::abs(param - rp) <= 1e-12);
    }
}

TEST_CASE("zero gradient without decay is a fixed point") {
    AdamwParams opt;
    opt.weight_decay = 0.0;
    AdamwResult r = adamw_update(1.5, 0.0, 0.0, 0.0, 1, opt);
    CHECK(r.param == 1.5);
    CHECK(r.m == 0.0);
    CHECK(r.v == 0.0);
}

TEST_CASE("decay is decoupled from the gradient path") {
    AdamwParams opt{0.5, 0.9, 0.99, 0.1, 1e-8};
    // Zero gradient: the parameter still shrinks by lr * wd * param.
    AdamwResult r = adamw_update(2.0, 0.0, 0.0, 0.0, 1, opt);
    CHECK(r.param == doctest::Approx(2.0 * (1.0 - 0.05)).epsilon(1e-15));
    CHECK(r.m == 0.0);
    CHECK(r.v == 0.0);

    // Zero learning rate: nothing moves but the moments update.
    AdamwParams frozen{0.0, 0.9, 0.99, 0.1, 1e-8};
    AdamwResult r2 = adamw_update(2.0, 3.0, 0.0, 0.0, 1, frozen);
    CHECK(r2.param == 2.0);
    CHECK(r2.m == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("optimizer rejects invalid steps and non-finite gradients") {
    AdamwParams opt;
    CHECK_THROWS_AS(adamw_update(1.0, 1.0, 0.0, 0.0, 0, opt), ParameterError);
    CHECK_THROWS_AS(adamw_update(1.0, std::nan(""), 0.0, 0.0, 3, opt), TrainingError);
    try {
        adamw_update(1.0, INFINITY, 0.0, 0.0, 7, opt);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("step 7") != std::string::npos);
    }
}

TEST_CASE("placement tokens expand to the right layers") {
    TrainConfig cfg = small_config();
    RngState init(1), attach(2);
    DenoiserParams model = DenoiserParams::init(cfg.denoiser_config(), init);

    cfg.placement = {"attn"};
    DenoiserParams m1 = model;
    attach_adapters(m1, cfg, attach);
    CHECK(m1.adapters.size() == 4);
    CHECK(m1.adapters.count("blk0.q") == 1);
    CHECK(m1.adapters.count("blk0.mlp1") == 0);

    cfg.placement = {"mlp", "in_proj"};
    DenoiserParams m2 = model;
    attach_adapters(m2, cfg, attach);
    CHECK(m2.adapters.size() == 3);
    CHECK(m2.adapters.count("blk0.mlp1") == 1);
    CHECK(m2.adapters.count("blk0.mlp2") == 1);
    CHECK(m2.adapters.count("in_proj") == 1);

    cfg.placement = {"blk0.v"};
    DenoiserParams m3 = model;
    attach_adapters(m3, cfg, attach);
    CHECK(m3.adapters.size() == 1);

    cfg.placement = {"blk7.q"};
    DenoiserParams m4 = model;
    CHECK_THROWS_AS(attach_adapters(m4, cfg, attach), ConfigError);
}

TEST_CASE("train state mirrors every adapter tensor") {
    TrainConfig cfg = small_config();
    RngState init(1), attach(2);
    DenoiserParams model = DenoiserParams::init(cfg.denoiser_config(), init);
    attach_adapters(model, cfg, attach);
    TrainState state = make_train_state(model, cfg.seed);
    CHECK(state.step == 0);
    CHECK(state.adam.size() == model.adapters.size());
    for (const auto& [name, ad] : model.adapters) {
        const auto& h = std::get<HydraAdapter>(ad);
        const AdamTensors& slot = state.adam.at(name);
        CHECK(slot.m_a.same_shape(h.A_shared));
        REQUIRE(slot.m_b.size() == h.heads.size());
        CHECK(slot.m_logits.size() == h.gate.logits.size());
    }
}

TEST_CASE("the first optimization step sees exactly the base-model loss") {
    TrainConfig cfg = small_config();
    RngState init(1), attach(2);
    DenoiserParams model = DenoiserParams::init(cfg.denoiser_config(), init);
    attach_adapters(model, cfg, attach);
    TrainState state = make_train_state(model, cfg.seed);
    NoiseSchedule sched = build_schedule(cfg.schedule, cfg.timesteps);

    auto data = make_toy_dataset(cfg.classes, cfg.samples_per_class, cfg.frames, cfg.channels,
                                 cfg.jitter, 77);
    const Matrix& z0 = data[0].z;
    const std::vector<int>& classes = data[0].prompt_class;

    // Replicate the step's sampling with clones of the state streams, then
    // evaluate the adapter-free base model on the same diffused batch.
    RngState t_rng = state.t_rng;
    RngState noise_rng = state.noise_rng;
    std::vector<int> t(static_cast<std::size_t>(z0.cols));
    for (auto& ti : t)
        ti = 1 + static_cast<int>(t_rng.next_u64() % static_cast<std::uint64_t>(sched.T));
    Matrix eps = seeded_gaussian(z0.rows, z0.cols, 0.0, 1.0, noise_rng);
    Matrix z_t = forward_noise_per_column(z0, t, eps, sched);
    DenoiserParams bare = model;
    bare.adapters.clear();
    double base_loss = ldm_loss(eps, denoise_predict(z_t, t, classes, bare));

    double step_loss = train_step(model, state, sched, cfg, z0, classes);
    CHECK(step_loss == base_loss);
    CHECK(state.step == 1);
}

TEST_CASE("training runs, logs every step, and leaves the base frozen") {
    testutil::TempDir tmp;
    TrainConfig cfg = small_config();
    std::string log_path = tmp.str("train_log.jsonl");
    TrainRun run = run_training(cfg, log_path);

    int expected_steps = cfg.epochs * cfg.classes;  // 16 samples / batch 8 = 2 batches/epoch
    CHECK(run.result.steps == expected_steps);
    CHECK(run.result.losses.size() == static_cast<std::size_t>(expected_steps));
    for (double l : run.result.losses) {
        CHECK(std::isfinite(l));
        CHECK(l >= 0.0);
    }
    CHECK(run.result.digest_before == run.result.digest_after);
    CHECK(base_digest(run.model) == run.result.digest_before);

    std::string log = testutil::read_file(log_path);
    CHECK(testutil::count_lines(log) == expected_steps);
    std::istringstream lines(log);
    std::string line;
    int step = 0;
    while (std::getline(lines, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("step").get<int>() == ++step);
        CHECK(j.at("epoch").get<int>() >= 1);
        CHECK(j.at("loss").get<double>() == run.result.losses[static_cast<std::size_t>(step - 1)]);
    }
}

TEST_CASE("training is bitwise reproducible") {
    TrainConfig cfg = small_config();
    cfg.epochs = 2;
    TrainRun a = run_training(cfg);
    TrainRun b = run_training(cfg);
    REQUIRE(a.result.losses.size() == b.result.losses.size());
    for (std::size_t i = 0; i < a.result.losses.size(); ++i)
        CHECK(a.result.losses[i] == b.result.losses[i]);
    for (const auto& [name, ad] : a.model.adapters) {
        const auto& ha = std::get<HydraAdapter>(ad);
        const auto& hb = std::get<HydraAdapter>(b.model.adapters.at(name));
        CHECK(bitwise_equal(ha.A_shared, hb.A_shared));
        for (std::size_t i = 0; i < ha.heads.size(); ++i)
            CHECK(bitwise_equal(ha.heads[i], hb.heads[i]));
    }

    // A different seed gives a different trajectory.
    cfg.seed += 1;
    TrainRun c = run_training(cfg);
    CHECK(c.result.losses[0] != a.result.losses[0]);
}

TEST_CASE("max_steps caps the loop") {
    TrainConfig cfg = small_config();
    cfg.epochs = 10;
    cfg.max_steps = 3;
    TrainRun run = run_training(cfg);
    CHECK(run.result.steps == 3);
}

TEST_CASE("zero epochs trains nothing and keeps adapters at identity") {
    TrainConfig cfg = small_config();
    cfg.epochs = 0;
    TrainRun run = run_training(cfg);
    CHECK(run.result.steps == 0);
    for (const auto& [name, ad] : run.model.adapters) {
        const auto& h = std::get<HydraAdapter>(ad);
        for (const Matrix& head : h.heads) CHECK(max_abs(head) == 0.0);
    }

    // The resulting model is exactly the freshly initialized one: rebuild it
    // from the same seed without training and compare every adapter tensor.
    RngState root(cfg.seed);
    RngState base_rng = root.split(0);
    DenoiserParams fresh = DenoiserParams::init(cfg.denoiser_config(), base_rng);
    RngState adapter_rng = root.split(1);
    attach_adapters(fresh, cfg, adapter_rng);
    REQUIRE(fresh.adapters.size() == run.model.adapters.size());
    for (const auto& [name, ad] : run.model.adapters) {
        const auto& got = std::get<HydraAdapter>(ad);
        const auto& want = std::get<HydraAdapter>(fresh.adapters.at(name));
        CHECK(bitwise_equal(got.A_shared, want.A_shared));
        REQUIRE(got.heads.size() == want.heads.size());
        for (std::size_t i = 0; i < got.heads.size(); ++i)
            CHECK(bitwise_equal(got.heads[i], want.heads[i]));
        CHECK(got.gate.logits == want.gate.logits);
    }
}

TEST_CASE("gradient clipping changes the trajectory but not the first loss") {
    TrainConfig cfg = small_config();
    cfg.epochs = 2;
    TrainRun plain = run_training(cfg);
    cfg.grad_clip = 1e-3;
    TrainRun clipped = run_training(cfg);
    CHECK(plain.result.losses[0] == clipped.result.losses[0]);
    CHECK(plain.result.losses.back() != clipped.result.losses.back());
}

TEST_CASE("training without adapters or data is rejected") {
    TrainConfig cfg = small_config();
    RngState init(1);
    DenoiserParams model = DenoiserParams::init(cfg.denoiser_config(), init);
    auto data = make_toy_dataset(cfg.classes, cfg.samples_per_class, cfg.frames, cfg.channels,
                                 cfg.jitter, 1);
    CHECK_THROWS_AS(train(model, data, cfg), TrainingError);

    RngState attach(2);
    attach_adapters(model, cfg, attach);
    std::vector<LatentBatch> empty;
    CHECK_THROWS_AS(train(model, empty, cfg), ConfigError);
}

TEST_CASE("freeze audit flags any changed base bit") {
    RngState r1(3), r2(3);
    DenoiserConfig dc = small_config().denoiser_config();
    DenoiserParams a = DenoiserParams::init(dc, r1);
    DenoiserParams b = DenoiserParams::init(dc, r2);
    CHECK(freeze_audit(a, b));
    b.class_emb.data[0] = std::nextafter(b.class_emb.data[0], 1e300);
    CHECK_FALSE(freeze_audit(a, b));

    DenoiserConfig other = dc;
    other.n_blocks = dc.n_blocks + 1;
    RngState r3(3);
    DenoiserParams c = DenoiserParams::init(other, r3);
    CHECK_THROWS_AS(freeze_audit(a, c), AuditError);
}

TEST_CASE("training moves only the adapters") {
    TrainConfig cfg = small_config();
    TrainRun run = run_training(cfg);
    RngState init(cfg.seed);
    RngState base_rng = init.split(0);
    DenoiserParams fresh = DenoiserParams::init(cfg.denoiser_config(), base_rng);
    CHECK(freeze_audit(fresh, run.model));

    bool any_moved = false;
    for (const auto& [name, ad] : run.model.adapters) {
        const auto& h = std::get<HydraAdapter>(ad);
        for (const Matrix& head : h.heads) any_moved = any_moved || max_abs(head) > 0.0;
    }
    CHECK(any_moved);
}

TEST_CASE("checkpoints round-trip and verify the base digest") {
    testutil::TempDir tmp;
    TrainConfig cfg = small_config();
    std::string ckpt = tmp.str("ckpt");
    TrainRun run = run_training(cfg, "", ckpt);

    std::string stored_digest;
    auto adapters = load_checkpoint(ckpt, &stored_digest);
    CHECK(stored_digest == run.result.digest_after);
    CHECK(adapters.size() == run.model.adapters.size());
    for (const auto& [name, ad] : run.model.adapters) {
        REQUIRE(adapters.count(name) == 1);
        const auto& trained = std::get<HydraAdapter>(ad);
        const auto& loaded = std::get<HydraAdapter>(adapters.at(name));
        CHECK(bitwise_equal(loaded.A_shared, trained.A_shared));
        for (std::size_t i = 0; i < trained.heads.size(); ++i)
            CHECK(bitwise_equal(loaded.heads[i], trained.heads[i]));
    }

    // Attaching onto the same frozen base succeeds and reproduces predictions.
    RngState root(cfg.seed);
    RngState base_rng = root.split(0);
    DenoiserParams fresh = DenoiserParams::init(cfg.denoiser_config(), base_rng);
    attach_checkpoint(fresh, ckpt);
    auto data = make_toy_dataset(cfg.classes, 2, cfg.frames, cfg.channels, cfg.jitter, 9);
    Matrix want = denoise_predict(data[0].z, 5, data[0].prompt_class, run.model);
    Matrix got = denoise_predict(data[0].z, 5, data[0].prompt_class, fresh);
    CHECK(bitwise_equal(want, got));

    // A different base is refused.
    RngState other(cfg.seed + 1);
    RngState other_rng = other.split(0);
    DenoiserParams wrong = DenoiserParams::init(cfg.denoiser_config(), other_rng);
    CHECK_THROWS_AS(attach_checkpoint(wrong, ckpt), AuditError);

    CHECK_THROWS_AS(load_checkpoint(tmp.str("missing")), IoError);
}

TEST_CASE("checkpoint manifest lists every adapter blob and the config") {
    testutil::TempDir tmp;
    TrainConfig cfg = small_config();
    std::string ckpt = tmp.str("ckpt");
    run_training(cfg, "", ckpt);

    auto manifest = nlohmann::json::parse(testutil::read_file(ckpt + "/manifest.json"));
    CHECK(manifest.at("format") == "HYDRA1");
    CHECK(manifest.at("base_digest").get<std::string>().size() == 64);
    const auto& adapters = manifest.at("adapters");
    CHECK(adapters.size() == 6);  // attn + mlp on one block
    for (const auto& [name, rel] : adapters.items()) {
        std::string blob = ckpt + "/" + rel.get<std::string>();
        CHECK_NOTHROW((void)load_adapter(blob));
    }
    TrainConfig snap = parse_config_file(ckpt + "/" + manifest.at("config").get<std::string>());
    CHECK(snap == cfg);
}

TEST_CASE("held-out evaluation is deterministic and seed-sensitive") {
    TrainConfig cfg = small_config();
    TrainRun run = run_training(cfg);
    NoiseSchedule sched = build_schedule(cfg.schedule, cfg.timesteps);
    auto holdout = make_toy_dataset(cfg.classes, 4, cfg.frames, cfg.channels, cfg.jitter, 123);
    double e1 = eval_loss(run.model, holdout, sched, 11);
    double e2 = eval_loss(run.model, holdout, sched, 11);
    CHECK(e1 == e2);
    CHECK(e1 > 0.0);
    CHECK(std::isfinite(e1));
    double e3 = eval_loss(run.model, holdout, sched, 12);
    CHECK(e1 != e3);
}

TEST_CASE("kind and gate names round-trip") {
    CHECK(adapter_kind_from_string("lora") == AdapterKind::Lora);
    CHECK(adapter_kind_from_string("hydra") == AdapterKind::Hydra);
    CHECK(adapter_kind_to_string(AdapterKind::Lora) == "lora");
    CHECK(adapter_kind_to_string(AdapterKind::Hydra) == "hydra");
    CHECK_THROWS_AS(adapter_kind_from_string("prefix"), ConfigError);
    CHECK(gate_mode_from_string("fixed") == GateMode::FixedUniform);
    CHECK(gate_mode_from_string("learnable") == GateMode::LearnableLogits);
    CHECK(gate_mode_to_string(GateMode::FixedUniform) == "fixed");
    CHECK(gate_mode_to_string(GateMode::LearnableLogits) == "learnable");
    CHECK_THROWS_AS(gate_mode_from_string("open"), ConfigError);
}
