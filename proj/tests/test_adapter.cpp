// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "hydra/adapter.hpp"
#include "hydra/errors.hpp"
#include "test_util.hpp"

using namespace hydra;

namespace {

HydraAdapter make_random_hydra(int d, int k, int r, int n, double alpha, GateMode mode,
                               RngState& rng) {
    HydraAdapter ad = HydraAdapter::init(d, k, r, n, alpha, mode, rng);
    for (auto& head : ad.heads) head = seeded_gaussian(d, r, 0.0, 0.5, rng);
    for (auto& l : ad.gate.logits) l = rng.next_gaussian(0.0, 1.0);
    return ad;
}

}  // namespace

TEST_CASE("fixed gate emits uniform weights") {
    GateParams gate;
    gate.mode = GateMode::FixedUniform;
    gate.logits = {5.0, -3.0, 0.0, 100.0};  // ignored in fixed mode
    auto w = gate_weights(gate);
    REQUIRE(w.size() == 4);
    for (double wi : w) CHECK(wi == 0.25);
}

TEST_CASE("learnable gate is a softmax over logits") {
    GateParams gate;
    gate.mode = GateMode::LearnableLogits;
    gate.logits = {0.0, std::log(3.0)};
    auto w = gate_weights(gate);
    REQUIRE(w.size() == 2);
    CHECK(w[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.75).epsilon(1e-12));

    // Shift invariance and simplex membership.
    GateParams shifted = gate;
    for (double& l : shifted.logits) l += 17.5;
    auto w2 = gate_weights(shifted);
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        CHECK(w2[i] == doctest::Approx(w[i]).epsilon(1e-12));
        CHECK(w2[i] > 0.0);
        sum += w2[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax gate resolves a two-to-one logit gap") {
    GateParams gate;
    gate.mode = GateMode::LearnableLogits;
    gate.logits = {std::log(2.0), 0.0};
    auto w = gate_weights(gate);
    REQUIRE(w.size() == 2);
    CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("identity projections with zero base pass the input through") {
    const int n = 4;
    LoraAdapter ad;
    ad.rank = n;
    ad.alpha = static_cast<double>(n);  // scale 1
    ad.A = Matrix::identity(n);
    ad.B = Matrix::identity(n);
    RngState rng(13);
    Matrix x = seeded_gaussian(n, 3, 0.5, 1.0, rng);
    Matrix y = adapted_forward(x, Matrix::zeros(n, n), ad);
    CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("fresh adapters leave the base map bitwise untouched") {
    RngState rng(3);
    Matrix W0 = seeded_gaussian(6, 5, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(5, 4, 0.0, 1.0, rng);
    Matrix base = matmul(W0, x);

    LoraAdapter lora = LoraAdapter::init(6, 5, 3, 8.0, rng);
    CHECK(max_abs(lora.B) == 0.0);
    CHECK(bitwise_equal(adapted_forward(x, W0, lora), base));

    HydraAdapter hydra = HydraAdapter::init(6, 5, 3, 4, 8.0, GateMode::LearnableLogits, rng);
    for (const auto& head : hydra.heads) CHECK(max_abs(head) == 0.0);
    CHECK(bitwise_equal(adapted_forward(x, W0, hydra), base));
}

TEST_CASE("multi-head delta matches a hand-computed mixture") {
    HydraAdapter ad;
    ad.rank = 1;
    ad.alpha = 1.0;
    ad.A_shared = Matrix::from_rows({{5, 6}});
    ad.heads = {Matrix::from_rows({{1}, {2}}), Matrix::from_rows({{3}, {4}})};
    ad.gate.mode = GateMode::FixedUniform;
    ad.gate.logits = {0.0, 0.0};

    // mix = 0.5*B1 + 0.5*B2 = [[2],[3]]; delta = mix * A = [[10,12],[15,18]].
    Matrix want = Matrix::from_rows({{10, 12}, {15, 18}});
    CHECK(max_abs_diff(hydra_delta(ad), want) == 0.0);
}

TEST_CASE("plain adapter delta applies the alpha over rank scale") {
    LoraAdapter ad;
    ad.rank = 2;
    ad.alpha = 8.0;  // scale 4
    ad.A = Matrix::from_rows({{1, 0, 2}, {0, 1, 1}});
    ad.B = Matrix::from_rows({{1, 2}, {3, 4}});
    // B*A = [[1,2,4],[3,4,10]], scaled by 4.
    Matrix want = Matrix::from_rows({{4, 8, 16}, {12, 16, 40}});
    CHECK(max_abs_diff(lora_delta(ad), want) == 0.0);
    CHECK(ad.scale() == 4.0);
}

TEST_CASE("low-rank forward agrees with the dense delta oracle") {
    RngState rng(9);
    for (int trial = 0; trial < 8; ++trial) {
        RngState tr = rng.split(trial);
        int d = 3 + trial % 5;
        int k = 2 + trial % 4;
        int r = 1 + trial % 2;
        Matrix W0 = seeded_gaussian(d, k, 0.0, 1.0, tr);
        Matrix x = seeded_gaussian(k, 3, 0.0, 1.0, tr);
        HydraAdapter ad = make_random_hydra(d, k, r, 2 + trial % 3, 1.5,
                                            trial % 2 ? GateMode::LearnableLogits
                                                      : GateMode::FixedUniform,
                                            tr);
        Matrix dense = matmul(axpy(1.0, hydra_delta(ad), W0), x);
        Matrix lowrank = adapted_forward(x, W0, ad);
        CHECK(max_abs_diff(dense, lowrank) <= 1e-12 * (1.0 + max_abs(dense)));
    }
}

TEST_CASE("merge equals the adapted forward map") {
    RngState rng(21);
    Matrix W0 = seeded_gaussian(5, 4, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(4, 6, 0.0, 1.0, rng);
    Adapter ad = make_random_hydra(5, 4, 2, 3, 2.0, GateMode::LearnableLogits, rng);
    Matrix merged = merge(W0, ad);
    CHECK(max_abs_diff(matmul(merged, x), adapted_forward(x, W0, ad)) <= 1e-10);
    // W0 itself is untouched.
    RngState check(21);
    CHECK(bitwise_equal(W0, seeded_gaussian(5, 4, 0.0, 1.0, check)));

    // merge returns a new matrix each time, so re-merging compounds the
    // delta instead of being idempotent.
    Matrix twice = merge(merged, ad);
    CHECK(max_abs_diff(twice, merged) > 1e-6);
    CHECK(max_abs_diff(axpy(1.0, adapter_delta(ad), merged), twice) <= 1e-12);
}

TEST_CASE("zero upstream gradient yields zero adapter gradients") {
    RngState rng(44);
    Matrix W0 = seeded_gaussian(5, 4, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(4, 3, 0.0, 1.0, rng);
    HydraAdapter ad = make_random_hydra(5, 4, 2, 3, 2.0, GateMode::LearnableLogits, rng);
    AdapterGrads g = adapter_backward(x, W0, ad, Matrix::zeros(5, 3));
    CHECK(max_abs(g.dA) == 0.0);
    for (const Matrix& db : g.dB) CHECK(max_abs(db) == 0.0);
    for (double dl : g.dlogits) CHECK(dl == 0.0);
}

TEST_CASE("zero heads stop the shared-projection gradient but not their own") {
    RngState rng(45);
    Matrix W0 = seeded_gaussian(5, 4, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(4, 3, 0.0, 1.0, rng);
    Matrix g_out = seeded_gaussian(5, 3, 0.0, 1.0, rng);
    HydraAdapter ad = HydraAdapter::init(5, 4, 2, 3, 2.0, GateMode::FixedUniform, rng);
    AdapterGrads g = adapter_backward(x, W0, ad, g_out);
    // The head mixture is zero, so nothing flows back into A...
    CHECK(max_abs(g.dA) == 0.0);
    // ...while every head still sees grad_out through the shared projection.
    REQUIRE(g.dB.size() == 3);
    for (const Matrix& db : g.dB) CHECK(max_abs(db) > 1e-8);
}

TEST_CASE("single-head fixed-gate adapter reduces to the plain one bitwise") {
    RngState rng(31);
    Matrix W0 = seeded_gaussian(7, 6, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(6, 5, 0.0, 1.0, rng);
    Matrix g = seeded_gaussian(7, 5, 0.0, 1.0, rng);

    LoraAdapter lora = LoraAdapter::init(7, 6, 3, 6.0, rng);
    lora.A = seeded_gaussian(3, 6, 0.0, 1.0, rng);
    lora.B = seeded_gaussian(7, 3, 0.0, 1.0, rng);

    HydraAdapter hydra;
    hydra.rank = lora.rank;
    hydra.alpha = lora.alpha;
    hydra.A_shared = lora.A;
    hydra.heads = {lora.B};
    hydra.gate.mode = GateMode::FixedUniform;
    hydra.gate.logits = {0.0};

    CHECK(bitwise_equal(adapted_forward(x, W0, lora), adapted_forward(x, W0, hydra)));
    CHECK(bitwise_equal(lora_delta(lora), hydra_delta(hydra)));

    AdapterGrads gl = adapter_backward(x, W0, lora, g);
    AdapterGrads gh = adapter_backward(x, W0, hydra, g);
    CHECK(bitwise_equal(gl.dA, gh.dA));
    REQUIRE(gl.dB.size() == 1);
    REQUIRE(gh.dB.size() == 1);
    CHECK(bitwise_equal(gl.dB[0], gh.dB[0]));
    CHECK(gh.dlogits.empty());
}

TEST_CASE("adapter gradients match central differences") {
    RngState rng(77);
    const int d = 4, k = 3, r = 2, n = 3;
    Matrix W0 = seeded_gaussian(d, k, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(k, 2, 0.0, 1.0, rng);
    Matrix G = seeded_gaussian(d, 2, 0.0, 1.0, rng);
    HydraAdapter ad = make_random_hydra(d, k, r, n, 2.5, GateMode::LearnableLogits, rng);

    auto loss = [&](const HydraAdapter& a) { return frobenius_dot(G, adapted_forward(x, W0, a)); };
    AdapterGrads grads = adapter_backward(x, W0, ad, G);
    REQUIRE(grads.dA.rows == r);
    REQUIRE(grads.dB.size() == static_cast<std::size_t>(n));
    REQUIRE(grads.dlogits.size() == static_cast<std::size_t>(n));

    const double h = 1e-6;
    auto check_fd = [&](double analytic, double fd) {
        CHECK(std::abs(analytic - fd) <= 1e-4 * (1.0 + std::abs(fd)));
    };
    for (int i = 0; i < r * k; ++i) {
        HydraAdapter p = ad, m = ad;
        p.A_shared.data[i] += h;
        m.A_shared.data[i] -= h;
        check_fd(grads.dA.data[i], (loss(p) - loss(m)) / (2 * h));
    }
    for (int head = 0; head < n; ++head)
        for (int i = 0; i < d * r; ++i) {
            HydraAdapter p = ad, m = ad;
            p.heads[head].data[i] += h;
            m.heads[head].data[i] -= h;
            check_fd(grads.dB[head].data[i], (loss(p) - loss(m)) / (2 * h));
        }
    for (int j = 0; j < n; ++j) {
        HydraAdapter p = ad, m = ad;
        p.gate.logits[j] += h;
        m.gate.logits[j] -= h;
        check_fd(grads.dlogits[j], (loss(p) - loss(m)) / (2 * h));
    }
}

TEST_CASE("input gradient matches the merged transpose") {
    RngState rng(88);
    Matrix W0 = seeded_gaussian(5, 4, 0.0, 1.0, rng);
    Adapter ad = make_random_hydra(5, 4, 2, 2, 3.0, GateMode::LearnableLogits, rng);
    Matrix g = seeded_gaussian(5, 3, 0.0, 1.0, rng);
    Matrix want = matmul(transpose(merge(W0, ad)), g);
    Matrix got = adapted_backward_input(g, W0, ad);
    CHECK(max_abs_diff(want, got) <= 1e-12 * (1.0 + max_abs(want)));
}

TEST_CASE("frozen base receives no gradient path") {
    // adapter_backward returns only adapter tensors; there is no dW0 output
    // anywhere in the API, so this asserts the gradient shapes instead.
    RngState rng(5);
    Matrix W0 = seeded_gaussian(4, 3, 0.0, 1.0, rng);
    Matrix x = seeded_gaussian(3, 2, 0.0, 1.0, rng);
    Matrix g = seeded_gaussian(4, 2, 0.0, 1.0, rng);
    LoraAdapter ad = LoraAdapter::init(4, 3, 2, 2.0, rng);
    AdapterGrads grads = adapter_backward(x, W0, ad, g);
    CHECK(grads.dA.rows == 2);
    CHECK(grads.dA.cols == 3);
    REQUIRE(grads.dB.size() == 1);
    CHECK(grads.dB[0].rows == 4);
    CHECK(grads.dB[0].cols == 2);
    CHECK(grads.dlogits.empty());
}

TEST_CASE("dimension helpers see through the variant") {
    RngState rng(6);
    Adapter lora = LoraAdapter::init(6, 5, 2, 1.0, rng);
    CHECK(adapter_out_dim(lora) == 6);
    CHECK(adapter_in_dim(lora) == 5);
    Adapter hydra = HydraAdapter::init(7, 3, 2, 4, 1.0, GateMode::FixedUniform, rng);
    CHECK(adapter_out_dim(hydra) == 7);
    CHECK(adapter_in_dim(hydra) == 3);
}

TEST_CASE("init validates its arguments") {
    RngState rng(1);
    CHECK_THROWS_AS(LoraAdapter::init(0, 3, 2, 1.0, rng), ParameterError);
    CHECK_THROWS_AS(LoraAdapter::init(4, 3, 0, 1.0, rng), ParameterError);
    CHECK_THROWS_AS(HydraAdapter::init(4, 3, 2, 0, 1.0, GateMode::FixedUniform, rng),
                    ParameterError);
    CHECK_THROWS_AS(HydraAdapter::init(4, 3, -1, 2, 1.0, GateMode::FixedUniform, rng),
                    ParameterError);
}

TEST_CASE("checkpoint blob round-trips bitwise") {
    testutil::TempDir tmp;
    RngState rng(55);
    HydraAdapter ad = make_random_hydra(5, 4, 2, 3, 2.0, GateMode::LearnableLogits, rng);
    std::string path = tmp.str("hydra.bin");
    save_adapter(ad, path);
    Adapter back = load_adapter(path);
    REQUIRE(std::holds_alternative<HydraAdapter>(back));
    const auto& h = std::get<HydraAdapter>(back);
    CHECK(bitwise_equal(h.A_shared, ad.A_shared));
    REQUIRE(h.heads.size() == ad.heads.size());
    for (std::size_t i = 0; i < ad.heads.size(); ++i)
        CHECK(bitwise_equal(h.heads[i], ad.heads[i]));
    CHECK(h.gate.mode == GateMode::LearnableLogits);
    REQUIRE(h.gate.logits.size() == ad.gate.logits.size());
    for (std::size_t i = 0; i < ad.gate.logits.size(); ++i)
        CHECK(h.gate.logits[i] == ad.gate.logits[i]);
    CHECK(h.rank == ad.rank);
    CHECK(h.alpha == ad.alpha);
}

TEST_CASE("plain adapters persist as a single fixed-gate head") {
    testutil::TempDir tmp;
    RngState rng(56);
    LoraAdapter ad = LoraAdapter::init(4, 3, 2, 6.0, rng);
    ad.B = seeded_gaussian(4, 2, 0.0, 1.0, rng);
    std::string path = tmp.str("lora.bin");
    save_adapter(ad, path);
    Adapter back = load_adapter(path);
    REQUIRE(std::holds_alternative<HydraAdapter>(back));
    const auto& h = std::get<HydraAdapter>(back);
    CHECK(h.num_heads() == 1);
    CHECK(h.gate.mode == GateMode::FixedUniform);
    CHECK(bitwise_equal(h.A_shared, ad.A));
    CHECK(bitwise_equal(h.heads[0], ad.B));

    RngState check(77);
    Matrix W0 = seeded_gaussian(4, 3, 0.0, 1.0, check);
    Matrix x = seeded_gaussian(3, 2, 0.0, 1.0, check);
    CHECK(bitwise_equal(adapted_forward(x, W0, ad), adapted_forward(x, W0, back)));
}

TEST_CASE("loader rejects missing, corrupt, and truncated blobs") {
    testutil::TempDir tmp;
    CHECK_THROWS_AS(load_adapter(tmp.str("absent.bin")), IoError);

    std::string bad = tmp.str("bad.bin");
    testutil::write_file(bad, "NOTMAGIC and then some bytes");
    CHECK_THROWS_AS(load_adapter(bad), IoError);

    RngState rng(57);
    HydraAdapter ad = make_random_hydra(5, 4, 2, 2, 2.0, GateMode::FixedUniform, rng);
    std::string good = tmp.str("good.bin");
    save_adapter(ad, good);
    std::string blob = testutil::read_file(good);
    testutil::write_file(tmp.str("trunc.bin"), blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(load_adapter(tmp.str("trunc.bin")), IoError);
}
