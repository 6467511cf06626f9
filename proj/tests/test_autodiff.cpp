// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "modseg/autodiff.hpp"
#include "modseg/image.hpp"

using namespace modseg;
namespace ad = modseg::ad;

namespace {

using Builder = std::function<ad::VarId(ad::Tape&, const std::vector<ad::VarId>&)>;

ad::Tensor random_tensor(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    ad::Tensor t(r, c);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Central finite differences on a weighted sum of the op output against the
// tape's analytic gradients.
void check_gradients(const Builder& build, std::vector<ad::Tensor> inputs,
                     double eps = 1e-6) {
    ad::Tape tape;
    std::vector<ad::VarId> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in, true));
    const ad::VarId out = build(tape, vars);

    Rng wrng(999);
    ad::Tensor w(tape.val(out).rows, tape.val(out).cols);
    for (double& v : w.data) v = wrng.uniform(-1.0, 1.0);

    const ad::VarId loss = ad::sum_all(tape, ad::mul(tape, out, tape.constant(w)));
    tape.backward(loss);

    auto eval = [&](const std::vector<ad::Tensor>& ins) {
        ad::Tape t2;
        std::vector<ad::VarId> vs;
        for (const auto& in : ins) vs.push_back(t2.leaf(in, false));
        const ad::VarId o = build(t2, vs);
        const ad::VarId l = ad::sum_all(t2, ad::mul(t2, o, t2.constant(w)));
        return t2.val(l).data[0];
    };

    for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
        for (std::size_t e = 0; e < inputs[vi].numel(); ++e) {
            auto plus = inputs;
            plus[vi].data[e] += eps;
            auto minus = inputs;
            minus[vi].data[e] -= eps;
            const double fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            const double an = tape.grad(vars[vi]).data[e];
            INFO("input " << vi << " element " << e);
            REQUIRE(an == Catch::Approx(fd).epsilon(1e-5).margin(1e-7));
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    const auto a = random_tensor(3, 4, rng);
    const auto b = random_tensor(3, 4, rng);

    check_gradients([](ad::Tape& t, const auto& v) { return ad::add(t, v[0], v[1]); }, {a, b});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::sub(t, v[0], v[1]); }, {a, b});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::mul(t, v[0], v[1]); }, {a, b});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::scale(t, v[0], -2.7); }, {a});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::add_scalar(t, v[0], 1.3); }, {a});
}

TEST_CASE("matrix products match finite differences") {
    Rng rng(2);
    const auto a = random_tensor(3, 5, rng);
    const auto b = random_tensor(5, 4, rng);
    const auto bt = random_tensor(4, 5, rng);

    check_gradients([](ad::Tape& t, const auto& v) { return ad::matmul(t, v[0], v[1]); }, {a, b});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::matmul_nt(t, v[0], v[1]); },
                    {a, bt});
}

TEST_CASE("broadcast ops match finite differences") {
    Rng rng(3);
    const auto m = random_tensor(4, 3, rng);
    const auto v = random_tensor(1, 3, rng);
    const auto c = random_tensor(4, 1, rng);

    check_gradients([](ad::Tape& t, const auto& x) { return ad::add_rowvec(t, x[0], x[1]); },
                    {m, v});
    check_gradients([](ad::Tape& t, const auto& x) { return ad::mul_rowvec(t, x[0], x[1]); },
                    {m, v});
    check_gradients([](ad::Tape& t, const auto& x) { return ad::mul_colvec(t, x[0], x[1]); },
                    {m, c});
}

TEST_CASE("reductions match finite differences") {
    Rng rng(4);
    const auto m = random_tensor(4, 6, rng);
    check_gradients([](ad::Tape& t, const auto& v) { return ad::rowsum(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::mean_rows(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::sum_all(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::mean_all(t, v[0]); }, {m});
}

TEST_CASE("nonlinearities match finite differences") {
    Rng rng(5);
    const auto m = random_tensor(3, 4, rng);
    auto positive = random_tensor(3, 4, rng, 0.2, 2.0);
    auto away_from_zero = random_tensor(3, 4, rng);
    for (double& v : away_from_zero.data) v += (v >= 0 ? 0.2 : -0.2);

    check_gradients([](ad::Tape& t, const auto& v) { return ad::exp_op(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::log_op(t, v[0]); }, {positive});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::tanh_op(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::gelu(t, v[0]); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::signed_sqrt(t, v[0]); },
                    {away_from_zero});
}

TEST_CASE("fused blocks match finite differences") {
    Rng rng(6);
    const auto m = random_tensor(4, 5, rng);
    const auto gain = random_tensor(1, 5, rng, 0.5, 1.5);
    const auto bias = random_tensor(1, 5, rng);

    check_gradients([](ad::Tape& t, const auto& v) { return ad::softmax_rows(t, v[0]); }, {m});
    check_gradients(
        [](ad::Tape& t, const auto& v) { return ad::layernorm_rows(t, v[0], v[1], v[2]); },
        {m, gain, bias});
    auto nonzero_rows = random_tensor(4, 5, rng, 0.3, 1.0);
    check_gradients([](ad::Tape& t, const auto& v) { return ad::l2norm_rows(t, v[0]); },
                    {nonzero_rows});
}

TEST_CASE("bce_with_logits matches finite differences and batches stably") {
    Rng rng(7);
    const auto logits = random_tensor(4, 4, rng, -3.0, 3.0);
    ad::Tensor target(4, 4);
    for (double& v : target.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;

    check_gradients(
        [&target](ad::Tape& t, const auto& v) {
            return ad::bce_with_logits_mean(t, v[0], target);
        },
        {logits});

    // loss stays finite for extreme logits
    ad::Tape t;
    ad::Tensor extreme(2, 2, {1e4, -1e4, 800.0, -800.0});
    ad::Tensor tgt(2, 2, {1.0, 0.0, 0.0, 1.0});
    const auto loss = ad::bce_with_logits_mean(t, t.leaf(extreme, true), tgt);
    REQUIRE(std::isfinite(t.val(loss).data[0]));
}

TEST_CASE("shape ops match finite differences") {
    Rng rng(8);
    const auto m = random_tensor(4, 6, rng);
    const auto m2 = random_tensor(2, 6, rng);

    check_gradients([](ad::Tape& t, const auto& v) { return ad::reshape(t, v[0], 6, 4); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::slice_rows(t, v[0], 1, 3); }, {m});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::slice_cols(t, v[0], 2, 5); }, {m});
    check_gradients(
        [](ad::Tape& t, const auto& v) { return ad::concat_rows(t, {v[0], v[1]}); }, {m, m2});
    const auto m3 = random_tensor(4, 3, rng);
    check_gradients(
        [](ad::Tape& t, const auto& v) { return ad::concat_cols(t, {v[0], v[1]}); }, {m, m3});
}

TEST_CASE("image-shaped ops match finite differences") {
    Rng rng(9);
    const auto plane_a = random_tensor(8, 8, rng, 0.0, 1.0);
    const auto plane_b = random_tensor(8, 8, rng, 0.0, 1.0);
    const auto kernel = random_tensor(3, 3, rng, 0.0, 0.3);
    const auto rows = random_tensor(4, 16, rng);

    check_gradients(
        [](ad::Tape& t, const auto& v) { return ad::patchify_stack(t, {v[0], v[1]}, 4); },
        {plane_a, plane_b});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::depatchify(t, v[0], 4, 8, 8); },
                    {rows});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::conv2d(t, v[0], v[1]); },
                    {plane_a, kernel});
    check_gradients([](ad::Tape& t, const auto& v) { return ad::pad_center(t, v[0], 8, 8); },
                    {kernel});
}

TEST_CASE("patchify_stack layout matches the plain patchify helper") {
    Rng rng(10);
    ImagePlane img(8, 8, 2);
    for (double& v : img.data) v = rng.uniform();
    const auto plain = patchify(img, 4);

    ad::Tape t;
    ad::Tensor c0(8, 8), c1(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            c0.at(y, x) = img.at(y, x, 0);
            c1.at(y, x) = img.at(y, x, 1);
        }
    const auto out =
        ad::patchify_stack(t, {t.constant(std::move(c0)), t.constant(std::move(c1))}, 4);
    REQUIRE(t.val(out).data == plain);
}

TEST_CASE("a small attention composition matches finite differences") {
    Rng rng(11);
    const int n = 5, d = 6, heads = 2, dh = d / heads;
    const auto x = random_tensor(n, d, rng);
    const auto wq = random_tensor(d, d, rng, -0.5, 0.5);
    const auto wk = random_tensor(d, d, rng, -0.5, 0.5);
    const auto wv = random_tensor(d, d, rng, -0.5, 0.5);

    auto builder = [&](ad::Tape& t, const std::vector<ad::VarId>& v) {
        const auto q = ad::matmul(t, v[0], v[1]);
        const auto k = ad::matmul(t, v[0], v[2]);
        const auto vv = ad::matmul(t, v[0], v[3]);
        std::vector<ad::VarId> outs;
        for (int h = 0; h < heads; ++h) {
            const auto qh = ad::slice_cols(t, q, h * dh, (h + 1) * dh);
            const auto kh = ad::slice_cols(t, k, h * dh, (h + 1) * dh);
            const auto vh = ad::slice_cols(t, vv, h * dh, (h + 1) * dh);
            const auto s = ad::scale(t, ad::matmul_nt(t, qh, kh), 1.0 / std::sqrt(dh));
            const auto p = ad::softmax_rows(t, s);
            outs.push_back(ad::matmul(t, p, vh));
        }
        return ad::concat_cols(t, outs);
    };
    check_gradients(builder, {x, wq, wk, wv});
}

TEST_CASE("constant subgraphs receive no backward work but grads stay valid") {
    ad::Tape t;
    Rng rng(12);
    const auto a = t.leaf(random_tensor(2, 2, rng), true);
    const auto c = t.constant(random_tensor(2, 2, rng));
    const auto out = ad::mul(t, a, c);
    const auto loss = ad::sum_all(t, out);
    t.backward(loss);
    for (double v : t.grad(c).data) REQUIRE(v == 0.0);
    for (double v : t.grad(a).data) REQUIRE(v != 0.0);
}

TEST_CASE("backward rejects non-scalar roots; ops validate shapes") {
    ad::Tape t;
    Rng rng(13);
    const auto a = t.leaf(random_tensor(2, 3, rng), true);
    const auto b = t.leaf(random_tensor(3, 2, rng), true);
    REQUIRE_THROWS_AS(t.backward(a), ContractError);
    REQUIRE_THROWS_AS(ad::add(t, a, b), ContractError);
    REQUIRE_THROWS_AS(ad::matmul(t, a, a), ContractError);
    REQUIRE_THROWS_AS(ad::slice_rows(t, a, 1, 5), ContractError);
}
