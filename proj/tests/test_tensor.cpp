#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "voxcvae/reference.hpp"
#include "voxcvae/rng.hpp"
#include "voxcvae/tensor.hpp"
#include "voxcvae/tensor_io.hpp"

using namespace voxcvae;

namespace {

// Relative error with the denominator floored at a fraction of the tensor's
// gradient magnitude, so float32 accumulation noise on near-zero coordinates
// does not register as disagreement.
double rel_err(double a, double b, double scale_floor) {
    double scale = std::max({std::abs(a), std::abs(b), scale_floor, 1e-6});
    return std::abs(a - b) / scale;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

// Random values with pairwise gaps well above the finite-difference step, so
// max-pooling argmaxes cannot flip inside the probe interval.
Tensor random_distinct_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    std::size_t n = t.numel();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t i = 0; i < n; ++i)
        t[order[i]] = float(-1.0 + 2.0 * (double(i) + 0.5) / double(n));
    return t;
}

using FwdF = std::function<Tensor(const std::vector<Tensor>&)>;
using FwdD = std::function<DTensor(const std::vector<DTensor>&)>;

// Checks reverse-mode gradients of a float-path op against 64-bit central
// differences through the same op instantiated on double.
double max_grad_err(const FwdF& fwd_f, const FwdD& fwd_d, std::vector<Tensor> inputs,
                    const std::vector<bool>& wrt, std::uint64_t seed, double h = 1e-3) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
        if (wrt[i]) inputs[i].set_requires_grad(true);

    Tape tape;
    Tensor weight;
    {
        TapeScope<float> scope(tape);
        Tensor out = fwd_f(inputs);
        Rng wrng(seed, 9090);
        weight = random_tensor(out.shape, wrng);
        Tensor loss = sum(mul(out, weight));
        tape.backward(loss);
    }

    std::vector<DTensor> dinputs;
    dinputs.reserve(inputs.size());
    for (const auto& t : inputs) dinputs.push_back(to_double(t));
    DTensor dweight = to_double(weight);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!wrt[i]) continue;
        auto f = [&, i](const DTensor& probe) {
            auto local = dinputs;
            local[i] = probe;
            DTensor out = fwd_d(local);
            double acc = 0.0;
            for (std::size_t j = 0; j < out.numel(); ++j) acc += out[j] * dweight[j];
            return acc;
        };
        DTensor gfd = finite_diff_grad(f, dinputs[i], h);
        Tensor gad = tape.grad(inputs[i]);
        double gmax = 0.0;
        for (std::size_t j = 0; j < gfd.numel(); ++j) gmax = std::max(gmax, std::abs(gfd[j]));
        for (std::size_t j = 0; j < gfd.numel(); ++j)
            worst = std::max(worst, rel_err(double(gad[j]), gfd[j], 1e-2 * gmax));
    }
    return worst;
}

}  // namespace

TEST_CASE("elementwise add/mul/sigmoid basics") {
    Tensor a({2}, {1.f, 2.f});
    Tensor b({2}, {3.f, 4.f});
    Tensor c = add(a, b);
    CHECK(c[0] == 4.f);
    CHECK(c[1] == 6.f);

    Rng rng(7);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor y = mul(x, 1.0f);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);  // bitwise

    Tensor z = sigmoid(Tensor::scalar(0.f));
    CHECK(z.item() == 0.5f);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
    Tensor a({2, 3});
    Tensor b({3, 2});
    try {
        add(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("dense identity and hand arithmetic") {
    Tensor x({2}, {1.f, 0.f});
    Tensor w({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor b({2}, {0.f, 0.f});
    Tensor y = dense(x, w, b);
    CHECK(y[0] == 1.f);
    CHECK(y[1] == 0.f);

    Tensor x2({2}, {1.f, 1.f});
    Tensor w2({2, 1}, {2.f, 3.f});
    Tensor b2({1}, {1.f});
    CHECK(dense(x2, w2, b2).item() == 6.f);

    CHECK_THROWS_AS(dense(x2, w, Tensor({3})), std::invalid_argument);
    CHECK_THROWS_AS(dense(Tensor({3}), w, b), std::invalid_argument);
}

TEST_CASE("dense gradient matches finite differences (linear tolerance)") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 1);
        std::vector<Tensor> inputs = {random_tensor({8}, rng), random_tensor({8, 4}, rng),
                                      random_tensor({4}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return dense(in[0], in[1], in[2]); },
            [](const std::vector<DTensor>& in) { return dense(in[0], in[1], in[2]); }, inputs,
            {true, true, true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("conv3d_same shapes and degenerate kernels") {
    Rng rng(3);
    Tensor x = random_tensor({32, 32, 36, 1}, rng);
    Tensor k({3, 3, 3, 1, 8});
    Tensor b({8});
    fill_uniform(k, rng, -0.1, 0.1);
    Tensor y = conv3d_same(x, k, b);
    CHECK(y.shape == Shape{32, 32, 36, 8});

    // all-zero kernel, bias c -> constant output c
    Tensor k0({3, 3, 3, 2, 3});
    Tensor bc({3}, {1.f, -2.f, 0.5f});
    Tensor x2 = random_tensor({4, 4, 4, 2}, rng);
    Tensor y2 = conv3d_same(x2, k0, bc);
    for (int i = 0; i < 64; ++i) {
        CHECK(y2[std::size_t(i) * 3 + 0] == 1.f);
        CHECK(y2[std::size_t(i) * 3 + 1] == -2.f);
        CHECK(y2[std::size_t(i) * 3 + 2] == 0.5f);
    }

    CHECK_THROWS_WITH_AS(conv3d_same(x2, Tensor({3, 3, 3, 5, 2}), Tensor({2})),
                         doctest::Contains("channel mismatch"), std::invalid_argument);
}

TEST_CASE("conv3d_same matches the brute-force loop oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, 5);
        Tensor x = random_tensor({5, 5, 5, 2}, rng);
        Tensor k = random_tensor({3, 3, 3, 2, 2}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor got = conv3d_same(x, k, b);
        Tensor want = reference::conv3d_naive(x, k, b);
        double worst = 0;
        for (std::size_t i = 0; i < got.numel(); ++i)
            worst = std::max(worst, std::abs(double(got[i]) - double(want[i])));
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("conv3d gradient matches finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 2);
        std::vector<Tensor> inputs = {random_tensor({4, 3, 5, 2}, rng),
                                      random_tensor({3, 3, 3, 2, 3}, rng),
                                      random_tensor({3}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return conv3d_same(in[0], in[1], in[2]); },
            [](const std::vector<DTensor>& in) { return conv3d_same(in[0], in[1], in[2]); },
            inputs, {true, true, true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("conv2d_same stride-2 extents and gradient") {
    Rng rng(11);
    Tensor x = random_tensor({8, 8, 3}, rng);
    Tensor k = random_tensor({3, 3, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    CHECK(conv2d_same(x, k, b, 2).shape == Shape{4, 4, 4});
    CHECK(conv2d_same(x, k, b, 1).shape == Shape{8, 8, 4});

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng r2(seed, 3);
        std::vector<Tensor> inputs = {random_tensor({6, 6, 2}, r2),
                                      random_tensor({3, 3, 2, 3}, r2), random_tensor({3}, r2)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return conv2d_same(in[0], in[1], in[2], 2); },
            [](const std::vector<DTensor>& in) { return conv2d_same(in[0], in[1], in[2], 2); },
            inputs, {true, true, true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("maxpool3d basics") {
    Tensor c = Tensor::full({4, 4, 4, 2}, 3.25f);
    Tensor p = maxpool3d(c);
    CHECK(p.shape == Shape{2, 2, 2, 2});
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == 3.25f);

    std::vector<float> vals(8);
    for (int i = 0; i < 8; ++i) vals[std::size_t(i)] = float(i);
    Tensor block({2, 2, 2, 1}, vals);
    CHECK(maxpool3d(block).item() == 7.f);

    CHECK_THROWS_WITH_AS(maxpool3d(Tensor({3, 4, 4, 1})), doctest::Contains("even"),
                         std::invalid_argument);
}

TEST_CASE("maxpool3d gradient matches finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 4);
        std::vector<Tensor> inputs = {random_distinct_tensor({4, 4, 4, 2}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return maxpool3d(in[0]); },
            [](const std::vector<DTensor>& in) { return maxpool3d(in[0]); }, inputs, {true},
            seed, 1e-4);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("upsample3d replication, inverse pair, gradient") {
    Tensor a({1, 1, 1, 1}, {2.5f});
    Tensor u = upsample3d(a);
    CHECK(u.shape == Shape{2, 2, 2, 1});
    for (std::size_t i = 0; i < 8; ++i) CHECK(u[i] == 2.5f);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 6);
        Tensor x = random_tensor({3, 2, 4, 3}, rng);
        Tensor back = maxpool3d(upsample3d(x));
        REQUIRE(back.shape == x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back[i] == x[i]);
    }

    // d sum(upsample(x)) / dx_i == 8
    Rng rng(1);
    Tensor x = random_tensor({2, 2, 2, 2}, rng);
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope<float> scope(tape);
        Tensor loss = sum(upsample3d(x));
        tape.backward(loss);
    }
    Tensor g = tape.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 8.f);
}

TEST_CASE("leaky_relu values and degenerate alpha") {
    CHECK(leaky_relu(Tensor::scalar(-1.f), 0.1f).item() == doctest::Approx(-0.1).epsilon(1e-7));
    CHECK(leaky_relu(Tensor::scalar(2.f), 0.1f).item() == 2.f);

    Rng rng(2);
    Tensor x = random_tensor({17}, rng);
    Tensor y = leaky_relu(x, 1.0f);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

    CHECK_THROWS_AS(leaky_relu(x, -0.5f), std::invalid_argument);
}

TEST_CASE("leaky_relu gradient away from the kink") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 7);
        Tensor x({40});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            double mag = rng.uniform(0.1, 1.0);
            x[i] = float(rng.uniform() < 0.5 ? -mag : mag);
        }
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return leaky_relu(in[0], 0.1f); },
            [](const std::vector<DTensor>& in) { return leaky_relu(in[0], 0.1); }, {x}, {true},
            seed, 1e-4);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("batchnorm train-mode statistics and eval neutrality") {
    // large per-channel variance makes the eps term negligible, so the
    // normalized batch has mean 0 and variance 1 within 1e-5
    Rng rng(5);
    Tensor x = random_tensor({16, 4}, rng, -40.0, 40.0);
    Tensor gamma = Tensor::full({4}, 1.f);
    Tensor beta({4});
    Tensor rm({4});
    Tensor rv = Tensor::full({4}, 1.f);
    BatchNormOpts opts;
    Tensor y = batchnorm(x, gamma, beta, rm, rv, opts);
    for (int c = 0; c < 4; ++c) {
        double m = 0, v = 0;
        for (int r = 0; r < 16; ++r) m += y[std::size_t(r) * 4 + std::size_t(c)];
        m /= 16;
        for (int r = 0; r < 16; ++r) {
            double d = y[std::size_t(r) * 4 + std::size_t(c)] - m;
            v += d * d;
        }
        v /= 16;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
    // running stats moved toward the batch stats
    CHECK(rm[0] != 0.f);

    BatchNormOpts eval_opts;
    eval_opts.train = false;
    Tensor rm0({4});
    Tensor rv1 = Tensor::full({4}, 1.f);
    Tensor ye = batchnorm(x, gamma, beta, rm0, rv1, eval_opts);
    float scale = 1.f / std::sqrt(1.f + float(eval_opts.eps));
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(ye[i] == doctest::Approx(double(x[i]) * scale).epsilon(1e-6));

    CHECK_THROWS_WITH_AS(batchnorm(Tensor({0, 4}), gamma, beta, rm, rv, opts),
                         doctest::Contains("zero batch"), std::invalid_argument);
}

TEST_CASE("batchnorm gradient matches finite differences on a 2-sample batch") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 8);
        std::vector<Tensor> inputs = {random_tensor({2, 6}, rng), random_tensor({6}, rng, 0.5, 1.5),
                                      random_tensor({6}, rng)};
        auto fwd_f = [](const std::vector<Tensor>& in) {
            Tensor rm({6}), rv = Tensor::full({6}, 1.f);
            BatchNormOpts opts;
            opts.update_stats = false;
            return batchnorm(in[0], in[1], in[2], rm, rv, opts);
        };
        auto fwd_d = [](const std::vector<DTensor>& in) {
            DTensor rm({6}), rv = DTensor::full({6}, 1.0);
            BatchNormOpts opts;
            opts.update_stats = false;
            return batchnorm(in[0], in[1], in[2], rm, rv, opts);
        };
        double err = max_grad_err(fwd_f, fwd_d, inputs, {true, true, true}, seed);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("dropout identity modes and large-sample mean") {
    Rng rng(9);
    Tensor x = random_tensor({100}, rng);
    Rng drop_rng(1, 77);
    Tensor ye = dropout(x, 0.2, /*train=*/false, drop_rng);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(ye[i] == x[i]);
    Tensor y0 = dropout(x, 0.0, /*train=*/true, drop_rng);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y0[i] == x[i]);

    Tensor ones = Tensor::full({1000000}, 1.f);
    Rng r2(42, 3);
    Tensor yd = dropout(ones, 0.2, /*train=*/true, r2);
    double m = 0;
    for (std::size_t i = 0; i < yd.numel(); ++i) m += yd[i];
    m /= double(yd.numel());
    CHECK(m > 0.99);
    CHECK(m < 1.01);

    CHECK_THROWS_AS(dropout(x, 1.0, true, r2), std::invalid_argument);
}

TEST_CASE("dropout gradient uses the saved mask") {
    Rng rng(21);
    Tensor x = random_tensor({200}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y;
    {
        TapeScope<float> scope(tape);
        Rng drop_rng(5, 8);
        y = dropout(x, 0.2, /*train=*/true, drop_rng);
        tape.backward(sum(y));
    }
    Tensor g = tape.grad(x);
    const float keep = 1.f / 0.8f;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (y[i] == 0.f && x[i] != 0.f)
            CHECK(g[i] == 0.f);
        else
            CHECK(g[i] == keep);
    }
}

TEST_CASE("concat joins and slice inverts") {
    Rng rng(12);
    Tensor vox = random_tensor({32, 32, 32, 1}, rng);
    Tensor slab = random_tensor({32, 32, 4, 1}, rng);
    Tensor joined = concat<float>({vox, slab}, 2);
    CHECK(joined.shape == Shape{32, 32, 36, 1});

    Tensor single = concat<float>({vox}, 0);
    for (std::size_t i = 0; i < vox.numel(); ++i) CHECK(single[i] == vox[i]);

    Tensor back_v = slice(joined, 2, 0, 32);
    Tensor back_s = slice(joined, 2, 32, 4);
    for (std::size_t i = 0; i < vox.numel(); ++i) CHECK(back_v[i] == vox[i]);
    for (std::size_t i = 0; i < slab.numel(); ++i) CHECK(back_s[i] == slab[i]);

    CHECK_THROWS_WITH_AS(concat<float>({vox, Tensor({32, 31, 4, 1})}, 2),
                         doctest::Contains("extent mismatch"), std::invalid_argument);
}

TEST_CASE("concat and slice gradients") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, 10);
        std::vector<Tensor> inputs = {random_tensor({2, 3, 2}, rng), random_tensor({2, 5, 2}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) {
                return slice(concat<float>({in[0], in[1]}, 1), 1, 2, 4);
            },
            [](const std::vector<DTensor>& in) {
                return slice(concat<double>({in[0], in[1]}, 1), 1, 2, 4);
            },
            inputs, {true, true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("backward basics") {
    Tensor x({1}, {3.f});
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope<float> scope(tape);
        Tensor loss = sum(square(x));
        tape.backward(loss);
    }
    CHECK(tape.grad(x).item() == 6.f);

    // loss independent of p -> grad(p) == 0 exactly
    Tensor p({3});
    p.set_requires_grad(true);
    Tensor q({2}, {1.f, 2.f});
    q.set_requires_grad(true);
    Tape tape2;
    {
        TapeScope<float> scope(tape2);
        Tensor loss = sum(mul(q, q));
        tape2.backward(loss);
    }
    Tensor gp = tape2.grad(p);
    for (std::size_t i = 0; i < gp.numel(); ++i) CHECK(gp[i] == 0.f);

    // non-scalar loss rejected
    Tape tape3;
    {
        TapeScope<float> scope(tape3);
        Tensor y = mul(q, 2.f);
        CHECK_THROWS_AS(tape3.backward(y), std::invalid_argument);
    }
}

TEST_CASE("pad_end pads and back-propagates through the interior") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor padded = pad_end(x, 1, 2, -7.f);
    CHECK(padded.shape == Shape{2, 5});
    CHECK(padded[3] == -7.f);
    CHECK(padded[4] == -7.f);
    CHECK(padded[5] == 4.f);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed, 11);
        std::vector<Tensor> inputs = {random_tensor({3, 3, 2}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) { return pad_end(in[0], 1, 2, 0.5f); },
            [](const std::vector<DTensor>& in) { return pad_end(in[0], 1, 2, 0.5); }, inputs,
            {true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("composed elementwise gradients (exp/log/square/sigmoid/sub)") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 12);
        std::vector<Tensor> inputs = {random_tensor({12}, rng, 0.2, 2.0),
                                      random_tensor({12}, rng, -1.0, 1.0)};
        auto fwd_f = [](const std::vector<Tensor>& in) {
            Tensor a = voxcvae::exp(mul(in[1], 0.5f));
            Tensor b = voxcvae::log(in[0]);
            Tensor c = sigmoid(sub(a, b));
            return add(square(c), mul(sub(1.0f, c), 0.25f));
        };
        auto fwd_d = [](const std::vector<DTensor>& in) {
            DTensor a = voxcvae::exp(mul(in[1], 0.5));
            DTensor b = voxcvae::log(in[0]);
            DTensor c = sigmoid(sub(a, b));
            return add(square(c), mul(sub(1.0, c), 0.25));
        };
        double err = max_grad_err(fwd_f, fwd_d, inputs, {true, true}, seed);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("bce_with_logits_mean values and gradient") {
    Tensor logit = Tensor::scalar(0.f);
    Tensor target = Tensor::scalar(1.f);
    CHECK(bce_with_logits_mean(logit, target).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));

    CHECK(bce_with_logits_mean(Tensor::scalar(20.f), target).item() < 1e-6);

    CHECK_THROWS_WITH_AS(bce_with_logits_mean(logit, Tensor::scalar(0.5f)),
                         doctest::Contains("{0,1}"), std::invalid_argument);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 13);
        Tensor logits = random_tensor({30}, rng, -3.0, 3.0);
        Tensor t({30});
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() < 0.5 ? 0.f : 1.f;
        double err = max_grad_err(
            [&t](const std::vector<Tensor>& in) {
                return bce_with_logits_mean(in[0], t);
            },
            [&t](const std::vector<DTensor>& in) {
                return bce_with_logits_mean(in[0], to_double(t));
            },
            {logits}, {true}, seed);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("finite_diff_grad sanity") {
    DTensor x({3}, {1.0, 2.0, -0.5});
    DTensor g1 = finite_diff_grad([](const DTensor& t) {
        double acc = 0;
        for (std::size_t i = 0; i < t.numel(); ++i) acc += t[i];
        return acc;
    }, x, 1e-3);
    for (std::size_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == doctest::Approx(1.0).epsilon(1e-9));

    DTensor x2({2}, {1.0, 2.0});
    DTensor g2 = finite_diff_grad([](const DTensor& t) {
        double acc = 0;
        for (std::size_t i = 0; i < t.numel(); ++i) acc += t[i] * t[i];
        return acc;
    }, x2, 1e-3);
    CHECK(g2[0] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(g2[1] == doctest::Approx(4.0).epsilon(1e-6));

    CHECK_THROWS_AS(finite_diff_grad([](const DTensor&) { return 0.0; }, x, 0.0),
                    std::invalid_argument);
}

TEST_CASE("dense + leaky_relu composite agrees with finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, 14);
        std::vector<Tensor> inputs = {random_tensor({6}, rng), random_tensor({6, 3}, rng),
                                      random_tensor({3}, rng)};
        double err = max_grad_err(
            [](const std::vector<Tensor>& in) {
                return leaky_relu(dense(in[0], in[1], in[2]), 0.1f);
            },
            [](const std::vector<DTensor>& in) {
                return leaky_relu(dense(in[0], in[1], in[2]), 0.1);
            },
            inputs, {true, true, true}, seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("rng replay is bit-identical and streams are independent") {
    Rng a(123, 4);
    Rng b(123, 4);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(123, 5);
    bool any_diff = false;
    Rng a2(123, 4);
    for (int i = 0; i < 100; ++i) any_diff = any_diff || (a2.next_u64() != c.next_u64());
    CHECK(any_diff);

    Tensor t1({64}), t2({64});
    Rng r1(9, 2), r2(9, 2);
    fill_normal(t1, r1);
    fill_normal(t2, r2);
    for (std::size_t i = 0; i < t1.numel(); ++i) CHECK(t1[i] == t2[i]);
}

TEST_CASE("forward ops keep finite inputs finite") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed, 15);
        Tensor x = random_tensor({4, 4, 4, 2}, rng);
        Tensor k = random_tensor({3, 3, 3, 2, 2}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor y = upsample3d(maxpool3d(leaky_relu(conv3d_same(x, k, b), 0.1f)));
        CHECK(y.all_finite());
    }
}

TEST_CASE("TNSR round-trip is byte-identical and truncation is rejected") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "voxcvae_tnsr_test";
    fs::create_directories(dir);
    Rng rng(77);
    Tensor t = random_tensor({3, 5, 2}, rng);
    std::string p1 = (dir / "a.tnsr").string();
    std::string p2 = (dir / "b.tnsr").string();
    save_tnsr(p1, t);
    Tensor r = load_tnsr(p1);
    REQUIRE(r.shape == t.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(r[i] == t[i]);
    save_tnsr(p2, r);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    std::string p3 = (dir / "trunc.tnsr").string();
    {
        std::ofstream out(p3, std::ios::binary);
        out.write(s1.data(), std::streamsize(s1.size() - 5));
    }
    CHECK_THROWS_WITH_AS(load_tnsr(p3), doctest::Contains("truncated"), std::runtime_error);
    fs::remove_all(dir);
}
