#include "voxcvae/selftest.hpp"

#include <cmath>
#include <cstdio>

#include "voxcvae/data.hpp"
#include "voxcvae/model.hpp"
#include "voxcvae/metrics.hpp"
#include "voxcvae/reference.hpp"
#include "voxcvae/rng.hpp"

namespace voxcvae::selftest {

namespace {

std::string fmt(const char* pattern, double a, double b, double c) {
    char buf[160];
    std::snprintf(buf, sizeof buf, pattern, a, b, c);
    return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

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

// Worst scale-floored relative error between the float backward pass and
// 64-bit central differences through the double instantiation of the op.
double max_grad_err(const FwdF& fwd_f, const FwdD& fwd_d, std::vector<Tensor> inputs,
                    std::uint64_t seed, double h = 1e-3) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tape tape;
    Tensor weight;
    {
        TapeScope<float> scope(tape);
        Tensor out = fwd_f(inputs);
        Rng wrng(seed, 9090);
        weight = random_tensor(out.shape, wrng);
        tape.backward(sum(mul(out, weight)));
    }

    std::vector<DTensor> dinputs;
    dinputs.reserve(inputs.size());
    for (const auto& t : inputs) dinputs.push_back(to_double(t));
    DTensor dweight = to_double(weight);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
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
        for (std::size_t j = 0; j < gfd.numel(); ++j) {
            double a = double(gad[j]), b = gfd[j];
            double scale = std::max({std::abs(a), std::abs(b), 1e-2 * gmax, 1e-6});
            worst = std::max(worst, std::abs(a - b) / scale);
        }
    }
    return worst;
}

void check_op(SuiteResult& suite, const char* op, double err, double tol) {
    ++suite.checks;
    if (!(err < tol))
        suite.fail(std::string(op) + ": " + fmt("gradient error %.3g exceeds %.3g", err, tol, 0));
}

}  // namespace

SuiteResult run_gradient_suite() {
    SuiteResult suite;
    suite.name = "gradients";

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, 101);
        check_op(suite, "dense",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) { return dense(in[0], in[1], in[2]); },
                     [](const std::vector<DTensor>& in) { return dense(in[0], in[1], in[2]); },
                     {random_tensor({8}, rng), random_tensor({8, 4}, rng),
                      random_tensor({4}, rng)},
                     seed),
                 1e-4);

        Rng rng2(seed, 102);
        check_op(
            suite, "conv3d_same",
            max_grad_err(
                [](const std::vector<Tensor>& in) { return conv3d_same(in[0], in[1], in[2]); },
                [](const std::vector<DTensor>& in) { return conv3d_same(in[0], in[1], in[2]); },
                {random_tensor({4, 3, 5, 2}, rng2), random_tensor({3, 3, 3, 2, 3}, rng2),
                 random_tensor({3}, rng2)},
                seed),
            1e-4);

        Rng rng3(seed, 103);
        check_op(
            suite, "conv2d_same",
            max_grad_err(
                [](const std::vector<Tensor>& in) { return conv2d_same(in[0], in[1], in[2], 2); },
                [](const std::vector<DTensor>& in) {
                    return conv2d_same(in[0], in[1], in[2], 2);
                },
                {random_tensor({6, 6, 2}, rng3), random_tensor({3, 3, 2, 3}, rng3),
                 random_tensor({3}, rng3)},
                seed),
            1e-4);

        Rng rng4(seed, 104);
        check_op(suite, "maxpool3d",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) { return maxpool3d(in[0]); },
                     [](const std::vector<DTensor>& in) { return maxpool3d(in[0]); },
                     {random_distinct_tensor({4, 4, 4, 2}, rng4)}, seed, 1e-4),
                 1e-4);

        Rng rng5(seed, 105);
        check_op(suite, "upsample3d",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) { return upsample3d(in[0]); },
                     [](const std::vector<DTensor>& in) { return upsample3d(in[0]); },
                     {random_tensor({2, 3, 2, 2}, rng5)}, seed),
                 1e-4);

        Rng rng6(seed, 106);
        Tensor away({40});
        for (std::size_t i = 0; i < away.numel(); ++i) {
            double mag = rng6.uniform(0.1, 1.0);
            away[i] = float(rng6.uniform() < 0.5 ? -mag : mag);
        }
        check_op(suite, "leaky_relu",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) { return leaky_relu(in[0], 0.1f); },
                     [](const std::vector<DTensor>& in) { return leaky_relu(in[0], 0.1); },
                     {away}, seed, 1e-4),
                 1e-3);

        Rng rng7(seed, 107);
        check_op(suite, "batchnorm",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) {
                         Tensor rm({6}), rv = Tensor::full({6}, 1.f);
                         BatchNormOpts opts;
                         opts.update_stats = false;
                         return batchnorm(in[0], in[1], in[2], rm, rv, opts);
                     },
                     [](const std::vector<DTensor>& in) {
                         DTensor rm({6}), rv = DTensor::full({6}, 1.0);
                         BatchNormOpts opts;
                         opts.update_stats = false;
                         return batchnorm(in[0], in[1], in[2], rm, rv, opts);
                     },
                     {random_tensor({2, 6}, rng7), random_tensor({6}, rng7, 0.5, 1.5),
                      random_tensor({6}, rng7)},
                     seed),
                 1e-3);

        Rng rng8(seed, 108);
        Tensor target({30});
        for (std::size_t i = 0; i < target.numel(); ++i)
            target[i] = rng8.uniform() < 0.5 ? 0.f : 1.f;
        check_op(suite, "bce_with_logits",
                 max_grad_err(
                     [&target](const std::vector<Tensor>& in) {
                         return bce_with_logits_mean(in[0], target);
                     },
                     [&target](const std::vector<DTensor>& in) {
                         return bce_with_logits_mean(in[0], to_double(target));
                     },
                     {random_tensor({30}, rng8, -3.0, 3.0)}, seed),
                 1e-3);

        Rng rng9(seed, 109);
        check_op(suite, "elementwise",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) {
                         Tensor a = voxcvae::exp(mul(in[1], 0.5f));
                         Tensor b = voxcvae::log(in[0]);
                         Tensor c = sigmoid(sub(a, b));
                         return add(square(c), mul(sub(1.0f, c), 0.25f));
                     },
                     [](const std::vector<DTensor>& in) {
                         DTensor a = voxcvae::exp(mul(in[1], 0.5));
                         DTensor b = voxcvae::log(in[0]);
                         DTensor c = sigmoid(sub(a, b));
                         return add(square(c), mul(sub(1.0, c), 0.25));
                     },
                     {random_tensor({12}, rng9, 0.2, 2.0), random_tensor({12}, rng9)}, seed),
                 1e-3);

        Rng rng10(seed, 110);
        check_op(suite, "concat_slice_pad",
                 max_grad_err(
                     [](const std::vector<Tensor>& in) {
                         return pad_end(slice(concat<float>({in[0], in[1]}, 1), 1, 1, 5), 1, 2,
                                        0.5f);
                     },
                     [](const std::vector<DTensor>& in) {
                         return pad_end(slice(concat<double>({in[0], in[1]}, 1), 1, 1, 5), 1, 2,
                                        0.5);
                     },
                     {random_tensor({2, 3, 2}, rng10), random_tensor({2, 5, 2}, rng10)}, seed),
                 1e-4);
    }

    // full loss on the tiny profile: the 64-bit oracle probes the 64-bit
    // instantiation of the same reverse-mode code, per coordinate; the float
    // gradients are then bounded normwise against the 64-bit ones
    ModelConfig cfg = ModelConfig::tiny();
    cfg.dropout_rate = 0.f;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Cvae model(cfg);
        Rng rng(seed, 50);
        model.init(rng);

        Rng drng(seed, 51);
        Tensor voxels({2, 16, 16, 16, 1});
        for (std::size_t i = 0; i < voxels.numel(); ++i)
            voxels[i] = drng.uniform() < 0.3 ? 1.f : 0.f;
        Tensor images({2, 128, 128, 4});
        fill_uniform(images, drng, 0.0, 1.0);
        Tensor eps({2, 32});
        fill_normal(eps, drng);

        Tape tape;
        {
            TapeScope<float> scope(tape);
            tape.backward(model.elbo(voxels, images, eps, ForwardMode::frozen_train()).total);
        }

        CvaeT<double> dmodel = model.cast<double>();
        DTensor dvox = to_double(voxels), dimg = to_double(images), deps = to_double(eps);
        for (auto& p : dmodel.parameters()) p.tensor->set_requires_grad(true);
        TapeT<double> dtape;
        {
            TapeScope<double> scope(dtape);
            dtape.backward(dmodel.elbo(dvox, dimg, deps, ForwardMode::frozen_train()).total);
        }
        auto eval_loss = [&]() {
            return dmodel.elbo(dvox, dimg, deps, ForwardMode::frozen_train()).total.item();
        };

        auto params = model.parameters();
        auto dparams = dmodel.parameters();
        Rng coord_rng(seed, 52);
        const double h = 1e-6;
        double worst_fd = 0, worst_normwise = 0;
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor grad_f = tape.grad(*params[p].tensor);
            DTensor grad_d = dtape.grad(*dparams[p].tensor);
            double gmax = 0, fdiff = 0;
            for (std::size_t j = 0; j < grad_d.numel(); ++j) {
                gmax = std::max(gmax, std::abs(grad_d[j]));
                fdiff = std::max(fdiff, std::abs(double(grad_f[j]) - grad_d[j]));
            }
            worst_normwise = std::max(worst_normwise, fdiff / std::max(gmax, 1e-12));
            for (int probe = 0; probe < 3; ++probe) {
                std::size_t j = coord_rng.below(grad_d.numel());
                double orig = (*dparams[p].tensor)[j];
                (*dparams[p].tensor)[j] = orig + h;
                double fp = eval_loss();
                (*dparams[p].tensor)[j] = orig - h;
                double fm = eval_loss();
                (*dparams[p].tensor)[j] = orig;
                double fd = (fp - fm) / (2 * h);
                double ad = grad_d[j];
                double scale = std::max({std::abs(fd), std::abs(ad), 1e-2 * gmax, 1e-5});
                worst_fd = std::max(worst_fd, std::abs(fd - ad) / scale);
            }
        }
        check_op(suite, "cvae_loss_fd", worst_fd, 1e-3);
        check_op(suite, "cvae_loss_float_consistency", worst_normwise, 5e-2);
    }
    return suite;
}

SuiteResult run_conv_oracle_suite(const Conv3dFn& conv, int probes) {
    SuiteResult suite;
    suite.name = "conv_oracle";
    for (int i = 0; i < probes; ++i) {
        Rng rng(std::uint64_t(i), 200);
        Tensor x = random_tensor({5, 5, 5, 2}, rng);
        Tensor k = random_tensor({3, 3, 3, 2, 2}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor got = conv(x, k, b);
        Tensor want = reference::conv3d_naive(x, k, b);
        ++suite.checks;
        if (got.shape != want.shape) {
            suite.fail("probe " + std::to_string(i) + ": shape " + shape_str(got.shape) +
                       " vs " + shape_str(want.shape));
            continue;
        }
        double worst = 0;
        for (std::size_t j = 0; j < got.numel(); ++j)
            worst = std::max(worst, std::abs(double(got[j]) - double(want[j])));
        if (!(worst < 1e-5))
            suite.fail("probe " + std::to_string(i) +
                       fmt(": worst abs deviation %.3g exceeds 1e-5", worst, 0, 0));
    }
    return suite;
}

SuiteResult run_conv_oracle_suite() {
    return run_conv_oracle_suite(
        [](const Tensor& x, const Tensor& k, const Tensor& b) { return conv3d_same(x, k, b); });
}

SuiteResult run_kl_suite() {
    SuiteResult suite;
    suite.name = "kl_monte_carlo";

    ++suite.checks;
    if (kl_divergence(Tensor({32}), Tensor({32})).item() != 0.f)
        suite.fail("kl(0,0) is not exactly zero");

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, 300);
        std::vector<double> mu(32), lv(32);
        Tensor mu_t({32}), lv_t({32});
        for (int i = 0; i < 32; ++i) {
            mu[std::size_t(i)] = rng.uniform(-1.5, 1.5);
            lv[std::size_t(i)] = rng.uniform(-1.0, 1.0);
            mu_t[std::size_t(i)] = float(mu[std::size_t(i)]);
            lv_t[std::size_t(i)] = float(lv[std::size_t(i)]);
        }
        double analytic = double(kl_divergence(mu_t, lv_t).item());
        double mc = reference::kl_monte_carlo(mu, lv, 100000, 3000 + seed);
        ++suite.checks;
        double rel = std::abs(mc - analytic) / std::abs(analytic);
        if (!(rel < 0.02))
            suite.fail(fmt("pair %g: analytic %.5g vs monte-carlo deviates", double(seed),
                           analytic, 0) +
                       fmt(" by %.3g relative", rel, 0, 0));
    }
    return suite;
}

SuiteResult run_iou_suite() {
    SuiteResult suite;
    suite.name = "iou_counting";

    // 2x2x2 cube against itself shifted by one: 4 of 12
    VoxelGrid a(8), c(8);
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z) {
                a.set(x, y, z, 1);
                c.set(x, y, z + 1, 1);
            }
    ++suite.checks;
    if (std::abs(iou(a, c) - 0.333333) > 1e-6)
        suite.fail(fmt("overlap fixture returned %.7f, want 0.333333", iou(a, c), 0, 0));

    Rng rng(17, 400);
    for (int i = 0; i < 100; ++i) {
        VoxelGrid g1(8), g2(8);
        for (auto& v : g1.occupancy) v = rng.uniform() < 0.3;
        for (auto& v : g2.occupancy) v = rng.uniform() < 0.3;
        double got = iou(g1, g2);
        double want = reference::iou_count(g1.occupancy, g2.occupancy);
        ++suite.checks;
        if (got != want)
            suite.fail(fmt("pair %d: iou %.9f vs counted", double(i), got, 0) +
                       fmt(" %.9f", want, 0, 0));
        ++suite.checks;
        if (got != iou(g2, g1)) suite.fail("iou is not symmetric");
        if (g1.occupied_count() > 0) {
            ++suite.checks;
            if (iou(g1, g1) != 1.0) suite.fail("self-iou of a non-empty grid is not 1");
        }
    }
    return suite;
}

std::vector<SuiteResult> run_all() {
    return {run_gradient_suite(), run_conv_oracle_suite(), run_kl_suite(), run_iou_suite()};
}

}  // namespace voxcvae::selftest
