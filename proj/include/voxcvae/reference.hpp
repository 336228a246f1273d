#pragma once

// Independent reference implementations used as oracles by the test suites
// and the CLI selftest. These deliberately share no code with the production
// paths they check.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "voxcvae/tensor.hpp"

namespace voxcvae::reference {

// Brute-force 'same' 3x3x3 cross-correlation, seven nested loops, 64-bit
// accumulation.
inline Tensor conv3d_naive(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.rank() != 4) throw std::invalid_argument("conv3d_naive: expects [D,H,W,Cin]");
    int D = x.extent(0), H = x.extent(1), W = x.extent(2), Ci = x.extent(3);
    int Co = kernel.extent(4);
    Tensor out({D, H, W, Co});
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                for (int co = 0; co < Co; ++co) {
                    double acc = double(bias[std::size_t(co)]);
                    for (int kd = 0; kd < 3; ++kd)
                        for (int kh = 0; kh < 3; ++kh)
                            for (int kw = 0; kw < 3; ++kw)
                                for (int ci = 0; ci < Ci; ++ci) {
                                    int id = d + kd - 1, ih = h + kh - 1, iw = w + kw - 1;
                                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 ||
                                        iw >= W)
                                        continue;
                                    double xv =
                                        double(x[((std::size_t(id) * H + ih) * W + iw) *
                                                     std::size_t(Ci) +
                                                 std::size_t(ci)]);
                                    double kv =
                                        double(kernel[(((std::size_t(kd) * 3 + kh) * 3 + kw) *
                                                           std::size_t(Ci) +
                                                       std::size_t(ci)) *
                                                          std::size_t(Co) +
                                                      std::size_t(co)]);
                                    acc += xv * kv;
                                }
                    out[((std::size_t(d) * H + h) * W + w) * std::size_t(Co) + std::size_t(co)] =
                        float(acc);
                }
    return out;
}

// Monte-Carlo estimate of D(N(mu, diag exp(log_var)) || N(0, I)) as
// E[log q(l) - log p(l)] over draws l ~ q.
inline double kl_monte_carlo(const std::vector<double>& mu, const std::vector<double>& log_var,
                             std::size_t n_samples, std::uint64_t seed) {
    if (mu.size() != log_var.size())
        throw std::invalid_argument("kl_monte_carlo: dimension mismatch");
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double acc = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        double term = 0.0;
        for (std::size_t i = 0; i < mu.size(); ++i) {
            double eps = normal(gen);
            double l = mu[i] + std::exp(0.5 * log_var[i]) * eps;
            // log q - log p for one coordinate, constants cancel
            term += 0.5 * (l * l - eps * eps - log_var[i]);
        }
        acc += term;
    }
    return acc / double(n_samples);
}

// Analytic KL against the unit Gaussian, evaluated in double.
inline double kl_closed_form(const std::vector<double>& mu, const std::vector<double>& log_var) {
    double acc = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i)
        acc += 0.5 * (mu[i] * mu[i] + std::exp(log_var[i]) - 1.0 - log_var[i]);
    return acc;
}

// Direct intersection/union counting over raw occupancy bytes.
inline double iou_count(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("iou_count: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        bool va = a[i] != 0, vb = b[i] != 0;
        inter += std::size_t(va && vb);
        uni += std::size_t(va || vb);
    }
    if (uni == 0) return 1.0;
    return double(inter) / double(uni);
}

}  // namespace voxcvae::reference
