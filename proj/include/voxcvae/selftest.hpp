#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxcvae/tensor.hpp"

namespace voxcvae::selftest {

struct SuiteResult {
    std::string name;
    bool pass = true;
    int checks = 0;
    std::string first_failure;  // empty while passing

    void fail(const std::string& detail) {
        if (pass) first_failure = detail;
        pass = false;
    }
};

using Conv3dFn = std::function<Tensor(const Tensor&, const Tensor&, const Tensor&)>;

// Reverse-mode gradients against 64-bit central differences, per op and for
// the full tiny-profile loss.
SuiteResult run_gradient_suite();

// Production convolution against the brute-force seven-loop reference on
// random 5x5x5 probes. The injectable form exists so tests can verify the
// suite flags a broken convolution.
SuiteResult run_conv_oracle_suite(const Conv3dFn& conv, int probes = 50);
SuiteResult run_conv_oracle_suite();

// Analytic KL against a 1e5-sample Monte-Carlo estimate.
SuiteResult run_kl_suite();

// IOU against direct voxel counting, plus the overlap fixture and symmetry.
SuiteResult run_iou_suite();

std::vector<SuiteResult> run_all();

}  // namespace voxcvae::selftest
