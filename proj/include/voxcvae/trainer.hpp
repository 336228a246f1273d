#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxcvae/data.hpp"
#include "voxcvae/model.hpp"
#include "voxcvae/tensor.hpp"

namespace voxcvae {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

// First/second-moment parameter updates with bias correction.
class Adam {
public:
    explicit Adam(std::vector<NamedTensorRef<float>> params, AdamConfig cfg = {});

    // Gradients aligned with the parameter list; aborts on non-finite input.
    void apply(const std::vector<Tensor>& grads);

    // Convenience: pulls each parameter's gradient off the tape.
    void step(Tape& tape);

    std::int64_t steps() const { return t_; }

private:
    struct Slot {
        NamedTensorRef<float> param;
        Tensor m, v;
    };
    std::vector<Slot> slots_;
    AdamConfig cfg_;
    std::int64_t t_ = 0;
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 16;
    std::uint64_t seed = 0;
    bool per_class = false;
    ReconLoss recon_loss = ReconLoss::Bce;
    float kl_weight = 1.0f;
    Profile profile = Profile::Tiny;

    void validate() const;
    // the model plan implied by this run
    ModelConfig model_config() const;
};

struct EpochStats {
    double mean_loss = 0;
    double mean_recon = 0;
    double mean_kl = 0;
};

struct TrainOutput {
    Cvae model;
    std::vector<EpochStats> curve;
};

// Builds, initializes, and trains a model on every (sample, pose) example in
// the dataset. Pure function of (config, dataset contents): replaying the
// same inputs reproduces the checkpoint and curve bit for bit.
TrainOutput train_model(const TrainConfig& cfg, const Dataset& data);

void write_loss_csv(const std::string& path, const std::vector<EpochStats>& curve);

struct TrainArtifacts {
    std::vector<std::string> checkpoints;
    std::vector<std::string> curves;
};

// Orchestrates training against a dataset file. In per-class mode one model
// is trained per class present in the data (runs proceed in parallel
// contexts, outputs are per-class files); otherwise a single model covers
// the whole set.
TrainArtifacts run_training(const TrainConfig& cfg, const std::string& data_path,
                            const std::string& out_dir);

}  // namespace voxcvae
