#include "voxcvae/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "voxcvae/parallel.hpp"
#include "voxcvae/serialize.hpp"

namespace voxcvae {

Adam::Adam(std::vector<NamedTensorRef<float>> params, AdamConfig cfg) : cfg_(cfg) {
    slots_.reserve(params.size());
    for (auto& p : params) slots_.push_back(Slot{p, Tensor(p.tensor->shape), Tensor(p.tensor->shape)});
}

void Adam::apply(const std::vector<Tensor>& grads) {
    if (grads.size() != slots_.size())
        throw std::invalid_argument("adam: got " + std::to_string(grads.size()) +
                                    " gradients for " + std::to_string(slots_.size()) +
                                    " parameters");
    ++t_;
    double c1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
    double c2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
    for (std::size_t s = 0; s < slots_.size(); ++s) {
        Slot& slot = slots_[s];
        const Tensor& g = grads[s];
        if (g.shape != slot.param.tensor->shape)
            throw std::invalid_argument("adam: gradient shape " + shape_str(g.shape) +
                                        " does not match parameter '" + slot.param.name + "' " +
                                        shape_str(slot.param.tensor->shape));
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (std::isnan(g[i]))
                throw std::runtime_error("adam: NaN gradient for parameter '" + slot.param.name +
                                         "'");
        float* p = slot.param.tensor->ptr();
        float* m = slot.m.ptr();
        float* v = slot.v.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.f - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.f - cfg_.beta2) * g[i] * g[i];
            float mhat = m[i] / float(c1);
            float vhat = v[i] / float(c2);
            p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

void Adam::step(Tape& tape) {
    std::vector<Tensor> grads;
    grads.reserve(slots_.size());
    for (auto& slot : slots_) grads.push_back(tape.grad(*slot.param.tensor));
    apply(grads);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (kl_weight < 0.f) throw std::invalid_argument("train: kl_weight must be >= 0");
}

ModelConfig TrainConfig::model_config() const {
    ModelConfig mc = ModelConfig::for_profile(profile);
    mc.recon_loss = recon_loss;
    mc.kl_weight = kl_weight;
    return mc;
}

namespace {

struct Example {
    std::uint32_t sample;
    std::uint32_t pose;
};

// Gathers a batch into contiguous voxel/image tensors.
void fill_batch(const Dataset& data, const std::vector<Example>& examples, std::size_t begin,
                std::size_t end, Tensor& voxels, Tensor& images) {
    int e = int(data.meta.voxel_extent);
    int ie = int(data.meta.image_extent);
    int b = int(end - begin);
    voxels = Tensor({b, e, e, e, 1});
    images = Tensor({b, ie, ie, kImageChannels});
    std::size_t vox_stride = std::size_t(e) * e * e;
    std::size_t img_stride = std::size_t(ie) * ie * kImageChannels;
    for (std::size_t i = begin; i < end; ++i) {
        const Sample& s = data.samples[examples[i].sample];
        Tensor vt = s.voxels.to_tensor();
        std::copy(vt.ptr(), vt.ptr() + vox_stride, voxels.ptr() + (i - begin) * vox_stride);
        const ConditionImage& img = s.images[examples[i].pose];
        std::copy(img.pixels.begin(), img.pixels.end(),
                  images.ptr() + (i - begin) * img_stride);
    }
}

}  // namespace

TrainOutput train_model(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.samples.empty()) throw std::invalid_argument("train: empty dataset");
    if (data.meta.poses < 1) throw std::invalid_argument("train: dataset has no pose images");

    ModelConfig mc = cfg.model_config();
    if (int(data.meta.voxel_extent) != mc.voxel_extent)
        throw std::invalid_argument("train: dataset voxel extent " +
                                    std::to_string(data.meta.voxel_extent) +
                                    " does not match profile extent " +
                                    std::to_string(mc.voxel_extent));

    TrainOutput out{Cvae(mc), {}};
    Rng init_rng(cfg.seed, 0);
    out.model.init(init_rng);

    Rng shuffle_rng(cfg.seed, 1);
    Rng eps_rng(cfg.seed, 2);
    Rng dropout_rng(cfg.seed, 3);

    std::vector<Example> examples;
    examples.reserve(data.samples.size() * data.meta.poses);
    for (std::uint32_t s = 0; s < data.samples.size(); ++s)
        for (std::uint32_t p = 0; p < data.meta.poses; ++p) examples.push_back({s, p});

    Adam adam(out.model.parameters());
    const std::size_t n = examples.size();
    out.curve.reserve(std::size_t(cfg.epochs));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(examples[i - 1], examples[shuffle_rng.below(i)]);

        EpochStats stats;
        for (std::size_t begin = 0; begin < n; begin += std::size_t(cfg.batch_size)) {
            std::size_t end = std::min(n, begin + std::size_t(cfg.batch_size));
            Tensor voxels, images;
            fill_batch(data, examples, begin, end, voxels, images);
            Tensor eps({int(end - begin), mc.latent_dim});
            fill_normal(eps, eps_rng);

            Tape tape;
            float loss, recon, kl;
            {
                TapeScope<float> scope(tape);
                auto parts =
                    out.model.elbo(voxels, images, eps, ForwardMode::training(dropout_rng));
                loss = parts.total.item();
                recon = parts.recon.item();
                kl = parts.kl.item();
                if (!std::isfinite(loss))
                    throw std::runtime_error(
                        "train: loss diverged (not finite) at epoch " + std::to_string(epoch) +
                        " batch " + std::to_string(begin / std::size_t(cfg.batch_size)));
                tape.backward(parts.total);
            }
            adam.step(tape);

            double w = double(end - begin);
            stats.mean_loss += double(loss) * w;
            stats.mean_recon += double(recon) * w;
            stats.mean_kl += double(kl) * w;
        }
        stats.mean_loss /= double(n);
        stats.mean_recon /= double(n);
        stats.mean_kl /= double(n);
        out.curve.push_back(stats);
    }
    return out;
}

void write_loss_csv(const std::string& path, const std::vector<EpochStats>& curve) {
    auto os = io::open_output(path);
    os << "epoch,mean_loss,mean_recon,mean_kl\n";
    char buf[128];
    for (std::size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", i + 1, curve[i].mean_loss,
                      curve[i].mean_recon, curve[i].mean_kl);
        os << buf;
    }
    if (!os) io::fail(path, "write failed");
}

TrainArtifacts run_training(const TrainConfig& cfg, const std::string& data_path,
                            const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    TrainArtifacts artifacts;

    if (!cfg.per_class) {
        Dataset data = load_dataset(data_path);
        TrainOutput out = train_model(cfg, data);
        std::string ckpt = (std::filesystem::path(out_dir) / "model.cvae").string();
        std::string csv = (std::filesystem::path(out_dir) / "loss.csv").string();
        save_checkpoint(out.model, ckpt);
        write_loss_csv(csv, out.curve);
        artifacts.checkpoints.push_back(ckpt);
        artifacts.curves.push_back(csv);
        return artifacts;
    }

    // one independent run per class present in the data
    std::vector<std::uint32_t> ids = dataset_class_ids(data_path);
    artifacts.checkpoints.resize(ids.size());
    artifacts.curves.resize(ids.size());

    parallel_for(ids.size(), [&](std::size_t i) {
        std::uint32_t cid = ids[i];
        std::string cname = to_string(ShapeClass(cid));
        Dataset data = load_dataset(data_path, int(cid));
        TrainConfig class_cfg = cfg;
        class_cfg.seed = Rng(cfg.seed, 9000 + cid).next_u64();
        TrainOutput out = train_model(class_cfg, data);
        std::string ckpt =
            (std::filesystem::path(out_dir) / ("model_" + cname + ".cvae")).string();
        std::string csv = (std::filesystem::path(out_dir) / ("loss_" + cname + ".csv")).string();
        save_checkpoint(out.model, ckpt);
        write_loss_csv(csv, out.curve);
        artifacts.checkpoints[i] = ckpt;
        artifacts.curves[i] = csv;
    });
    return artifacts;
}

}  // namespace voxcvae
