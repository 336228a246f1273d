// Acceptance suite: runs every release criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exit code 0 only when all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "voxcvae/data.hpp"
#include "voxcvae/metrics.hpp"
#include "voxcvae/model.hpp"
#include "voxcvae/selftest.hpp"
#include "voxcvae/tensor_io.hpp"
#include "voxcvae/trainer.hpp"

namespace {

using namespace voxcvae;
namespace fs = std::filesystem;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& why) {
        if (!ok && pass) {
            pass = false;
            detail = why;
        }
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

fs::path work_dir() { return fs::current_path() / "acceptance_tmp"; }

// ---------------------------------------------------------------------------

Outcome criterion_gradients(double& seconds) {
    auto t0 = std::chrono::steady_clock::now();
    auto r = selftest::run_gradient_suite();
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Outcome o;
    o.require(r.pass, r.first_failure);
    o.require(seconds < 120.0, "runtime " + fmt(seconds) + "s exceeds 120s");
    if (o.pass) o.detail = std::to_string(r.checks) + " checks";
    return o;
}

Outcome criterion_conv_oracle(double& seconds) {
    auto t0 = std::chrono::steady_clock::now();
    auto r = selftest::run_conv_oracle_suite();
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Outcome o;
    o.require(r.pass, r.first_failure);
    o.require(r.checks == 50, "expected 50 probes");
    o.require(seconds < 30.0, "runtime " + fmt(seconds) + "s exceeds 30s");
    return o;
}

Outcome criterion_kl() {
    auto r = selftest::run_kl_suite();
    Outcome o;
    o.require(r.pass, r.first_failure);
    return o;
}

Outcome criterion_architecture() {
    Outcome o;
    const std::vector<std::pair<std::string, Shape>> plan = {
        {"embed.conv0.kernel", {3, 3, 4, 8}},
        {"embed.conv0.bias", {8}},
        {"embed.conv1.kernel", {3, 3, 8, 8}},
        {"embed.conv1.bias", {8}},
        {"embed.proj.kernel", {1, 1, 8, 4}},
        {"embed.proj.bias", {4}},
        {"encoder.conv0.kernel", {3, 3, 3, 1, 8}},
        {"encoder.conv0.bias", {8}},
        {"encoder.conv1.kernel", {3, 3, 3, 8, 64}},
        {"encoder.conv1.bias", {64}},
        {"encoder.conv2.kernel", {3, 3, 3, 64, 128}},
        {"encoder.conv2.bias", {128}},
        {"encoder.conv3.kernel", {3, 3, 3, 128, 256}},
        {"encoder.conv3.bias", {256}},
        {"encoder.bn1.gamma", {64}},
        {"encoder.bn1.beta", {64}},
        {"encoder.bn1.running_mean", {64}},
        {"encoder.bn1.running_var", {64}},
        {"encoder.bn2.gamma", {128}},
        {"encoder.bn2.beta", {128}},
        {"encoder.bn2.running_mean", {128}},
        {"encoder.bn2.running_var", {128}},
        {"encoder.fc0.weight", {20480, 256}},
        {"encoder.fc0.bias", {256}},
        {"encoder.bn_fc.gamma", {256}},
        {"encoder.bn_fc.beta", {256}},
        {"encoder.bn_fc.running_mean", {256}},
        {"encoder.bn_fc.running_var", {256}},
        {"encoder.fc1.weight", {256, 128}},
        {"encoder.fc1.bias", {128}},
        {"encoder.fc2.weight", {128, 512}},
        {"encoder.fc2.bias", {512}},
        {"encoder.mu.weight", {512, 32}},
        {"encoder.mu.bias", {32}},
        {"encoder.logvar.weight", {512, 32}},
        {"encoder.logvar.bias", {32}},
        {"decoder.fc.weight", {4128, 256}},
        {"decoder.fc.bias", {256}},
        {"decoder.bn_fc.gamma", {256}},
        {"decoder.bn_fc.beta", {256}},
        {"decoder.bn_fc.running_mean", {256}},
        {"decoder.bn_fc.running_var", {256}},
        {"decoder.conv0.kernel", {3, 3, 3, 4, 256}},
        {"decoder.conv0.bias", {256}},
        {"decoder.conv1.kernel", {3, 3, 3, 256, 128}},
        {"decoder.conv1.bias", {128}},
        {"decoder.conv2.kernel", {3, 3, 3, 128, 16}},
        {"decoder.conv2.bias", {16}},
        {"decoder.conv3.kernel", {3, 3, 3, 16, 8}},
        {"decoder.conv3.bias", {8}},
        {"decoder.conv4.kernel", {3, 3, 3, 8, 1}},
        {"decoder.conv4.bias", {1}},
    };
    Cvae model(ModelConfig::full());
    auto state = model.state();
    o.require(state.size() == plan.size(),
              "state holds " + std::to_string(state.size()) + " tensors, plan has " +
                  std::to_string(plan.size()));
    std::map<std::string, Shape> got;
    for (auto& e : state) got[e.name] = e.tensor->shape;
    for (const auto& [name, shape] : plan) {
        auto it = got.find(name);
        o.require(it != got.end(), "missing tensor " + name);
        if (it != got.end())
            o.require(it->second == shape, name + " is " + shape_str(it->second) + ", plan " +
                                               shape_str(shape));
    }

    Rng rng(1);
    model.init(rng);
    Rng drng(2);
    Tensor voxels({1, 32, 32, 32, 1});
    for (std::size_t i = 0; i < voxels.numel(); ++i) voxels[i] = drng.uniform() < 0.3 ? 1.f : 0.f;
    Tensor image({1, 128, 128, 4});
    fill_uniform(image, drng, 0.0, 1.0);
    auto cond = model.embed_condition(image);
    Tensor joined = concat<float>({voxels, cond.slab}, 3);
    o.require(joined.shape == Shape{1, 32, 32, 36, 1},
              "encoder input is " + shape_str(joined.shape));
    auto [mu, log_var] = model.encode(voxels, cond.slab, ForwardMode::eval());
    o.require(mu.shape == Shape{1, 32}, "mu is " + shape_str(mu.shape));
    o.require(log_var.shape == Shape{1, 32}, "log_var is " + shape_str(log_var.shape));
    Tensor eps({1, 32});
    Tensor logits = model.decode(eps, cond.vector, ForwardMode::eval());
    o.require(logits.shape == Shape{1, 32, 32, 32, 1},
              "decoder output is " + shape_str(logits.shape));

    // a full-profile checkpoint round-trip preserves every parameter bitwise
    fs::path dir = work_dir() / "full_ckpt";
    fs::create_directories(dir);
    std::string path = (dir / "full.cvae").string();
    save_checkpoint(model, path);
    Cvae loaded = load_checkpoint(path);
    auto sa = model.state();
    auto sb = loaded.state();
    bool bitwise = sa.size() == sb.size();
    for (std::size_t i = 0; bitwise && i < sa.size(); ++i)
        for (std::size_t j = 0; j < sa[i].tensor->numel(); ++j)
            if ((*sa[i].tensor)[j] != (*sb[i].tensor)[j]) {
                bitwise = false;
                break;
            }
    o.require(bitwise, "full-profile checkpoint round-trip altered a parameter");
    fs::remove_all(dir);

    if (o.pass) o.detail = std::to_string(plan.size()) + " tensors layer-for-layer";
    return o;
}

Dataset chair_fixture(int count, std::uint64_t seed) {
    Dataset ds;
    ds.meta = DatasetMeta{16, 128, kImageChannels, kPoseCount};
    Rng seeds(seed, 4);
    for (int i = 0; i < count; ++i)
        ds.samples.push_back(make_sample(ShapeClass::Chair, seeds.next_u64(), 16, 128));
    return ds;
}

Outcome criterion_determinism() {
    Outcome o;
    fs::path dir = work_dir() / "determinism";
    fs::create_directories(dir);

    auto counts = build_dataset({ShapeClass::Chair, ShapeClass::Desk}, 3, 0.67, 11, 16, 128,
                                (dir / "train.voxd").string(), (dir / "test.voxd").string());
    (void)counts;

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 21;
    cfg.profile = Profile::Tiny;
    run_training(cfg, (dir / "train.voxd").string(), (dir / "a").string());
    run_training(cfg, (dir / "train.voxd").string(), (dir / "b").string());
    o.require(slurp((dir / "a/model.cvae").string()) == slurp((dir / "b/model.cvae").string()),
              "checkpoints differ between identical train runs");
    o.require(slurp((dir / "a/loss.csv").string()) == slurp((dir / "b/loss.csv").string()),
              "loss curves differ between identical train runs");

    Cvae model = load_checkpoint((dir / "a/model.cvae").string());
    Dataset test = load_dataset((dir / "test.voxd").string(), int(ShapeClass::Chair));
    NoiseSchedule sched = NoiseSchedule::make(10, -2.0, 2.0, model.cfg.latent_dim);
    for (int round = 0; round < 2; ++round) {
        std::string suffix = round == 0 ? "1" : "2";
        DiversityReport rep = diversity_eval(model, test.samples, sched, "chair");
        write_diversity_csv((dir / ("div" + suffix + ".csv")).string(), {rep});
        write_hypothesis_csv((dir / ("hyp" + suffix + ".csv")).string(),
                             {hypothesis_check(rep)});
        IouReport ir = iou_eval(model, test.samples, sched, "chair");
        write_iou_csv((dir / ("iou" + suffix + ".csv")).string(), {ir});
    }
    o.require(slurp((dir / "div1.csv").string()) == slurp((dir / "div2.csv").string()),
              "diversity reports differ across reruns");
    o.require(slurp((dir / "hyp1.csv").string()) == slurp((dir / "hyp2.csv").string()),
              "hypothesis reports differ across reruns");
    o.require(slurp((dir / "iou1.csv").string()) == slurp((dir / "iou2.csv").string()),
              "iou reports differ across reruns");
    return o;
}

// trained-state shared between criteria 6 and 7
struct OverfitRun {
    Dataset fixture;
    Cvae model{ModelConfig::tiny()};
    bool ready = false;
};
OverfitRun g_overfit;

Outcome criterion_overfit(double& seconds) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    g_overfit.fixture = chair_fixture(4, 77);

    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 4;  // the 32-example fixture needs the denser step count
    cfg.seed = 5;
    cfg.profile = Profile::Tiny;
    TrainOutput out = train_model(cfg, g_overfit.fixture);
    g_overfit.model = std::move(out.model);
    g_overfit.ready = true;

    double initial = out.curve.front().mean_loss;
    double final = out.curve.back().mean_loss;
    o.require(final < 0.1 * initial, "final loss " + fmt(final) + " not below 0.1 * initial " +
                                         fmt(initial));

    Tensor eps0({g_overfit.model.cfg.latent_dim});
    double iou_sum = 0;
    int n = 0;
    for (const auto& s : g_overfit.fixture.samples)
        for (const auto& img : s.images) {
            Tensor probs = g_overfit.model.predict(img.to_tensor(), eps0);
            iou_sum += iou(binarize(probs, 0.5f), s.voxels);
            ++n;
        }
    double mean_iou = iou_sum / n;
    o.require(mean_iou >= 0.9, "eps=0 reconstruction IOU " + fmt(mean_iou) + " below 0.9");

    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(seconds < 600.0, "runtime " + fmt(seconds) + "s exceeds 600s");
    if (o.pass)
        o.detail = "loss " + fmt(initial) + " -> " + fmt(final) + ", eps=0 IOU " + fmt(mean_iou);
    return o;
}

// checkpoints produced by the desk-scale run, reused by criterion 7
std::vector<std::pair<std::string, std::string>> g_desk_models;  // (class, path)
std::string g_desk_test_path;

Outcome criterion_desk_scale(double& seconds) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    fs::path dir = work_dir() / "desk_scale";
    fs::create_directories(dir);

    build_dataset({ShapeClass::Bed, ShapeClass::Chair, ShapeClass::Desk, ShapeClass::Monitor},
                  50, 0.8, 2024, 16, 128, (dir / "train.voxd").string(),
                  (dir / "test.voxd").string());
    g_desk_test_path = (dir / "test.voxd").string();

    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 16;
    cfg.seed = 2024;
    cfg.per_class = true;
    cfg.profile = Profile::Tiny;
    TrainArtifacts arts = run_training(cfg, (dir / "train.voxd").string(), (dir / "models").string());
    o.require(arts.checkpoints.size() == 4, "expected 4 per-class checkpoints");

    std::vector<DiversityReport> reports;
    std::vector<HypothesisRow> hyp;
    std::vector<IouReport> ious;
    for (const auto& ckpt : arts.checkpoints) {
        Cvae model = load_checkpoint(ckpt);
        std::string cname;
        for (ShapeClass c : kAllClasses)
            if (ckpt.find("model_" + to_string(c) + ".cvae") != std::string::npos)
                cname = to_string(c);
        o.require(!cname.empty(), "cannot identify class of " + ckpt);
        if (cname.empty()) continue;
        g_desk_models.emplace_back(cname, ckpt);
        Dataset test = load_dataset((dir / "test.voxd").string(),
                                    int(shape_class_from_string(cname)));
        o.require(test.samples.size() == 10, cname + " test split has " +
                                                 std::to_string(test.samples.size()) +
                                                 " samples, expected 10");
        NoiseSchedule sched = NoiseSchedule::make(10, -2.0, 2.0, model.cfg.latent_dim);
        reports.push_back(diversity_eval(model, test.samples, sched, cname));
        hyp.push_back(hypothesis_check(reports.back()));
        ious.push_back(iou_eval(model, test.samples, sched, cname));
    }

    fs::path report_dir = work_dir() / "reports";
    fs::create_directories(report_dir);
    write_diversity_csv((report_dir / "diversity.csv").string(), reports);
    write_hypothesis_csv((report_dir / "hypothesis.csv").string(), hyp);
    write_iou_csv((report_dir / "iou.csv").string(), ious);

    // structural completeness of the reports
    std::string div = slurp((report_dir / "diversity.csv").string());
    o.require(std::count(div.begin(), div.end(), '\n') == 1 + 4 * kPoseCount,
              "diversity.csv does not hold 8 pose rows per class");
    std::string hyp_csv = slurp((report_dir / "hypothesis.csv").string());
    o.require(std::count(hyp_csv.begin(), hyp_csv.end(), '\n') == 1 + 4,
              "hypothesis.csv does not hold one row per class");
    for (const auto& r : reports) {
        o.require(int(r.poses.size()) == kPoseCount, r.class_name + " report incomplete");
        for (const auto& p : r.poses) {
            o.require(std::isfinite(p.mean_mse) && std::isfinite(p.std_mse) &&
                          std::isfinite(p.voxelwise_std),
                      r.class_name + " pose " + std::to_string(p.pose) + " not finite");
            o.require(p.std_mse >= 0 && p.voxelwise_std >= 0,
                      r.class_name + " negative deviation");
        }
        o.require(r.best_pose >= 0 && r.best_pose < kPoseCount, "best pose out of range");
    }
    for (const auto& r : ious) {
        o.require(r.mean_iou >= 0.0 && r.mean_iou <= 1.0,
                  r.class_name + " mean IOU " + fmt(r.mean_iou) + " outside [0,1]");
        o.require(r.std_iou >= 0.0, r.class_name + " negative IOU std");
    }

    // hypothesis diagnostics are reported, not asserted
    std::string diag = "diagnostics:";
    for (const auto& h : hyp)
        diag += " " + h.class_name + "(best=" + std::to_string(h.best_pose) +
                ",std_rank=" + fmt(h.std_rank_of_best) + ",rho=" + fmt(h.spearman_rho) + ")";
    std::printf("    %s\n", diag.c_str());
    std::string iou_line = "iou:";
    for (const auto& r : ious)
        iou_line += " " + r.class_name + "=" + fmt(r.mean_iou) + "(+-" + fmt(r.std_iou) + ")";
    std::printf("    %s\n", iou_line.c_str());

    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(seconds < 7200.0, "runtime " + fmt(seconds) + "s exceeds 2h");

    // the multi-hundred-megabyte datasets are not worth keeping
    fs::remove((dir / "train.voxd"));
    return o;
}

Outcome criterion_deterministic_limit() {
    Outcome o;
    NoiseSchedule collapsed = NoiseSchedule::make(1, 0.0, 0.0, 32);

    o.require(g_overfit.ready, "overfit model unavailable");
    if (g_overfit.ready) {
        DiversityReport rep =
            diversity_eval(g_overfit.model, g_overfit.fixture.samples, collapsed, "chair");
        for (const auto& p : rep.poses) {
            o.require(p.std_mse == 0.0, "overfit chair pose " + std::to_string(p.pose) +
                                            " std_mse " + fmt(p.std_mse) + " != 0");
            o.require(p.voxelwise_std == 0.0, "overfit chair pose " + std::to_string(p.pose) +
                                                  " voxelwise_std != 0");
        }
    }

    o.require(!g_desk_models.empty(), "desk-scale models unavailable");
    for (const auto& [cname, ckpt] : g_desk_models) {
        Cvae model = load_checkpoint(ckpt);
        Dataset test = load_dataset(g_desk_test_path, int(shape_class_from_string(cname)));
        DiversityReport rep = diversity_eval(model, test.samples, collapsed, cname);
        for (const auto& p : rep.poses) {
            o.require(p.std_mse == 0.0,
                      cname + " pose " + std::to_string(p.pose) + " std_mse != 0");
            o.require(p.voxelwise_std == 0.0,
                      cname + " pose " + std::to_string(p.pose) + " voxelwise_std != 0");
        }
    }
    return o;
}

Outcome criterion_iou_oracle() {
    auto r = selftest::run_iou_suite();
    Outcome o;
    o.require(r.pass, r.first_failure);
    return o;
}

Outcome criterion_round_trips() {
    Outcome o;
    fs::path dir = work_dir() / "round_trips";
    fs::create_directories(dir);

    // TNSR
    Rng rng(7);
    Tensor t({4, 5, 3});
    fill_uniform(t, rng, -3.0, 3.0);
    std::string t1 = (dir / "a.tnsr").string(), t2 = (dir / "b.tnsr").string();
    save_tnsr(t1, t);
    save_tnsr(t2, load_tnsr(t1));
    o.require(slurp(t1) == slurp(t2), "TNSR round-trip not byte-identical");
    {
        std::string bytes = slurp(t1);
        std::ofstream bad((dir / "trunc.tnsr").string(), std::ios::binary);
        bad.write(bytes.data(), std::streamsize(bytes.size() - 3));
    }
    bool threw = false;
    try {
        load_tnsr((dir / "trunc.tnsr").string());
    } catch (const std::exception&) {
        threw = true;
    }
    o.require(threw, "truncated TNSR accepted");

    // VOXD
    Dataset ds = chair_fixture(2, 31);
    std::string d1 = (dir / "a.voxd").string(), d2 = (dir / "b.voxd").string();
    save_dataset(ds, d1);
    save_dataset(load_dataset(d1), d2);
    o.require(slurp(d1) == slurp(d2), "VOXD round-trip not byte-identical");
    {
        std::string bytes = slurp(d1);
        std::ofstream bad((dir / "trunc.voxd").string(), std::ios::binary);
        bad.write(bytes.data(), std::streamsize(bytes.size() / 2));
    }
    threw = false;
    try {
        load_dataset((dir / "trunc.voxd").string());
    } catch (const std::exception&) {
        threw = true;
    }
    o.require(threw, "truncated VOXD accepted");

    // CVAE checkpoint
    Cvae model(ModelConfig::tiny());
    Rng mrng(9);
    model.init(mrng);
    std::string c1 = (dir / "a.cvae").string(), c2 = (dir / "b.cvae").string();
    save_checkpoint(model, c1);
    Cvae loaded = load_checkpoint(c1);
    save_checkpoint(loaded, c2);
    o.require(slurp(c1) == slurp(c2), "checkpoint round-trip not byte-identical");
    {
        std::string bytes = slurp(c1);
        std::ofstream bad((dir / "trunc.cvae").string(), std::ios::binary);
        bad.write(bytes.data(), std::streamsize(bytes.size() - 11));
    }
    threw = false;
    try {
        load_checkpoint((dir / "trunc.cvae").string());
    } catch (const std::exception&) {
        threw = true;
    }
    o.require(threw, "truncated checkpoint accepted");
    return o;
}

}  // namespace

int main() {
    fs::remove_all(work_dir());
    fs::create_directories(work_dir());

    struct Row {
        int id;
        std::string name;
        Outcome outcome;
        double seconds = 0;
    };
    std::vector<Row> rows;

    auto run = [&](int id, const std::string& name, auto&& fn) {
        Row row{id, name, {}, 0};
        auto t0 = std::chrono::steady_clock::now();
        try {
            if constexpr (std::is_invocable_v<decltype(fn), double&>) {
                row.outcome = fn(row.seconds);
            } else {
                row.outcome = fn();
            }
        } catch (const std::exception& e) {
            row.outcome.pass = false;
            row.outcome.detail = std::string("exception: ") + e.what();
        }
        if (row.seconds == 0)
            row.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s [%2d] %-28s (%.1fs)%s%s\n", row.outcome.pass ? "PASS" : "FAIL", row.id,
                    name.c_str(), row.seconds, row.outcome.detail.empty() ? "" : ": ",
                    row.outcome.detail.c_str());
        std::fflush(stdout);
        rows.push_back(std::move(row));
    };

    run(1, "gradient correctness", [](double& s) { return criterion_gradients(s); });
    run(2, "convolution oracle", [](double& s) { return criterion_conv_oracle(s); });
    run(3, "kl correctness", [] { return criterion_kl(); });
    run(4, "architecture conformance", [] { return criterion_architecture(); });
    run(5, "determinism", [] { return criterion_determinism(); });
    run(6, "optimization sanity", [](double& s) { return criterion_overfit(s); });
    run(8, "desk-scale experiment", [](double& s) { return criterion_desk_scale(s); });
    run(7, "deterministic limit", [] { return criterion_deterministic_limit(); });
    run(9, "metric oracles", [] { return criterion_iou_oracle(); });
    run(10, "format round-trips", [] { return criterion_round_trips(); });

    int failed = 0;
    for (const auto& r : rows) failed += r.outcome.pass ? 0 : 1;
    std::printf("%d/%zu criteria passed\n", int(rows.size()) - failed, rows.size());
    return failed == 0 ? 0 : 1;
}
