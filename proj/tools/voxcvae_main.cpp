#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
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

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

std::vector<ShapeClass> parse_classes(const std::string& csv) {
    std::vector<ShapeClass> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) out.push_back(shape_class_from_string(tok));
    }
    if (out.empty()) throw std::invalid_argument("no classes given");
    return out;
}

void parse_range(const std::string& s, double& lo, double& hi) {
    auto comma = s.find(',');
    if (comma == std::string::npos)
        throw std::invalid_argument("range must be 'min,max', got '" + s + "'");
    lo = std::stod(s.substr(0, comma));
    hi = std::stod(s.substr(comma + 1));
}

std::string with_class(const std::string& pattern, const std::string& cname) {
    std::string out = pattern;
    auto at = out.find("{class}");
    if (at != std::string::npos) out.replace(at, 7, cname);
    return out;
}

Tensor scaled_direction_eps(double t, int latent_dim) {
    Tensor eps({latent_dim});
    float u = 1.f / std::sqrt(float(latent_dim));
    for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = float(t) * u;
    return eps;
}

void log_kv(const char* key, const std::string& value) {
    std::cout << key << " = " << value << '\n';
}
void log_kv(const char* key, double value) { std::cout << key << " = " << value << '\n'; }
void log_kv(const char* key, std::uint64_t value) { std::cout << key << " = " << value << '\n'; }
void log_kv(const char* key, int value) { std::cout << key << " = " << value << '\n'; }
void log_kv(const char* key, bool value) {
    std::cout << key << " = " << (value ? "true" : "false") << '\n';
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string classes = "bed,chair,desk,monitor";
    int per_class = 50;
    double split = 0.8;
    std::uint64_t seed = 0;
    std::string profile = "tiny";
    int image_extent = 128;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    ModelConfig mc = ModelConfig::for_profile(profile_from_string(a.profile));
    log_kv("command", std::string("gen-data"));
    log_kv("classes", a.classes);
    log_kv("per-class", a.per_class);
    log_kv("split", a.split);
    log_kv("seed", a.seed);
    log_kv("profile", a.profile);
    log_kv("voxel-extent", mc.voxel_extent);
    log_kv("image-extent", a.image_extent);
    log_kv("out", a.out);

    fs::create_directories(a.out);
    std::string train = (fs::path(a.out) / "train.voxd").string();
    std::string test = (fs::path(a.out) / "test.voxd").string();
    SplitCounts counts = build_dataset(parse_classes(a.classes), a.per_class, a.split, a.seed,
                                       mc.voxel_extent, a.image_extent, train, test);
    std::cout << "wrote " << train << " (" << counts.train << " samples)\n";
    std::cout << "wrote " << test << " (" << counts.test << " samples)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    int epochs = 50;
    int batch_size = 16;
    std::uint64_t seed = 0;
    bool per_class = false;
    std::string recon_loss = "bce";
    float kl_weight = 1.0f;
    std::string profile = "tiny";
};

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    cfg.per_class = a.per_class;
    cfg.recon_loss = recon_loss_from_string(a.recon_loss);
    cfg.kl_weight = a.kl_weight;
    cfg.profile = profile_from_string(a.profile);
    cfg.validate();

    log_kv("command", std::string("train"));
    log_kv("data", a.data);
    log_kv("out", a.out);
    log_kv("epochs", cfg.epochs);
    log_kv("batch-size", cfg.batch_size);
    log_kv("seed", cfg.seed);
    log_kv("per-class", cfg.per_class);
    log_kv("recon-loss", a.recon_loss);
    log_kv("kl-weight", double(cfg.kl_weight));
    log_kv("profile", a.profile);

    TrainArtifacts arts = run_training(cfg, a.data, a.out);
    for (const auto& c : arts.checkpoints) std::cout << "wrote " << c << '\n';
    for (const auto& c : arts.curves) std::cout << "wrote " << c << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint;
    std::string data;
    int index = 0;
    int pose = 0;
    double eps = 0.0;
    double threshold = 0.5;
    std::string out;
};

int cmd_predict(const PredictArgs& a) {
    log_kv("command", std::string("predict"));
    log_kv("checkpoint", a.checkpoint);
    log_kv("data", a.data);
    log_kv("index", a.index);
    log_kv("pose", a.pose);
    log_kv("eps", a.eps);
    log_kv("threshold", a.threshold);
    log_kv("out", a.out);

    Cvae model = load_checkpoint(a.checkpoint);
    Dataset ds = load_dataset(a.data);
    if (a.index < 0 || std::size_t(a.index) >= ds.samples.size())
        throw std::invalid_argument("sample index " + std::to_string(a.index) +
                                    " outside dataset of " +
                                    std::to_string(ds.samples.size()) + " samples");
    const Sample& s = ds.samples[std::size_t(a.index)];
    if (a.pose < 0 || std::size_t(a.pose) >= s.images.size())
        throw std::invalid_argument("pose " + std::to_string(a.pose) + " outside " +
                                    std::to_string(s.images.size()) + " rendered poses");

    Tensor eps = scaled_direction_eps(a.eps, model.cfg.latent_dim);
    Tensor probs = model.predict(s.images[std::size_t(a.pose)].to_tensor(), eps);

    fs::create_directories(a.out);
    std::string tnsr = (fs::path(a.out) / "probs.tnsr").string();
    std::string voxd = (fs::path(a.out) / "pred.voxd").string();
    save_tnsr(tnsr, probs);
    export_voxels(binarize(probs, float(a.threshold)), voxd);
    double score = iou(binarize(probs, float(a.threshold)), s.voxels);
    std::cout << "wrote " << tnsr << '\n';
    std::cout << "wrote " << voxd << '\n';
    std::cout << "iou_vs_ground_truth = " << score << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval-iou and diversity
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;  // may contain {class}
    std::string data;
    int schedule_count = 10;
    std::string schedule_range = "-2,2";
    double threshold = 0.5;
    std::string out;
};

void log_eval(const char* command, const EvalArgs& a) {
    log_kv("command", std::string(command));
    log_kv("checkpoint", a.checkpoint);
    log_kv("data", a.data);
    log_kv("schedule-count", a.schedule_count);
    log_kv("schedule-range", a.schedule_range);
    log_kv("threshold", a.threshold);
    log_kv("out", a.out);
}

struct ClassEval {
    std::string name;
    Cvae model;
    std::vector<Sample> samples;
};

std::vector<ClassEval> load_per_class(const EvalArgs& a) {
    std::vector<ClassEval> out;
    for (std::uint32_t cid : dataset_class_ids(a.data)) {
        ClassEval ce;
        ce.name = to_string(ShapeClass(cid));
        ce.model = load_checkpoint(with_class(a.checkpoint, ce.name));
        ce.samples = std::move(load_dataset(a.data, int(cid)).samples);
        out.push_back(std::move(ce));
    }
    return out;
}

int cmd_eval_iou(const EvalArgs& a) {
    log_eval("eval-iou", a);
    double lo, hi;
    parse_range(a.schedule_range, lo, hi);
    fs::create_directories(a.out);

    std::vector<IouReport> rows;
    for (auto& ce : load_per_class(a)) {
        NoiseSchedule sched =
            NoiseSchedule::make(a.schedule_count, lo, hi, ce.model.cfg.latent_dim);
        rows.push_back(iou_eval(ce.model, ce.samples, sched, ce.name, float(a.threshold)));
    }
    std::string path = (fs::path(a.out) / "iou.csv").string();
    write_iou_csv(path, rows);
    std::cout << "wrote " << path << '\n';
    return 0;
}

int cmd_diversity(const EvalArgs& a) {
    log_eval("diversity", a);
    double lo, hi;
    parse_range(a.schedule_range, lo, hi);
    fs::create_directories(a.out);

    std::vector<DiversityReport> reports;
    std::vector<HypothesisRow> hyp;
    for (auto& ce : load_per_class(a)) {
        NoiseSchedule sched =
            NoiseSchedule::make(a.schedule_count, lo, hi, ce.model.cfg.latent_dim);
        reports.push_back(diversity_eval(ce.model, ce.samples, sched, ce.name));
        hyp.push_back(hypothesis_check(reports.back()));
    }
    std::string div_path = (fs::path(a.out) / "diversity.csv").string();
    std::string hyp_path = (fs::path(a.out) / "hypothesis.csv").string();
    write_diversity_csv(div_path, reports);
    write_hypothesis_csv(hyp_path, hyp);
    std::cout << "wrote " << div_path << '\n';
    std::cout << "wrote " << hyp_path << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// render-preview
// ---------------------------------------------------------------------------

struct PreviewArgs {
    std::string input;
    std::string out;
};

int cmd_render_preview(const PreviewArgs& a) {
    log_kv("command", std::string("render-preview"));
    log_kv("input", a.input);
    log_kv("out", a.out);

    char magic[4] = {};
    {
        std::ifstream probe(a.input, std::ios::binary);
        if (!probe) throw std::runtime_error(a.input + ": cannot open for reading");
        probe.read(magic, 4);
    }

    VoxelGrid grid;
    if (std::string(magic, 4) == "VOXD") {
        Dataset ds = load_dataset(a.input);
        if (ds.samples.empty()) throw std::runtime_error(a.input + ": no samples");
        grid = ds.samples[0].voxels;
    } else if (std::string(magic, 4) == "CVAE") {
        // no condition available: decode the zero-noise, zero-condition shape
        Cvae model = load_checkpoint(a.input);
        Tensor eps({1, model.cfg.latent_dim});
        Tensor cond({1, model.cfg.cond_vector_dim()});
        Tensor probs = sigmoid(model.decode(eps, cond, ForwardMode::eval()));
        int e = model.cfg.voxel_extent;
        grid = binarize(probs.viewed({e, e, e, 1}), 0.5f);
    } else {
        throw std::runtime_error(a.input + ": expected a VOXD or CVAE file");
    }

    fs::create_directories(a.out);
    int image_extent = 128;
    for (int pose = 0; pose < kPoseCount; ++pose) {
        ConditionImage img = render_ortho(grid, pose * 45, image_extent);
        std::vector<std::uint8_t> intensity(std::size_t(image_extent) * image_extent);
        std::vector<std::uint8_t> silhouette(intensity.size());
        for (std::size_t px = 0; px < intensity.size(); ++px) {
            intensity[px] = std::uint8_t(std::lround(img.pixels[px * kImageChannels + 0] * 255.f));
            silhouette[px] = std::uint8_t(std::lround(img.pixels[px * kImageChannels + 2] * 255.f));
        }
        std::string ipath =
            (fs::path(a.out) / ("pose" + std::to_string(pose) + "_intensity.pgm")).string();
        std::string spath =
            (fs::path(a.out) / ("pose" + std::to_string(pose) + "_silhouette.pgm")).string();
        write_pgm(ipath, image_extent, image_extent, intensity);
        write_pgm(spath, image_extent, image_extent, silhouette);
    }
    std::cout << "wrote " << kPoseCount << " pose previews to " << a.out << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

int cmd_selftest() {
    log_kv("command", std::string("selftest"));
    auto results = selftest::run_all();
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " (" << r.checks
                  << " checks)";
        if (!r.pass) std::cout << ": " << r.first_failure;
        std::cout << '\n';
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// config file injection: values become defaults, flags still win
// ---------------------------------------------------------------------------

std::string find_config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error(path + ": cannot open config file");
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ": malformed config line '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::runtime_error(path + ": empty key in config");
        kv.emplace_back(key, value);
    }
    return kv;
}

// Inserts file-provided options right after the subcommand name so that
// command-line flags parsed later take precedence.
std::vector<std::string> inject_config(const CLI::App& app, std::vector<std::string> args) {
    if (args.empty()) return args;
    std::string config_path = find_config_path(args);
    if (config_path.empty()) return args;
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands([](const CLI::App*) { return true; }))
        if (s->get_name() == args[0]) sub = s;
    if (!sub) return args;

    std::vector<std::string> injected;
    for (const auto& [key, value] : read_config_file(config_path)) {
        if (key == "config") continue;
        if (sub->get_option_no_throw("--" + key)) injected.push_back("--" + key + "=" + value);
    }
    args.insert(args.begin() + 1, injected.begin(), injected.end());
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxel CVAE toolkit: synthetic data, training, prediction, and "
                 "condition-diversity analysis"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic voxel dataset");
    gen_cmd->add_option("--config", "config file with key = value lines");
    gen_cmd->add_option("--classes", gen.classes, "comma-separated class list");
    gen_cmd->add_option("--per-class", gen.per_class, "objects per class");
    gen_cmd->add_option("--split", gen.split, "train fraction");
    gen_cmd->add_option("--seed", gen.seed, "generation seed");
    gen_cmd->add_option("--profile", gen.profile, "full|tiny (sets the voxel extent)");
    gen_cmd->add_option("--image-extent", gen.image_extent, "rendered image extent");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();

    TrainArgs tr;
    auto* tr_cmd = app.add_subcommand("train", "train a model");
    tr_cmd->add_option("--config", "config file with key = value lines");
    tr_cmd->add_option("--data", tr.data, "training dataset (VOXD)")->required();
    tr_cmd->add_option("--out", tr.out, "output directory")->required();
    tr_cmd->add_option("--epochs", tr.epochs, "training epochs");
    tr_cmd->add_option("--batch-size", tr.batch_size, "examples per step");
    tr_cmd->add_option("--seed", tr.seed, "training seed");
    tr_cmd->add_flag("--per-class", tr.per_class, "train one model per class");
    tr_cmd->add_option("--recon-loss", tr.recon_loss, "bce|mse");
    tr_cmd->add_option("--kl-weight", tr.kl_weight, "weight of the KL term");
    tr_cmd->add_option("--profile", tr.profile, "full|tiny");

    PredictArgs pr;
    auto* pr_cmd = app.add_subcommand("predict", "reconstruct voxels from one posed image");
    pr_cmd->add_option("--config", "config file with key = value lines");
    pr_cmd->add_option("--checkpoint", pr.checkpoint, "trained model")->required();
    pr_cmd->add_option("--data", pr.data, "dataset holding the condition image")->required();
    pr_cmd->add_option("--index", pr.index, "sample index");
    pr_cmd->add_option("--pose", pr.pose, "pose index (azimuth = 45 * pose)");
    pr_cmd->add_option("--eps", pr.eps, "latent noise scalar along the schedule direction");
    pr_cmd->add_option("--threshold", pr.threshold, "binarization threshold");
    pr_cmd->add_option("--out", pr.out, "output directory")->required();

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval-iou", "IOU over the fixed noise schedule");
    EvalArgs dv;
    auto* dv_cmd = app.add_subcommand("diversity", "per-pose diversity analysis");
    for (auto [cmd, args] : {std::pair{ev_cmd, &ev}, std::pair{dv_cmd, &dv}}) {
        cmd->add_option("--config", "config file with key = value lines");
        cmd->add_option("--checkpoint", args->checkpoint,
                        "checkpoint path; {class} expands per class")
            ->required();
        cmd->add_option("--data", args->data, "test dataset (VOXD)")->required();
        cmd->add_option("--schedule-count", args->schedule_count, "noise values");
        cmd->add_option("--schedule-range", args->schedule_range, "min,max of the scalars");
        cmd->add_option("--threshold", args->threshold, "binarization threshold");
        cmd->add_option("--out", args->out, "output directory")->required();
    }

    PreviewArgs pv;
    auto* pv_cmd = app.add_subcommand("render-preview", "write per-pose PGM previews");
    pv_cmd->add_option("--config", "config file with key = value lines");
    pv_cmd->add_option("--input", pv.input, "VOXD grid/dataset or CVAE checkpoint")->required();
    pv_cmd->add_option("--out", pv.out, "output directory")->required();

    auto* st_cmd = app.add_subcommand("selftest", "run the bundled oracle suites");
    (void)st_cmd;

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        args = inject_config(app, args);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(gen);
        if (tr_cmd->parsed()) return cmd_train(tr);
        if (pr_cmd->parsed()) return cmd_predict(pr);
        if (ev_cmd->parsed()) return cmd_eval_iou(ev);
        if (dv_cmd->parsed()) return cmd_diversity(dv);
        if (pv_cmd->parsed()) return cmd_render_preview(pv);
        if (st_cmd->parsed()) return cmd_selftest();
        std::cerr << "error: no command selected\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
