// End-to-end checks of the command-line surface: exit codes, config
// precedence, and the gen-data -> train -> predict -> eval pipeline on a
// desk-sized fixture.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "voxcvae/data.hpp"

#ifndef VOXCVAE_CLI_PATH
#error "VOXCVAE_CLI_PATH must point at the built binary"
#endif

namespace {

namespace fs = std::filesystem;

const fs::path kWork = fs::temp_directory_path() / "voxcvae_cli_test";

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct RunResult {
    int code;
    std::string out;
    std::string err;
};

RunResult run(const std::string& args) {
    fs::path out = kWork / "stdout.txt";
    fs::path err = kWork / "stderr.txt";
    std::string cmd = std::string(VOXCVAE_CLI_PATH) + " " + args + " > " + out.string() +
                      " 2> " + err.string();
    int status = std::system(cmd.c_str());
    int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {code, slurp(out), slurp(err)};
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    fs::create_directories(kWork);
    CHECK(run("bogus-cmd").code == 2);
    CHECK(run("").code == 2);
    CHECK(run("train").code == 2);  // missing required flags
    CHECK(run("train --data x.voxd --out o --bogus-flag 1").code == 2);
    CHECK(run("--help").code == 0);
}

TEST_CASE("runtime failures exit with code 1") {
    auto r = run("train --data /nonexistent.voxd --out " + (kWork / "o").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("render-preview maps occupancy to pixel extremes") {
    fs::create_directories(kWork / "grids");
    // writing the grid files through the library keeps this test hermetic
    {
        voxcvae::VoxelGrid empty(16);
        voxcvae::export_voxels(empty, (kWork / "grids/empty.voxd").string());
        voxcvae::VoxelGrid cube(16);
        std::fill(cube.occupancy.begin(), cube.occupancy.end(), std::uint8_t(1));
        voxcvae::export_voxels(cube, (kWork / "grids/cube.voxd").string());
    }

    REQUIRE(run("render-preview --input " + (kWork / "grids/empty.voxd").string() + " --out " +
                (kWork / "grids/empty_out").string())
                .code == 0);
    std::string black = slurp(kWork / "grids/empty_out/pose0_silhouette.pgm");
    REQUIRE(black.size() == 15 + 128 * 128);
    for (std::size_t i = 15; i < black.size(); ++i) REQUIRE(black[i] == 0);

    REQUIRE(run("render-preview --input " + (kWork / "grids/cube.voxd").string() + " --out " +
                (kWork / "grids/cube_out").string())
                .code == 0);
    std::string white = slurp(kWork / "grids/cube_out/pose0_silhouette.pgm");
    REQUIRE(white.size() == 15 + 128 * 128);
    for (std::size_t i = 15; i < white.size(); ++i) REQUIRE(std::uint8_t(white[i]) == 255);
}

TEST_CASE("selftest passes on a fresh build with a stable summary") {
    auto r = run("selftest");
    CHECK(r.code == 0);
    CHECK(r.out.find("[PASS] gradients") != std::string::npos);
    CHECK(r.out.find("[PASS] conv_oracle") != std::string::npos);
    CHECK(r.out.find("[PASS] kl_monte_carlo") != std::string::npos);
    CHECK(r.out.find("[PASS] iou_counting") != std::string::npos);
    CHECK(r.out.find("[FAIL]") == std::string::npos);

    auto again = run("selftest");
    CHECK(again.code == 0);
    CHECK(again.out == r.out);
}

TEST_CASE("gen-data honors the class list and replays byte-identically") {
    fs::create_directories(kWork);
    std::string d1 = (kWork / "d1").string();
    std::string d2 = (kWork / "d2").string();
    auto r1 = run("gen-data --classes chair,desk --per-class 10 --seed 5 --profile tiny --out " +
                  d1);
    REQUIRE(r1.code == 0);
    CHECK(r1.out.find("classes = chair,desk") != std::string::npos);
    CHECK(r1.out.find("16 samples") != std::string::npos);  // 8 train per class
    auto r2 = run("gen-data --classes chair,desk --per-class 10 --seed 5 --profile tiny --out " +
                  d2);
    REQUIRE(r2.code == 0);
    CHECK(slurp(kWork / "d1/train.voxd") == slurp(kWork / "d2/train.voxd"));
    CHECK(slurp(kWork / "d1/test.voxd") == slurp(kWork / "d2/test.voxd"));
}

TEST_CASE("full pipeline with config file precedence") {
    fs::create_directories(kWork);
    std::string data_dir = (kWork / "data").string();
    REQUIRE(run("gen-data --classes chair --per-class 3 --seed 9 --profile tiny --out " +
                data_dir)
                .code == 0);

    // config file sets epochs and a seed; the command line overrides the seed
    {
        std::ofstream cfg(kWork / "train.cfg");
        cfg << "# training fixture\n";
        cfg << "epochs = 1\n";
        cfg << "seed = 3\n";
        cfg << "batch-size = 8\n";
    }
    std::string train_out = (kWork / "run").string();
    auto tr = run("train --config " + (kWork / "train.cfg").string() + " --seed 7 --data " +
                  data_dir + "/train.voxd --out " + train_out);
    REQUIRE(tr.code == 0);
    CHECK(tr.out.find("epochs = 1") != std::string::npos);      // from the file
    CHECK(tr.out.find("seed = 7") != std::string::npos);        // flag wins
    CHECK(tr.out.find("batch-size = 8") != std::string::npos);  // from the file
    REQUIRE(fs::exists(kWork / "run/model.cvae"));
    REQUIRE(fs::exists(kWork / "run/loss.csv"));

    std::string pred_out = (kWork / "pred").string();
    auto pd = run("predict --checkpoint " + train_out + "/model.cvae --data " + data_dir +
                  "/test.voxd --index 0 --pose 2 --eps 0 --out " + pred_out);
    REQUIRE(pd.code == 0);
    CHECK(fs::exists(kWork / "pred/probs.tnsr"));
    CHECK(fs::exists(kWork / "pred/pred.voxd"));

    std::string prev_out = (kWork / "preview").string();
    auto pv = run("render-preview --input " + pred_out + "/pred.voxd --out " + prev_out);
    REQUIRE(pv.code == 0);
    for (int pose = 0; pose < 8; ++pose) {
        std::string pgm =
            slurp(kWork / ("preview/pose" + std::to_string(pose) + "_silhouette.pgm"));
        REQUIRE(pgm.substr(0, 15) == "P5\n128 128\n255\n");
    }

    std::string eval_out1 = (kWork / "eval1").string();
    std::string eval_out2 = (kWork / "eval2").string();
    auto ev = run("eval-iou --checkpoint " + train_out + "/model.cvae --data " + data_dir +
                  "/test.voxd --schedule-count 3 --out " + eval_out1);
    REQUIRE(ev.code == 0);
    REQUIRE(run("eval-iou --checkpoint " + train_out + "/model.cvae --data " + data_dir +
                "/test.voxd --schedule-count 3 --out " + eval_out2)
                .code == 0);
    std::string iou_csv = slurp(kWork / "eval1/iou.csv");
    CHECK(iou_csv.rfind("class,mean_iou,std_iou\n", 0) == 0);
    CHECK(iou_csv == slurp(kWork / "eval2/iou.csv"));

    std::string div_out = (kWork / "div").string();
    auto dv = run("diversity --checkpoint " + train_out + "/model.cvae --data " + data_dir +
                  "/test.voxd --schedule-count 3 --schedule-range -1,1 --out " + div_out);
    REQUIRE(dv.code == 0);
    std::string div_csv = slurp(kWork / "div/diversity.csv");
    CHECK(div_csv.rfind("class,pose,mean_mse,std_mse,voxelwise_std,is_best_pose\n", 0) == 0);
    CHECK(std::count(div_csv.begin(), div_csv.end(), '\n') == 9);  // header + 8 poses
    std::string hyp_csv = slurp(kWork / "div/hypothesis.csv");
    CHECK(hyp_csv.rfind("class,best_pose,std_rank_of_best,spearman_rho\n", 0) == 0);

    fs::remove_all(kWork);
}
