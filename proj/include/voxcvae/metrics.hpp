#pragma once

#include <string>
#include <vector>

#include "voxcvae/data.hpp"
#include "voxcvae/model.hpp"

namespace voxcvae {

// occupancy = 1 where prob > threshold (strictly)
VoxelGrid binarize(const Tensor& probs, float threshold = 0.5f);

// |a AND b| / |a OR b|; 1.0 when both grids are empty
double iou(const VoxelGrid& a, const VoxelGrid& b);

double mse(const Tensor& a, const Tensor& b);

// Fixed latent noise values: scalars t_k equally spaced over [t_min, t_max]
// applied along one unit direction, so |eps_k| = |t_k|.
struct NoiseSchedule {
    std::vector<Tensor> values;  // each [latent_dim]
    std::vector<double> scalars;

    static NoiseSchedule make(int count, double t_min, double t_max, int latent_dim);
    static NoiseSchedule make(int count, double t_min, double t_max, const Tensor& direction);
};

struct PoseDiversity {
    int pose = 0;
    double mean_mse = 0;
    double std_mse = 0;        // per-object std across the schedule, averaged
    double voxelwise_std = 0;  // per-voxel std across the schedule, averaged
};

struct DiversityReport {
    std::string class_name;
    std::vector<PoseDiversity> poses;
    int best_pose = 0;  // argmin of mean_mse
};

// Decodes every schedule entry for every (object, pose) of one class and
// aggregates reconstruction error and output-diversity statistics per pose.
DiversityReport diversity_eval(Cvae& model, const std::vector<Sample>& test_set,
                               const NoiseSchedule& schedule, const std::string& class_name);

struct HypothesisRow {
    std::string class_name;
    int best_pose = 0;
    double std_rank_of_best = 0;  // average-rank tie handling
    double spearman_rho = 0;      // 0 when either ranking is degenerate
};

// Ranking diagnostics relating per-pose reconstruction error to per-pose
// diversity; reported, not asserted.
HypothesisRow hypothesis_check(const DiversityReport& report);

struct IouReport {
    std::string class_name;
    double mean_iou = 0;
    double std_iou = 0;  // std across schedule entries of the per-run mean
};

IouReport iou_eval(Cvae& model, const std::vector<Sample>& test_set,
                   const NoiseSchedule& schedule, const std::string& class_name,
                   float threshold = 0.5f);

// Spearman rank correlation with average ranks on ties; 0 on degenerate input.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// CSV emitters; six fractional digits, deterministic row order.
void write_diversity_csv(const std::string& path, const std::vector<DiversityReport>& reports);
void write_hypothesis_csv(const std::string& path, const std::vector<HypothesisRow>& rows);
void write_iou_csv(const std::string& path, const std::vector<IouReport>& rows,
                   bool with_overall = true);

}  // namespace voxcvae
