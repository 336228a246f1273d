#include "voxcvae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "voxcvae/parallel.hpp"
#include "voxcvae/serialize.hpp"

namespace voxcvae {

VoxelGrid binarize(const Tensor& probs, float threshold) {
    if (!(threshold > 0.f && threshold < 1.f))
        throw std::invalid_argument("binarize: threshold must lie in (0,1)");
    Tensor bits(probs.shape);
    for (std::size_t i = 0; i < probs.numel(); ++i) {
        if (!(probs[i] >= 0.f && probs[i] <= 1.f))
            throw std::invalid_argument("binarize: probability " + std::to_string(probs[i]) +
                                        " outside [0,1]");
        bits[i] = probs[i] > threshold ? 1.f : 0.f;
    }
    return VoxelGrid::from_tensor(bits);
}

double iou(const VoxelGrid& a, const VoxelGrid& b) {
    if (a.extent != b.extent)
        throw std::invalid_argument("iou: extent mismatch " + std::to_string(a.extent) + " vs " +
                                    std::to_string(b.extent));
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.occupancy.size(); ++i) {
        bool va = a.occupancy[i] != 0, vb = b.occupancy[i] != 0;
        inter += std::size_t(va && vb);
        uni += std::size_t(va || vb);
    }
    if (uni == 0) return 1.0;  // both empty: full agreement
    return double(inter) / double(uni);
}

double mse(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("mse: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    if (a.numel() == 0) throw std::invalid_argument("mse: empty tensors");
    double acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return acc / double(a.numel());
}

NoiseSchedule NoiseSchedule::make(int count, double t_min, double t_max, int latent_dim) {
    Tensor direction = Tensor::full({latent_dim}, 1.f / std::sqrt(float(latent_dim)));
    return make(count, t_min, t_max, direction);
}

NoiseSchedule NoiseSchedule::make(int count, double t_min, double t_max,
                                  const Tensor& direction) {
    if (count < 1) throw std::invalid_argument("noise schedule: count must be >= 1");
    if (count > 1 && t_min == t_max)
        throw std::invalid_argument("noise schedule: degenerate range for count > 1");
    NoiseSchedule sched;
    sched.scalars.resize(std::size_t(count));
    sched.values.reserve(std::size_t(count));
    for (int k = 0; k < count; ++k) {
        double t = count == 1 ? t_min : t_min + double(k) * (t_max - t_min) / double(count - 1);
        sched.scalars[std::size_t(k)] = t;
        Tensor eps(direction.shape);
        for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = float(t) * direction[i];
        sched.values.push_back(std::move(eps));
    }
    return sched;
}

namespace {

// Population std that is exactly zero when every value is identical.
double exact_std(const std::vector<double>& v) {
    if (v.empty()) return 0;
    bool all_equal = true;
    for (double x : v) all_equal = all_equal && x == v[0];
    if (all_equal) return 0.0;
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double acc = 0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / double(v.size()));
}

struct ObjectPoseStats {
    double mean_mse = 0;
    double std_mse = 0;
    double voxelwise_std = 0;
};

ObjectPoseStats eval_object_pose(Cvae& model, const Sample& s, int pose,
                                 const NoiseSchedule& schedule) {
    Tensor target = s.voxels.to_tensor();
    Tensor image = s.images[std::size_t(pose)].to_tensor();
    auto cond = model.embed_condition(
        image.viewed({1, image.extent(0), image.extent(1), image.extent(2)}));

    std::size_t K = schedule.values.size();
    std::vector<Tensor> probs;
    probs.reserve(K);
    std::vector<double> errs(K);
    for (std::size_t k = 0; k < K; ++k) {
        probs.push_back(model.predict_with(cond, schedule.values[k]));
        errs[k] = mse(probs.back(), target);
    }

    ObjectPoseStats st;
    for (double e : errs) st.mean_mse += e;
    st.mean_mse /= double(K);
    st.std_mse = exact_std(errs);

    std::size_t n = probs[0].numel();
    double vox_acc = 0;
    std::vector<double> column(K);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < K; ++k) column[k] = double(probs[k][i]);
        vox_acc += exact_std(column);
    }
    st.voxelwise_std = vox_acc / double(n);
    return st;
}

}  // namespace

DiversityReport diversity_eval(Cvae& model, const std::vector<Sample>& test_set,
                               const NoiseSchedule& schedule, const std::string& class_name) {
    if (test_set.empty()) throw std::invalid_argument("diversity_eval: empty test set");
    for (const auto& s : test_set)
        if (int(s.images.size()) != kPoseCount)
            throw std::invalid_argument("diversity_eval: sample has " +
                                        std::to_string(s.images.size()) + " poses, need " +
                                        std::to_string(kPoseCount));

    // per-object evaluations are independent; reduce in object order
    std::vector<std::array<ObjectPoseStats, kPoseCount>> per_object(test_set.size());
    parallel_for(test_set.size(), [&](std::size_t o) {
        for (int p = 0; p < kPoseCount; ++p)
            per_object[o][std::size_t(p)] = eval_object_pose(model, test_set[o], p, schedule);
    });

    DiversityReport report;
    report.class_name = class_name;
    report.poses.resize(kPoseCount);
    for (int p = 0; p < kPoseCount; ++p) {
        PoseDiversity& row = report.poses[std::size_t(p)];
        row.pose = p;
        for (std::size_t o = 0; o < per_object.size(); ++o) {
            row.mean_mse += per_object[o][std::size_t(p)].mean_mse;
            row.std_mse += per_object[o][std::size_t(p)].std_mse;
            row.voxelwise_std += per_object[o][std::size_t(p)].voxelwise_std;
        }
        row.mean_mse /= double(per_object.size());
        row.std_mse /= double(per_object.size());
        row.voxelwise_std /= double(per_object.size());
    }
    report.best_pose = 0;
    for (int p = 1; p < kPoseCount; ++p)
        if (report.poses[std::size_t(p)].mean_mse <
            report.poses[std::size_t(report.best_pose)].mean_mse)
            report.best_pose = p;
    return report;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = (double(i) + double(j)) / 2.0 + 1.0;  // 1-based
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("spearman_rho: length mismatch");
    std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= double(ra.size());
    mb /= double(rb.size());
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0 || vb == 0) return 0.0;
    return cov / std::sqrt(va * vb);
}

HypothesisRow hypothesis_check(const DiversityReport& report) {
    if (int(report.poses.size()) != kPoseCount)
        throw std::invalid_argument("hypothesis_check: report must cover all poses");
    std::vector<double> means, stds;
    for (const auto& p : report.poses) {
        means.push_back(p.mean_mse);
        stds.push_back(p.std_mse);
    }
    HypothesisRow row;
    row.class_name = report.class_name;
    row.best_pose = report.best_pose;
    row.std_rank_of_best = average_ranks(stds)[std::size_t(report.best_pose)];
    row.spearman_rho = spearman_rho(means, stds);
    return row;
}

IouReport iou_eval(Cvae& model, const std::vector<Sample>& test_set,
                   const NoiseSchedule& schedule, const std::string& class_name,
                   float threshold) {
    if (test_set.empty()) throw std::invalid_argument("iou_eval: empty test set");
    std::size_t K = schedule.values.size();

    // ious[o][pose][k], filled in parallel, reduced in object order
    std::vector<std::vector<std::array<double, kPoseCount>>> ious(
        test_set.size(), std::vector<std::array<double, kPoseCount>>(K));
    parallel_for(test_set.size(), [&](std::size_t o) {
        const Sample& s = test_set[o];
        for (int p = 0; p < int(s.images.size()); ++p) {
            Tensor image = s.images[std::size_t(p)].to_tensor();
            auto cond = model.embed_condition(
                image.viewed({1, image.extent(0), image.extent(1), image.extent(2)}));
            for (std::size_t k = 0; k < K; ++k) {
                VoxelGrid pred = binarize(model.predict_with(cond, schedule.values[k]), threshold);
                ious[o][k][std::size_t(p)] = iou(pred, s.voxels);
            }
        }
    });

    int poses = int(test_set[0].images.size());
    std::vector<double> run_means(K, 0.0);
    double total = 0;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t o = 0; o < test_set.size(); ++o)
            for (int p = 0; p < poses; ++p) run_means[k] += ious[o][k][std::size_t(p)];
        run_means[k] /= double(test_set.size() * std::size_t(poses));
        total += run_means[k];
    }

    IouReport report;
    report.class_name = class_name;
    report.mean_iou = total / double(K);
    report.std_iou = exact_std(run_means);
    return report;
}

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

void write_diversity_csv(const std::string& path, const std::vector<DiversityReport>& reports) {
    auto os = io::open_output(path);
    os << "class,pose,mean_mse,std_mse,voxelwise_std,is_best_pose\n";
    for (const auto& r : reports)
        for (const auto& p : r.poses)
            os << r.class_name << ',' << p.pose << ',' << fmt6(p.mean_mse) << ','
               << fmt6(p.std_mse) << ',' << fmt6(p.voxelwise_std) << ','
               << (p.pose == r.best_pose ? 1 : 0) << '\n';
    if (!os) io::fail(path, "write failed");
}

void write_hypothesis_csv(const std::string& path, const std::vector<HypothesisRow>& rows) {
    auto os = io::open_output(path);
    os << "class,best_pose,std_rank_of_best,spearman_rho\n";
    for (const auto& r : rows)
        os << r.class_name << ',' << r.best_pose << ',' << fmt6(r.std_rank_of_best) << ','
           << fmt6(r.spearman_rho) << '\n';
    if (!os) io::fail(path, "write failed");
}

void write_iou_csv(const std::string& path, const std::vector<IouReport>& rows,
                   bool with_overall) {
    auto os = io::open_output(path);
    os << "class,mean_iou,std_iou\n";
    double mean_acc = 0, std_acc = 0;
    for (const auto& r : rows) {
        os << r.class_name << ',' << fmt6(r.mean_iou) << ',' << fmt6(r.std_iou) << '\n';
        mean_acc += r.mean_iou;
        std_acc += r.std_iou;
    }
    if (with_overall && !rows.empty())
        os << "overall," << fmt6(mean_acc / double(rows.size())) << ','
           << fmt6(std_acc / double(rows.size())) << '\n';
    if (!os) io::fail(path, "write failed");
}

}  // namespace voxcvae
