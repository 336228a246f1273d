#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxcvae/rng.hpp"
#include "voxcvae/tensor.hpp"

namespace voxcvae {

inline constexpr int kPoseCount = 8;       // azimuths k*45 degrees
inline constexpr int kImageChannels = 4;   // intensity, depth, silhouette, alpha

// Binary occupancy volume; y is the vertical (up) axis.
struct VoxelGrid {
    int extent = 0;
    std::vector<std::uint8_t> occupancy;  // extent^3, {0,1}, index (x*e + y)*e + z

    VoxelGrid() = default;
    explicit VoxelGrid(int e)
        : extent(e), occupancy(std::size_t(e) * std::size_t(e) * std::size_t(e), 0) {}

    std::uint8_t at(int x, int y, int z) const {
        return occupancy[(std::size_t(x) * std::size_t(extent) + std::size_t(y)) *
                             std::size_t(extent) +
                         std::size_t(z)];
    }
    void set(int x, int y, int z, std::uint8_t v) {
        occupancy[(std::size_t(x) * std::size_t(extent) + std::size_t(y)) *
                      std::size_t(extent) +
                  std::size_t(z)] = v;
    }

    std::size_t occupied_count() const {
        std::size_t n = 0;
        for (auto v : occupancy) n += v != 0;
        return n;
    }

    bool operator==(const VoxelGrid&) const = default;

    // [e, e, e, 1] float tensor; axis 0 runs top-down (image-row convention),
    // axis 2 is the pose-0 viewing depth
    Tensor to_tensor() const;
    static VoxelGrid from_tensor(const Tensor& t);
};

// Posed rendering of a grid; channels-last row-major pixels.
struct ConditionImage {
    int extent = 0;
    std::vector<float> pixels;  // extent*extent*kImageChannels

    ConditionImage() = default;
    explicit ConditionImage(int e)
        : extent(e), pixels(std::size_t(e) * std::size_t(e) * kImageChannels, 0.f) {}

    float at(int row, int col, int c) const {
        return pixels[(std::size_t(row) * std::size_t(extent) + std::size_t(col)) *
                          kImageChannels +
                      std::size_t(c)];
    }

    bool operator==(const ConditionImage&) const = default;

    Tensor to_tensor() const;  // [extent, extent, 4]
};

enum class ShapeClass : std::uint32_t { Bed = 0, Chair = 1, Desk = 2, Monitor = 3 };

inline constexpr std::array<ShapeClass, 4> kAllClasses = {
    ShapeClass::Bed, ShapeClass::Chair, ShapeClass::Desk, ShapeClass::Monitor};

std::string to_string(ShapeClass c);
ShapeClass shape_class_from_string(const std::string& s);

// Part dimensions are drawn from these ranges, as fractions of the grid
// extent. Every template keeps all parts inside the grid and adds one
// off-center feature so the eight pose silhouettes stay distinct.
struct ShapeSpec {
    struct Range {
        double lo = 0, hi = 0;
    };
    ShapeClass cls = ShapeClass::Bed;
    Range width;      // main part x extent
    Range depth;      // main part z extent
    Range height;     // main part height or elevation
    Range detail;     // headboard / back / panel / screen height
    Range thickness;  // legs, panels, slabs

    static ShapeSpec for_class(ShapeClass c);
};

VoxelGrid generate_shape(const ShapeSpec& spec, int extent, Rng& rng);

// Rotation about the vertical axis around the grid center. Multiples of 90
// degrees are exact index permutations; odd multiples of 45 use nearest-
// neighbor resampling. Other angles are rejected.
VoxelGrid rotate_grid(const VoxelGrid& g, int azimuth_deg);

// Orthographic ray march after rotating by the azimuth. First hit at march
// step s (of extent-1) writes depth 1 - s/(extent-1) (near = 1), intensity
// 0.3 + 0.7*(1 - depth), silhouette and alpha 1; misses stay exactly zero.
ConditionImage render_ortho(const VoxelGrid& g, int azimuth_deg, int image_extent = 128);

struct Sample {
    VoxelGrid voxels;
    std::vector<ConditionImage> images;  // indexed by pose, azimuth k*45
    std::uint32_t class_id = 0;
    std::uint64_t instance_seed = 0;

    bool operator==(const Sample&) const = default;
};

struct DatasetMeta {
    std::uint32_t voxel_extent = 32;
    std::uint32_t image_extent = 128;
    std::uint32_t channels = kImageChannels;
    std::uint32_t poses = kPoseCount;

    bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Sample> samples;
};

// VOXD container. Streaming writer so multi-hundred-megabyte sets never sit
// fully in memory.
class DatasetWriter {
public:
    DatasetWriter(const std::string& path, DatasetMeta meta, std::uint32_t sample_count);
    ~DatasetWriter();
    DatasetWriter(const DatasetWriter&) = delete;
    DatasetWriter& operator=(const DatasetWriter&) = delete;

    void write(const Sample& s);
    void finish();  // verifies the declared count was written

private:
    struct Impl;
    Impl* impl_;
};

void save_dataset(const Dataset& ds, const std::string& path);

// class_filter >= 0 keeps only samples of that class
Dataset load_dataset(const std::string& path, int class_filter = -1);

// Distinct class ids present in a dataset file, ascending; skips payloads.
std::vector<std::uint32_t> dataset_class_ids(const std::string& path);

// Single-grid VOXD export/import: count 1, zero poses.
void export_voxels(const VoxelGrid& g, const std::string& path);
VoxelGrid import_voxels(const std::string& path, int expected_extent = 0);

// One shape plus its eight pose renderings, reproducible from the seed.
Sample make_sample(ShapeClass cls, std::uint64_t instance_seed, int voxel_extent,
                   int image_extent);

struct SplitCounts {
    std::uint32_t train = 0;
    std::uint32_t test = 0;
};

// Generates per_class_count shapes per class, renders all poses, splits
// deterministically by the seed, and writes train/test VOXD files.
SplitCounts build_dataset(const std::vector<ShapeClass>& classes, int per_class_count,
                          double split_fraction, std::uint64_t seed, int voxel_extent,
                          int image_extent, const std::string& train_path,
                          const std::string& test_path);

// Binary PGM (P5, maxval 255).
void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray);

}  // namespace voxcvae
