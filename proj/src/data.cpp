#include "voxcvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "voxcvae/serialize.hpp"

namespace voxcvae {

namespace {
constexpr std::uint32_t kVoxdVersion = 1;
constexpr double kPi = 3.14159265358979323846;
}  // namespace

Tensor VoxelGrid::to_tensor() const {
    int e = extent;
    Tensor t({e, e, e, 1});
    for (int y = 0; y < e; ++y)
        for (int x = 0; x < e; ++x)
            for (int z = 0; z < e; ++z)
                t[((std::size_t(e - 1 - y) * e + x) * std::size_t(e) + z)] =
                    at(x, y, z) ? 1.f : 0.f;
    return t;
}

VoxelGrid VoxelGrid::from_tensor(const Tensor& t) {
    if (t.rank() != 4 || t.extent(3) != 1 || t.extent(0) != t.extent(1) ||
        t.extent(1) != t.extent(2))
        throw std::invalid_argument("voxel grid tensor must be [e,e,e,1], got " +
                                    shape_str(t.shape));
    int e = t.extent(0);
    VoxelGrid g(e);
    for (int r = 0; r < e; ++r)
        for (int x = 0; x < e; ++x)
            for (int z = 0; z < e; ++z) {
                float v = t[(std::size_t(r) * e + x) * std::size_t(e) + z];
                if (v != 0.f && v != 1.f)
                    throw std::invalid_argument("voxel grid tensor holds non-binary value " +
                                                std::to_string(v));
                g.set(x, e - 1 - r, z, v != 0.f);
            }
    return g;
}

Tensor ConditionImage::to_tensor() const {
    Tensor t({extent, extent, kImageChannels});
    std::copy(pixels.begin(), pixels.end(), t.ptr());
    return t;
}

std::string to_string(ShapeClass c) {
    switch (c) {
        case ShapeClass::Bed: return "bed";
        case ShapeClass::Chair: return "chair";
        case ShapeClass::Desk: return "desk";
        case ShapeClass::Monitor: return "monitor";
    }
    throw std::invalid_argument("bad shape class id");
}

ShapeClass shape_class_from_string(const std::string& s) {
    for (ShapeClass c : kAllClasses)
        if (to_string(c) == s) return c;
    throw std::invalid_argument("unknown shape class '" + s +
                                "' (expected bed|chair|desk|monitor)");
}

ShapeSpec ShapeSpec::for_class(ShapeClass c) {
    ShapeSpec s;
    s.cls = c;
    switch (c) {
        case ShapeClass::Bed:
            s.width = {0.55, 0.80};
            s.depth = {0.75, 0.92};
            s.height = {0.12, 0.20};
            s.detail = {0.30, 0.45};
            s.thickness = {0.06, 0.12};
            break;
        case ShapeClass::Chair:
            s.width = {0.42, 0.60};
            s.depth = {0.42, 0.60};
            s.height = {0.28, 0.42};
            s.detail = {0.75, 0.95};
            s.thickness = {0.08, 0.14};
            break;
        case ShapeClass::Desk:
            s.width = {0.60, 0.90};
            s.depth = {0.30, 0.50};
            s.height = {0.42, 0.58};
            s.detail = {0.42, 0.58};
            s.thickness = {0.06, 0.12};
            break;
        case ShapeClass::Monitor:
            s.width = {0.50, 0.80};
            s.depth = {0.25, 0.40};
            s.height = {0.18, 0.30};
            s.detail = {0.35, 0.55};
            s.thickness = {0.05, 0.10};
            break;
    }
    return s;
}

namespace {

int frac_to_len(double f, int e) { return std::max(1, int(std::lround(f * e))); }

void fill_box(VoxelGrid& g, int x0, int x1, int y0, int y1, int z0, int z1) {
    int e = g.extent;
    x0 = std::clamp(x0, 0, e);
    x1 = std::clamp(x1, 0, e);
    y0 = std::clamp(y0, 0, e);
    y1 = std::clamp(y1, 0, e);
    z0 = std::clamp(z0, 0, e);
    z1 = std::clamp(z1, 0, e);
    for (int x = x0; x < x1; ++x)
        for (int y = y0; y < y1; ++y)
            for (int z = z0; z < z1; ++z) g.set(x, y, z, 1);
}

double draw(const ShapeSpec::Range& r, Rng& rng) { return rng.uniform(r.lo, r.hi); }

}  // namespace

VoxelGrid generate_shape(const ShapeSpec& spec, int extent, Rng& rng) {
    if (extent < 8) throw std::invalid_argument("generate_shape: extent must be >= 8");
    VoxelGrid g(extent);
    const int e = extent;
    const int c = e / 2;

    switch (spec.cls) {
        case ShapeClass::Bed: {
            int w = frac_to_len(draw(spec.width, rng), e);
            int len = frac_to_len(draw(spec.depth, rng), e);
            int bh = frac_to_len(draw(spec.height, rng), e);
            int hh = frac_to_len(draw(spec.detail, rng), e);
            int t = frac_to_len(draw(spec.thickness, rng), e);
            int x0 = c - w / 2, z0 = std::max(1, e / 16);
            fill_box(g, x0, x0 + w, 0, bh, z0, z0 + len);
            fill_box(g, x0, x0 + w, 0, hh, z0, z0 + t);  // headboard
            break;
        }
        case ShapeClass::Chair: {
            int s = frac_to_len(draw(spec.width, rng), e);
            int sy = frac_to_len(draw(spec.height, rng), e);
            int st = frac_to_len(draw(spec.thickness, rng), e);
            int bt = frac_to_len(draw(spec.detail, rng), e);
            int lt = std::max(1, st / 2 + 1);
            int x0 = c - s / 2, z0 = c - s / 2;
            int x1 = x0 + s, z1 = z0 + s;
            fill_box(g, x0, x1, sy, sy + st, z0, z1);  // seat
            fill_box(g, x0, x0 + lt, 0, sy, z0, z0 + lt);
            fill_box(g, x1 - lt, x1, 0, sy, z0, z0 + lt);
            fill_box(g, x0, x0 + lt, 0, sy, z1 - lt, z1);
            fill_box(g, x1 - lt, x1, 0, sy, z1 - lt, z1);
            // back stops short of the armrest side so every projection of the
            // chair is left-right asymmetric
            fill_box(g, x0, x1 - lt, sy + st, bt, z1 - lt, z1);
            int ah = sy + st + std::max(1, (bt - sy - st) / 3);
            fill_box(g, x1 - lt, x1, sy + st, ah, z0, z1);  // single armrest
            break;
        }
        case ShapeClass::Desk: {
            int w = frac_to_len(draw(spec.width, rng), e);
            int d = frac_to_len(draw(spec.depth, rng), e);
            int ty = frac_to_len(draw(spec.height, rng), e);
            int tt = frac_to_len(draw(spec.thickness, rng), e);
            int lt = std::max(1, tt / 2 + 1);
            int x0 = c - w / 2, z0 = c - d / 2;
            int x1 = x0 + w, z1 = z0 + d;
            fill_box(g, x0, x1, ty, ty + tt, z0, z1);  // top
            fill_box(g, x0, x0 + lt, 0, ty, z0, z0 + lt);
            fill_box(g, x1 - lt, x1, 0, ty, z0, z0 + lt);
            fill_box(g, x0, x0 + lt, 0, ty, z1 - lt, z1);
            fill_box(g, x1 - lt, x1, 0, ty, z1 - lt, z1);
            // drawer panel on one side only, biased to the front edge
            int pw = std::max(2, w / 4);
            int pz1 = z0 + std::max(2, (d * 3) / 5);
            fill_box(g, x1 - pw, x1, 0, ty, z0, pz1);
            break;
        }
        case ShapeClass::Monitor: {
            int w = frac_to_len(draw(spec.width, rng), e);
            int ph = frac_to_len(draw(spec.detail, rng), e);
            int pt = frac_to_len(draw(spec.thickness, rng), e);
            int sy = frac_to_len(draw(spec.height, rng), e);
            int bd = frac_to_len(draw(spec.depth, rng), e);
            int off = std::max(1, e / 12);  // panel sits off-center
            int bh = std::max(1, e / 16);
            int bw = std::max(2, w / 2);
            fill_box(g, c - bw / 2, c - bw / 2 + bw, 0, bh, c - bd / 2, c - bd / 2 + bd);
            // stand sits behind the panel so the shape is fore-aft asymmetric
            int sw = std::max(1, e / 10);
            fill_box(g, c - sw / 2, c - sw / 2 + sw, bh, sy, c, c + sw);
            int px0 = std::min(c - w / 2 + off, e - w - 1);
            fill_box(g, px0, px0 + w, sy, sy + ph, c - pt, c);
            break;
        }
    }
    if (g.occupied_count() == 0)
        throw std::logic_error("generated shape is empty");
    return g;
}

VoxelGrid rotate_grid(const VoxelGrid& g, int azimuth_deg) {
    if (azimuth_deg % 45 != 0)
        throw std::invalid_argument("rotate_grid: azimuth " + std::to_string(azimuth_deg) +
                                    " is not a multiple of 45 degrees");
    int az = ((azimuth_deg % 360) + 360) % 360;
    const int e = g.extent;
    if (az == 0) return g;

    VoxelGrid out(e);
    if (az % 90 == 0) {
        int q = az / 90;
        for (int dx = 0; dx < e; ++dx)
            for (int dz = 0; dz < e; ++dz) {
                int sx = dx, sz = dz;
                for (int k = 0; k < q; ++k) {
                    int nx = sz, nz = e - 1 - sx;
                    sx = nx;
                    sz = nz;
                }
                for (int y = 0; y < e; ++y) out.set(dx, y, dz, g.at(sx, y, sz));
            }
        return out;
    }

    // nearest-neighbor resample from the inverse-rotated coordinate, taken on
    // a 3x3 sub-voxel grid with a majority vote; single-point lookup drifts
    // the occupancy count of thin parts past the documented bound
    double c = (e - 1) / 2.0;
    double rad = double(az) * kPi / 180.0;
    double ca = std::cos(rad), sa = std::sin(rad);
    for (int dx = 0; dx < e; ++dx)
        for (int dz = 0; dz < e; ++dz)
            for (int y = 0; y < e; ++y) {
                int hits = 0;
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) {
                        double u = dx + (i - 1) / 3.0 - c, v = dz + (j - 1) / 3.0 - c;
                        long sx = std::lround(c + ca * u + sa * v);
                        long sz = std::lround(c - sa * u + ca * v);
                        if (sx >= 0 && sx < e && sz >= 0 && sz < e &&
                            g.at(int(sx), y, int(sz)))
                            ++hits;
                    }
                out.set(dx, y, dz, hits >= 5);
            }
    return out;
}

ConditionImage render_ortho(const VoxelGrid& g, int azimuth_deg, int image_extent) {
    const int e = g.extent;
    if (e < 2) throw std::invalid_argument("render_ortho: grid extent must be >= 2");
    if (image_extent % e != 0)
        throw std::invalid_argument("render_ortho: image extent " +
                                    std::to_string(image_extent) +
                                    " is not a multiple of grid extent " + std::to_string(e));
    VoxelGrid rot = rotate_grid(g, azimuth_deg);
    const int block = image_extent / e;
    ConditionImage img(image_extent);
    for (int row = 0; row < image_extent; ++row) {
        int vy = e - 1 - row / block;
        for (int col = 0; col < image_extent; ++col) {
            int vx = col / block;
            for (int s = 0; s < e; ++s) {
                int z = e - 1 - s;  // march from the near plane
                if (!rot.at(vx, vy, z)) continue;
                float t = float(s) / float(e - 1);
                float depth = 1.f - t;
                float* px = img.pixels.data() +
                            (std::size_t(row) * image_extent + col) * kImageChannels;
                px[0] = 0.3f + 0.7f * (1.f - depth);  // shaded intensity
                px[1] = depth;
                px[2] = 1.f;  // silhouette
                px[3] = 1.f;  // alpha
                break;
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// VOXD I/O
// ---------------------------------------------------------------------------

namespace {

std::size_t packed_bytes(int extent) {
    std::size_t bits = std::size_t(extent) * std::size_t(extent) * std::size_t(extent);
    return (bits + 7) / 8;
}

void write_sample(std::ostream& os, const Sample& s, const DatasetMeta& meta,
                  const std::string& path) {
    if (int(meta.voxel_extent) != s.voxels.extent)
        io::fail(path, "sample voxel extent " + std::to_string(s.voxels.extent) +
                           " does not match dataset extent " +
                           std::to_string(meta.voxel_extent));
    if (s.images.size() != meta.poses)
        io::fail(path, "sample has " + std::to_string(s.images.size()) + " poses, dataset needs " +
                           std::to_string(meta.poses));
    io::write_u32(os, s.class_id);
    io::write_u64(os, s.instance_seed);
    std::vector<std::uint8_t> packed(packed_bytes(s.voxels.extent), 0);
    for (std::size_t i = 0; i < s.voxels.occupancy.size(); ++i)
        if (s.voxels.occupancy[i]) packed[i / 8] |= std::uint8_t(1u << (i % 8));
    os.write(reinterpret_cast<const char*>(packed.data()), std::streamsize(packed.size()));
    for (const auto& img : s.images) {
        if (img.extent != int(meta.image_extent))
            io::fail(path, "image extent mismatch in sample");
        io::write_f32_array(os, img.pixels.data(), img.pixels.size());
    }
}

Sample read_sample(std::istream& is, const DatasetMeta& meta, const std::string& path,
                   bool skip_payload) {
    Sample s;
    s.class_id = io::read_u32(is, path);
    s.instance_seed = io::read_u64(is, path);
    int e = int(meta.voxel_extent);
    std::vector<std::uint8_t> packed(packed_bytes(e));
    io::read_exact(is, reinterpret_cast<char*>(packed.data()), packed.size(), path);
    std::size_t image_floats =
        std::size_t(meta.image_extent) * meta.image_extent * meta.channels;
    if (skip_payload) {
        is.seekg(std::streamoff(meta.poses * image_floats * 4), std::ios::cur);
        if (!is) io::fail(path, "file truncated");
        return s;
    }
    s.voxels = VoxelGrid(e);
    std::size_t bits = s.voxels.occupancy.size();
    for (std::size_t i = 0; i < bits; ++i)
        s.voxels.occupancy[i] = (packed[i / 8] >> (i % 8)) & 1u;
    for (std::size_t i = bits; i < packed.size() * 8; ++i)
        if ((packed[i / 8] >> (i % 8)) & 1u)
            io::fail(path, "non-zero padding bit in occupancy payload");
    s.images.resize(meta.poses);
    for (auto& img : s.images) {
        img = ConditionImage(int(meta.image_extent));
        io::read_f32_array(is, img.pixels.data(), img.pixels.size(), path);
        for (float v : img.pixels)
            if (!(v >= 0.f && v <= 1.f))
                io::fail(path, "image value " + std::to_string(v) + " outside [0,1]");
    }
    return s;
}

void write_header(std::ostream& os, const DatasetMeta& meta, std::uint32_t count) {
    os.write("VOXD", 4);
    io::write_u32(os, kVoxdVersion);
    io::write_u32(os, count);
    io::write_u32(os, meta.voxel_extent);
    io::write_u32(os, meta.image_extent);
    io::write_u32(os, meta.channels);
    io::write_u32(os, meta.poses);
}

std::uint32_t read_header(std::istream& is, DatasetMeta& meta, const std::string& path) {
    io::expect_magic(is, "VOXD", path);
    std::uint32_t version = io::read_u32(is, path);
    if (version != kVoxdVersion)
        io::fail(path, "unsupported dataset version " + std::to_string(version));
    std::uint32_t count = io::read_u32(is, path);
    meta.voxel_extent = io::read_u32(is, path);
    meta.image_extent = io::read_u32(is, path);
    meta.channels = io::read_u32(is, path);
    meta.poses = io::read_u32(is, path);
    if (meta.voxel_extent < 2 || meta.voxel_extent > 512)
        io::fail(path, "implausible voxel extent " + std::to_string(meta.voxel_extent));
    if (meta.poses > 0 && meta.channels != kImageChannels)
        io::fail(path, "expected " + std::to_string(kImageChannels) + " image channels, got " +
                           std::to_string(meta.channels));
    return count;
}

}  // namespace

struct DatasetWriter::Impl {
    std::ofstream os;
    std::string path;
    DatasetMeta meta;
    std::uint32_t expected;
    std::uint32_t written = 0;
    bool finished = false;
};

DatasetWriter::DatasetWriter(const std::string& path, DatasetMeta meta,
                             std::uint32_t sample_count)
    : impl_(new Impl{io::open_output(path), path, meta, sample_count}) {
    write_header(impl_->os, meta, sample_count);
}

DatasetWriter::~DatasetWriter() { delete impl_; }

void DatasetWriter::write(const Sample& s) {
    if (impl_->written >= impl_->expected)
        io::fail(impl_->path, "more samples written than declared");
    write_sample(impl_->os, s, impl_->meta, impl_->path);
    ++impl_->written;
}

void DatasetWriter::finish() {
    if (impl_->finished) return;
    if (impl_->written != impl_->expected)
        io::fail(impl_->path, "wrote " + std::to_string(impl_->written) + " of " +
                                  std::to_string(impl_->expected) + " declared samples");
    impl_->os.flush();
    if (!impl_->os) io::fail(impl_->path, "write failed");
    impl_->os.close();
    impl_->finished = true;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    DatasetWriter w(path, ds.meta, std::uint32_t(ds.samples.size()));
    for (const auto& s : ds.samples) w.write(s);
    w.finish();
}

Dataset load_dataset(const std::string& path, int class_filter) {
    auto is = io::open_input(path);
    Dataset ds;
    std::uint32_t count = read_header(is, ds.meta, path);
    ds.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        // peek the class id to decide whether the payload is needed
        std::streampos at = is.tellg();
        std::uint32_t cid = io::read_u32(is, path);
        is.seekg(at);
        bool skip = class_filter >= 0 && cid != std::uint32_t(class_filter);
        Sample s = read_sample(is, ds.meta, path, skip);
        if (!skip) ds.samples.push_back(std::move(s));
    }
    io::expect_eof(is, path);
    return ds;
}

std::vector<std::uint32_t> dataset_class_ids(const std::string& path) {
    auto is = io::open_input(path);
    DatasetMeta meta;
    std::uint32_t count = read_header(is, meta, path);
    std::set<std::uint32_t> ids;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::streampos at = is.tellg();
        ids.insert(io::read_u32(is, path));
        is.seekg(at);
        read_sample(is, meta, path, /*skip_payload=*/true);
    }
    io::expect_eof(is, path);
    return std::vector<std::uint32_t>(ids.begin(), ids.end());
}

void export_voxels(const VoxelGrid& g, const std::string& path) {
    Dataset ds;
    ds.meta = DatasetMeta{std::uint32_t(g.extent), 0, 0, 0};
    Sample s;
    s.voxels = g;
    ds.samples.push_back(std::move(s));
    save_dataset(ds, path);
}

VoxelGrid import_voxels(const std::string& path, int expected_extent) {
    Dataset ds = load_dataset(path);
    if (ds.samples.size() != 1)
        io::fail(path, "expected a single-grid file, found " +
                           std::to_string(ds.samples.size()) + " samples");
    if (expected_extent > 0 && int(ds.meta.voxel_extent) != expected_extent)
        io::fail(path, "voxel extent " + std::to_string(ds.meta.voxel_extent) +
                           " does not match expected " + std::to_string(expected_extent));
    return std::move(ds.samples[0].voxels);
}

Sample make_sample(ShapeClass cls, std::uint64_t instance_seed, int voxel_extent,
                   int image_extent) {
    Rng rng(instance_seed, 7);
    Sample s;
    s.class_id = std::uint32_t(cls);
    s.instance_seed = instance_seed;
    s.voxels = generate_shape(ShapeSpec::for_class(cls), voxel_extent, rng);
    s.images.reserve(kPoseCount);
    for (int pose = 0; pose < kPoseCount; ++pose)
        s.images.push_back(render_ortho(s.voxels, pose * 45, image_extent));
    return s;
}

SplitCounts build_dataset(const std::vector<ShapeClass>& classes, int per_class_count,
                          double split_fraction, std::uint64_t seed, int voxel_extent,
                          int image_extent, const std::string& train_path,
                          const std::string& test_path) {
    if (classes.empty()) throw std::invalid_argument("build_dataset: no classes");
    if (per_class_count < 2)
        throw std::invalid_argument("build_dataset: per_class_count must be >= 2");
    if (!(split_fraction >= 0.0 && split_fraction <= 1.0))
        throw std::invalid_argument("build_dataset: split fraction must lie in [0,1]");

    std::uint32_t n = std::uint32_t(per_class_count);
    std::uint32_t train_per_class = std::uint32_t(std::llround(split_fraction * n));
    SplitCounts counts;
    counts.train = train_per_class * std::uint32_t(classes.size());
    counts.test = (n - train_per_class) * std::uint32_t(classes.size());

    DatasetMeta meta{std::uint32_t(voxel_extent), std::uint32_t(image_extent), kImageChannels,
                     kPoseCount};
    DatasetWriter train(train_path, meta, counts.train);
    DatasetWriter test(test_path, meta, counts.test);

    for (ShapeClass cls : classes) {
        Rng seed_gen(seed, 1000 + std::uint64_t(cls));
        std::vector<std::uint64_t> inst_seeds(n);
        for (auto& s : inst_seeds) s = seed_gen.next_u64();

        // deterministic split: shuffle indices, first chunk trains
        Rng split_rng(seed, 2000 + std::uint64_t(cls));
        std::vector<std::uint32_t> order(n);
        for (std::uint32_t i = 0; i < n; ++i) order[i] = i;
        for (std::uint32_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[std::uint32_t(split_rng.below(i))]);
        std::vector<bool> is_train(n, false);
        for (std::uint32_t i = 0; i < train_per_class; ++i) is_train[order[i]] = true;

        for (std::uint32_t i = 0; i < n; ++i) {
            Sample s = make_sample(cls, inst_seeds[i], voxel_extent, image_extent);
            (is_train[i] ? train : test).write(s);
        }
    }
    train.finish();
    test.finish();
    return counts;
}

void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& gray) {
    if (gray.size() != std::size_t(width) * std::size_t(height))
        throw std::invalid_argument("write_pgm: payload does not match dimensions");
    auto os = io::open_output(path);
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(gray.data()), std::streamsize(gray.size()));
    if (!os) io::fail(path, "write failed");
}

}  // namespace voxcvae
