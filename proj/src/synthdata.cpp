#include "mtreg/synthdata.hpp"

#include "mtreg/kdtree.hpp"

#include <Eigen/LU>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mtreg {

Vec3 RbfDeformation::operator()(const Vec3& x) const {
    Vec3 u = Vec3::Zero();
    for (const auto& b : basis_) u += b.amplitude * std::exp(-(x - b.center).squaredNorm() / (2.0 * b.sigma * b.sigma));
    return u;
}

Mat3 RbfDeformation::jacobian(const Vec3& x) const {
    Mat3 j = Mat3::Zero();
    for (const auto& b : basis_) {
        const Vec3 r = x - b.center;
        const double s2 = b.sigma * b.sigma;
        const double w = std::exp(-r.squaredNorm() / (2.0 * s2));
        j -= (w / s2) * b.amplitude * r.transpose();
    }
    return j;
}

double RbfDeformation::min_jacobian_det(std::size_t grid, double scale) const {
    double best = std::numeric_limits<double>::infinity();
    const double step = grid > 1 ? 2.0 / static_cast<double>(grid - 1) : 0.0;
    for (std::size_t i = 0; i < grid; ++i) {
        for (std::size_t j = 0; j < grid; ++j) {
            for (std::size_t k = 0; k < grid; ++k) {
                const Vec3 x(-1.0 + step * static_cast<double>(i), -1.0 + step * static_cast<double>(j),
                             -1.0 + step * static_cast<double>(k));
                best = std::min(best, (Mat3::Identity() + scale * jacobian(x)).determinant());
            }
        }
    }
    return best;
}

RbfDeformation sample_deformation(Rng& rng, const DeformationModel& model, double scale) {
    for (std::size_t attempt = 0; attempt <= model.max_retries; ++attempt) {
        std::vector<RbfDeformation::Basis> basis;
        for (std::size_t b = 0; b < model.n_basis; ++b) {
            RbfDeformation::Basis rb;
            for (int c = 0; c < 3; ++c) rb.center[c] = rng.uniform(-1.0, 1.0);
            Vec3 dir(rng.normal(), rng.normal(), rng.normal());
            dir.normalize();
            rb.amplitude = rng.uniform(model.amplitude.first, model.amplitude.second) * dir;
            rb.sigma = rng.uniform(model.bandwidth.first, model.bandwidth.second);
            basis.push_back(rb);
        }
        RbfDeformation u(std::move(basis));
        if (u.min_jacobian_det(model.check_grid, scale) > 0.0) return u;
    }
    throw std::runtime_error("sample_deformation: no injective deformation after " +
                             std::to_string(model.max_retries + 1) + " attempts");
}

void DomainSpec::validate() const {
    if (!(crop >= 0.0 && crop < 1.0)) throw std::invalid_argument("domain: crop must be in [0, 1)");
    if (!(deform_scale >= 0.0)) throw std::invalid_argument("domain: deform_scale must be non-negative");
}

double crop_threshold(const PointCloud& cloud, double crop) {
    if (crop <= 0.0 || cloud.empty()) return std::numeric_limits<double>::infinity();
    std::vector<double> z;
    z.reserve(cloud.size());
    for (const Vec3& p : cloud.points()) z.push_back(p[2]);
    std::sort(z.begin(), z.end());
    const auto rank = static_cast<std::size_t>(std::floor((1.0 - crop) * static_cast<double>(z.size() - 1)));
    return z[rank];
}

GeneratedPair make_pair(Rng& rng, const PointCloud& base, const RbfDeformation& u, const DomainSpec& spec,
                        const PairOptions& opts) {
    spec.validate();
    if (spec.deform_scale != 1.0 && spec.deform_scale > 0.0 && !(u.min_jacobian_det(17, spec.deform_scale) > 0.0)) {
        throw std::runtime_error("make_pair: deformation folds at deform_scale " + std::to_string(spec.deform_scale));
    }
    const double thr = crop_threshold(base, spec.crop);

    std::vector<Vec3> fixed, gt, moving;
    std::vector<bool> visible;  // deformed image of a kept fixed point lies inside the field of view
    for (const Vec3& x : base.points()) {
        if (x[2] > thr) continue;
        const Vec3 d = spec.deform_scale * u(x);
        fixed.push_back(x);
        gt.push_back(d);
        visible.push_back((x + d)[2] <= thr);
    }
    for (const Vec3& x : base.points()) {
        const bool drop = rng.uniform() < opts.dropout;
        Vec3 y = x + spec.deform_scale * u(x);
        if (opts.jitter > 0.0) y += opts.jitter * Vec3(rng.normal(), rng.normal(), rng.normal());
        if (!drop && y[2] <= thr) moving.push_back(y);
    }
    for (std::size_t i = moving.size(); i > 1; --i) std::swap(moving[i - 1], moving[rng.index(i)]);

    if (fixed.size() < opts.min_points || moving.size() < opts.min_points) {
        throw std::runtime_error("make_pair: cloud too small after crop (" + std::to_string(fixed.size()) + " fixed, " +
                                 std::to_string(moving.size()) + " moving points)");
    }

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < fixed.size(); ++i) {
        if (visible[i]) pool.push_back(i);
    }
    const std::size_t m = std::min(opts.n_landmarks, pool.size());
    for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    pool.resize(m);
    std::sort(pool.begin(), pool.end());

    if (spec.recenter) {
        Vec3 lo = fixed.front(), hi = fixed.front();
        for (const Vec3& x : fixed) {
            lo = lo.cwiseMin(x);
            hi = hi.cwiseMax(x);
        }
        const Vec3 shift = -0.5 * (lo + hi);
        for (Vec3& x : fixed) x += shift;
        for (Vec3& y : moving) y += shift;
    }

    GeneratedPair out;
    for (std::size_t i : pool) {
        out.landmarks.positions.push_back(fixed[i]);
        out.landmarks.displacements.push_back(gt[i]);
    }
    out.sample.fixed = PointCloud(std::move(fixed));
    out.sample.moving = PointCloud(std::move(moving));
    out.sample.gt = DisplacementField{std::move(gt)};
    return out;
}

DisplacementField interpolate_landmarks(const LandmarkSet& lm, std::span<const Vec3> queries, std::size_t k,
                                        double power) {
    if (k == 0 || k > lm.size()) {
        throw std::invalid_argument("interpolate_landmarks: k=" + std::to_string(k) + " with " +
                                    std::to_string(lm.size()) + " landmarks");
    }
    const KdTree tree(lm.positions);
    DisplacementField out;
    out.vectors.reserve(queries.size());
    for (const Vec3& q : queries) {
        const auto nn = tree.knn(q, k);
        if (nn.front().dist2 == 0.0) {
            out.vectors.push_back(lm.displacements[nn.front().index]);
            continue;
        }
        Vec3 acc = Vec3::Zero();
        double wsum = 0.0;
        for (const auto& n : nn) {
            const double w = 1.0 / std::pow(std::sqrt(n.dist2), power);
            acc += w * lm.displacements[n.index];
            wsum += w;
        }
        out.vectors.push_back(acc / wsum);
    }
    return out;
}

Volume sample_base_volume(Rng& rng, const VolumeModel& model) {
    const std::size_t n = model.size;
    Volume noise({n, n, n}, Vec3::Constant(model.spacing_mm), std::vector<double>(n * n * n));
    for (double& v : noise.voxels) v = rng.normal();
    std::vector<double> tex = gaussian_smooth(noise, model.texture_sigma);
    const double sd = std::sqrt(std::inner_product(tex.begin(), tex.end(), tex.begin(), 0.0) / static_cast<double>(tex.size()));

    Vec3 radii, center;
    for (int a = 0; a < 3; ++a) radii[a] = rng.uniform(model.radius.first, model.radius.second);
    for (int a = 0; a < 3; ++a) center[a] = rng.uniform(-0.05, 0.05);
    for (std::size_t z = 0; z < n; ++z) {
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) {
                const Vec3 p = noise.to_normalized(Vec3(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)));
                const double r = ((p - center).array() / radii.array()).matrix().norm();
                const double mask = 1.0 / (1.0 + std::exp((r - 1.0) / 0.05));
                const std::size_t i = noise.index(x, y, z);
                tex[i] = mask * tex[i] / sd;
            }
        }
    }
    return Volume(noise.dims, noise.spacing, std::move(tex));
}

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw std::invalid_argument("unknown domain '" + s + "' (expected source or target)");
}

std::vector<TrainSample> Dataset::train_samples() const {
    std::vector<TrainSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.sample);
    return out;
}

void write_landmarks(const std::filesystem::path& path, const LandmarkSet& lm) {
    std::vector<double> v;
    v.reserve(lm.size() * 6);
    for (std::size_t i = 0; i < lm.size(); ++i) {
        const Vec3& p = lm.positions[i];
        const Vec3& d = lm.displacements[i];
        v.insert(v.end(), {p[0], p[1], p[2], d[0], d[1], d[2]});
    }
    write_table(path, v, 6);
}

LandmarkSet read_landmarks(const std::filesystem::path& path) {
    const auto v = read_table(path, 6);
    LandmarkSet lm;
    for (std::size_t i = 0; i + 5 < v.size(); i += 6) {
        lm.positions.emplace_back(v[i], v[i + 1], v[i + 2]);
        lm.displacements.emplace_back(v[i + 3], v[i + 4], v[i + 5]);
    }
    return lm;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["unit_mm"] = ds.unit_mm;
    manifest["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : ds.samples) {
        const std::string& id = s.sample.id;
        if (s.domain == Domain::target && s.sample.gt) {
            throw std::invalid_argument("write_dataset: target sample " + id + " carries ground truth");
        }
        nlohmann::ordered_json e;
        e["id"] = id;
        e["domain"] = to_string(s.domain);
        e["fixed"] = id + "_fixed.txt";
        e["moving"] = id + "_moving.txt";
        write_points(dir / (id + "_fixed.txt"), s.sample.fixed.points());
        write_points(dir / (id + "_moving.txt"), s.sample.moving.points());
        if (s.sample.gt) {
            e["gt"] = id + "_gt.txt";
            write_points(dir / (id + "_gt.txt"), s.sample.gt->vectors);
        }
        if (s.landmarks) {
            e["landmarks"] = id + "_landmarks.txt";
            write_landmarks(dir / (id + "_landmarks.txt"), *s.landmarks);
        }
        manifest["samples"].push_back(std::move(e));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        throw std::runtime_error("empty dataset: " + dir.string() + " has no manifest.json");
    }
    nlohmann::json manifest;
    {
        std::ifstream in(manifest_path);
        try {
            in >> manifest;
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(manifest_path.string() + ": " + e.what());
        }
    }
    Dataset ds;
    ds.unit_mm = manifest.value("unit_mm", 1.0);
    if (!manifest.contains("samples") || !manifest["samples"].is_array() || manifest["samples"].empty()) {
        throw std::runtime_error("empty dataset: " + manifest_path.string() + " lists no samples");
    }
    for (const auto& e : manifest["samples"]) {
        const std::string id = e.at("id").get<std::string>();
        auto file = [&](const char* key) {
            const auto p = dir / e.at(key).get<std::string>();
            if (!std::filesystem::exists(p)) {
                throw std::runtime_error("manifest entry '" + id + "' references missing " + key + " file " + p.string());
            }
            return p;
        };
        DatasetSample s;
        s.sample.id = id;
        s.domain = domain_from_string(e.at("domain").get<std::string>());
        s.sample.fixed = PointCloud(read_points(file("fixed")));
        s.sample.moving = PointCloud(read_points(file("moving")));
        if (e.contains("gt")) {
            if (s.domain == Domain::target) {
                throw std::runtime_error("manifest entry '" + id + "': target samples must not carry ground truth");
            }
            s.sample.gt = DisplacementField{read_points(file("gt"))};
            if (s.sample.gt->size() != s.sample.fixed.size()) {
                throw std::runtime_error("manifest entry '" + id + "': ground truth has " +
                                         std::to_string(s.sample.gt->size()) + " vectors for " +
                                         std::to_string(s.sample.fixed.size()) + " fixed points");
            }
        }
        if (e.contains("landmarks")) s.landmarks = read_landmarks(file("landmarks"));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace mtreg
