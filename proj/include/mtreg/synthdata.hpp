#pragma once

#include "mtreg/geometry.hpp"
#include "mtreg/keypoints.hpp"
#include "mtreg/random.hpp"
#include "mtreg/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mtreg {

struct DeformationModel {
    std::size_t n_basis = 6;
    std::pair<double, double> amplitude{0.05, 0.15};
    std::pair<double, double> bandwidth{0.3, 0.6};
    std::size_t max_retries = 20;
    std::size_t check_grid = 17;  // samples per axis for the injectivity check
};

// u(x) = sum_b a_b exp(-|x - c_b|^2 / (2 sigma_b^2))
class RbfDeformation {
public:
    struct Basis {
        Vec3 center;
        Vec3 amplitude;
        double sigma;
    };

    RbfDeformation() = default;
    explicit RbfDeformation(std::vector<Basis> basis) : basis_(std::move(basis)) {}

    Vec3 operator()(const Vec3& x) const;
    // Jacobian of u at x.
    Mat3 jacobian(const Vec3& x) const;
    // Minimum of det(I + scale * J_u) over a grid x grid x grid lattice on [-1, 1]^3.
    double min_jacobian_det(std::size_t grid, double scale = 1.0) const;

    const std::vector<Basis>& basis() const { return basis_; }

private:
    std::vector<Basis> basis_;
};

// Resamples until id + scale * u is injective on the check grid; throws after
// model.max_retries failures.
RbfDeformation sample_deformation(Rng& rng, const DeformationModel& model, double scale = 1.0);

struct DomainSpec {
    double crop = 0.0;          // fraction removed from the top of the third axis
    double deform_scale = 1.0;  // multiplier on the deformation
    bool recenter = false;      // shift both clouds so the cropped fixed cloud's bounding box is centred

    void validate() const;
};

struct PairOptions {
    double dropout = 0.1;  // per-point probability of removal from the moving cloud
    double jitter = 0.0;   // std-dev of Gaussian noise added to moving points
    std::size_t n_landmarks = 16;
    std::size_t min_points = 32;
};

struct LandmarkSet {
    std::vector<Vec3> positions;
    std::vector<Vec3> displacements;

    std::size_t size() const { return positions.size(); }
};

struct GeneratedPair {
    TrainSample sample;  // gt always filled; callers strip it for target data
    LandmarkSet landmarks;
};

// Fixed cloud = `base` cropped per `spec`; moving cloud = base points mapped
// through x + deform_scale * u(x), with dropout and jitter, then cropped with
// the same threshold. Ground truth per fixed point is deform_scale * u(x).
GeneratedPair make_pair(Rng& rng, const PointCloud& base, const RbfDeformation& u, const DomainSpec& spec,
                        const PairOptions& opts);

// Value of the (1 - crop) quantile of the third coordinate (nearest rank).
double crop_threshold(const PointCloud& cloud, double crop);

// Inverse-distance-weighted interpolation from the k nearest landmarks.
// Exact at landmark positions.
DisplacementField interpolate_landmarks(const LandmarkSet& lm, std::span<const Vec3> queries, std::size_t k = 8,
                                        double power = 2.0);

struct VolumeModel {
    std::size_t size = 96;          // voxels per axis
    double spacing_mm = 1.0;
    double texture_sigma = 1.0;     // smoothing of the white noise, voxels
    std::pair<double, double> radius{0.75, 0.95};  // ellipsoid semi-axes, normalized
};

// Smoothed noise texture inside a random ellipsoid.
Volume sample_base_volume(Rng& rng, const VolumeModel& model);

enum class Domain { source, target };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

struct DatasetSample {
    TrainSample sample;
    Domain domain = Domain::source;
    std::optional<LandmarkSet> landmarks;
};

struct Dataset {
    std::vector<DatasetSample> samples;
    double unit_mm = 1.0;  // world millimetres per normalized unit

    std::vector<TrainSample> train_samples() const;
};

// Directory with manifest.json plus one text file per cloud / field / landmark set.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

void write_landmarks(const std::filesystem::path& path, const LandmarkSet& lm);
LandmarkSet read_landmarks(const std::filesystem::path& path);

}  // namespace mtreg
