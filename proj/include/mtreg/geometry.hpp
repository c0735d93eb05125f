#pragma once

#include "mtreg/autodiff.hpp"
#include "mtreg/random.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace mtreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Keypoint coordinates in normalized units (roughly [-1, 1]^3).
class PointCloud {
public:
    PointCloud() = default;
    explicit PointCloud(std::vector<Vec3> points);

    std::size_t size() const { return points_.size(); }
    bool empty() const { return points_.empty(); }
    const Vec3& operator[](std::size_t i) const { return points_[i]; }
    const std::vector<Vec3>& points() const { return points_; }

    // [N x 3] detached tensor.
    ad::Tensor to_tensor() const;

    bool operator==(const PointCloud&) const = default;

private:
    std::vector<Vec3> points_;
};

// Exact k nearest neighbors per point, self excluded, rows sorted by ascending
// distance with ties broken by lower index.
struct KnnGraph {
    std::size_t k = 0;
    std::vector<std::size_t> neighbors;  // row-major N x k

    std::size_t size() const { return k == 0 ? 0 : neighbors.size() / k; }
    std::span<const std::size_t> row(std::size_t i) const { return {neighbors.data() + i * k, k}; }
};

KnnGraph knn_graph(const PointCloud& cloud, std::size_t k);

// x -> scale * rotation * x + translation
struct SimilarityTransform {
    Mat3 rotation = Mat3::Identity();
    double scale = 1.0;
    Vec3 translation = Vec3::Zero();

    static SimilarityTransform identity() { return {}; }

    Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
    SimilarityTransform inverse() const;
    // Throws unless rotation is orthonormal with det 1 and scale > 0.
    void validate() const;
};

// Per-keypoint displacement vectors aligned index-for-index with a fixed cloud.
struct DisplacementField {
    std::vector<Vec3> vectors;

    std::size_t size() const { return vectors.size(); }
    ad::Tensor to_tensor() const;
    static DisplacementField from_tensor(const ad::Tensor& t);

    bool operator==(const DisplacementField&) const = default;
};

PointCloud apply_transform(const PointCloud& cloud, const SimilarityTransform& T);

// How a displacement field moves when both clouds are mapped through T: s R d.
DisplacementField forward_displacements(const DisplacementField& d, const SimilarityTransform& T);
// Undoes forward_displacements: (1/s) R^T d. Translation cancels.
DisplacementField invert_displacements(const DisplacementField& d, const SimilarityTransform& T);
// Differentiable variant of invert_displacements acting on an [N x 3] tensor.
ad::Tensor invert_displacements(const ad::Tensor& d, const SimilarityTransform& T);

// Rz(gamma) * Ry(beta) * Rx(alpha), angles in radians.
Mat3 euler_rotation(double alpha, double beta, double gamma);

struct AugmentationRanges {
    double rotation_deg = 10.0;                       // each angle uniform in [-r, r]
    std::pair<double, double> scale{0.9, 1.1};
    double translation = 0.1;                          // each component uniform in [-t, t]
};

SimilarityTransform sample_transform(Rng& rng, const AugmentationRanges& ranges);

// Plain-text N x cols tables: header line "N cols", then one row per line.
void write_table(const std::filesystem::path& path, std::span<const double> values, std::size_t cols);
std::vector<double> read_table(const std::filesystem::path& path, std::size_t cols);

void write_points(const std::filesystem::path& path, std::span<const Vec3> points);
std::vector<Vec3> read_points(const std::filesystem::path& path);

}  // namespace mtreg
