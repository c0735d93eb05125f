#pragma once

#include "mtreg/geometry.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

namespace mtreg {

// Scalar volume with x-fastest storage: index = x + H * (y + W * z).
struct Volume {
    std::array<std::size_t, 3> dims{0, 0, 0};
    Vec3 spacing = Vec3::Ones();
    std::vector<double> voxels;

    Volume() = default;
    Volume(std::array<std::size_t, 3> dims, Vec3 spacing, std::vector<double> voxels);

    std::size_t size() const { return voxels.size(); }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims[0] * (y + dims[1] * z); }
    double operator()(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }

    // World units per normalized unit: half of the largest physical extent.
    double normalized_unit() const;
    // Voxel coordinates -> normalized coordinates centered on the volume.
    Vec3 to_normalized(const Vec3& voxel) const;
};

struct KeypointConfig {
    double sigma_grad = 1.0;     // voxels
    double sigma_window = 2.0;   // voxels
    double nms_radius = 3.0;     // world units
    std::size_t max_points = 256;
    double epsilon = 1e-6;
    // Maxima scoring below this fraction of the strongest response are dropped.
    double min_score_ratio = 0.0;
};

// Symmetric 3x3 tensor per voxel stored as (xx, xy, xz, yy, yz, zz).
using SymTensor = std::array<double, 6>;

std::vector<double> gaussian_kernel(double sigma);
// Separable Gaussian smoothing with clamped borders; sigma in voxels.
std::vector<double> gaussian_smooth(const Volume& v, double sigma);

std::vector<SymTensor> structure_tensor(const Volume& v, const KeypointConfig& cfg);

// 1 / trace((S + eps I)^-1) per voxel.
std::vector<double> foerstner_score(std::span<const SymTensor> field, double epsilon);

// Strict maxima of `score` within cfg.nms_radius, strongest first, capped at
// cfg.max_points, in normalized coordinates of `v`.
PointCloud nms_select(std::span<const double> score, const Volume& v, const KeypointConfig& cfg);

// Voxel coordinates of the selected maxima; same order as nms_select.
std::vector<std::array<std::size_t, 3>> nms_select_voxels(std::span<const double> score, const Volume& v,
                                                          const KeypointConfig& cfg);

PointCloud detect_keypoints(const Volume& v, const KeypointConfig& cfg);

// Text format: header "H W D sx sy sz", then H*W*D values in x-fastest order.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

}  // namespace mtreg
