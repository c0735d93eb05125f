#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace mtreg {

struct Neighbor {
    std::size_t index;
    double dist2;
};

// Exact k-nearest-neighbor search in 3D. Results are ordered by ascending
// distance; equal distances are ordered by ascending point index, so the
// answer matches a brute-force stable sort.
class KdTree {
public:
    explicit KdTree(std::span<const Eigen::Vector3d> points, std::size_t leaf_size = 8);

    std::vector<Neighbor> knn(const Eigen::Vector3d& query, std::size_t k,
                              std::optional<std::size_t> exclude = std::nullopt) const;

    std::size_t size() const { return points_.size(); }

private:
    struct Node {
        std::size_t begin, end;  // range into order_
        int axis = -1;           // -1 for leaves
        double split = 0.0;
        std::size_t left = 0, right = 0;
    };

    std::size_t build(std::size_t begin, std::size_t end);

    std::vector<Eigen::Vector3d> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    std::size_t leaf_size_;
};

}  // namespace mtreg
