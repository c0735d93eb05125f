#include "mtreg/kdtree.hpp"

#include <algorithm>
#include <numeric>
#include <queue>
#include <stdexcept>

namespace mtreg {

namespace {

bool closer(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

struct FartherFirst {
    bool operator()(const Neighbor& a, const Neighbor& b) const { return closer(a, b); }
};

}  // namespace

KdTree::KdTree(std::span<const Eigen::Vector3d> points, std::size_t leaf_size)
    : points_(points.begin(), points.end()), order_(points.size()), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, points_.size());
}

std::size_t KdTree::build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= leaf_size_) return id;

    Eigen::Vector3d lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(points_[order_[i]]);
        hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] == lo[axis]) return id;  // all points coincide

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                         return points_[a][axis] < points_[b][axis] || (points_[a][axis] == points_[b][axis] && a < b);
                     });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

std::vector<Neighbor> KdTree::knn(const Eigen::Vector3d& query, std::size_t k, std::optional<std::size_t> exclude) const {
    const std::size_t available = points_.size() - (exclude && *exclude < points_.size() ? 1 : 0);
    if (k > available) {
        throw std::invalid_argument("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(available) +
                                    " candidate points");
    }
    std::priority_queue<Neighbor, std::vector<Neighbor>, FartherFirst> heap;
    if (k == 0) return {};

    // Explicit stack of (node, squared distance from query to node's half-space).
    std::vector<std::pair<std::size_t, double>> stack{{0, 0.0}};
    while (!stack.empty()) {
        auto [id, bound] = stack.back();
        stack.pop_back();
        if (heap.size() == k && bound > heap.top().dist2) continue;
        const Node& node = nodes_[id];
        if (node.axis < 0) {
            for (std::size_t i = node.begin; i < node.end; ++i) {
                const std::size_t idx = order_[i];
                if (exclude && idx == *exclude) continue;
                const Neighbor cand{idx, (points_[idx] - query).squaredNorm()};
                if (heap.size() < k) {
                    heap.push(cand);
                } else if (closer(cand, heap.top())) {
                    heap.pop();
                    heap.push(cand);
                }
            }
            continue;
        }
        const double diff = query[node.axis] - node.split;
        const std::size_t near = diff < 0.0 ? node.left : node.right;
        const std::size_t far = diff < 0.0 ? node.right : node.left;
        // Points equal to the split value may sit on either side, so the far
        // side is reachable at distance diff^2 (zero when on the plane).
        stack.push_back({far, std::max(bound, diff * diff)});
        stack.push_back({near, bound});
    }

    std::vector<Neighbor> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
        out[i] = heap.top();
        heap.pop();
    }
    return out;
}

}  // namespace mtreg
