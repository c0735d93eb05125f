#pragma once

#include "mtreg/autodiff.hpp"
#include "mtreg/gcn.hpp"
#include "mtreg/geometry.hpp"

#include <cstddef>
#include <utility>
#include <vector>

namespace mtreg {

// For each fixed point, its L nearest moving points and the displacement to each.
struct CandidateSet {
    std::size_t L = 0;
    std::vector<std::size_t> indices;  // N x L, moving-cloud indices
    std::vector<Vec3> displacements;   // N x L, candidate - fixed point

    std::size_t size() const { return L == 0 ? 0 : indices.size() / L; }
    const Vec3& displacement(std::size_t i, std::size_t l) const { return displacements[i * L + l]; }
};

struct LbpConfig {
    std::size_t n_candidates = 16;
    std::size_t n_iters = 10;
    double alpha_reg = 1.0;
    double temperature = 1.0;
    double damping = 0.0;
    std::size_t graph_k = 9;

    void validate() const;
};

// Undirected message-passing graph stored as sorted symmetric adjacency lists.
struct MessageGraph {
    std::vector<std::vector<std::size_t>> adjacency;

    std::size_t size() const { return adjacency.size(); }
    // Union of both directions of every knn edge.
    static MessageGraph from_knn(const KnnGraph& g);
    static MessageGraph from_edges(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges);
};

// Cost-domain beliefs [N x L]; each row has minimum 0, lower is more likely.
struct Beliefs {
    ad::Tensor costs;
};

CandidateSet build_candidates(const PointCloud& fixed, const PointCloud& moving, std::size_t L);

// ||f_i - m_j||^2 / C for every candidate j of fixed point i. [N_f x L]
ad::Tensor data_cost(const ad::Tensor& feat_fixed, const ad::Tensor& feat_moving, const CandidateSet& cand);

// Synchronous min-sum belief propagation with pairwise cost
// alpha_reg * ||delta_i(a) - delta_j(b)||^2 between neighboring fixed points.
// Messages are min-normalized and optionally damped. Differentiable in `data`;
// the gradient of every min follows its first argmin.
Beliefs lbp_min_sum(const ad::Tensor& data, const CandidateSet& cand, const MessageGraph& graph, const LbpConfig& cfg);

// phi_i = sum_l softmax(-b_i / tau)_l * delta_i(l). [N x 3]
ad::Tensor soft_displacements(const Beliefs& b, const CandidateSet& cand, double tau);

// Full registration: GCN features -> data cost -> LBP -> soft readout.
// Differentiable in `params` when they are attached to a tape.
ad::Tensor register_pair(const PointCloud& fixed, const PointCloud& moving, const ModelParams& params,
                         const GcnConfig& gcn_cfg, const LbpConfig& lbp_cfg);

}  // namespace mtreg
