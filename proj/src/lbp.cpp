#include "mtreg/lbp.hpp"

#include "mtreg/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace mtreg {

void LbpConfig::validate() const {
    if (n_candidates == 0) throw std::invalid_argument("lbp: n_candidates must be positive");
    if (!(alpha_reg >= 0.0)) throw std::invalid_argument("lbp: alpha_reg must be non-negative");
    if (!(temperature > 0.0)) throw std::invalid_argument("lbp: temperature must be positive");
    if (!(damping >= 0.0 && damping < 1.0)) throw std::invalid_argument("lbp: damping must be in [0, 1)");
    if (graph_k == 0) throw std::invalid_argument("lbp: graph_k must be positive");
}

MessageGraph MessageGraph::from_knn(const KnnGraph& g) {
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    edges.reserve(g.neighbors.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t j : g.row(i)) edges.emplace_back(i, j);
    }
    return from_edges(g.size(), edges);
}

MessageGraph MessageGraph::from_edges(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    MessageGraph mg;
    mg.adjacency.resize(n);
    for (auto [a, b] : edges) {
        if (a >= n || b >= n) throw std::invalid_argument("message graph edge out of range");
        if (a == b) continue;
        mg.adjacency[a].push_back(b);
        mg.adjacency[b].push_back(a);
    }
    for (auto& adj : mg.adjacency) {
        std::sort(adj.begin(), adj.end());
        adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
    }
    return mg;
}

CandidateSet build_candidates(const PointCloud& fixed, const PointCloud& moving, std::size_t L) {
    if (L == 0 || L > moving.size()) {
        throw std::invalid_argument("build_candidates: L=" + std::to_string(L) + " with " +
                                    std::to_string(moving.size()) + " moving points");
    }
    const KdTree tree(moving.points());
    CandidateSet c;
    c.L = L;
    c.indices.resize(fixed.size() * L);
    c.displacements.resize(fixed.size() * L);
    for (std::size_t i = 0; i < fixed.size(); ++i) {
        const auto nn = tree.knn(fixed[i], L);
        for (std::size_t l = 0; l < L; ++l) {
            c.indices[i * L + l] = nn[l].index;
            c.displacements[i * L + l] = moving[nn[l].index] - fixed[i];
        }
    }
    return c;
}

ad::Tensor data_cost(const ad::Tensor& feat_fixed, const ad::Tensor& feat_moving, const CandidateSet& cand) {
    if (feat_fixed.cols() != feat_moving.cols()) {
        throw std::invalid_argument("data_cost: feature widths differ: " + ad::shape_str(feat_fixed.shape()) + " vs " +
                                    ad::shape_str(feat_moving.shape()));
    }
    const std::size_t n = cand.size(), L = cand.L;
    if (feat_fixed.rows() != n) throw std::invalid_argument("data_cost: candidate set does not match fixed features");
    std::vector<std::size_t> rows(n * L);
    for (std::size_t i = 0; i < n * L; ++i) rows[i] = i / L;
    const ad::Tensor diff = ad::sub(ad::gather_rows(feat_fixed, rows), ad::gather_rows(feat_moving, cand.indices));
    const ad::Tensor sq = ad::row_sum(ad::mul(diff, diff));
    return ad::scale(ad::reshape(sq, {n, L}), 1.0 / static_cast<double>(feat_fixed.cols()));
}

namespace {

// Directed edge layout shared by the forward and backward passes.
struct EdgeIndex {
    std::vector<std::size_t> from, to, reverse;
    std::vector<std::vector<std::size_t>> incoming;  // edge ids arriving at each node
    std::vector<std::vector<std::size_t>> outgoing;

    explicit EdgeIndex(const MessageGraph& g) : incoming(g.size()), outgoing(g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            for (std::size_t j : g.adjacency[i]) {
                const std::size_t e = from.size();
                from.push_back(i);
                to.push_back(j);
                outgoing[i].push_back(e);
                incoming[j].push_back(e);
            }
        }
        reverse.resize(from.size());
        for (std::size_t e = 0; e < from.size(); ++e) {
            const auto& out = outgoing[to[e]];
            const auto it = std::find_if(out.begin(), out.end(), [&](std::size_t f) { return to[f] == from[e]; });
            if (it == out.end()) throw std::invalid_argument("message graph is not symmetric");
            reverse[e] = *it;
        }
    }

    std::size_t size() const { return from.size(); }
};

}  // namespace

Beliefs lbp_min_sum(const ad::Tensor& data, const CandidateSet& cand, const MessageGraph& graph, const LbpConfig& cfg) {
    cfg.validate();
    const std::size_t n = cand.size(), L = cand.L;
    if (data.rank() != 2 || data.rows() != n || data.cols() != L) {
        throw std::invalid_argument("lbp_min_sum: data cost " + ad::shape_str(data.shape()) + " for " +
                                    std::to_string(n) + " points with " + std::to_string(L) + " candidates");
    }
    if (graph.size() != n) throw std::invalid_argument("lbp_min_sum: message graph size does not match data cost");
    const auto d = data.values();
    for (double v : d) {
        if (!std::isfinite(v)) throw std::invalid_argument("lbp_min_sum: non-finite data cost");
    }

    const EdgeIndex edges(graph);
    const std::size_t E = edges.size(), T = cfg.n_iters;
    const double alpha = cfg.alpha_reg, gamma = cfg.damping;

    std::vector<double> msg(E * L, 0.0), next(E * L), incoming_sum(n * L);
    // argmin over sender labels for every (iteration, edge, receiver label)
    std::vector<std::uint32_t> arg_send(T * E * L);
    std::vector<std::uint32_t> arg_norm(T * E);
    std::vector<double> h(L), u(L);

    auto sum_incoming = [&](const std::vector<double>& m) {
        std::fill(incoming_sum.begin(), incoming_sum.end(), 0.0);
        for (std::size_t e = 0; e < E; ++e) {
            double* dst = incoming_sum.data() + edges.to[e] * L;
            for (std::size_t l = 0; l < L; ++l) dst[l] += m[e * L + l];
        }
    };

    for (std::size_t t = 0; t < T; ++t) {
        sum_incoming(msg);
        for (std::size_t e = 0; e < E; ++e) {
            const std::size_t i = edges.from[e], j = edges.to[e], r = edges.reverse[e];
            for (std::size_t a = 0; a < L; ++a) h[a] = d[i * L + a] + incoming_sum[i * L + a] - msg[r * L + a];
            std::uint32_t* am = arg_send.data() + (t * E + e) * L;
            for (std::size_t b = 0; b < L; ++b) {
                const Vec3& db = cand.displacement(j, b);
                double best = std::numeric_limits<double>::infinity();
                std::uint32_t best_a = 0;
                for (std::size_t a = 0; a < L; ++a) {
                    const double v = h[a] + alpha * (cand.displacement(i, a) - db).squaredNorm();
                    if (v < best) {
                        best = v;
                        best_a = static_cast<std::uint32_t>(a);
                    }
                }
                u[b] = best;
                am[b] = best_a;
            }
            const auto bmin = static_cast<std::size_t>(std::min_element(u.begin(), u.end()) - u.begin());
            arg_norm[t * E + e] = static_cast<std::uint32_t>(bmin);
            const double base = u[bmin];
            for (std::size_t b = 0; b < L; ++b) {
                next[e * L + b] = (1.0 - gamma) * (u[b] - base) + gamma * msg[e * L + b];
            }
        }
        std::swap(msg, next);
    }

    sum_incoming(msg);
    std::vector<double> belief(n * L);
    std::vector<std::uint32_t> arg_belief(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lmin = 0;
        for (std::size_t l = 0; l < L; ++l) {
            belief[i * L + l] = d[i * L + l] + incoming_sum[i * L + l];
            if (belief[i * L + l] < belief[i * L + lmin]) lmin = l;
        }
        arg_belief[i] = static_cast<std::uint32_t>(lmin);
        const double base = belief[i * L + lmin];
        for (std::size_t l = 0; l < L; ++l) belief[i * L + l] -= base;
    }

    auto backward = [edges, arg_send = std::move(arg_send), arg_norm = std::move(arg_norm),
                     arg_belief = std::move(arg_belief), n, L, T, gamma](std::span<const double> g, ad::GradSinks s) {
        std::vector<double>& gd = *s[0];
        const std::size_t E = edges.size();
        std::vector<double> gmsg(E * L, 0.0), gold(E * L), gs(E * L), gnode(n * L);

        // belief = d + sum of final incoming messages, min-normalized
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0;
            for (std::size_t l = 0; l < L; ++l) total += g[i * L + l];
            for (std::size_t l = 0; l < L; ++l) {
                double gr = g[i * L + l];
                if (l == arg_belief[i]) gr -= total;
                gd[i * L + l] += gr;
                for (std::size_t e : edges.incoming[i]) gmsg[e * L + l] += gr;
            }
        }

        for (std::size_t t = T; t-- > 0;) {
            std::fill(gold.begin(), gold.end(), 0.0);
            std::fill(gs.begin(), gs.end(), 0.0);
            std::fill(gnode.begin(), gnode.end(), 0.0);
            for (std::size_t e = 0; e < E; ++e) {
                const double* gm = gmsg.data() + e * L;
                double total = 0.0;
                for (std::size_t b = 0; b < L; ++b) {
                    gold[e * L + b] += gamma * gm[b];
                    total += (1.0 - gamma) * gm[b];
                }
                const std::uint32_t* am = arg_send.data() + (t * E + e) * L;
                const std::uint32_t bmin = arg_norm[t * E + e];
                double* se = gs.data() + e * L;
                for (std::size_t b = 0; b < L; ++b) {
                    double gu = (1.0 - gamma) * gm[b];
                    if (b == bmin) gu -= total;
                    se[am[b]] += gu;
                }
                const std::size_t i = edges.from[e];
                for (std::size_t a = 0; a < L; ++a) gnode[i * L + a] += se[a];
            }
            // h_e(a) = d_i(a) + sum_{k->i} m(a) - m_{j->i}(a)
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t a = 0; a < L; ++a) {
                    const double v = gnode[i * L + a];
                    gd[i * L + a] += v;
                    for (std::size_t e : edges.incoming[i]) gold[e * L + a] += v;
                }
            }
            for (std::size_t e = 0; e < E; ++e) {
                const std::size_t r = edges.reverse[e];
                for (std::size_t a = 0; a < L; ++a) gold[r * L + a] -= gs[e * L + a];
            }
            std::swap(gmsg, gold);
        }
    };

    return Beliefs{ad::record_op("lbp_min_sum", ad::Tensor({n, L}, std::move(belief)), {&data}, std::move(backward))};
}

ad::Tensor soft_displacements(const Beliefs& b, const CandidateSet& cand, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("soft_displacements: temperature must be positive");
    const std::size_t n = cand.size(), L = cand.L;
    if (b.costs.rank() != 2 || b.costs.rows() != n || b.costs.cols() != L) {
        throw std::invalid_argument("soft_displacements: beliefs " + ad::shape_str(b.costs.shape()) +
                                    " do not match candidates");
    }
    const ad::Tensor p = ad::softmax(ad::scale(b.costs, -1.0 / tau), 1);
    const auto pv = p.values();
    std::vector<double> out(n * 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < L; ++l) {
            const Vec3& dl = cand.displacement(i, l);
            for (int c = 0; c < 3; ++c) out[i * 3 + c] += pv[i * L + l] * dl[c];
        }
    }
    return ad::record_op("weighted_displacements", ad::Tensor({n, 3}, std::move(out)), {&p},
                         [disp = cand.displacements, L](std::span<const double> g, ad::GradSinks s) {
                             std::vector<double>& gp = *s[0];
                             for (std::size_t k = 0; k < gp.size(); ++k) {
                                 const std::size_t i = k / L;
                                 const Vec3& dl = disp[k];
                                 gp[k] += g[i * 3] * dl[0] + g[i * 3 + 1] * dl[1] + g[i * 3 + 2] * dl[2];
                             }
                         });
}

ad::Tensor register_pair(const PointCloud& fixed, const PointCloud& moving, const ModelParams& params,
                         const GcnConfig& gcn_cfg, const LbpConfig& lbp_cfg) {
    lbp_cfg.validate();
    if (fixed.size() <= lbp_cfg.graph_k) {
        throw std::invalid_argument("register_pair: fixed cloud of " + std::to_string(fixed.size()) +
                                    " points is too small for graph_k=" + std::to_string(lbp_cfg.graph_k));
    }
    const ad::Tensor feat_f = gcn_forward(fixed, params, gcn_cfg);
    const ad::Tensor feat_m = gcn_forward(moving, params, gcn_cfg);
    const CandidateSet cand = build_candidates(fixed, moving, lbp_cfg.n_candidates);
    const ad::Tensor cost = data_cost(feat_f, feat_m, cand);
    const MessageGraph graph = MessageGraph::from_knn(knn_graph(fixed, lbp_cfg.graph_k));
    const Beliefs beliefs = lbp_min_sum(cost, cand, graph, lbp_cfg);
    return soft_displacements(beliefs, cand, lbp_cfg.temperature);
}

}  // namespace mtreg
