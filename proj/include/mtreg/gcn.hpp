#pragma once

#include "mtreg/autodiff.hpp"
#include "mtreg/geometry.hpp"
#include "mtreg/random.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mtreg {

struct GcnConfig {
    // Channel widths of the edge-convolution stack; the first entry is the
    // coordinate dimension.
    std::vector<std::size_t> layer_dims{3, 32, 64, 64};
    std::size_t feature_dim = 64;
    std::size_t knn_k = 9;
    double leaky_slope = 0.2;

    void validate() const;
};

// Named weight tensors in a fixed order. Edge layer i owns
// "edge<i>.w_self" [C_in x C_out], "edge<i>.w_diff" [C_in x C_out] and
// "edge<i>.bias" [1 x C_out]; the output layer owns "out.weight" and "out.bias".
class ModelParams {
public:
    struct Entry {
        std::string name;
        ad::Tensor value;
    };

    static ModelParams init(const GcnConfig& cfg, Rng& rng);

    void add(std::string name, ad::Tensor value);
    std::size_t size() const { return entries_.size(); }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    const std::vector<Entry>& entries() const { return entries_; }
    const ad::Tensor& get(const std::string& name) const;
    void set(std::size_t i, ad::Tensor value);

    // Copy whose tensors are leaves of `tape`.
    ModelParams watch(ad::Tape& tape) const;
    ModelParams detached() const;

    // Same names and shapes in the same order.
    bool same_layout(const ModelParams& other) const;
    std::size_t parameter_count() const;

    bool operator==(const ModelParams& other) const;

private:
    std::vector<Entry> entries_;
};

struct EdgeLayer {
    ad::Tensor w_self;
    ad::Tensor w_diff;
    ad::Tensor bias;
};

// h'_i = max_j LeakyReLU(h_i W_self + (h_j - h_i) W_diff + b) over the graph
// neighbors j of i.
ad::Tensor edge_conv(const ad::Tensor& h, const KnnGraph& graph, const EdgeLayer& layer, double slope);

// Point-wise features [N x feature_dim] for `cloud`, using a static knn graph
// on the input coordinates.
ad::Tensor gcn_forward(const PointCloud& cloud, const ModelParams& params, const GcnConfig& cfg);

// Text checkpoint. Header: "mtreg-params 1", tensor count, then one
// "<name> <rank> <dims...>" line per tensor; body: one line of values per
// tensor in the same order.
void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path);
// Also rejects checkpoints whose layout differs from what `cfg` produces.
ModelParams load_params(const std::filesystem::path& path, const GcnConfig& cfg);

}  // namespace mtreg
