#include "mtreg/gcn.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mtreg {

void GcnConfig::validate() const {
    if (layer_dims.size() < 2) throw std::invalid_argument("gcn: need at least one edge layer");
    if (layer_dims.front() != 3) throw std::invalid_argument("gcn: first layer input must be 3 (coordinates)");
    for (std::size_t d : layer_dims) {
        if (d == 0) throw std::invalid_argument("gcn: layer widths must be positive");
    }
    if (feature_dim == 0) throw std::invalid_argument("gcn: feature_dim must be positive");
    if (knn_k == 0) throw std::invalid_argument("gcn: knn_k must be positive");
}

namespace {

ad::Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng) {
    std::vector<double> v(ad::numel(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return ad::Tensor(std::move(shape), std::move(v));
}

}  // namespace

ModelParams ModelParams::init(const GcnConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    for (std::size_t l = 0; l + 1 < cfg.layer_dims.size(); ++l) {
        const std::size_t in = cfg.layer_dims[l], out = cfg.layer_dims[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(2 * in));
        const std::string prefix = "edge" + std::to_string(l) + ".";
        p.add(prefix + "w_self", uniform_tensor({in, out}, bound, rng));
        p.add(prefix + "w_diff", uniform_tensor({in, out}, bound, rng));
        p.add(prefix + "bias", uniform_tensor({1, out}, bound, rng));
    }
    const std::size_t last = cfg.layer_dims.back();
    const double bound = 1.0 / std::sqrt(static_cast<double>(last));
    p.add("out.weight", uniform_tensor({last, cfg.feature_dim}, bound, rng));
    p.add("out.bias", uniform_tensor({1, cfg.feature_dim}, bound, rng));
    return p;
}

void ModelParams::add(std::string name, ad::Tensor value) {
    for (const auto& e : entries_) {
        if (e.name == name) throw std::invalid_argument("duplicate parameter name " + name);
    }
    entries_.push_back({std::move(name), std::move(value)});
}

const ad::Tensor& ModelParams::get(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.value;
    }
    throw std::out_of_range("no parameter named " + name);
}

void ModelParams::set(std::size_t i, ad::Tensor value) {
    if (value.shape() != entries_.at(i).value.shape()) {
        throw std::invalid_argument("parameter " + entries_[i].name + ": shape " + ad::shape_str(value.shape()) +
                                    " does not match " + ad::shape_str(entries_[i].value.shape()));
    }
    entries_[i].value = std::move(value);
}

ModelParams ModelParams::watch(ad::Tape& tape) const {
    ModelParams out;
    for (const auto& e : entries_) out.entries_.push_back({e.name, tape.watch(e.value)});
    return out;
}

ModelParams ModelParams::detached() const {
    ModelParams out;
    for (const auto& e : entries_) out.entries_.push_back({e.name, e.value.detached()});
    return out;
}

bool ModelParams::same_layout(const ModelParams& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name != other.entries_[i].name || entries_[i].value.shape() != other.entries_[i].value.shape()) {
            return false;
        }
    }
    return true;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

bool ModelParams::operator==(const ModelParams& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto a = entries_[i].value.values();
        const auto b = other.entries_[i].value.values();
        if (!std::equal(a.begin(), a.end(), b.begin())) return false;
    }
    return true;
}

ad::Tensor edge_conv(const ad::Tensor& h, const KnnGraph& graph, const EdgeLayer& layer, double slope) {
    if (h.rank() != 2 || h.rows() != graph.size()) {
        throw std::invalid_argument("edge_conv: features " + ad::shape_str(h.shape()) + " for a graph of " +
                                    std::to_string(graph.size()) + " points");
    }
    if (layer.w_self.rows() != h.cols() || layer.w_diff.rows() != h.cols()) {
        throw std::invalid_argument("edge_conv: input channels " + std::to_string(h.cols()) + " vs weights " +
                                    ad::shape_str(layer.w_self.shape()));
    }
    const std::size_t n = graph.size(), k = graph.k;
    std::vector<std::size_t> src(n * k), zeros(n * k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) src[i * k + j] = i;
    }
    // h_i W_self + (h_j - h_i) W_diff = h_i (W_self - W_diff) + h_j W_diff
    const ad::Tensor self_term = ad::matmul(h, ad::sub(layer.w_self, layer.w_diff));
    const ad::Tensor nbr_term = ad::matmul(h, layer.w_diff);
    ad::Tensor e = ad::add(ad::gather_rows(self_term, src), ad::gather_rows(nbr_term, graph.neighbors));
    e = ad::add(e, ad::gather_rows(layer.bias, zeros));
    e = ad::leaky_relu(e, slope);
    return ad::segment_max(e, src, n);
}

ad::Tensor gcn_forward(const PointCloud& cloud, const ModelParams& params, const GcnConfig& cfg) {
    if (cloud.size() <= cfg.knn_k) {
        throw std::invalid_argument("gcn_forward: cloud of " + std::to_string(cloud.size()) +
                                    " points is too small for k=" + std::to_string(cfg.knn_k));
    }
    const KnnGraph graph = knn_graph(cloud, cfg.knn_k);
    ad::Tensor h = cloud.to_tensor();
    for (std::size_t l = 0; l + 1 < cfg.layer_dims.size(); ++l) {
        const std::string prefix = "edge" + std::to_string(l) + ".";
        h = edge_conv(h, graph,
                      EdgeLayer{params.get(prefix + "w_self"), params.get(prefix + "w_diff"), params.get(prefix + "bias")},
                      cfg.leaky_slope);
    }
    const std::vector<std::size_t> zeros(cloud.size(), 0);
    return ad::add(ad::matmul(h, params.get("out.weight")), ad::gather_rows(params.get("out.bias"), zeros));
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "mtreg-params 1\n" << params.size() << '\n';
    for (const auto& e : params.entries()) {
        out << e.name << ' ' << e.value.rank();
        for (std::size_t d : e.value.shape()) out << ' ' << d;
        out << '\n';
    }
    char buf[32];
    for (const auto& e : params.entries()) {
        const auto v = e.value.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto res = std::to_chars(buf, buf + sizeof buf, v[i]);
            if (i) out << ' ';
            out.write(buf, res.ptr - buf);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
}

ModelParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    auto fail = [&](std::size_t line, const std::string& what) {
        return std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what);
    };
    std::string line;
    if (!std::getline(in, line) || line != "mtreg-params 1") throw fail(1, "not an mtreg-params v1 checkpoint");
    std::size_t count = 0;
    if (!std::getline(in, line) || !(std::istringstream(line) >> count)) throw fail(2, "missing tensor count");

    std::vector<std::pair<std::string, ad::Shape>> header;
    for (std::size_t t = 0; t < count; ++t) {
        if (!std::getline(in, line)) throw fail(3 + t, "missing tensor header");
        std::istringstream ls(line);
        std::string name;
        std::size_t rank = 0;
        if (!(ls >> name >> rank)) throw fail(3 + t, "bad tensor header");
        ad::Shape shape(rank);
        for (auto& d : shape) {
            if (!(ls >> d)) throw fail(3 + t, "bad shape for " + name);
        }
        header.emplace_back(std::move(name), std::move(shape));
    }
    ModelParams params;
    for (std::size_t t = 0; t < count; ++t) {
        const std::size_t lineno = 3 + count + t;
        if (!std::getline(in, line)) throw fail(lineno, "missing values for " + header[t].first);
        std::vector<double> values;
        values.reserve(ad::numel(header[t].second));
        const char* p = line.data();
        const char* end = p + line.size();
        while (p < end) {
            while (p < end && *p == ' ') ++p;
            if (p == end) break;
            double v;
            const auto res = std::from_chars(p, end, v);
            if (res.ec != std::errc()) throw fail(lineno, "bad number in " + header[t].first);
            values.push_back(v);
            p = res.ptr;
        }
        if (values.size() != ad::numel(header[t].second)) {
            throw fail(lineno, header[t].first + ": expected " + std::to_string(ad::numel(header[t].second)) +
                                   " values, found " + std::to_string(values.size()));
        }
        params.add(header[t].first, ad::Tensor(header[t].second, std::move(values)));
    }
    return params;
}

ModelParams load_params(const std::filesystem::path& path, const GcnConfig& cfg) {
    ModelParams params = load_params(path);
    Rng rng(0);
    const ModelParams expected = ModelParams::init(cfg, rng);
    if (!params.same_layout(expected)) {
        std::ostringstream os;
        os << path.string() << ": checkpoint layout does not match the configured network (";
        for (std::size_t i = 0; i < expected.size(); ++i) {
            const bool ok = i < params.size() && params[i].name == expected[i].name &&
                            params[i].value.shape() == expected[i].value.shape();
            if (!ok) {
                os << "expected " << expected[i].name << ' ' << ad::shape_str(expected[i].value.shape());
                if (i < params.size()) os << ", found " << params[i].name << ' ' << ad::shape_str(params[i].value.shape());
                break;
            }
        }
        os << ")";
        throw std::runtime_error(os.str());
    }
    return params;
}

}  // namespace mtreg
