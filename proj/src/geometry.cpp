#include "mtreg/geometry.hpp"

#include "mtreg/kdtree.hpp"

#include <Eigen/LU>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mtreg {

PointCloud::PointCloud(std::vector<Vec3> points) : points_(std::move(points)) {
    for (std::size_t i = 0; i < points_.size(); ++i) {
        if (!points_[i].allFinite()) throw std::invalid_argument("point " + std::to_string(i) + " is not finite");
    }
}

ad::Tensor PointCloud::to_tensor() const {
    std::vector<double> v(points_.size() * 3);
    for (std::size_t i = 0; i < points_.size(); ++i) {
        for (int c = 0; c < 3; ++c) v[i * 3 + c] = points_[i][c];
    }
    return ad::Tensor({points_.size(), 3}, std::move(v));
}

KnnGraph knn_graph(const PointCloud& cloud, std::size_t k) {
    if (k == 0 || k >= cloud.size()) {
        throw std::invalid_argument("knn_graph: need 0 < k < N, got k=" + std::to_string(k) +
                                    " N=" + std::to_string(cloud.size()));
    }
    const KdTree tree(cloud.points());
    KnnGraph g{k, std::vector<std::size_t>(cloud.size() * k)};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto nn = tree.knn(cloud[i], k, i);
        for (std::size_t j = 0; j < k; ++j) g.neighbors[i * k + j] = nn[j].index;
    }
    return g;
}

SimilarityTransform SimilarityTransform::inverse() const {
    SimilarityTransform inv;
    inv.rotation = rotation.transpose();
    inv.scale = 1.0 / scale;
    inv.translation = -(inv.scale * (inv.rotation * translation));
    return inv;
}

void SimilarityTransform::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("similarity scale must be positive");
    if (!((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9) ||
        !(std::abs(rotation.determinant() - 1.0) < 1e-9)) {
        throw std::invalid_argument("similarity rotation is not a proper rotation");
    }
    if (!translation.allFinite()) throw std::invalid_argument("similarity translation is not finite");
}

ad::Tensor DisplacementField::to_tensor() const { return PointCloud(vectors).to_tensor(); }

DisplacementField DisplacementField::from_tensor(const ad::Tensor& t) {
    if (t.rank() != 2 || t.cols() != 3) {
        throw std::invalid_argument("displacements must be [N x 3], got " + ad::shape_str(t.shape()));
    }
    DisplacementField d;
    d.vectors.resize(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) d.vectors[i] = Vec3(t.at(i, 0), t.at(i, 1), t.at(i, 2));
    return d;
}

PointCloud apply_transform(const PointCloud& cloud, const SimilarityTransform& T) {
    std::vector<Vec3> out;
    out.reserve(cloud.size());
    for (const Vec3& p : cloud.points()) out.push_back(T.apply(p));
    return PointCloud(std::move(out));
}

DisplacementField forward_displacements(const DisplacementField& d, const SimilarityTransform& T) {
    DisplacementField out;
    out.vectors.reserve(d.size());
    for (const Vec3& v : d.vectors) out.vectors.push_back(T.scale * (T.rotation * v));
    return out;
}

DisplacementField invert_displacements(const DisplacementField& d, const SimilarityTransform& T) {
    DisplacementField out;
    out.vectors.reserve(d.size());
    const Mat3 back = T.rotation.transpose() / T.scale;
    for (const Vec3& v : d.vectors) out.vectors.push_back(back * v);
    return out;
}

ad::Tensor invert_displacements(const ad::Tensor& d, const SimilarityTransform& T) {
    // Row vectors: (R^T d / s)^T = d^T R / s.
    const Mat3 m = T.rotation / T.scale;
    std::vector<double> v(9);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) v[r * 3 + c] = m(r, c);
    }
    return ad::matmul(d, ad::Tensor::matrix(3, 3, std::move(v)));
}

Mat3 euler_rotation(double alpha, double beta, double gamma) {
    const double ca = std::cos(alpha), sa = std::sin(alpha);
    const double cb = std::cos(beta), sb = std::sin(beta);
    const double cg = std::cos(gamma), sg = std::sin(gamma);
    Mat3 rx, ry, rz;
    rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
    ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
    rz << cg, -sg, 0, sg, cg, 0, 0, 0, 1;
    return rz * ry * rx;
}

SimilarityTransform sample_transform(Rng& rng, const AugmentationRanges& ranges) {
    const double r = ranges.rotation_deg * std::numbers::pi / 180.0;
    const double alpha = rng.uniform(-r, r);
    const double beta = rng.uniform(-r, r);
    const double gamma = rng.uniform(-r, r);
    SimilarityTransform T;
    T.rotation = euler_rotation(alpha, beta, gamma);
    T.scale = rng.uniform(ranges.scale.first, ranges.scale.second);
    for (int c = 0; c < 3; ++c) T.translation[c] = rng.uniform(-ranges.translation, ranges.translation);
    return T;
}

void write_table(const std::filesystem::path& path, std::span<const double> values, std::size_t cols) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::size_t rows = cols == 0 ? 0 : values.size() / cols;
    out << rows << ' ' << cols << '\n';
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const auto res = std::to_chars(buf, buf + sizeof buf, values[r * cols + c]);
            if (c) out << ' ';
            out.write(buf, res.ptr - buf);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
}

namespace {

std::runtime_error parse_error(const std::filesystem::path& path, std::size_t line, const std::string& what) {
    return std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what);
}

// Parses whitespace-separated numbers from `line` into `out`; returns the count.
template <class T>
std::size_t parse_numbers(const std::string& line, std::vector<T>& out) {
    const char* p = line.data();
    const char* end = p + line.size();
    std::size_t n = 0;
    while (true) {
        while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
        if (p == end) break;
        T v{};
        auto res = std::from_chars(p, end, v);
        if (res.ec != std::errc() || (res.ptr < end && *res.ptr != ' ' && *res.ptr != '\t' && *res.ptr != '\r')) {
            return static_cast<std::size_t>(-1);
        }
        out.push_back(v);
        ++n;
        p = res.ptr;
    }
    return n;
}

}  // namespace

std::vector<double> read_table(const std::filesystem::path& path, std::size_t cols) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw parse_error(path, 1, "missing header");
    std::vector<std::size_t> header;
    if (parse_numbers(line, header) != 2) throw parse_error(path, 1, "header must be 'N " + std::to_string(cols) + "'");
    if (header[1] != cols) {
        throw parse_error(path, 1, "expected " + std::to_string(cols) + " columns, header says " + std::to_string(header[1]));
    }
    const std::size_t rows = header[0];
    std::vector<double> values;
    values.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw parse_error(path, r + 2, "unexpected end of file");
        const std::size_t before = values.size();
        if (parse_numbers(line, values) != cols) {
            throw parse_error(path, r + 2, "expected " + std::to_string(cols) + " numbers");
        }
        for (std::size_t i = before; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) throw parse_error(path, r + 2, "non-finite value");
        }
    }
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            throw parse_error(path, rows + 2, "trailing data after " + std::to_string(rows) + " rows");
        }
    }
    return values;
}

void write_points(const std::filesystem::path& path, std::span<const Vec3> points) {
    std::vector<double> v;
    v.reserve(points.size() * 3);
    for (const Vec3& p : points) v.insert(v.end(), {p[0], p[1], p[2]});
    write_table(path, v, 3);
}

std::vector<Vec3> read_points(const std::filesystem::path& path) {
    const std::vector<double> v = read_table(path, 3);
    std::vector<Vec3> out(v.size() / 3);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
    return out;
}

}  // namespace mtreg
