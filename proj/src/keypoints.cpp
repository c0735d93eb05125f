#include "mtreg/keypoints.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mtreg {

Volume::Volume(std::array<std::size_t, 3> d, Vec3 sp, std::vector<double> vox)
    : dims(d), spacing(sp), voxels(std::move(vox)) {
    if (dims[0] < 8 || dims[1] < 8 || dims[2] < 8) throw std::invalid_argument("volume dims must be at least 8^3");
    if (voxels.size() != dims[0] * dims[1] * dims[2]) throw std::invalid_argument("volume voxel count mismatch");
    if (!(spacing.array() > 0.0).all()) throw std::invalid_argument("volume spacing must be positive");
    for (double x : voxels) {
        if (!std::isfinite(x)) throw std::invalid_argument("volume contains non-finite voxels");
    }
}

double Volume::normalized_unit() const {
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent = std::max(extent, static_cast<double>(dims[a] - 1) * spacing[a]);
    return extent / 2.0;
}

Vec3 Volume::to_normalized(const Vec3& voxel) const {
    Vec3 out;
    for (int a = 0; a < 3; ++a) out[a] = (voxel[a] - static_cast<double>(dims[a] - 1) / 2.0) * spacing[a];
    return out / normalized_unit();
}

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) return {1.0};
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    const double total = std::accumulate(k.begin(), k.end(), 0.0);
    for (double& w : k) w /= total;
    return k;
}

namespace {

using Dims = std::array<std::size_t, 3>;

std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
}

std::vector<double> convolve_axis(const std::vector<double>& in, const Dims& dims, int axis,
                                  const std::vector<double>& kernel) {
    const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? dims[0] : dims[0] * dims[1]);
    const std::size_t n = dims[static_cast<std::size_t>(axis)];
    std::vector<double> out(in.size());
    for (std::size_t z = 0; z < dims[2]; ++z) {
        for (std::size_t y = 0; y < dims[1]; ++y) {
            for (std::size_t x = 0; x < dims[0]; ++x) {
                const std::size_t idx = x + dims[0] * (y + dims[1] * z);
                const std::size_t pos = axis == 0 ? x : (axis == 1 ? y : z);
                const std::size_t line = idx - pos * stride;
                double acc = 0.0;
                for (std::ptrdiff_t o = -radius; o <= radius; ++o) {
                    const std::size_t p = clamp_index(static_cast<std::ptrdiff_t>(pos) + o, n);
                    acc += kernel[static_cast<std::size_t>(o + radius)] * in[line + p * stride];
                }
                out[idx] = acc;
            }
        }
    }
    return out;
}

std::vector<double> smooth(std::vector<double> data, const Dims& dims, double sigma) {
    const auto kernel = gaussian_kernel(sigma);
    for (int axis = 0; axis < 3; ++axis) data = convolve_axis(data, dims, axis, kernel);
    return data;
}

}  // namespace

std::vector<double> gaussian_smooth(const Volume& v, double sigma) { return smooth(v.voxels, v.dims, sigma); }

std::vector<SymTensor> structure_tensor(const Volume& v, const KeypointConfig& cfg) {
    const Dims& d = v.dims;
    const std::vector<double> s = smooth(v.voxels, d, cfg.sigma_grad);
    const std::size_t n = s.size();

    std::array<std::vector<double>, 3> grad;
    for (auto& g : grad) g.resize(n);
    for (std::size_t z = 0; z < d[2]; ++z) {
        for (std::size_t y = 0; y < d[1]; ++y) {
            for (std::size_t x = 0; x < d[0]; ++x) {
                const std::size_t i = v.index(x, y, z);
                const std::array<std::size_t, 3> p{x, y, z};
                for (int a = 0; a < 3; ++a) {
                    auto lo = p, hi = p;
                    lo[a] = clamp_index(static_cast<std::ptrdiff_t>(p[a]) - 1, d[a]);
                    hi[a] = clamp_index(static_cast<std::ptrdiff_t>(p[a]) + 1, d[a]);
                    grad[a][i] = (s[v.index(hi[0], hi[1], hi[2])] - s[v.index(lo[0], lo[1], lo[2])]) /
                                 (2.0 * v.spacing[a]);
                }
            }
        }
    }

    constexpr std::array<std::pair<int, int>, 6> pairs{{{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}}};
    std::vector<SymTensor> out(n);
    for (std::size_t c = 0; c < pairs.size(); ++c) {
        std::vector<double> prod(n);
        for (std::size_t i = 0; i < n; ++i) prod[i] = grad[pairs[c].first][i] * grad[pairs[c].second][i];
        prod = smooth(std::move(prod), d, cfg.sigma_window);
        for (std::size_t i = 0; i < n; ++i) out[i][c] = prod[i];
    }
    return out;
}

std::vector<double> foerstner_score(std::span<const SymTensor> field, double epsilon) {
    std::vector<double> out(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        const auto& t = field[i];
        const double a = t[0] + epsilon, b = t[1], c = t[2];
        const double d = t[3] + epsilon, e = t[4], f = t[5] + epsilon;
        // trace of the inverse = (sum of diagonal cofactors) / det
        const double cof = (d * f - e * e) + (a * f - c * c) + (a * d - b * b);
        const double det = a * (d * f - e * e) - b * (b * f - c * e) + c * (b * e - c * d);
        out[i] = det / cof;
    }
    return out;
}

std::vector<std::array<std::size_t, 3>> nms_select_voxels(std::span<const double> score, const Volume& v,
                                                          const KeypointConfig& cfg) {
    if (score.size() != v.size()) throw std::invalid_argument("nms_select: score field size mismatch");
    const Dims& d = v.dims;

    std::vector<std::array<std::ptrdiff_t, 3>> offsets;
    std::array<std::ptrdiff_t, 3> reach{};
    for (int a = 0; a < 3; ++a) reach[a] = static_cast<std::ptrdiff_t>(std::floor(cfg.nms_radius / v.spacing[a]));
    for (std::ptrdiff_t dz = -reach[2]; dz <= reach[2]; ++dz) {
        for (std::ptrdiff_t dy = -reach[1]; dy <= reach[1]; ++dy) {
            for (std::ptrdiff_t dx = -reach[0]; dx <= reach[0]; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                const Vec3 w(dx * v.spacing[0], dy * v.spacing[1], dz * v.spacing[2]);
                if (w.squaredNorm() <= cfg.nms_radius * cfg.nms_radius) offsets.push_back({dx, dy, dz});
            }
        }
    }

    const double peak = *std::max_element(score.begin(), score.end());
    const double floor_score = cfg.min_score_ratio * peak;

    std::vector<std::size_t> maxima;
    for (std::size_t z = 0; z < d[2]; ++z) {
        for (std::size_t y = 0; y < d[1]; ++y) {
            for (std::size_t x = 0; x < d[0]; ++x) {
                const std::size_t i = v.index(x, y, z);
                const double s = score[i];
                if (s < floor_score) continue;
                bool strict = true;
                for (const auto& o : offsets) {
                    const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x) + o[0];
                    const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y) + o[1];
                    const std::ptrdiff_t nz = static_cast<std::ptrdiff_t>(z) + o[2];
                    if (nx < 0 || ny < 0 || nz < 0 || nx >= static_cast<std::ptrdiff_t>(d[0]) ||
                        ny >= static_cast<std::ptrdiff_t>(d[1]) || nz >= static_cast<std::ptrdiff_t>(d[2])) {
                        continue;
                    }
                    if (score[v.index(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny),
                                      static_cast<std::size_t>(nz))] >= s) {
                        strict = false;
                        break;
                    }
                }
                if (strict) maxima.push_back(i);
            }
        }
    }
    std::stable_sort(maxima.begin(), maxima.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    if (maxima.size() > cfg.max_points) maxima.resize(cfg.max_points);

    std::vector<std::array<std::size_t, 3>> out;
    out.reserve(maxima.size());
    for (std::size_t i : maxima) out.push_back({i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])});
    return out;
}

PointCloud nms_select(std::span<const double> score, const Volume& v, const KeypointConfig& cfg) {
    std::vector<Vec3> pts;
    for (const auto& p : nms_select_voxels(score, v, cfg)) {
        pts.push_back(v.to_normalized(Vec3(static_cast<double>(p[0]), static_cast<double>(p[1]),
                                           static_cast<double>(p[2]))));
    }
    return PointCloud(std::move(pts));
}

PointCloud detect_keypoints(const Volume& v, const KeypointConfig& cfg) {
    const auto score = foerstner_score(structure_tensor(v, cfg), cfg.epsilon);
    return nms_select(score, v, cfg);
}

void write_volume(const std::filesystem::path& path, const Volume& v) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    char buf[32];
    auto put = [&](double x) {
        const auto res = std::to_chars(buf, buf + sizeof buf, x);
        out.write(buf, res.ptr - buf);
    };
    out << v.dims[0] << ' ' << v.dims[1] << ' ' << v.dims[2];
    for (int a = 0; a < 3; ++a) {
        out << ' ';
        put(v.spacing[a]);
    }
    out << '\n';
    for (std::size_t i = 0; i < v.size(); ++i) {
        put(v.voxels[i]);
        out << ((i + 1) % v.dims[0] == 0 ? '\n' : ' ');
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::array<std::size_t, 3> dims{};
    Vec3 spacing;
    if (!(in >> dims[0] >> dims[1] >> dims[2] >> spacing[0] >> spacing[1] >> spacing[2])) {
        throw std::runtime_error(path.string() + ":1: header must be 'H W D sx sy sz'");
    }
    std::vector<double> voxels(dims[0] * dims[1] * dims[2]);
    std::string tok;
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        if (!(in >> tok)) throw std::runtime_error(path.string() + ": expected " + std::to_string(voxels.size()) +
                                                   " voxels, found " + std::to_string(i));
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), voxels[i]);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
            throw std::runtime_error(path.string() + ": bad voxel value '" + tok + "' at position " + std::to_string(i));
        }
    }
    return Volume(dims, spacing, std::move(voxels));
}

}  // namespace mtreg
