#include "mtreg/eval.hpp"

#include <Eigen/LU>
#include <json.hpp>

#include <charconv>
#include <fstream>
#include <stdexcept>

namespace mtreg {

TreResult tre(const DisplacementField& pred, const PointCloud& keypoints, const LandmarkSet& landmarks, std::size_t k,
              double power) {
    if (keypoints.empty()) throw std::invalid_argument("tre: no keypoints");
    if (pred.size() != keypoints.size()) throw std::invalid_argument("tre: displacement count does not match keypoints");
    if (keypoints.size() < k) {
        throw std::invalid_argument("tre: " + std::to_string(keypoints.size()) + " keypoints, need at least " +
                                    std::to_string(k));
    }
    if (landmarks.size() == 0) throw std::invalid_argument("tre: no landmarks");
    const LandmarkSet field{keypoints.points(), pred.vectors};
    const DisplacementField at = interpolate_landmarks(field, landmarks.positions, k, power);
    TreResult r;
    r.per_landmark.reserve(landmarks.size());
    for (std::size_t i = 0; i < landmarks.size(); ++i) {
        // (p + predicted) - (p + true)
        r.per_landmark.push_back((at.vectors[i] - landmarks.displacements[i]).norm());
        r.mean += r.per_landmark.back();
    }
    r.mean /= static_cast<double>(landmarks.size());
    return r;
}

double initial_tre(const LandmarkSet& landmarks) {
    if (landmarks.size() == 0) throw std::invalid_argument("initial_tre: no landmarks");
    double acc = 0.0;
    for (const Vec3& d : landmarks.displacements) acc += d.norm();
    return acc / static_cast<double>(landmarks.size());
}

double folding_fraction(const DisplacementField& pred, const PointCloud& keypoints, std::size_t grid, std::size_t k,
                        double power) {
    if (grid < 8) throw std::invalid_argument("folding_fraction: grid must be at least 8");
    if (pred.size() != keypoints.size()) throw std::invalid_argument("folding_fraction: size mismatch");
    Vec3 lo = keypoints[0], hi = lo;
    for (const Vec3& p : keypoints.points()) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    Vec3 step = (hi - lo) / static_cast<double>(grid - 1);
    for (int a = 0; a < 3; ++a) {
        if (step[a] <= 0.0) step[a] = 1.0;
    }
    std::vector<Vec3> nodes;
    nodes.reserve(grid * grid * grid);
    for (std::size_t z = 0; z < grid; ++z) {
        for (std::size_t y = 0; y < grid; ++y) {
            for (std::size_t x = 0; x < grid; ++x) {
                nodes.push_back(lo + Vec3(static_cast<double>(x) * step[0], static_cast<double>(y) * step[1],
                                          static_cast<double>(z) * step[2]));
            }
        }
    }
    const DisplacementField phi = interpolate_landmarks(LandmarkSet{keypoints.points(), pred.vectors}, nodes, k, power);
    auto at = [&](std::size_t x, std::size_t y, std::size_t z) -> const Vec3& {
        return phi.vectors[x + grid * (y + grid * z)];
    };

    std::size_t folded = 0;
    for (std::size_t z = 0; z < grid; ++z) {
        for (std::size_t y = 0; y < grid; ++y) {
            for (std::size_t x = 0; x < grid; ++x) {
                const std::array<std::size_t, 3> p{x, y, z};
                Mat3 jac = Mat3::Identity();
                for (int a = 0; a < 3; ++a) {
                    auto lo_i = p, hi_i = p;
                    if (p[a] > 0) --lo_i[a];
                    if (p[a] + 1 < grid) ++hi_i[a];
                    const double h = static_cast<double>(hi_i[a] - lo_i[a]) * step[a];
                    jac.col(a) += (at(hi_i[0], hi_i[1], hi_i[2]) - at(lo_i[0], lo_i[1], lo_i[2])) / h;
                }
                if (jac.determinant() <= 0.0) ++folded;
            }
        }
    }
    return static_cast<double>(folded) / static_cast<double>(nodes.size());
}

EvalReport evaluate(const std::string& id, const DisplacementField& pred, const PointCloud& keypoints,
                    const LandmarkSet& landmarks, std::size_t grid) {
    EvalReport r;
    r.sample = id;
    r.tre_initial = initial_tre(landmarks);
    TreResult t = tre(pred, keypoints, landmarks);
    r.tre_mean = t.mean;
    r.per_landmark = std::move(t.per_landmark);
    r.folding_fraction = folding_fraction(pred, keypoints, grid);
    return r;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "sample,tre_initial,tre_mean,folding_fraction\n";
    char buf[32];
    auto put = [&](double x) {
        const auto res = std::to_chars(buf, buf + sizeof buf, x);
        out.write(buf, res.ptr - buf);
    };
    for (const auto& r : reports) {
        out << r.sample << ',';
        put(r.tre_initial);
        out << ',';
        put(r.tre_mean);
        out << ',';
        put(r.folding_fraction);
        out << '\n';
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
}

void write_report_json(const std::filesystem::path& path, const std::vector<EvalReport>& reports, double unit_mm) {
    nlohmann::ordered_json j;
    j["unit_mm"] = unit_mm;
    j["mean_tre"] = reports.empty() ? 0.0 : mean_tre(reports);
    j["mean_tre_mm"] = reports.empty() ? 0.0 : mean_tre(reports) * unit_mm;
    double init = 0.0;
    for (const auto& r : reports) init += r.tre_initial;
    j["mean_tre_initial"] = reports.empty() ? 0.0 : init / static_cast<double>(reports.size());
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json s;
        s["sample"] = r.sample;
        s["tre_initial"] = r.tre_initial;
        s["tre_mean"] = r.tre_mean;
        s["tre_mean_mm"] = r.tre_mean * unit_mm;
        s["folding_fraction"] = r.folding_fraction;
        s["landmark_errors"] = r.per_landmark;
        j["samples"].push_back(std::move(s));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

double mean_tre(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("mean_tre: no reports");
    double acc = 0.0;
    for (const auto& r : reports) acc += r.tre_mean;
    return acc / static_cast<double>(reports.size());
}

}  // namespace mtreg
