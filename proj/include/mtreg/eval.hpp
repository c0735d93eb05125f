#pragma once

#include "mtreg/geometry.hpp"
#include "mtreg/synthdata.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mtreg {

struct TreResult {
    double mean = 0.0;
    std::vector<double> per_landmark;
};

// Interpolates `pred` from the keypoints to the landmark positions (IDW over
// the k nearest keypoints) and measures the distance to the landmark
// displacements.
TreResult tre(const DisplacementField& pred, const PointCloud& keypoints, const LandmarkSet& landmarks,
              std::size_t k = 8, double power = 2.0);

// Mean landmark displacement norm, i.e. the error of predicting zero motion.
double initial_tre(const LandmarkSet& landmarks);

// Fraction of the grid x grid x grid lattice over the keypoints' bounding box
// where det(J) <= 0 for x + phi(x), phi interpolated by IDW.
double folding_fraction(const DisplacementField& pred, const PointCloud& keypoints, std::size_t grid,
                        std::size_t k = 8, double power = 2.0);

struct EvalReport {
    std::string sample;
    double tre_initial = 0.0;
    double tre_mean = 0.0;
    std::vector<double> per_landmark;
    double folding_fraction = 0.0;
};

EvalReport evaluate(const std::string& id, const DisplacementField& pred, const PointCloud& keypoints,
                    const LandmarkSet& landmarks, std::size_t grid);

// "sample,tre_initial,tre_mean,folding_fraction", values in normalized units.
void write_report_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
// Per-sample metrics plus per-landmark errors; `unit_mm` converts to millimetres.
void write_report_json(const std::filesystem::path& path, const std::vector<EvalReport>& reports, double unit_mm);

double mean_tre(const std::vector<EvalReport>& reports);

}  // namespace mtreg
