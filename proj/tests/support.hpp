#pragma once

#include "mtreg/autodiff.hpp"
#include "mtreg/geometry.hpp"
#include "mtreg/random.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace testing {

using mtreg::ad::Tensor;

inline Tensor random_tensor(mtreg::Rng& rng, mtreg::ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(mtreg::ad::numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

inline std::vector<mtreg::Vec3> random_points(mtreg::Rng& rng, std::size_t n, double extent = 1.0) {
    std::vector<mtreg::Vec3> pts(n);
    for (auto& p : pts) p = mtreg::Vec3(rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-extent, extent));
    return pts;
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Largest relative error, over all inputs, between tape gradients and
// central differences: max|analytic - numeric| / max(max|numeric|, floor).
inline double gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5, double floor = 1e-6) {
    mtreg::ad::Tape tape;
    std::vector<Tensor> watched;
    for (const auto& t : inputs) watched.push_back(tape.watch(t));
    const Tensor loss = f(watched);
    const auto grads = tape.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = grads.of(watched[i]);
        std::vector<double> numeric(inputs[i].size());
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            auto eval_at = [&](double delta) {
                std::vector<Tensor> probe = inputs;
                std::vector<double> v(inputs[i].values().begin(), inputs[i].values().end());
                v[k] += delta;
                probe[i] = Tensor(inputs[i].shape(), std::move(v));
                return f(probe).item();
            };
            numeric[k] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        }
        double diff = 0.0, scale = floor;
        for (std::size_t k = 0; k < numeric.size(); ++k) {
            diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
            scale = std::max(scale, std::abs(numeric[k]));
        }
        worst = std::max(worst, diff / scale);
    }
    return worst;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mtreg_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
