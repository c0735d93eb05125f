#pragma once

#include "mtreg/autodiff.hpp"
#include "mtreg/gcn.hpp"
#include "mtreg/geometry.hpp"
#include "mtreg/lbp.hpp"
#include "mtreg/random.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mtreg {

struct ModelConfig {
    GcnConfig gcn;
    LbpConfig lbp;
};

struct AdaptConfig {
    double lambda0 = 1.0;
    double alpha_ema = 0.98;
    std::size_t ramp_epochs = 20;
    std::size_t epochs = 100;
    double lr = 0.01;
    std::size_t batch_source = 2;
    std::size_t batch_target = 2;
    AugmentationRanges augmentation;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;

    static AdamState for_params(const ModelParams& params);
};

struct TrainSample {
    std::string id;
    PointCloud fixed;
    PointCloud moving;
    std::optional<DisplacementField> gt;  // source domain only

    bool labeled() const { return gt.has_value(); }
};

struct EpochLog {
    std::size_t epoch;
    double l_sup;
    double l_con;
    double lambda;
    double lr;
};

// Mean over keypoints of the per-keypoint L1 distance.
ad::Tensor supervised_loss(const ad::Tensor& pred, const DisplacementField& gt);

// teacher <- alpha * teacher + (1 - alpha) * student
void ema_update(ModelParams& teacher, const ModelParams& student, double alpha);

// lambda0 * exp(-5 (1 - min(t / T, 1))^2)
double lambda_schedule(double epoch, const AdaptConfig& cfg);

// L1 between the student prediction on a T1-augmented pair and the teacher
// prediction on a T2-augmented pair, each mapped back through its own inverse.
// Only `student` can receive gradients; the teacher branch runs off-tape.
ad::Tensor consistency_loss(const TrainSample& sample, const ModelParams& student, const ModelParams& teacher,
                            const SimilarityTransform& student_aug, const SimilarityTransform& teacher_aug,
                            const ModelConfig& model);
// Samples the student augmentation, then the teacher augmentation, from `rng`.
ad::Tensor consistency_loss(const TrainSample& sample, const ModelParams& student, const ModelParams& teacher,
                            Rng& rng, const AugmentationRanges& ranges, const ModelConfig& model);

// Bias-corrected Adam step; `grads` follows the parameter order.
void adam_step(ModelParams& params, const std::vector<ad::Tensor>& grads, AdamState& state, double lr);

using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
};

struct AdaptResult {
    ModelParams student;
    ModelParams teacher;
    std::vector<EpochLog> log;
};

// Fresh parameters from the "init" stream of cfg.seed.
ModelParams initial_params(const ModelConfig& model, const AdaptConfig& cfg);

TrainResult train_supervised(const std::vector<TrainSample>& source, const ModelConfig& model, const AdaptConfig& cfg,
                             std::optional<ModelParams> init = std::nullopt, const EpochCallback& on_epoch = {});

// Mean Teacher adaptation. The teacher starts as a copy of the initial student.
AdaptResult adapt(const std::vector<TrainSample>& source, const std::vector<TrainSample>& target,
                  const ModelConfig& model, const AdaptConfig& cfg, std::optional<ModelParams> init = std::nullopt,
                  const EpochCallback& on_epoch = {});

// CSV with header "epoch,L_sup,L_con,lambda,lr".
void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace mtreg
