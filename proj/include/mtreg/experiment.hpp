#pragma once

#include "mtreg/eval.hpp"
#include "mtreg/keypoints.hpp"
#include "mtreg/synthdata.hpp"
#include "mtreg/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mtreg {

struct SynthConfig {
    DeformationModel deformation;
    DomainSpec source{0.0, 1.0};
    // Cropped field of view and deeper breathing than the source domain.
    DomainSpec target{0.25, 2.5};
    PairOptions pair;
    VolumeModel volume;
    KeypointConfig keypoints{1.0, 2.0, 2.0, 256, 1e-6, 0.0};
    std::size_t n_source = 10;
    std::size_t n_target = 12;
    std::size_t n_test = 10;
};

// Splits written by gen-data. `target_labeled` holds the same pairs as
// `target` with their labels, for the target-only reference model.
struct Benchmark {
    Dataset source;
    Dataset target;
    Dataset target_labeled;
    Dataset source_test;
    Dataset target_test;
};

inline constexpr const char* kSplitNames[] = {"source", "target", "target_labeled", "source_test", "target_test"};

// One pair: base volume -> keypoints -> deformation -> make_pair. Pure
// function of (seed, stream name, config).
GeneratedPair generate_pair(std::uint64_t seed, const std::string& stream, const SynthConfig& cfg,
                            const DomainSpec& domain);

Benchmark generate_benchmark(const SynthConfig& cfg, std::uint64_t seed, std::size_t jobs = 1);
void write_benchmark(const std::filesystem::path& dir, const Benchmark& b);

std::vector<DisplacementField> predict(const Dataset& ds, const ModelParams& params, const ModelConfig& model,
                                       std::size_t jobs = 1);
// Needs landmarks on every sample.
std::vector<EvalReport> evaluate_predictions(const Dataset& ds, const std::vector<DisplacementField>& preds,
                                             std::size_t grid, std::size_t jobs = 1);

// One `<id>_pred.txt` table per sample.
void write_predictions(const std::filesystem::path& dir, const Dataset& ds, const std::vector<DisplacementField>& preds);
std::vector<DisplacementField> read_predictions(const std::filesystem::path& dir, const Dataset& ds);

// Source-only / target-only / adapted comparison on one generated benchmark.
// TRE values are means over the target test split, in normalized units.
struct DomainExperiment {
    std::uint64_t seed = 0;
    double tre_initial = 0.0;
    double source_only = 0.0;
    double target_only = 0.0;
    double adapted_teacher = 0.0;
    double adapted_student = 0.0;
    std::vector<EvalReport> adapted_reports;  // teacher, per test sample
    double seconds = 0.0;
};

DomainExperiment run_domain_experiment(const SynthConfig& synth, const ModelConfig& model, const AdaptConfig& train,
                                       std::size_t grid, std::uint64_t seed);

}  // namespace mtreg
