#include "mtreg/experiment.hpp"

#include "mtreg/lbp.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace mtreg {

namespace {

// Runs body(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F body) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(jobs, n); ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

GeneratedPair generate_pair(std::uint64_t seed, const std::string& stream, const SynthConfig& cfg,
                            const DomainSpec& domain) {
    Rng rng = Rng::stream(seed, "data/" + stream);
    const Volume vol = sample_base_volume(rng, cfg.volume);
    const PointCloud base = detect_keypoints(vol, cfg.keypoints);
    const RbfDeformation u = sample_deformation(rng, cfg.deformation, std::max(domain.deform_scale, 1.0));
    GeneratedPair pair = make_pair(rng, base, u, domain, cfg.pair);
    pair.sample.id = stream;
    for (char& c : pair.sample.id) {
        if (c == '/') c = '_';
    }
    return pair;
}

Benchmark generate_benchmark(const SynthConfig& cfg, std::uint64_t seed, std::size_t jobs) {
    struct Job {
        std::string stream;
        const DomainSpec* domain;
    };
    std::vector<Job> todo;
    for (std::size_t i = 0; i < cfg.n_source; ++i) todo.push_back({"source/" + std::to_string(i), &cfg.source});
    for (std::size_t i = 0; i < cfg.n_target; ++i) todo.push_back({"target/" + std::to_string(i), &cfg.target});
    for (std::size_t i = 0; i < cfg.n_test; ++i) todo.push_back({"source_test/" + std::to_string(i), &cfg.source});
    for (std::size_t i = 0; i < cfg.n_test; ++i) todo.push_back({"target_test/" + std::to_string(i), &cfg.target});

    std::vector<GeneratedPair> pairs(todo.size());
    parallel_for(todo.size(), jobs, [&](std::size_t i) { pairs[i] = generate_pair(seed, todo[i].stream, cfg, *todo[i].domain); });

    Benchmark b;
    const double unit = Volume({cfg.volume.size, cfg.volume.size, cfg.volume.size}, Vec3::Constant(cfg.volume.spacing_mm),
                               std::vector<double>(cfg.volume.size * cfg.volume.size * cfg.volume.size, 0.0))
                            .normalized_unit();
    for (Dataset* d : {&b.source, &b.target, &b.target_labeled, &b.source_test, &b.target_test}) d->unit_mm = unit;

    std::size_t k = 0;
    for (std::size_t i = 0; i < cfg.n_source; ++i, ++k) {
        b.source.samples.push_back({pairs[k].sample, Domain::source, pairs[k].landmarks});
    }
    for (std::size_t i = 0; i < cfg.n_target; ++i, ++k) {
        DatasetSample labeled{pairs[k].sample, Domain::source, pairs[k].landmarks};
        b.target_labeled.samples.push_back(labeled);
        DatasetSample unlabeled{pairs[k].sample, Domain::target, std::nullopt};
        unlabeled.sample.gt.reset();
        b.target.samples.push_back(std::move(unlabeled));
    }
    for (std::size_t i = 0; i < cfg.n_test; ++i, ++k) {
        DatasetSample s{pairs[k].sample, Domain::source, pairs[k].landmarks};
        b.source_test.samples.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < cfg.n_test; ++i, ++k) {
        DatasetSample s{pairs[k].sample, Domain::target, pairs[k].landmarks};
        s.sample.gt.reset();
        b.target_test.samples.push_back(std::move(s));
    }
    return b;
}

void write_benchmark(const std::filesystem::path& dir, const Benchmark& b) {
    write_dataset(dir / "source", b.source);
    write_dataset(dir / "target", b.target);
    write_dataset(dir / "target_labeled", b.target_labeled);
    write_dataset(dir / "source_test", b.source_test);
    write_dataset(dir / "target_test", b.target_test);
}

std::vector<DisplacementField> predict(const Dataset& ds, const ModelParams& params, const ModelConfig& model,
                                       std::size_t jobs) {
    const ModelParams p = params.detached();
    std::vector<DisplacementField> out(ds.samples.size());
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        const auto& s = ds.samples[i].sample;
        out[i] = DisplacementField::from_tensor(register_pair(s.fixed, s.moving, p, model.gcn, model.lbp));
    });
    return out;
}

std::vector<EvalReport> evaluate_predictions(const Dataset& ds, const std::vector<DisplacementField>& preds,
                                             std::size_t grid, std::size_t jobs) {
    if (preds.size() != ds.samples.size()) throw std::invalid_argument("evaluate: prediction count does not match dataset");
    std::vector<EvalReport> out(preds.size());
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        const auto& s = ds.samples[i];
        if (!s.landmarks) throw std::invalid_argument("evaluate: sample " + s.sample.id + " has no landmarks");
        out[i] = evaluate(s.sample.id, preds[i], s.sample.fixed, *s.landmarks, grid);
    });
    return out;
}

void write_predictions(const std::filesystem::path& dir, const Dataset& ds, const std::vector<DisplacementField>& preds) {
    if (preds.size() != ds.samples.size()) throw std::invalid_argument("write_predictions: count does not match dataset");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        std::vector<double> flat;
        flat.reserve(3 * preds[i].size());
        for (const Vec3& v : preds[i].vectors) flat.insert(flat.end(), {v[0], v[1], v[2]});
        write_table(dir / (ds.samples[i].sample.id + "_pred.txt"), flat, 3);
    }
}

std::vector<DisplacementField> read_predictions(const std::filesystem::path& dir, const Dataset& ds) {
    std::vector<DisplacementField> out;
    for (const auto& s : ds.samples) {
        const std::vector<double> flat = read_table(dir / (s.sample.id + "_pred.txt"), 3);
        DisplacementField f;
        for (std::size_t r = 0; r < flat.size() / 3; ++r) f.vectors.emplace_back(flat[3 * r], flat[3 * r + 1], flat[3 * r + 2]);
        if (f.size() != s.sample.fixed.size()) {
            throw std::invalid_argument("prediction for " + s.sample.id + " has " + std::to_string(f.size()) +
                                        " rows, fixed cloud has " + std::to_string(s.sample.fixed.size()));
        }
        out.push_back(std::move(f));
    }
    return out;
}

DomainExperiment run_domain_experiment(const SynthConfig& synth, const ModelConfig& model, const AdaptConfig& train,
                                       std::size_t grid, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    AdaptConfig cfg = train;
    cfg.seed = seed;
    const Benchmark b = generate_benchmark(synth, seed);

    auto score = [&](const ModelParams& p) {
        return mean_tre(evaluate_predictions(b.target_test, predict(b.target_test, p, model), grid));
    };
    DomainExperiment r;
    r.seed = seed;
    for (const auto& s : b.target_test.samples) {
        r.tre_initial += initial_tre(*s.landmarks);
    }
    r.tre_initial /= static_cast<double>(b.target_test.samples.size());

    r.source_only = score(train_supervised(b.source.train_samples(), model, cfg).params);
    r.target_only = score(train_supervised(b.target_labeled.train_samples(), model, cfg).params);
    const AdaptResult adapted = adapt(b.source.train_samples(), b.target.train_samples(), model, cfg);
    r.adapted_reports = evaluate_predictions(b.target_test, predict(b.target_test, adapted.teacher, model), grid);
    r.adapted_teacher = mean_tre(r.adapted_reports);
    r.adapted_student = score(adapted.student);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace mtreg
