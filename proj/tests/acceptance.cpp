// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 1 2 7`.

#include "mtreg/config.hpp"
#include "mtreg/experiment.hpp"
#include "support.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>
#include <string>

using namespace mtreg;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------- 1

Outcome gradient_integrity() {
    const auto t0 = Clock::now();
    Rng rng = Rng::stream(1, "gradients");
    auto rt = [&](ad::Shape s, double lo = -1.0, double hi = 1.0) { return testing::random_tensor(rng, s, lo, hi); };
    // Weighted sum so every output element carries a distinct gradient.
    auto reduce = [](const Tensor& y, const Tensor& w) { return ad::sum(ad::mul(y, w)); };

    std::vector<std::pair<std::string, double>> errs;
    auto check = [&](const std::string& name, const testing::ScalarFn& f, const std::vector<Tensor>& in) {
        errs.emplace_back(name, testing::gradient_error(f, in));
    };

    const Tensor w23 = rt({2, 3}), w44 = rt({4, 4}), w5 = rt({5}), w43 = rt({4, 3}), w63 = rt({6, 3});
    check("add", [&](auto& x) { return reduce(ad::add(x[0], x[1]), w23); }, {rt({2, 3}), rt({2, 3})});
    check("add broadcast", [&](auto& x) { return reduce(ad::add(x[0], x[1]), w23); }, {rt({2, 3}), rt({1})});
    check("sub", [&](auto& x) { return reduce(ad::sub(x[0], x[1]), w23); }, {rt({2, 3}), rt({2, 3})});
    check("mul", [&](auto& x) { return reduce(ad::mul(x[0], x[1]), w23); }, {rt({2, 3}), rt({2, 3})});
    check("scale", [&](auto& x) { return reduce(ad::scale(x[0], -1.7), w23); }, {rt({2, 3})});
    check("add_scalar", [&](auto& x) { return reduce(ad::add_scalar(x[0], 0.3), w23); }, {rt({2, 3})});
    check("matmul", [&](auto& x) { return reduce(ad::matmul(x[0], x[1]), w43); }, {rt({4, 5}), rt({5, 3})});
    check("leaky_relu", [&](auto& x) { return reduce(ad::leaky_relu(x[0], 0.2), w44); }, {rt({4, 4})});
    {
        const std::vector<std::size_t> seg{0, 1, 0, 2, 1, 2};
        const Tensor w = rt({3, 3});
        check("segment_max", [&](auto& x) { return reduce(ad::segment_max(x[0], seg, 3), w); }, {rt({6, 3})});
    }
    check("softmax", [&](auto& x) { return reduce(ad::softmax(x[0], 1), w44); }, {rt({4, 4})});
    check("softmax axis 0", [&](auto& x) { return reduce(ad::softmax(x[0], 0), w44); }, {rt({4, 4})});
    {
        const Tensor w = rt({4});
        check("logsumexp", [&](auto& x) { return reduce(ad::logsumexp(x[0], 1), w); }, {rt({4, 4})});
        check("row_sum", [&](auto& x) { return reduce(ad::row_sum(x[0]), w); }, {rt({4, 4})});
    }
    check("l1_loss", [&](auto& x) { return ad::l1_loss(x[0], x[1]); }, {rt({6, 3}), rt({6, 3})});
    check("sum", [&](auto& x) { return ad::sum(ad::mul(x[0], x[0])); }, {rt({3, 3})});
    check("mean", [&](auto& x) { return ad::mean(ad::mul(x[0], x[0])); }, {rt({3, 3})});
    check("reshape", [&](auto& x) { return reduce(ad::reshape(x[0], {5}), w5); }, {rt({5, 1})});
    {
        const std::vector<std::size_t> idx{2, 0, 2, 1, 3, 0};
        check("gather_rows", [&](auto& x) { return reduce(ad::gather_rows(x[0], idx), w63); }, {rt({4, 3})});
    }
    {
        const SimilarityTransform T = sample_transform(rng, AugmentationRanges{});
        check("invert_displacements", [&](auto& x) { return reduce(invert_displacements(x[0], T), w63); },
              {rt({6, 3})});
    }

    const PointCloud fixed(testing::random_points(rng, 12, 0.5));
    std::vector<Vec3> moved = fixed.points();
    for (auto& p : moved) p += 0.05 * Vec3(rng.normal(), rng.normal(), rng.normal());
    const PointCloud moving(moved);
    {
        const KnnGraph g = knn_graph(fixed, 3);
        const Tensor w = rt({12, 4});
        check("edge_conv",
              [&](auto& x) { return reduce(edge_conv(x[0], g, EdgeLayer{x[1], x[2], x[3]}, 0.2), w); },
              {fixed.to_tensor(), rt({3, 4}), rt({3, 4}), rt({1, 4})});
    }
    GcnConfig gcfg;
    gcfg.knn_k = 4;
    const ModelParams params = ModelParams::init(gcfg, rng);
    check("gcn_forward",
          [&](auto& x) {
              ModelParams p = params;
              p.set(0, x[0]);
              return ad::mean(gcn_forward(fixed, p, gcfg));
          },
          {params[0].value});
    LbpConfig lcfg;
    lcfg.n_candidates = 4;
    lcfg.graph_k = 3;
    const CandidateSet cand = build_candidates(fixed, moving, 4);
    {
        const Tensor w = rt({12, 4});
        check("data_cost", [&](auto& x) { return reduce(data_cost(x[0], x[1], cand), w); }, {rt({12, 5}), rt({12, 5})});
        const MessageGraph mg = MessageGraph::from_knn(knn_graph(fixed, 3));
        check("lbp_min_sum", [&](auto& x) { return reduce(lbp_min_sum(x[0], cand, mg, lcfg).costs, w); },
              {rt({12, 4}, 0.0, 1.0)});
        const Tensor w3 = rt({12, 3});
        check("soft_displacements", [&](auto& x) { return reduce(soft_displacements(Beliefs{x[0]}, cand, 0.7), w3); },
              {rt({12, 4}, 0.0, 2.0)});
    }

    double worst_op = 0.0;
    std::string worst_name;
    for (const auto& [n, e] : errs) {
        if (e >= worst_op) {
            worst_op = e;
            worst_name = n;
        }
    }

    const Tensor w = rt({12, 3});
    const double composite = testing::gradient_error(
        [&](auto& x) {
            ModelParams p = params;
            p.set(0, x[0]);
            return reduce(register_pair(fixed, moving, p, gcfg, lcfg), w);
        },
        {params[0].value});

    const double secs = seconds_since(t0);
    const bool pass = worst_op < 1e-4 && composite < 1e-3 && secs < 60.0;
    return {pass, fmt("%zu ops, worst rel err %.2e (%s), register composite %.2e, %.1f s", errs.size(), worst_op,
                      worst_name.c_str(), composite, secs)};
}

// ---------------------------------------------------------------- 2

Outcome lbp_trees() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng = Rng::stream(seed, "lbp-tree");
        const std::size_t n = 1 + rng.index(8), L = 1 + rng.index(4);
        CandidateSet c;
        c.L = L;
        c.indices.assign(n * L, 0);
        c.displacements = testing::random_points(rng, n * L);
        const Tensor d = testing::random_tensor(rng, {n, L}, 0.0, 2.0);
        std::vector<std::pair<std::size_t, std::size_t>> edges;
        for (std::size_t k = 1; k < n; ++k) edges.emplace_back(rng.index(k), k);
        const MessageGraph g = MessageGraph::from_edges(n, edges);
        LbpConfig cfg;
        cfg.alpha_reg = rng.uniform(0.1, 2.0);
        cfg.n_iters = n;
        const Beliefs b = lbp_min_sum(d, c, g, cfg);

        // Exhaustive min-marginals.
        std::vector<double> best(n * L, std::numeric_limits<double>::infinity());
        std::vector<std::size_t> x(n, 0);
        while (true) {
            double e = 0.0;
            for (std::size_t i = 0; i < n; ++i) e += d.at(i, x[i]);
            for (auto [i, j] : edges) e += cfg.alpha_reg * (c.displacement(i, x[i]) - c.displacement(j, x[j])).squaredNorm();
            for (std::size_t i = 0; i < n; ++i) best[i * L + x[i]] = std::min(best[i * L + x[i]], e);
            std::size_t k = 0;
            while (k < n && ++x[k] == L) x[k++] = 0;
            if (k == n) break;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double m = *std::min_element(best.begin() + i * L, best.begin() + (i + 1) * L);
            for (std::size_t l = 0; l < L; ++l) worst = std::max(worst, std::abs(b.costs.at(i, l) - (best[i * L + l] - m)));
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-9 && secs < 60.0, fmt("200 trees, max belief error %.2e, %.2f s", worst, secs)};
}

// ---------------------------------------------------------------- 3

ModelConfig small_model() {
    ModelConfig m;
    m.gcn.layer_dims = {3, 8, 8};
    m.gcn.feature_dim = 8;
    m.gcn.knn_k = 5;
    m.lbp.n_candidates = 4;
    m.lbp.graph_k = 4;
    m.lbp.n_iters = 3;
    return m;
}

TrainSample toy_sample(Rng& rng, std::size_t n) {
    const auto pts = testing::random_points(rng, n, 0.5);
    std::vector<Vec3> moved(n);
    for (std::size_t i = 0; i < n; ++i) moved[i] = pts[i] + 0.05 * Vec3(std::sin(3 * pts[i].y()), std::cos(2 * pts[i].z()), 0.5);
    return TrainSample{"toy", PointCloud(pts), PointCloud(moved), std::nullopt};
}

Outcome mean_teacher_mechanics() {
    const auto t0 = Clock::now();
    const ModelConfig m = small_model();
    Rng rng = Rng::stream(3, "mean-teacher");
    const ModelParams student = ModelParams::init(m.gcn, rng);
    const ModelParams start = ModelParams::init(m.gcn, rng);

    double ema_err = 0.0;
    ModelParams teacher = start;
    for (int n = 1; n <= 200; ++n) {
        ema_update(teacher, student, 0.98);
        const double an = std::pow(0.98, n);
        for (std::size_t i = 0; i < teacher.size(); ++i)
            for (std::size_t k = 0; k < teacher[i].value.size(); ++k)
                ema_err = std::max(ema_err, std::abs(teacher[i].value[k] -
                                                     (student[i].value[k] * (1.0 - an) + start[i].value[k] * an)));
    }

    AdaptConfig cfg;
    const bool ramp_ok = lambda_schedule(0.0, cfg) == cfg.lambda0 * std::exp(-5.0) &&
                         lambda_schedule(static_cast<double>(cfg.ramp_epochs), cfg) == cfg.lambda0;

    const TrainSample sample = toy_sample(rng, 30);
    const auto id = SimilarityTransform::identity();
    const double con_identity = consistency_loss(sample, student, student, id, id, m).item();

    // Watch the teacher too: any gradient path into it would show up here.
    ad::Tape tape;
    const ModelParams ws = student.watch(tape), wt = start.watch(tape);
    const ad::Gradients g = tape.backward(consistency_loss(sample, ws, wt, sample_transform(rng, cfg.augmentation),
                                                           sample_transform(rng, cfg.augmentation), m));
    double teacher_grad = 0.0, student_grad = 0.0;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const Tensor gs = g.of(ws[i].value), gt = g.of(wt[i].value);
        for (double v : gs.values()) student_grad += std::abs(v);
        for (double v : gt.values()) teacher_grad += std::abs(v);
    }

    const double secs = seconds_since(t0);
    const bool pass = ema_err < 1e-12 && ramp_ok && con_identity == 0.0 && teacher_grad == 0.0 && student_grad > 0.0;
    return {pass, fmt("EMA err %.1e, ramp endpoints %s, identity consistency %.1e, teacher |grad| %.1e "
                      "(student %.1e), %.2f s",
                      ema_err, ramp_ok ? "exact" : "WRONG", con_identity, teacher_grad, student_grad, secs)};
}

// ---------------------------------------------------------------- 4

Outcome augmentation_inversion() {
    const auto t0 = Clock::now();
    Rng rng = Rng::stream(4, "augmentation");
    double inv_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const SimilarityTransform T = sample_transform(rng, AugmentationRanges{});
        const DisplacementField d{testing::random_points(rng, 20, 0.2)};
        const DisplacementField back = invert_displacements(forward_displacements(d, T), T);
        for (std::size_t i = 0; i < d.size(); ++i) inv_err = std::max(inv_err, (back.vectors[i] - d.vectors[i]).norm());
    }

    ModelConfig m = small_model();
    m.lbp.alpha_reg = 0.0;
    m.lbp.n_candidates = 1;
    const ModelParams theta = ModelParams::init(m.gcn, rng);
    double con = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const TrainSample sample = toy_sample(rng, 30);
        const SimilarityTransform t1 = sample_transform(rng, AugmentationRanges{});
        const SimilarityTransform t2 = sample_transform(rng, AugmentationRanges{});
        con = std::max(con, consistency_loss(sample, theta, theta, t1, t2, m).item());
    }
    const double secs = seconds_since(t0);
    return {inv_err < 1e-9 && con < 1e-9,
            fmt("1000 transforms, max inversion error %.2e; nearest-candidate consistency %.2e, %.2f s", inv_err, con,
                secs)};
}

// ---------------------------------------------------------------- 5 and 6

struct ExperimentRun {
    std::vector<DomainExperiment> seeds;
    double seconds = 0.0;
};

ExperimentRun run_experiment() {
    const ExperimentConfig cfg;  // benchmark defaults
    ExperimentRun r;
    const auto t0 = Clock::now();
    for (std::uint64_t seed : {0, 1, 2}) {
        r.seeds.push_back(run_domain_experiment(cfg.synth, cfg.model, cfg.train, cfg.eval_grid, seed));
        const auto& e = r.seeds.back();
        std::printf("  seed %llu: initial %.4f  source-only %.4f  target-only %.4f  adapted teacher %.4f  "
                    "student %.4f  (%.0f s)\n",
                    static_cast<unsigned long long>(seed), e.tre_initial, e.source_only, e.target_only,
                    e.adapted_teacher, e.adapted_student, e.seconds);
        std::fflush(stdout);
    }
    r.seconds = seconds_since(t0);
    return r;
}

Outcome adaptation_experiment(const ExperimentRun& r) {
    bool gap = true, improve = true;
    std::vector<double> closeness;
    std::string per_seed;
    for (const auto& e : r.seeds) {
        const double g = e.source_only / e.target_only - 1.0;
        const double gain = 1.0 - e.adapted_teacher / e.source_only;
        const double rel = e.adapted_teacher / e.target_only - 1.0;
        gap = gap && g >= 0.30;
        improve = improve && gain >= 0.20;
        closeness.push_back(rel);
        per_seed += fmt(" [seed %llu gap %+.0f%% gain %+.0f%% vs target-only %+.0f%%]",
                        static_cast<unsigned long long>(e.seed), 100 * g, 100 * gain, 100 * rel);
    }
    std::sort(closeness.begin(), closeness.end());
    const double median = closeness[closeness.size() / 2];
    const bool pass = gap && improve && median <= 0.25 && r.seconds < 15 * 60;
    return {pass, fmt("domain gap >= 30%% %s, gain >= 20%% every seed %s, median vs target-only %+.0f%%, %.0f s;",
                      gap ? "yes" : "NO", improve ? "yes" : "NO", 100 * median, r.seconds) +
                      per_seed};
}

Outcome regularity(const ExperimentRun& r) {
    double worst = 0.0;
    std::size_t n = 0;
    for (const auto& e : r.seeds) {
        for (const auto& rep : e.adapted_reports) {
            worst = std::max(worst, rep.folding_fraction);
            ++n;
        }
    }
    return {n > 0 && worst < 1e-3, fmt("%zu adapted test samples at G=32, max folding fraction %.2e", n, worst)};
}

// ---------------------------------------------------------------- 7

Outcome keypoint_detector() {
    const auto t0 = Clock::now();
    const KeypointConfig cfg;  // nms_radius 3 voxels at unit spacing
    const std::array<std::size_t, 3> dims{40, 40, 40};
    const double sigma = 2.0, margin = 8.0;
    std::size_t ok = 0;
    double worst_dist = 0.0;
    std::string failures;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng = Rng::stream(seed, "planted");
        std::vector<Vec3> centers;
        while (centers.size() < 5) {
            const Vec3 c(rng.uniform(margin, dims[0] - 1 - margin), rng.uniform(margin, dims[1] - 1 - margin),
                         rng.uniform(margin, dims[2] - 1 - margin));
            bool far = true;
            for (const Vec3& o : centers) far = far && (c - o).norm() > 2.0 * cfg.nms_radius;
            if (far) centers.push_back(c);
        }
        std::vector<double> v(dims[0] * dims[1] * dims[2], 0.0);
        for (std::size_t z = 0; z < dims[2]; ++z)
            for (std::size_t y = 0; y < dims[1]; ++y)
                for (std::size_t x = 0; x < dims[0]; ++x) {
                    const Vec3 p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
                    double acc = 0.0;
                    for (const Vec3& c : centers) acc += std::exp(-0.5 * (p - c).squaredNorm() / (sigma * sigma));
                    v[x + dims[0] * (y + dims[1] * z)] = acc;
                }
        const Volume vol(dims, Vec3::Ones(), std::move(v));
        const PointCloud kp = detect_keypoints(vol, cfg);
        const double unit = vol.normalized_unit();

        // Greedy one-to-one match of keypoints to bump centers.
        std::vector<bool> used(centers.size(), false);
        bool matched = kp.size() == centers.size();
        for (std::size_t i = 0; i < kp.size() && matched; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t bi = 0;
            for (std::size_t c = 0; c < centers.size(); ++c) {
                const double d = (kp[i] - vol.to_normalized(centers[c])).norm() * unit;
                if (!used[c] && d < best) {
                    best = d;
                    bi = c;
                }
            }
            worst_dist = std::max(worst_dist, best);
            matched = best <= 2.0;
            used[bi] = true;
        }
        if (matched) {
            ++ok;
        } else {
            failures += fmt(" seed %llu: %zu keypoints;", static_cast<unsigned long long>(seed), kp.size());
        }
    }
    const double secs = seconds_since(t0);
    return {ok == 20 && secs < 60.0,
            fmt("%zu/20 volumes with exactly 5 keypoints within 2 voxels (worst %.2f voxels), %.1f s", ok, worst_dist,
                secs) +
                failures};
}

// ---------------------------------------------------------------- 8

ExperimentConfig tiny_config(const fs::path& root) {
    ExperimentConfig cfg;
    cfg.seed = 5;
    cfg.jobs = 2;
    cfg.synth.n_source = 3;
    cfg.synth.n_target = 3;
    cfg.synth.n_test = 2;
    cfg.synth.volume.size = 64;
    cfg.model = small_model();
    cfg.train.epochs = 3;
    cfg.train.ramp_epochs = 2;
    cfg.eval_grid = 16;
    cfg.out = root.string();
    return cfg;
}

// gen-data -> train -> adapt -> infer -> eval, all written under `root`.
void run_pipeline(const fs::path& root) {
    const ExperimentConfig cfg = tiny_config(root);
    const Benchmark b = generate_benchmark(cfg.synth, cfg.seed, cfg.jobs);
    write_benchmark(root / "data", b);
    const Dataset source = read_dataset(root / "data" / "source");
    const Dataset target = read_dataset(root / "data" / "target");
    const Dataset test = read_dataset(root / "data" / "target_test");

    const TrainResult t = train_supervised(source.train_samples(), cfg.model, cfg.train_config());
    save_params(root / "model.params", t.params);
    write_log_csv(root / "train_log.csv", t.log);

    const AdaptResult a = adapt(source.train_samples(), target.train_samples(), cfg.model, cfg.train_config(),
                                load_params(root / "model.params", cfg.model.gcn));
    save_params(root / "model.student", a.student);
    save_params(root / "model.teacher", a.teacher);
    write_log_csv(root / "adapt_log.csv", a.log);

    const auto preds = predict(test, load_params(root / "model.teacher", cfg.model.gcn), cfg.model, cfg.jobs);
    write_predictions(root / "preds", test, preds);
    const auto reports = evaluate_predictions(test, preds, cfg.eval_grid, cfg.jobs);
    write_report_csv(root / "report.csv", reports);
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Outcome determinism() {
    const auto t0 = Clock::now();
    const fs::path base = testing::temp_dir("acceptance_determinism");
    run_pipeline(base / "a");
    run_pipeline(base / "b");

    std::size_t compared = 0;
    std::string diffs;
    for (const auto& entry : fs::recursive_directory_iterator(base / "a")) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), base / "a");
        ++compared;
        if (!fs::exists(base / "b" / rel) || file_bytes(entry.path()) != file_bytes(base / "b" / rel)) {
            diffs += " " + rel.string();
        }
    }
    const std::size_t in_b =
        static_cast<std::size_t>(std::count_if(fs::recursive_directory_iterator(base / "b"), fs::recursive_directory_iterator{},
                                               [](const fs::directory_entry& e) { return e.is_regular_file(); }));
    const bool pass = diffs.empty() && compared == in_b && compared > 0;
    return {pass, fmt("%zu files compared (checkpoints, logs, predictions, reports), %.1f s", compared,
                      seconds_since(t0)) +
                      (diffs.empty() ? "" : "; differing:" + diffs)};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    auto want = [&](int n) { return wanted.empty() || wanted.count(n) > 0; };

    int failures = 0;
    auto report = [&](int n, const char* name, const std::function<Outcome()>& f) {
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
        if (!o.pass) ++failures;
    };

    if (want(1)) report(1, "gradient integrity", gradient_integrity);
    if (want(2)) report(2, "LBP exactness on trees", lbp_trees);
    if (want(3)) report(3, "Mean Teacher mechanics", mean_teacher_mechanics);
    if (want(4)) report(4, "augmentation inversion", augmentation_inversion);
    if (want(5) || want(6)) {
        std::optional<ExperimentRun> run;
        std::string error;
        try {
            run = run_experiment();
        } catch (const std::exception& e) {
            error = e.what();
        }
        auto guarded = [&](Outcome (*f)(const ExperimentRun&)) {
            return [&, f]() -> Outcome {
                if (!run) return {false, "experiment failed: " + error};
                return f(*run);
            };
        };
        if (want(5)) report(5, "desk-scale adaptation experiment", guarded(adaptation_experiment));
        if (want(6)) report(6, "regularity", guarded(regularity));
    }
    if (want(7)) report(7, "keypoint detector", keypoint_detector);
    if (want(8)) report(8, "determinism", determinism);
    return failures == 0 ? 0 : 1;
}
