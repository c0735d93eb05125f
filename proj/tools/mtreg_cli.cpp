// Command-line front end: gen-data, train, adapt, infer, eval.

#include "mtreg/config.hpp"
#include "mtreg/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace mtreg;

namespace {

struct Options {
    std::string config;
    ConfigOverrides overrides;
};

ExperimentConfig resolve(const Options& opt) {
    ExperimentConfig cfg = opt.config.empty() ? ExperimentConfig{} : load_config(opt.config);
    apply_overrides(cfg, opt.overrides);
    return cfg;
}

void save_config(const fs::path& dir, const ExperimentConfig& cfg) {
    fs::create_directories(dir);
    std::ofstream out(dir / "config.json");
    out << config_to_json(cfg).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
}

std::optional<ModelParams> warm_start(const ExperimentConfig& cfg) {
    if (cfg.paths.init_checkpoint.empty()) return std::nullopt;
    return load_params(cfg.paths.init_checkpoint, cfg.model.gcn);
}

void print_epoch(const EpochLog& e) {
    std::printf("epoch %4zu  L_sup %.6f  L_con %.6f  lambda %.4f\n", e.epoch, e.l_sup, e.l_con, e.lambda);
    std::fflush(stdout);
}

int cmd_gen_data(const ExperimentConfig& cfg) {
    const Benchmark b = generate_benchmark(cfg.synth, cfg.seed, cfg.jobs);
    write_benchmark(cfg.out, b);
    save_config(cfg.out, cfg);
    std::printf("wrote %s: %zu source, %zu target, %zu target_labeled, %zu source_test, %zu target_test samples\n",
                cfg.out.c_str(), b.source.samples.size(), b.target.samples.size(), b.target_labeled.samples.size(),
                b.source_test.samples.size(), b.target_test.samples.size());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    const Dataset source = read_dataset(cfg.paths.train_source);
    const TrainResult r = train_supervised(source.train_samples(), cfg.model, cfg.train_config(), warm_start(cfg), print_epoch);
    const fs::path out = cfg.out;
    fs::create_directories(out);
    save_params(out / "model.params", r.params);
    write_log_csv(out / "train_log.csv", r.log);
    save_config(out, cfg);
    std::printf("wrote %s\n", (out / "model.params").c_str());
    return 0;
}

int cmd_adapt(const ExperimentConfig& cfg) {
    const Dataset source = read_dataset(cfg.paths.train_source);
    const Dataset target = read_dataset(cfg.paths.train_target);
    const AdaptResult r =
        adapt(source.train_samples(), target.train_samples(), cfg.model, cfg.train_config(), warm_start(cfg), print_epoch);
    const fs::path out = cfg.out;
    fs::create_directories(out);
    save_params(out / "model.student", r.student);
    save_params(out / "model.teacher", r.teacher);
    write_log_csv(out / "adapt_log.csv", r.log);
    save_config(out, cfg);
    std::printf("wrote %s and %s\n", (out / "model.student").c_str(), (out / "model.teacher").c_str());
    return 0;
}

int cmd_infer(const ExperimentConfig& cfg) {
    const Dataset ds = read_dataset(cfg.paths.eval_data);
    const ModelParams params = load_params(cfg.paths.checkpoint, cfg.model.gcn);
    write_predictions(cfg.out, ds, predict(ds, params, cfg.model, cfg.jobs));
    std::printf("wrote %zu predictions to %s\n", ds.samples.size(), cfg.out.c_str());
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg) {
    const Dataset ds = read_dataset(cfg.paths.eval_data);
    std::vector<DisplacementField> preds;
    if (!cfg.paths.predictions.empty()) {
        preds = read_predictions(cfg.paths.predictions, ds);
    } else {
        preds = predict(ds, load_params(cfg.paths.checkpoint, cfg.model.gcn), cfg.model, cfg.jobs);
    }
    const std::vector<EvalReport> reports = evaluate_predictions(ds, preds, cfg.eval_grid, cfg.jobs);
    const fs::path out = cfg.out;
    fs::create_directories(out);
    write_report_csv(out / "report.csv", reports);
    write_report_json(out / "report.json", reports, ds.unit_mm);
    double initial = 0.0, folding = 0.0;
    for (const auto& r : reports) {
        initial += r.tre_initial;
        folding = std::max(folding, r.folding_fraction);
    }
    initial /= static_cast<double>(reports.size());
    const double tre = mean_tre(reports);
    std::printf("%zu samples  TRE %.3f mm (initial %.3f mm)  max folding fraction %.2e\n", reports.size(),
                tre * ds.unit_mm, initial * ds.unit_mm, folding);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Keypoint registration with Mean Teacher domain adaptation"};
    app.require_subcommand(1);

    Options opt;
    auto add_common = [&](CLI::App* sub, const char* out_help) {
        sub->add_option("--config", opt.config, "JSON experiment config")->check(CLI::ExistingFile);
        sub->add_option("--out", opt.overrides.out, out_help);
        sub->add_option("--seed", opt.overrides.seed, "Top-level random seed");
        sub->add_option("--jobs", opt.overrides.jobs, "Worker threads for data generation, inference and evaluation")
            ->check(CLI::PositiveNumber);
    };

    struct Command {
        const char* name;
        const char* help;
        const char* out_help;
        int (*run)(const ExperimentConfig&);
    };
    const Command commands[] = {
        {"gen-data", "Generate the synthetic source/target benchmark", "Dataset root directory", cmd_gen_data},
        {"train", "Supervised training on labeled source data", "Output directory for checkpoint and log", cmd_train},
        {"adapt", "Mean Teacher adaptation to unlabeled target data", "Output directory for checkpoints and log",
         cmd_adapt},
        {"infer", "Predict displacements for a dataset", "Output directory for predictions", cmd_infer},
        {"eval", "Evaluate TRE and folding on a labeled dataset", "Output directory for reports", cmd_eval},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const Command& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, c.out_help);
        subs.emplace_back(sub, &c);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = resolve(opt);
        for (const auto& [sub, cmd] : subs) {
            if (sub->parsed()) return cmd->run(cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
