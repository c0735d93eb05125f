#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mtreg/config.hpp"
#include "support.hpp"

#include <fstream>

using namespace mtreg;
using nlohmann::json;

namespace {

std::string error_of(const json& j) {
    try {
        config_from_json(j);
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("defaults") {
    const ExperimentConfig cfg = config_from_json(json::object());
    cfg.validate();
    CHECK(cfg.seed == 0);
    CHECK(cfg.jobs == 1);
    CHECK(cfg.train.epochs == 100);
    CHECK(cfg.train.ramp_epochs == 20);
    CHECK(cfg.train.alpha_ema == 0.98);
    CHECK(cfg.train.lr == 0.01);
    CHECK(cfg.model.lbp.n_candidates == 16);
    CHECK(cfg.synth.n_source == 10);
    CHECK(cfg.synth.n_target == 12);
    CHECK(cfg.eval_grid == 32);
}

TEST_CASE("nested values are read") {
    const json j = json::parse(R"({
        "seed": 7,
        "train": {"epochs": 5, "ramp_epochs": 2, "augmentation": {"scale": [0.95, 1.05]}},
        "model": {"gcn": {"layer_dims": [3, 16]}, "lbp": {"damping": 0.25}},
        "synth": {"target": {"crop": 0.3, "recenter": true}},
        "paths": {"checkpoint": "m.params"}
    })");
    const ExperimentConfig cfg = config_from_json(j);
    CHECK(cfg.seed == 7);
    CHECK(cfg.train.epochs == 5);
    CHECK(cfg.train.augmentation.scale == std::pair{0.95, 1.05});
    CHECK(cfg.train.augmentation.rotation_deg == 10.0);
    CHECK(cfg.model.gcn.layer_dims == std::vector<std::size_t>{3, 16});
    CHECK(cfg.model.lbp.damping == 0.25);
    CHECK(cfg.synth.target.crop == 0.3);
    CHECK(cfg.synth.target.recenter);
    CHECK(cfg.paths.checkpoint == "m.params");
    CHECK(cfg.train_config().seed == 7);
}

TEST_CASE("unknown keys are rejected with their path") {
    CHECK(error_of(json{{"bogus", 1}}) == "config: bogus: unknown key");
    CHECK(error_of(json::parse(R"({"train": {"augmentation": {"shear": 1}}})")) ==
          "config: train.augmentation.shear: unknown key");
    CHECK(error_of(json::parse(R"({"model": {"lbp": {"tau": 0.5}}})")) == "config: model.lbp.tau: unknown key");
}

TEST_CASE("type and range errors") {
    CHECK(error_of(json{{"seed", -1}}).find("seed: expected a non-negative integer") != std::string::npos);
    CHECK(error_of(json{{"out", 3}}).find("out: expected a string") != std::string::npos);
    CHECK(error_of(json::parse(R"({"train": {"augmentation": {"scale": [1.0]}}})"))
              .find("train.augmentation.scale: expected a two-element array") != std::string::npos);
    CHECK(error_of(json::parse(R"({"model": {"gcn": {"layer_dims": [3, "a"]}}})"))
              .find("model.gcn.layer_dims[1]") != std::string::npos);
    CHECK(error_of(json{{"paths", 1}}).find("paths: expected an object") != std::string::npos);
    CHECK(error_of(json::array()).find("expected an object") != std::string::npos);

    CHECK_FALSE(error_of(json::parse(R"({"train": {"epochs": 10, "ramp_epochs": 20}})")).empty());
    CHECK_FALSE(error_of(json::parse(R"({"model": {"lbp": {"damping": 1.0}}})")).empty());
    CHECK_FALSE(error_of(json{{"jobs", 0}}).empty());
    CHECK_FALSE(error_of(json{{"eval_grid", 4}}).empty());
    CHECK_FALSE(error_of(json::parse(R"({"synth": {"target": {"crop": 1.0}}})")).empty());
}

TEST_CASE("round trip") {
    ExperimentConfig cfg;
    cfg.seed = 3;
    cfg.train.lr = 0.005;
    cfg.model.gcn.layer_dims = {3, 8, 8};
    cfg.synth.target.recenter = true;
    cfg.paths.predictions = "preds";
    const json j = config_to_json(cfg);
    CHECK(config_to_json(config_from_json(j)) == j);
    CHECK(j["train"]["lr"] == 0.005);
    CHECK(j["synth"]["deformation"]["amplitude"] == json::array({0.05, 0.15}));
}

TEST_CASE("files and overrides") {
    const auto dir = testing::temp_dir("config");
    std::ofstream(dir / "c.json") << R"({"seed": 4, "jobs": 2, "out": "a"})";
    ExperimentConfig cfg = load_config(dir / "c.json");
    CHECK(cfg.seed == 4);

    apply_overrides(cfg, ConfigOverrides{});
    CHECK(cfg.seed == 4);
    CHECK(cfg.out == "a");
    apply_overrides(cfg, ConfigOverrides{9, 3, "b"});
    CHECK(cfg.seed == 9);
    CHECK(cfg.jobs == 3);
    CHECK(cfg.out == "b");
    CHECK_THROWS_AS(apply_overrides(cfg, ConfigOverrides{std::nullopt, 0, std::nullopt}), std::invalid_argument);

    std::ofstream(dir / "broken.json") << "{\"seed\": ";
    CHECK_THROWS_AS(load_config(dir / "broken.json"), std::invalid_argument);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), std::runtime_error);
}
