#include "mtreg/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>
#include <type_traits>
#include <utility>
#include <vector>

namespace mtreg {

using nlohmann::json;

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed and count fields share one reader");

template <class T>
struct is_pair : std::false_type {};
template <class A, class B>
struct is_pair<std::pair<A, B>> : std::true_type {};

template <class T>
struct is_vector : std::false_type {};
template <class A>
struct is_vector<std::vector<A>> : std::true_type {};

// Each config struct lists its fields once; the same list drives parsing
// and serialization.
template <class V> void fields(V& v, GcnConfig& c) {
    v("layer_dims", c.layer_dims);
    v("feature_dim", c.feature_dim);
    v("knn_k", c.knn_k);
    v("leaky_slope", c.leaky_slope);
}
template <class V> void fields(V& v, LbpConfig& c) {
    v("n_candidates", c.n_candidates);
    v("n_iters", c.n_iters);
    v("alpha_reg", c.alpha_reg);
    v("temperature", c.temperature);
    v("damping", c.damping);
    v("graph_k", c.graph_k);
}
template <class V> void fields(V& v, ModelConfig& c) {
    v("gcn", c.gcn);
    v("lbp", c.lbp);
}
template <class V> void fields(V& v, AugmentationRanges& c) {
    v("rotation_deg", c.rotation_deg);
    v("scale", c.scale);
    v("translation", c.translation);
}
template <class V> void fields(V& v, AdaptConfig& c) {
    v("lambda0", c.lambda0);
    v("alpha_ema", c.alpha_ema);
    v("ramp_epochs", c.ramp_epochs);
    v("epochs", c.epochs);
    v("lr", c.lr);
    v("batch_source", c.batch_source);
    v("batch_target", c.batch_target);
    v("augmentation", c.augmentation);
}
template <class V> void fields(V& v, DeformationModel& c) {
    v("n_basis", c.n_basis);
    v("amplitude", c.amplitude);
    v("bandwidth", c.bandwidth);
    v("max_retries", c.max_retries);
    v("check_grid", c.check_grid);
}
template <class V> void fields(V& v, DomainSpec& c) {
    v("crop", c.crop);
    v("deform_scale", c.deform_scale);
    v("recenter", c.recenter);
}
template <class V> void fields(V& v, PairOptions& c) {
    v("dropout", c.dropout);
    v("jitter", c.jitter);
    v("n_landmarks", c.n_landmarks);
    v("min_points", c.min_points);
}
template <class V> void fields(V& v, VolumeModel& c) {
    v("size", c.size);
    v("spacing_mm", c.spacing_mm);
    v("texture_sigma", c.texture_sigma);
    v("radius", c.radius);
}
template <class V> void fields(V& v, KeypointConfig& c) {
    v("sigma_grad", c.sigma_grad);
    v("sigma_window", c.sigma_window);
    v("nms_radius", c.nms_radius);
    v("max_points", c.max_points);
    v("epsilon", c.epsilon);
    v("min_score_ratio", c.min_score_ratio);
}
template <class V> void fields(V& v, SynthConfig& c) {
    v("n_source", c.n_source);
    v("n_target", c.n_target);
    v("n_test", c.n_test);
    v("volume", c.volume);
    v("keypoints", c.keypoints);
    v("deformation", c.deformation);
    v("source", c.source);
    v("target", c.target);
    v("pair", c.pair);
}
template <class V> void fields(V& v, PathConfig& c) {
    v("train_source", c.train_source);
    v("train_target", c.train_target);
    v("eval_data", c.eval_data);
    v("checkpoint", c.checkpoint);
    v("init_checkpoint", c.init_checkpoint);
    v("predictions", c.predictions);
}
template <class V> void fields(V& v, ExperimentConfig& c) {
    v("seed", c.seed);
    v("jobs", c.jobs);
    v("out", c.out);
    v("paths", c.paths);
    v("synth", c.synth);
    v("model", c.model);
    v("train", c.train);
    v("eval_grid", c.eval_grid);
}

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
    throw std::invalid_argument("config: " + (where.empty() ? std::string("<root>") : where) + ": " + msg);
}

class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) fail(where_, "expected an object");
    }

    template <class T>
    void operator()(const char* key, T& field) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        read(*it, child(key), field);
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) fail(child(key), "unknown key");
        }
    }

private:
    std::string child(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    static void read(const json& j, const std::string& where, bool& out) {
        if (!j.is_boolean()) fail(where, "expected a boolean");
        out = j.get<bool>();
    }
    static void read(const json& j, const std::string& where, double& out) {
        if (!j.is_number()) fail(where, "expected a number");
        out = j.get<double>();
    }
    static void read(const json& j, const std::string& where, std::size_t& out) {
        if (!j.is_number_unsigned()) fail(where, "expected a non-negative integer");
        out = j.get<std::size_t>();
    }
    static void read(const json& j, const std::string& where, std::string& out) {
        if (!j.is_string()) fail(where, "expected a string");
        out = j.get<std::string>();
    }
    template <class A, class B>
    static void read(const json& j, const std::string& where, std::pair<A, B>& out) {
        if (!j.is_array() || j.size() != 2) fail(where, "expected a two-element array");
        read(j[0], where + "[0]", out.first);
        read(j[1], where + "[1]", out.second);
    }
    template <class A>
    static void read(const json& j, const std::string& where, std::vector<A>& out) {
        if (!j.is_array()) fail(where, "expected an array");
        std::vector<A> v(j.size());
        for (std::size_t i = 0; i < j.size(); ++i) read(j[i], where + "[" + std::to_string(i) + "]", v[i]);
        out = std::move(v);
    }
    template <class T>
        requires std::is_class_v<T> && (!is_pair<T>::value) && (!is_vector<T>::value)
    static void read(const json& j, const std::string& where, T& out) {
        Reader sub(j, where);
        fields(sub, out);
        sub.finish();
    }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

class Writer {
public:
    explicit Writer(json& j) : j_(j) { j_ = json::object(); }

    template <class T>
    void operator()(const char* key, T& field) {
        j_[key] = write(field);
    }

private:
    template <class T>
    static json write(T& v) {
        if constexpr (is_pair<T>::value) {
            return json::array({v.first, v.second});
        } else if constexpr (is_vector<T>::value || std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
            return json(v);
        } else {
            json sub;
            Writer w(sub);
            fields(w, v);
            return sub;
        }
    }

    json& j_;
};

}  // namespace

void ExperimentConfig::validate() const {
    model.gcn.validate();
    model.lbp.validate();
    train.validate();
    synth.source.validate();
    synth.target.validate();
    if (jobs == 0) throw std::invalid_argument("config: jobs must be at least 1");
    if (eval_grid < 8) throw std::invalid_argument("config: eval_grid must be at least 8");
    if (synth.volume.size < 8) throw std::invalid_argument("config: synth.volume.size must be at least 8");
    if (!(synth.pair.dropout >= 0.0 && synth.pair.dropout < 1.0)) {
        throw std::invalid_argument("config: synth.pair.dropout must be in [0, 1)");
    }
    if (!(synth.pair.jitter >= 0.0)) throw std::invalid_argument("config: synth.pair.jitter must be non-negative");
    if (model.lbp.graph_k == 0 || model.gcn.knn_k == 0) throw std::invalid_argument("config: knn sizes must be positive");
}

AdaptConfig ExperimentConfig::train_config() const {
    AdaptConfig c = train;
    c.seed = seed;
    return c;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    Reader r(j, "");
    fields(r, cfg);
    r.finish();
    cfg.validate();
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    ExperimentConfig copy = cfg;
    json j;
    Writer w(j);
    fields(w, copy);
    return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void apply_overrides(ExperimentConfig& cfg, const ConfigOverrides& o) {
    if (o.seed) cfg.seed = *o.seed;
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.out) cfg.out = *o.out;
    cfg.validate();
}

}  // namespace mtreg
