#include "mtreg/trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mtreg {

void AdaptConfig::validate() const {
    if (!(alpha_ema >= 0.0 && alpha_ema < 1.0)) throw std::invalid_argument("adapt: alpha_ema must be in [0, 1)");
    if (!(lambda0 >= 0.0)) throw std::invalid_argument("adapt: lambda0 must be non-negative");
    if (!(lr > 0.0)) throw std::invalid_argument("adapt: lr must be positive");
    if (ramp_epochs > epochs) throw std::invalid_argument("adapt: ramp_epochs must not exceed epochs");
    if (batch_source == 0 || batch_target == 0) throw std::invalid_argument("adapt: batch sizes must be positive");
    if (!(augmentation.scale.first > 0.0 && augmentation.scale.first <= augmentation.scale.second)) {
        throw std::invalid_argument("adapt: augmentation scale range must be positive and ordered");
    }
}

AdamState AdamState::for_params(const ModelParams& params) {
    AdamState s;
    for (const auto& e : params.entries()) {
        s.m.emplace_back(e.value.size(), 0.0);
        s.v.emplace_back(e.value.size(), 0.0);
    }
    return s;
}

ad::Tensor supervised_loss(const ad::Tensor& pred, const DisplacementField& gt) {
    return ad::l1_loss(pred, gt.to_tensor());
}

void ema_update(ModelParams& teacher, const ModelParams& student, double alpha) {
    if (!teacher.same_layout(student)) throw std::invalid_argument("ema_update: teacher and student layouts differ");
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        const auto t = teacher[i].value.values();
        const auto s = student[i].value.values();
        std::vector<double> out(t.size());
        for (std::size_t k = 0; k < t.size(); ++k) out[k] = alpha * t[k] + (1.0 - alpha) * s[k];
        teacher.set(i, ad::Tensor(teacher[i].value.shape(), std::move(out)));
    }
}

double lambda_schedule(double epoch, const AdaptConfig& cfg) {
    if (cfg.ramp_epochs == 0) return cfg.lambda0;
    const double phase = 1.0 - std::min(epoch / static_cast<double>(cfg.ramp_epochs), 1.0);
    return cfg.lambda0 * std::exp(-5.0 * phase * phase);
}

ad::Tensor consistency_loss(const TrainSample& sample, const ModelParams& student, const ModelParams& teacher,
                            const SimilarityTransform& student_aug, const SimilarityTransform& teacher_aug,
                            const ModelConfig& model) {
    const ad::Tensor pred_s = register_pair(apply_transform(sample.fixed, student_aug),
                                            apply_transform(sample.moving, student_aug), student, model.gcn, model.lbp);
    const ad::Tensor pred_t = register_pair(apply_transform(sample.fixed, teacher_aug),
                                            apply_transform(sample.moving, teacher_aug), teacher.detached(), model.gcn,
                                            model.lbp);
    return ad::l1_loss(invert_displacements(pred_s, student_aug), invert_displacements(pred_t, teacher_aug).detached());
}

ad::Tensor consistency_loss(const TrainSample& sample, const ModelParams& student, const ModelParams& teacher,
                            Rng& rng, const AugmentationRanges& ranges, const ModelConfig& model) {
    const SimilarityTransform t1 = sample_transform(rng, ranges);
    const SimilarityTransform t2 = sample_transform(rng, ranges);
    return consistency_loss(sample, student, teacher, t1, t2, model);
}

void adam_step(ModelParams& params, const std::vector<ad::Tensor>& grads, AdamState& state, double lr) {
    if (grads.size() != params.size() || state.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto p = params[i].value.values();
        const auto g = grads[i].values();
        if (grads[i].shape() != params[i].value.shape() || state.m[i].size() != p.size()) {
            throw std::invalid_argument("adam_step: shape mismatch for " + params[i].name);
        }
        std::vector<double> out(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
            state.m[i][k] = state.beta1 * state.m[i][k] + (1.0 - state.beta1) * g[k];
            state.v[i][k] = state.beta2 * state.v[i][k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = state.m[i][k] / bc1;
            const double vhat = state.v[i][k] / bc2;
            out[k] = p[k] - lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        params.set(i, ad::Tensor(params[i].value.shape(), std::move(out)));
    }
}

ModelParams initial_params(const ModelConfig& model, const AdaptConfig& cfg) {
    Rng rng = Rng::stream(cfg.seed, "init");
    return ModelParams::init(model.gcn, rng);
}

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

// Endless shuffled stream of sample indices, reshuffled after every pass.
class Sampler {
public:
    Sampler(std::size_t n, Rng rng) : order_(n), rng_(std::move(rng)) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        pos_ = n;
    }
    std::size_t next() {
        if (pos_ == order_.size()) {
            shuffle(order_, rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::vector<std::size_t> order_;
    Rng rng_;
    std::size_t pos_ = 0;
};

// Shared loop for supervised training and adaptation. `target` empty or
// lambda0 == 0 reduces to plain supervised training.
AdaptResult run_training(const std::vector<TrainSample>& source, const std::vector<TrainSample>& target,
                         const ModelConfig& model, const AdaptConfig& cfg, std::optional<ModelParams> init,
                         const EpochCallback& on_epoch) {
    cfg.validate();
    if (source.empty()) throw std::invalid_argument("training needs at least one labeled source sample");
    for (const auto& s : source) {
        if (!s.labeled()) throw std::invalid_argument("source sample " + s.id + " has no ground truth");
        if (s.gt->size() != s.fixed.size()) {
            throw std::invalid_argument("source sample " + s.id + ": ground truth size does not match fixed cloud");
        }
    }
    for (const auto& s : target) {
        if (s.labeled()) throw std::invalid_argument("target sample " + s.id + " must not carry ground truth");
    }

    ModelParams student = init ? init->detached() : initial_params(model, cfg);
    ModelParams teacher = student;
    AdamState adam = AdamState::for_params(student);

    Rng batch_rng = Rng::stream(cfg.seed, "batch");
    Rng aug_rng = Rng::stream(cfg.seed, "augment");
    std::optional<Sampler> target_sampler;
    if (!target.empty()) target_sampler.emplace(target.size(), Rng::stream(cfg.seed, "target-batch"));

    std::vector<std::size_t> order(source.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<EpochLog> log;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(order, batch_rng);
        const double lambda = target.empty() ? 0.0 : lambda_schedule(static_cast<double>(epoch), cfg);
        double sup_total = 0.0, con_total = 0.0;
        std::size_t batches = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_source) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_source);
            ad::Tape tape;
            const ModelParams watched = student.watch(tape);

            ad::Tensor l_sup = ad::Tensor::scalar(0.0);
            for (std::size_t b = start; b < stop; ++b) {
                const TrainSample& s = source[order[b]];
                l_sup = ad::add(l_sup, supervised_loss(register_pair(s.fixed, s.moving, watched, model.gcn, model.lbp), *s.gt));
            }
            l_sup = ad::scale(l_sup, 1.0 / static_cast<double>(stop - start));
            ad::Tensor total = l_sup;

            double l_con_value = 0.0;
            if (target_sampler && lambda > 0.0) {
                ad::Tensor l_con = ad::Tensor::scalar(0.0);
                for (std::size_t b = 0; b < cfg.batch_target; ++b) {
                    const TrainSample& t = target[target_sampler->next()];
                    l_con = ad::add(l_con, consistency_loss(t, watched, teacher, aug_rng, cfg.augmentation, model));
                }
                l_con = ad::scale(l_con, 1.0 / static_cast<double>(cfg.batch_target));
                l_con_value = l_con.item();
                total = ad::add(total, ad::scale(l_con, lambda));
            }

            const ad::Gradients grads = tape.backward(total);
            std::vector<ad::Tensor> g;
            g.reserve(watched.size());
            for (const auto& e : watched.entries()) g.push_back(grads.of(e.value));
            adam_step(student, g, adam, cfg.lr);
            ema_update(teacher, student, cfg.alpha_ema);

            sup_total += l_sup.item();
            con_total += l_con_value;
            ++batches;
        }
        const EpochLog entry{epoch, sup_total / static_cast<double>(batches), con_total / static_cast<double>(batches),
                             lambda, cfg.lr};
        log.push_back(entry);
        if (on_epoch) on_epoch(entry);
    }
    return AdaptResult{std::move(student), std::move(teacher), std::move(log)};
}

}  // namespace

TrainResult train_supervised(const std::vector<TrainSample>& source, const ModelConfig& model, const AdaptConfig& cfg,
                             std::optional<ModelParams> init, const EpochCallback& on_epoch) {
    AdaptResult r = run_training(source, {}, model, cfg, std::move(init), on_epoch);
    return TrainResult{std::move(r.student), std::move(r.log)};
}

AdaptResult adapt(const std::vector<TrainSample>& source, const std::vector<TrainSample>& target,
                  const ModelConfig& model, const AdaptConfig& cfg, std::optional<ModelParams> init,
                  const EpochCallback& on_epoch) {
    if (target.empty()) throw std::invalid_argument("adaptation needs at least one unlabeled target sample");
    return run_training(source, target, model, cfg, std::move(init), on_epoch);
}

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch,L_sup,L_con,lambda,lr\n";
    char buf[32];
    auto put = [&](double x) {
        const auto res = std::to_chars(buf, buf + sizeof buf, x);
        out.write(buf, res.ptr - buf);
    };
    for (const auto& e : log) {
        out << e.epoch << ',';
        put(e.l_sup);
        out << ',';
        put(e.l_con);
        out << ',';
        put(e.lambda);
        out << ',';
        put(e.lr);
        out << '\n';
    }
    if (!out) throw std::runtime_error("error writing " + path.string());
}

}  // namespace mtreg
