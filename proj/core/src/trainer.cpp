#include "comigs/trainer.hpp"

#include <cmath>
#include <limits>

namespace comigs {

void TrainerConfig::validate() const {
    if (tau < 1) throw ConfigError("trainer: tau must be >= 1");
    if (lb_weight < 0.0) throw ConfigError("trainer: lb_weight must be >= 0");
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    if (expert_lr <= 0.0 || router_lr <= 0.0) throw ConfigError("trainer: learning rates must be positive");
}

double one_cycle_lr(std::size_t step, std::size_t total_steps, double peak_lr) {
    if (step > total_steps)
        throw std::invalid_argument("one_cycle_lr: step beyond total_steps");
    if (total_steps == 0) return peak_lr;
    const double floor = 0.1 * peak_lr;
    const double warmup = 0.1 * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s <= warmup && warmup > 0.0) {
        return floor + (peak_lr - floor) * (s / warmup);
    }
    const double progress = (s - warmup) / (static_cast<double>(total_steps) - warmup);
    return floor + (peak_lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void AdamState::ensure(const std::vector<NamedParam>& params) {
    if (!m.empty()) return;
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].tensor->size(), 0.0);
        v[i].assign(params[i].tensor->size(), 0.0);
    }
}

void AdamState::step(const std::vector<NamedParam>& params, const GradientMap& grads, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ensure(params);
    ++t;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor g = grads.grad(*params[i].tensor);
        std::vector<double>& pd = *params[i].tensor->data;
        for (std::size_t k = 0; k < pd.size(); ++k) {
            const double gk = (*g.data)[k];
            m[i][k] = b1 * m[i][k] + (1.0 - b1) * gk;
            v[i][k] = b2 * v[i][k] + (1.0 - b2) * gk * gk;
            pd[k] -= lr * (m[i][k] / bc1) / (std::sqrt(v[i][k] / bc2) + eps);
        }
    }
}

double expert_step(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg, Rng& rng) {
    Tape tape;
    Tensor loss = prob.training_loss(tape, rng);
    const double val = loss.value();
    if (!std::isfinite(val))
        throw NumericError("expert_step: non-finite training loss at iteration " +
                           std::to_string(state.iteration) + " (value " + std::to_string(val) + ")");
    GradientMap grads = tape.backward(loss);
    const double lr = one_cycle_lr(std::min(state.iteration, cfg.total_expert_steps),
                                   cfg.total_expert_steps, cfg.expert_lr);
    state.expert_opt.step(prob.expert_params(), grads, lr);
    return val;
}

double router_step(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg, Rng& rng) {
    std::vector<NamedParam> phi = prob.router_params();
    if (phi.empty()) return std::numeric_limits<double>::quiet_NaN();
    double last = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t s = 0; s < cfg.router_steps; ++s) {
        Tape tape;
        Tensor loss = prob.validation_loss(tape, rng);
        last = loss.value();
        if (!std::isfinite(last))
            throw NumericError("router_step: non-finite validation loss at iteration " +
                               std::to_string(state.iteration));
        GradientMap grads = tape.backward(loss);
        state.router_opt.step(phi, grads, cfg.router_lr);
    }
    return last;
}

double BilevelProblem::validation_monitor(Rng& rng) {
    Tape eval(false);
    return validation_loss(eval, rng).value();
}

void local_train(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg,
                 std::size_t iterations, Rng& rng, std::vector<IterationRow>* log) {
    cfg.validate();
    const bool has_router = !prob.router_params().empty();
    for (std::size_t it = 0; it < iterations; ++it) {
        const double train_loss = expert_step(prob, state, cfg, rng);
        ++state.iteration;
        double valid_loss = std::numeric_limits<double>::quiet_NaN();
        if (has_router && state.iteration % cfg.tau == 0) {
            valid_loss = router_step(prob, state, cfg, rng);
        } else if (log) {
            valid_loss = prob.validation_monitor(rng);
        }
        if (log)
            log->push_back(IterationRow{state.iteration, train_loss, valid_loss,
                                        prob.layer_generalist_scores()});
    }
}

// ---------------------------------------------------------------------------
// LmBilevelProblem

LmBilevelProblem::LmBilevelProblem(TinyLM& model, std::vector<int> train_stream,
                                   std::vector<int> valid_stream, const TrainerConfig& cfg)
    : model_(model), train_(std::move(train_stream)), valid_(std::move(valid_stream)), cfg_(cfg) {
    const std::size_t need = model_.config().context + 1;
    if (train_.size() < need || valid_.size() < need)
        throw ConfigError("bilevel problem: streams shorter than one context window");
}

Tensor LmBilevelProblem::batch_loss(Tape& tape, std::span<const int> stream, Rng& rng,
                                    bool cyclic) {
    const std::size_t c = model_.config().context;
    std::vector<std::vector<int>> windows(cfg_.batch_size), targets(cfg_.batch_size);
    for (std::size_t w = 0; w < cfg_.batch_size; ++w) {
        std::size_t start;
        if (cyclic) {
            start = valid_cursor_;
            valid_cursor_ = (valid_cursor_ + c) % (stream.size() - c - 1);
        } else {
            start = rng.uniform_int(stream.size() - c - 1);
        }
        windows[w].assign(stream.begin() + start, stream.begin() + start + c);
        targets[w].assign(stream.begin() + start + 1, stream.begin() + start + c + 1);
    }
    LmLoss ll = lm_loss(tape, model_, windows, targets);

    last_scores_.clear();
    for (const RoutingRecord& r : ll.records)
        last_scores_.push_back(expert_score_summary({r})[0]);

    if (ll.records.empty() || cfg_.lb_weight == 0.0) return ll.loss;
    Tensor lb = load_balance_loss(tape, ll.records[0], cfg_.lb_mode);
    for (std::size_t i = 1; i < ll.records.size(); ++i)
        lb = tape.add(lb, load_balance_loss(tape, ll.records[i], cfg_.lb_mode));
    lb = tape.scale(lb, 1.0 / static_cast<double>(ll.records.size()));
    return tape.add(ll.loss, tape.scale(lb, cfg_.lb_weight));
}

Tensor LmBilevelProblem::training_loss(Tape& tape, Rng& rng) {
    for (NamedParam& p : model_.parameters()) tape.watch(*p.tensor);
    return batch_loss(tape, train_, rng, /*cyclic=*/false);
}

Tensor LmBilevelProblem::validation_loss(Tape& tape, Rng& rng) {
    for (NamedParam& p : model_.parameters()) tape.watch(*p.tensor);
    if (cfg_.router_on_train) return batch_loss(tape, train_, rng, /*cyclic=*/false);
    return batch_loss(tape, valid_, rng, /*cyclic=*/true);
}

double LmBilevelProblem::validation_monitor(Rng&) {
    // Fixed probe batch from the front of the validation stream; leaves the
    // cyclic cursor and the rng untouched.
    const std::size_t saved_cursor = valid_cursor_;
    valid_cursor_ = 0;
    Tape eval(false);
    Rng probe(0);
    Tensor loss = batch_loss(eval, valid_, probe, /*cyclic=*/true);
    valid_cursor_ = saved_cursor;
    return loss.value();
}

std::vector<NamedParam> LmBilevelProblem::expert_params() {
    std::vector<NamedParam> out = model_.parameters(ParamRole::Generalist);
    for (NamedParam& p : model_.parameters(ParamRole::Specialist)) out.push_back(p);
    return out;
}

std::vector<NamedParam> LmBilevelProblem::router_params() {
    return model_.parameters(ParamRole::Router);
}

}  // namespace comigs
