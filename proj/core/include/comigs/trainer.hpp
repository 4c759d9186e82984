#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "comigs/model.hpp"
#include "comigs/rng.hpp"

namespace comigs {

struct TrainerConfig {
    double expert_lr = 5e-3;   // peak of the one-cycle schedule
    double router_lr = 0.02;   // constant
    std::size_t tau = 30;      // router update period, in expert iterations
    std::size_t router_steps = 10;  // gradient steps per router update
    double lb_weight = 0.01;        // lambda
    std::size_t batch_size = 4;     // windows per step
    LoadBalanceMode lb_mode = LoadBalanceMode::GeneralistFavored;
    bool router_on_train = false;   // update routers on fresh training batches
    std::size_t total_expert_steps = 200;  // one-cycle horizon

    void validate() const;
};

/// One-cycle schedule: linear warmup from 0.1*peak to peak over the first
/// 10% of steps, cosine decay back to 0.1*peak over the rest.
double one_cycle_lr(std::size_t step, std::size_t total_steps, double peak_lr);

/// The two sides of the alternating objective. Implementations sample
/// their own batches from the given stream; `training_loss` must include
/// every term the expert step minimizes (language loss + weighted load
/// balance), likewise `validation_loss` for the router step.
class BilevelProblem {
public:
    virtual ~BilevelProblem() = default;
    virtual Tensor training_loss(Tape& tape, Rng& rng) = 0;
    virtual Tensor validation_loss(Tape& tape, Rng& rng) = 0;
    /// Read-only validation estimate for logging; must leave all sampling
    /// state untouched so that logging never perturbs a run.
    virtual double validation_monitor(Rng& rng);
    virtual std::vector<NamedParam> expert_params() = 0;   // Theta
    virtual std::vector<NamedParam> router_params() = 0;   // Phi
    /// Mean generalist gate score per routed layer on the last loss
    /// evaluation; empty when the problem has no routers.
    virtual std::vector<double> layer_generalist_scores() const { return {}; }
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t t = 0;

    void ensure(const std::vector<NamedParam>& params);
    /// Applies one Adam step to `params` only; gradients for all other
    /// tape nodes are simply never read (parameter freezing).
    void step(const std::vector<NamedParam>& params, const GradientMap& grads, double lr);
};

struct BilevelState {
    std::size_t iteration = 0;  // global expert-step counter, persists across rounds
    AdamState expert_opt;
    AdamState router_opt;
};

struct IterationRow {
    std::size_t iteration;
    double train_loss;
    double valid_loss;
    std::vector<double> generalist_scores;  // per routed layer
};

/// One optimizer step on the training loss w.r.t. expert parameters only.
/// Routers are frozen: their gradients are discarded, buffers untouched.
double expert_step(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg, Rng& rng);

/// `s` optimizer steps on the validation loss w.r.t. router parameters
/// only; experts are frozen. Returns the last loss (NaN when s == 0).
double router_step(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg, Rng& rng);

/// Runs `iterations` expert steps; after each step where the global
/// iteration counter divides tau, performs a router update. Appends one
/// row per iteration to `log` when given.
void local_train(BilevelProblem& prob, BilevelState& state, const TrainerConfig& cfg,
                 std::size_t iterations, Rng& rng, std::vector<IterationRow>* log = nullptr);

/// Adapts a TinyLM client to the bilevel interface. Training batches are
/// sampled uniformly from the train stream; validation batches cycle
/// through the validation stream.
class LmBilevelProblem : public BilevelProblem {
public:
    LmBilevelProblem(TinyLM& model, std::vector<int> train_stream, std::vector<int> valid_stream,
                     const TrainerConfig& cfg);

    Tensor training_loss(Tape& tape, Rng& rng) override;
    Tensor validation_loss(Tape& tape, Rng& rng) override;
    double validation_monitor(Rng& rng) override;
    std::vector<NamedParam> expert_params() override;
    std::vector<NamedParam> router_params() override;
    std::vector<double> layer_generalist_scores() const override { return last_scores_; }

    TinyLM& model() { return model_; }

private:
    Tensor batch_loss(Tape& tape, std::span<const int> stream, Rng& rng, bool cyclic);

    TinyLM& model_;
    std::vector<int> train_;
    std::vector<int> valid_;
    TrainerConfig cfg_;
    std::size_t valid_cursor_ = 0;
    std::vector<double> last_scores_;
};

}  // namespace comigs
