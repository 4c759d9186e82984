#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "comigs/data_synth.hpp"
#include "comigs/model.hpp"
#include "comigs/trainer.hpp"

namespace comigs {

enum class Method {
    Pretrained,
    Centralized,
    Local,
    FedAvg,
    Comigs2G,
    Comigs2S,
    Comigs1G1S,
    Comigs1GXS,
};

Method method_from_string(const std::string& s);
std::string method_to_string(Method m);
bool method_aggregates(Method m);
bool method_trains(Method m);
bool method_has_router(Method m);

struct FederationConfig {
    std::size_t n_clients = 4;
    std::vector<std::size_t> experts_per_client = {2, 2, 2, 2};
    Method method = Method::Comigs1G1S;
    std::size_t rounds = 20;
    std::size_t local_iters = 10;
    TrainerConfig trainer;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    bool final_aggregate_eval = true;

    void validate() const;
};

struct PretrainConfig {
    std::size_t steps = 20;
    double lr = 3e-3;
    std::size_t batch_windows = 16;
};

/// One simulated device: its model, data, and optimizer state.
struct ClientState {
    std::unique_ptr<TinyLM> model;
    std::unique_ptr<LmBilevelProblem> problem;
    BilevelState bilevel;
    std::vector<int> test_stream;
};

/// In-process stand-in for the trusted server. Records every tensor name
/// and size that crosses it, so tests can assert that no specialist or
/// router bytes ever leave a client.
class AggregationChannel {
public:
    struct Upload {
        std::string name;
        std::size_t scalars;
    };
    const std::vector<Upload>& upload_log() const { return log_; }
    std::uint64_t scalars_per_client() const { return scalars_per_client_; }
    void note_round(const std::vector<Upload>& uploads, std::uint64_t scalars);

private:
    std::vector<Upload> log_;
    std::uint64_t scalars_per_client_ = 0;
};

/// Uniform elementwise mean of every Generalist-role parameter across
/// clients; the mean replaces each client's copy. Specialists and routers
/// are untouched. Shapes must agree or this throws.
void aggregate_generalists(std::vector<ClientState>& clients, AggregationChannel* channel);

struct RoundMetrics {
    std::size_t round = 0;  // 0 = pretrained evaluation, rounds+1 = final post-aggregation
    std::vector<double> test_ppl;                            // per client
    std::vector<std::vector<std::vector<double>>> expert_scores;  // client -> layer -> expert
    std::vector<std::uint64_t> bytes_up, bytes_down;         // per client
};

struct CommCost {
    std::uint64_t params_exchanged = 0;   // per client per round
    std::uint64_t comigs_bytes = 0;       // up + down, 2 bytes per scalar
    std::uint64_t fedavg_matched_bytes = 0;
    double ratio = 0.0;
};

/// Byte accounting by parameter counting against a parameter-matched
/// FedAvg reference (two LoRA adapter sets per linear, everything
/// exchanged). bfloat16 accounting: 2 bytes per scalar, up and down.
CommCost comm_bytes_per_round(const ModelConfig& model_cfg, Method method, std::size_t n_experts);

struct TokenRouting {
    int token;
    int layer;
    int top1_expert;
};

struct ExperimentResult {
    std::vector<RoundMetrics> rounds;
    std::vector<std::vector<IterationRow>> train_log;       // per client
    std::vector<std::vector<TokenRouting>> routing_dump;    // per client, final model
    AggregationChannel channel;
    std::vector<std::unique_ptr<TinyLM>> final_models;      // one (centralized) or one per client
};

/// Model layout implied by a method: gating mode, expert count and the
/// generalist/specialist split.
ModelConfig client_model_config(const ModelConfig& base, Method method, std::size_t n_experts);
std::size_t generalist_expert_count(Method method, std::size_t n_experts);

/// Builds the shared pretrained base for a run: a router-free skeleton
/// trained on the pooled training streams. Deterministic in (seed, data).
TinyLM build_pretrained_base(const ModelConfig& base_cfg, const PretrainConfig& pre,
                             const std::vector<ClientCorpus>& data, std::uint64_t seed,
                             std::vector<double>* losses = nullptr);

/// Aggregate -> broadcast -> local train -> evaluate, one communication
/// round. Exposed for tests; run_experiment drives it.
RoundMetrics run_round(std::vector<ClientState>& clients, const FederationConfig& cfg,
                       std::size_t round_index, AggregationChannel* channel,
                       std::vector<std::vector<IterationRow>>* train_log);

/// Full protocol: pretrain (or reuse `base`), build clients, round 0
/// evaluation, T rounds, optional final-aggregation evaluation.
ExperimentResult run_experiment(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                const PretrainConfig& pre, const std::vector<ClientCorpus>& data,
                                const TinyLM* base = nullptr);

}  // namespace comigs
