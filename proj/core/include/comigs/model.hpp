#pragma once

#include <span>
#include <string>
#include <vector>

#include "comigs/moe.hpp"
#include "comigs/rng.hpp"
#include "comigs/tensor.hpp"

namespace comigs {

enum class ParamRole { Base, Generalist, Specialist, Router };

struct NamedParam {
    std::string name;
    Tensor* tensor;
    ParamRole role;
};

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t dim = 32;
    std::size_t context = 16;
    std::size_t blocks = 2;
    std::size_t mlp_mult = 4;
    bool attention = false;
    std::size_t n_experts = 2;
    int top_k = 2;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
    GatingMode gating = GatingMode::TopK;
    /// Role of the plain (non-routed) adapters on attention sublayers:
    /// aggregated with the generalists (default) or kept local.
    bool aggregate_nonrouted = true;

    void validate() const;
};

/// Plain LoRA on a single frozen linear map (attention projections).
struct PlainLoraLinear {
    Tensor base;
    LoraAdapter adapter;
};

/// Single-head causal attention sublayer, base weights + plain LoRA.
struct AttentionSublayer {
    PlainLoraLinear wq, wk, wv, wo;
};

struct Block {
    std::optional<AttentionSublayer> attn;
    MoELoraLayer fc1;  // dim -> hidden, owns the sublayer's router
    MoELoraLayer fc2;  // hidden -> dim, reuses fc1's routing decision
};

struct ForwardResult {
    Tensor logits;  // T x V
    std::vector<RoutingRecord> records;  // one per MLP sublayer (TopK gating only)
};

/// Tiny causal LM. Without attention, causality comes from assembling each
/// position's input as the concatenation of its last `context` token
/// embeddings (zero-padded on the left) followed by a linear projection.
/// With attention enabled, a learned position table and masked single-head
/// attention replace the window assembly. Output projection is tied to the
/// embedding. Base weights are frozen after pretraining; only adapters and
/// routers train during fine-tuning.
class TinyLM {
public:
    TinyLM() = default;
    explicit TinyLM(const ModelConfig& cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    /// Deterministic parameter registry. Adapter roles follow the
    /// generalist/specialist layout chosen at construction.
    std::vector<NamedParam> parameters();
    std::vector<NamedParam> parameters(ParamRole role);

    /// Reassigns expert/adapter roles (method semantics live here):
    /// experts with index < n_generalist are Generalist, the rest
    /// Specialist; non-routed adapters follow cfg.aggregate_nonrouted.
    void assign_roles(std::size_t n_generalist);

    /// Causal logits for one token window (T <= context).
    ForwardResult forward(Tape& tape, std::span<const int> tokens);

    /// Batched forward over equal-length windows; logits rows are grouped
    /// window-major. Without attention this builds a single fused graph.
    ForwardResult forward_windows(Tape& tape, const std::vector<std::vector<int>>& windows);

    /// exp(mean next-token cross entropy) over non-overlapping context
    /// windows of the stream. Collects routing records into `records_out`
    /// when given.
    double perplexity(std::span<const int> tokens,
                      std::vector<RoutingRecord>* records_out = nullptr);

    /// Zeroes every adapter pair (B is zero already at init; this also
    /// clears A deltas accumulated by training). Used by tests.
    void zero_adapters();

private:
    friend class Checkpoint;
    Tensor rows_no_attention(Tape& tape, std::span<const int> tokens, std::size_t window_len);
    Tensor block_stack(Tape& tape, Tensor h, std::vector<RoutingRecord>* records);
    Tensor attention_path(Tape& tape, std::span<const int> tokens,
                          std::vector<RoutingRecord>* records);

    ModelConfig cfg_;
    Tensor embedding_;     // V x d
    Tensor pos_;           // C x d (attention mode)
    Tensor context_proj_;  // (C*d) x d (window mode)
    std::vector<Block> blocks_;
    std::size_t n_generalist_ = 1;
};

/// Mean next-token loss over a batch of (window, next-token targets) pairs.
struct LmLoss {
    Tensor loss;
    std::vector<RoutingRecord> records;
};
LmLoss lm_loss(Tape& tape, TinyLM& model, const std::vector<std::vector<int>>& windows,
               const std::vector<std::vector<int>>& targets);

/// Trains the base weights on a pooled token stream with Adam, then leaves
/// them frozen (adapters stay at their zero-delta initialization). Returns
/// the per-step smoothed losses for inspection.
std::vector<double> pretrain(TinyLM& model, std::span<const int> pooled, std::size_t steps,
                             double lr, std::size_t batch_windows, Rng& rng);

}  // namespace comigs
