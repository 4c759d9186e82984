#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "comigs/tensor.hpp"

namespace comigs {

/// Low-rank adapter pair. The delta it contributes is
/// scaling() * (x * A) * B with rank-stabilized scaling alpha / sqrt(r),
/// recomputed from (alpha, rank) on every use.
struct LoraAdapter {
    Tensor a;  // m x r
    Tensor b;  // r x n
    std::size_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / std::sqrt(static_cast<double>(rank)); }
};

/// Linear router: one weight matrix d x n_experts, softmax gating on top.
struct RouterLinear {
    Tensor weight;
};

enum class GatingMode {
    TopK,   // softmax router, top-k selection, renormalized mixing
    Dense,  // every adapter applied with weight 1 (router-free baselines)
};

/// Frozen base map plus a bank of LoRA experts. Expert 0 is the designated
/// generalist. The router is owned by the layer that makes the routing
/// decision (the first linear of an MLP sublayer); layers reusing that
/// decision carry no router of their own.
struct MoELoraLayer {
    Tensor base;  // m x n, frozen during fine-tuning
    std::vector<LoraAdapter> experts;
    std::optional<RouterLinear> router;
    int top_k = 1;
    GatingMode gating = GatingMode::TopK;
    int layer_id = 0;

    std::size_t n_experts() const { return experts.size(); }
    void validate() const;
};

/// Per-token routing outcome of one layer's gating decision.
struct RoutingRecord {
    int layer_id = 0;
    std::size_t n_experts = 0;
    Tensor probs;                            // T x n, full softmax, tape-tracked
    std::vector<std::vector<int>> selected;  // per token, prob-descending, ties to lower index
    Tensor mix;                              // T x n dense renormalized weights
};

enum class LoadBalanceMode { Uniform, GeneralistFavored };

/// Expert delta contribution only: scaling_j * (x * A_j) * B_j.
Tensor lora_delta_apply(Tape& tape, const MoELoraLayer& layer, std::size_t j, const Tensor& x);

/// Full softmax over router logits plus top-k selection with renormalized
/// mixture weights. Ties break toward the lower expert index.
RoutingRecord route_topk(Tape& tape, const RouterLinear& router, const Tensor& x, int k,
                         int layer_id = 0, std::size_t n_experts_hint = 0);

/// Applies base + gated expert deltas using an externally computed routing
/// decision (the record's mix matrix must have layer-compatible expert count).
Tensor moe_apply(Tape& tape, const MoELoraLayer& layer, const Tensor& x,
                 const RoutingRecord& record);

/// Routes on x with the layer's own router, then mixes.
/// y = x*base + sum_{j in topk} p~_j(x) * delta_j(x).
struct MoeForwardResult {
    Tensor y;
    RoutingRecord record;
};
MoeForwardResult moe_forward(Tape& tape, const MoELoraLayer& layer, const Tensor& x);

/// Dense (router-free) application: y = x*base + sum_j delta_j(x).
Tensor dense_forward(Tape& tape, const MoELoraLayer& layer, const Tensor& x);

/// Per-expert coefficients applied to the f_j * P_j terms.
/// Uniform mode scales every term by n (Switch convention); the
/// generalist-favored mode reweights expert 0 by 1/((n-1)^2+1) and the
/// rest by (n-1)/((n-1)^2+1).
std::vector<double> load_balance_coefficients(std::size_t n_experts, LoadBalanceMode mode);

/// f_j = fraction of tokens selecting expert j, P_j = mean gate probability.
/// Returns sum_j coeff_j * f_j * P_j as a (tape-tracked) scalar.
Tensor load_balance_loss(Tape& tape, const RoutingRecord& record, LoadBalanceMode mode);

/// Mean gate probability per expert over all tokens of all records, which
/// must share one expert count. Output sums to 1.
std::vector<double> expert_score_summary(const std::vector<RoutingRecord>& records);

}  // namespace comigs
