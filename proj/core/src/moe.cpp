#include "comigs/moe.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace comigs {

void MoELoraLayer::validate() const {
    if (experts.empty()) throw ConfigError("MoELoraLayer: needs at least one expert");
    if (top_k < 1 || static_cast<std::size_t>(top_k) > experts.size())
        throw ConfigError("MoELoraLayer: top_k " + std::to_string(top_k) + " with " +
                          std::to_string(experts.size()) + " experts");
    const std::size_t m = base.shape[0], n = base.shape[1], r = experts[0].rank;
    for (const LoraAdapter& e : experts) {
        if (e.a.shape != Shape{m, r} || e.b.shape != Shape{r, n} || e.rank != r)
            throw ShapeError("MoELoraLayer: experts must share (m, n, r)");
        if (e.rank > std::min(m, n)) throw ConfigError("MoELoraLayer: rank exceeds min(m, n)");
        if (e.alpha <= 0.0) throw ConfigError("MoELoraLayer: alpha must be positive");
    }
    if (gating == GatingMode::TopK && router &&
        router->weight.shape[1] != experts.size())
        throw ShapeError("MoELoraLayer: router output dim must equal expert count");
}

Tensor lora_delta_apply(Tape& tape, const MoELoraLayer& layer, std::size_t j, const Tensor& x) {
    if (j >= layer.experts.size())
        throw std::out_of_range("lora_delta_apply: expert " + std::to_string(j) + " of " +
                                std::to_string(layer.experts.size()));
    const LoraAdapter& e = layer.experts[j];
    return tape.scale(tape.matmul(tape.matmul(x, e.a), e.b), e.scaling());
}

RoutingRecord route_topk(Tape& tape, const RouterLinear& router, const Tensor& x, int k,
                         int layer_id, std::size_t n_experts_hint) {
    const std::size_t n = router.weight.shape[1];
    if (n_experts_hint != 0 && n_experts_hint != n)
        throw ShapeError("route_topk: router width does not match expert count");
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw std::invalid_argument("route_topk: k=" + std::to_string(k) + " with " +
                                    std::to_string(n) + " experts");
    RoutingRecord rec;
    rec.layer_id = layer_id;
    rec.n_experts = n;
    rec.probs = tape.softmax_rows(tape.matmul(x, router.weight));

    const std::size_t t_count = rec.probs.rows();
    rec.selected.resize(t_count);
    std::vector<int> order(n);
    for (std::size_t t = 0; t < t_count; ++t) {
        std::iota(order.begin(), order.end(), 0);
        const double* p = rec.probs.data->data() + t * n;
        std::stable_sort(order.begin(), order.end(),
                         [p](int a, int b) { return p[a] > p[b]; });
        rec.selected[t].assign(order.begin(), order.begin() + k);
    }
    rec.mix = tape.topk_renorm(rec.probs, rec.selected);
    return rec;
}

Tensor moe_apply(Tape& tape, const MoELoraLayer& layer, const Tensor& x,
                 const RoutingRecord& record) {
    if (record.n_experts != layer.experts.size())
        throw ShapeError("moe_apply: record expert count does not match layer");
    Tensor y = tape.matmul(x, layer.base);
    for (std::size_t j = 0; j < layer.experts.size(); ++j) {
        Tensor delta = lora_delta_apply(tape, layer, j, x);
        y = tape.add(y, tape.scale_rows(delta, tape.col(record.mix, j)));
    }
    return y;
}

MoeForwardResult moe_forward(Tape& tape, const MoELoraLayer& layer, const Tensor& x) {
    if (!layer.router) throw ConfigError("moe_forward: layer owns no router");
    RoutingRecord rec =
        route_topk(tape, *layer.router, x, layer.top_k, layer.layer_id, layer.experts.size());
    Tensor y = moe_apply(tape, layer, x, rec);
    return {std::move(y), std::move(rec)};
}

Tensor dense_forward(Tape& tape, const MoELoraLayer& layer, const Tensor& x) {
    Tensor y = tape.matmul(x, layer.base);
    for (std::size_t j = 0; j < layer.experts.size(); ++j)
        y = tape.add(y, lora_delta_apply(tape, layer, j, x));
    return y;
}

std::vector<double> load_balance_coefficients(std::size_t n, LoadBalanceMode mode) {
    std::vector<double> w(n, 0.0);
    if (mode == LoadBalanceMode::Uniform) {
        std::fill(w.begin(), w.end(), static_cast<double>(n));
    } else {
        if (n == 1) {
            w[0] = 1.0;  // degenerate single-expert layer
        } else {
            const double denom = static_cast<double>((n - 1) * (n - 1) + 1);
            w[0] = 1.0 / denom;
            for (std::size_t j = 1; j < n; ++j) w[j] = static_cast<double>(n - 1) / denom;
        }
    }
    return w;
}

Tensor load_balance_loss(Tape& tape, const RoutingRecord& record, LoadBalanceMode mode) {
    const std::size_t n = record.n_experts;
    const std::size_t t_count = record.selected.size();
    if (t_count == 0) throw std::invalid_argument("load_balance_loss: empty record");

    // f_j: selection frequencies, treated as constants in the gradient.
    std::vector<double> f(n, 0.0);
    for (const auto& sel : record.selected)
        for (int j : sel) f[j] += 1.0;
    for (double& v : f) v /= static_cast<double>(t_count);

    std::vector<double> coeff = load_balance_coefficients(n, mode);
    std::vector<double> w(n);
    for (std::size_t j = 0; j < n; ++j) w[j] = coeff[j] * f[j];
    return tape.colmean_dot(record.probs, w);
}

std::vector<double> expert_score_summary(const std::vector<RoutingRecord>& records) {
    if (records.empty()) throw std::invalid_argument("expert_score_summary: no records");
    const std::size_t n = records[0].n_experts;
    std::vector<double> sum(n, 0.0);
    std::size_t total = 0;
    for (const RoutingRecord& r : records) {
        if (r.n_experts != n)
            throw ShapeError("expert_score_summary: records disagree on expert count");
        const std::size_t t_count = r.probs.rows();
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t j = 0; j < n; ++j) sum[j] += r.probs.at(t, j);
        total += t_count;
    }
    for (double& v : sum) v /= static_cast<double>(total);
    return sum;
}

}  // namespace comigs
