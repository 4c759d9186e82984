#include "comigs/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace comigs {

void ModelConfig::validate() const {
    if (vocab < 1 || dim < 1 || context < 1 || blocks < 1)
        throw ConfigError("model: vocab, dim, context and blocks must be >= 1");
    if (n_experts < 1) throw ConfigError("model: n_experts must be >= 1");
    if (top_k < 1 || static_cast<std::size_t>(top_k) > n_experts)
        throw ConfigError("model: top_k must lie in [1, n_experts]");
    if (lora_rank < 1 || lora_rank > dim)
        throw ConfigError("model: lora_rank must lie in [1, dim]");
    if (lora_alpha <= 0.0) throw ConfigError("model: lora_alpha must be positive");
}

namespace {

Tensor gaussian_init(const Shape& s, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(s);
    for (double& v : *t.data) v = rng.normal(0.0, stddev);
    return t;
}

LoraAdapter make_adapter(std::size_t m, std::size_t n, std::size_t r, double alpha, Rng& rng) {
    LoraAdapter a;
    a.a = gaussian_init({m, r}, 0.02, rng);
    a.b = Tensor::zeros({r, n});  // zero delta at start
    a.rank = r;
    a.alpha = alpha;
    return a;
}

MoELoraLayer make_moe_layer(std::size_t m, std::size_t n, const ModelConfig& cfg, bool owns_router,
                            std::size_t router_in_dim, int layer_id, Rng& rng) {
    MoELoraLayer layer;
    layer.base = gaussian_init({m, n}, 0.02, rng);
    for (std::size_t j = 0; j < cfg.n_experts; ++j)
        layer.experts.push_back(make_adapter(m, n, cfg.lora_rank, cfg.lora_alpha, rng));
    layer.top_k = cfg.top_k;
    layer.gating = cfg.gating;
    layer.layer_id = layer_id;
    if (owns_router && cfg.gating == GatingMode::TopK)
        layer.router = RouterLinear{gaussian_init({router_in_dim, cfg.n_experts}, 0.02, rng)};
    layer.validate();
    return layer;
}

PlainLoraLinear make_plain(std::size_t m, std::size_t n, const ModelConfig& cfg, Rng& rng) {
    PlainLoraLinear p;
    p.base = gaussian_init({m, n}, 0.02, rng);
    p.adapter = make_adapter(m, n, cfg.lora_rank, cfg.lora_alpha, rng);
    return p;
}

Tensor plain_apply(Tape& tape, const PlainLoraLinear& p, const Tensor& x) {
    Tensor y = tape.matmul(x, p.base);
    Tensor delta = tape.scale(tape.matmul(tape.matmul(x, p.adapter.a), p.adapter.b),
                              p.adapter.scaling());
    return tape.add(y, delta);
}

}  // namespace

TinyLM::TinyLM(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.dim, hidden = cfg_.dim * cfg_.mlp_mult;
    embedding_ = gaussian_init({cfg_.vocab, d}, 0.02, rng);
    if (cfg_.attention) {
        pos_ = gaussian_init({cfg_.context, d}, 0.02, rng);
    } else {
        context_proj_ = gaussian_init({cfg_.context * d, d}, 0.02, rng);
    }
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        Block blk;
        if (cfg_.attention) {
            AttentionSublayer at;
            at.wq = make_plain(d, d, cfg_, rng);
            at.wk = make_plain(d, d, cfg_, rng);
            at.wv = make_plain(d, d, cfg_, rng);
            at.wo = make_plain(d, d, cfg_, rng);
            blk.attn = std::move(at);
        }
        blk.fc1 = make_moe_layer(d, hidden, cfg_, /*owns_router=*/true, d,
                                 static_cast<int>(b), rng);
        blk.fc2 = make_moe_layer(hidden, d, cfg_, /*owns_router=*/false, d,
                                 static_cast<int>(b), rng);
        blocks_.push_back(std::move(blk));
    }
}

void TinyLM::assign_roles(std::size_t n_generalist) { n_generalist_ = n_generalist; }

std::vector<NamedParam> TinyLM::parameters() {
    std::vector<NamedParam> out;
    out.push_back({"embedding", &embedding_, ParamRole::Base});
    if (cfg_.attention) {
        out.push_back({"pos", &pos_, ParamRole::Base});
    } else {
        out.push_back({"context_proj", &context_proj_, ParamRole::Base});
    }
    const ParamRole plain_role =
        cfg_.aggregate_nonrouted ? ParamRole::Generalist : ParamRole::Specialist;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        Block& blk = blocks_[b];
        if (blk.attn) {
            auto add_plain = [&](const std::string& nm, PlainLoraLinear& p) {
                out.push_back({pre + nm + ".base", &p.base, ParamRole::Base});
                out.push_back({pre + nm + ".lora_a", &p.adapter.a, plain_role});
                out.push_back({pre + nm + ".lora_b", &p.adapter.b, plain_role});
            };
            add_plain("attn.wq", blk.attn->wq);
            add_plain("attn.wk", blk.attn->wk);
            add_plain("attn.wv", blk.attn->wv);
            add_plain("attn.wo", blk.attn->wo);
        }
        auto add_moe = [&](const std::string& nm, MoELoraLayer& l) {
            out.push_back({pre + nm + ".base", &l.base, ParamRole::Base});
            for (std::size_t j = 0; j < l.experts.size(); ++j) {
                const ParamRole role =
                    j < n_generalist_ ? ParamRole::Generalist : ParamRole::Specialist;
                const std::string e = pre + nm + ".expert" + std::to_string(j);
                out.push_back({e + ".lora_a", &l.experts[j].a, role});
                out.push_back({e + ".lora_b", &l.experts[j].b, role});
            }
            if (l.router)
                out.push_back({pre + nm + ".router", &l.router->weight, ParamRole::Router});
        };
        add_moe("mlp.fc1", blk.fc1);
        add_moe("mlp.fc2", blk.fc2);
    }
    return out;
}

std::vector<NamedParam> TinyLM::parameters(ParamRole role) {
    std::vector<NamedParam> out;
    for (NamedParam& p : parameters())
        if (p.role == role) out.push_back(p);
    return out;
}

void TinyLM::zero_adapters() {
    for (NamedParam& p : parameters()) {
        if (p.role == ParamRole::Generalist || p.role == ParamRole::Specialist)
            std::fill(p.tensor->data->begin(), p.tensor->data->end(), 0.0);
    }
}

Tensor TinyLM::rows_no_attention(Tape& tape, std::span<const int> tokens,
                                 std::size_t window_len) {
    Tensor emb = tape.embedding_lookup(embedding_, tokens);
    // Slot c of the window holds the embedding from offset (C-1-c) back;
    // shifts never cross window boundaries.
    std::vector<Tensor> slots;
    slots.reserve(cfg_.context);
    for (std::size_t c = 0; c < cfg_.context; ++c) {
        const std::size_t shift = cfg_.context - 1 - c;
        if (shift == 0) {
            slots.push_back(emb);
        } else if (shift >= window_len) {
            slots.push_back(Tensor::zeros({tokens.size(), cfg_.dim}));
        } else {
            slots.push_back(tape.shift_rows(emb, shift, window_len));
        }
    }
    Tensor x = tape.concat_last_axis(slots);
    return tape.matmul(x, context_proj_);
}

Tensor TinyLM::block_stack(Tape& tape, Tensor h, std::vector<RoutingRecord>* records) {
    for (Block& blk : blocks_) {
        if (cfg_.gating == GatingMode::TopK) {
            RoutingRecord rec = route_topk(tape, *blk.fc1.router, h, blk.fc1.top_k,
                                           blk.fc1.layer_id, blk.fc1.n_experts());
            Tensor u = moe_apply(tape, blk.fc1, h, rec);
            Tensor g = tape.gelu(u);
            Tensor v = moe_apply(tape, blk.fc2, g, rec);
            h = tape.add(h, v);
            if (records) records->push_back(std::move(rec));
        } else {
            Tensor u = dense_forward(tape, blk.fc1, h);
            Tensor g = tape.gelu(u);
            Tensor v = dense_forward(tape, blk.fc2, g);
            h = tape.add(h, v);
        }
    }
    return h;
}

Tensor TinyLM::attention_path(Tape& tape, std::span<const int> tokens,
                              std::vector<RoutingRecord>* records) {
    const std::size_t t_len = tokens.size(), d = cfg_.dim;
    Tensor emb = tape.embedding_lookup(embedding_, tokens);
    std::vector<int> pos_ids(t_len);
    for (std::size_t i = 0; i < t_len; ++i) pos_ids[i] = static_cast<int>(i);
    Tensor h = tape.add(emb, tape.embedding_lookup(pos_, pos_ids));

    Tensor mask = Tensor::zeros({t_len, t_len});
    for (std::size_t i = 0; i < t_len; ++i)
        for (std::size_t j = i + 1; j < t_len; ++j) mask.at(i, j) = -1e9;

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (Block& blk : blocks_) {
        Tensor q = plain_apply(tape, blk.attn->wq, h);
        Tensor k = plain_apply(tape, blk.attn->wk, h);
        Tensor v = plain_apply(tape, blk.attn->wv, h);
        Tensor scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_d);
        scores = tape.add(scores, mask);
        Tensor attn = tape.matmul(tape.softmax_rows(scores), v);
        h = tape.add(h, plain_apply(tape, blk.attn->wo, attn));

        if (cfg_.gating == GatingMode::TopK) {
            RoutingRecord rec = route_topk(tape, *blk.fc1.router, h, blk.fc1.top_k,
                                           blk.fc1.layer_id, blk.fc1.n_experts());
            Tensor u = moe_apply(tape, blk.fc1, h, rec);
            Tensor g = tape.gelu(u);
            h = tape.add(h, moe_apply(tape, blk.fc2, g, rec));
            if (records) records->push_back(std::move(rec));
        } else {
            Tensor u = dense_forward(tape, blk.fc1, h);
            Tensor g = tape.gelu(u);
            h = tape.add(h, dense_forward(tape, blk.fc2, g));
        }
    }
    return h;
}

ForwardResult TinyLM::forward(Tape& tape, std::span<const int> tokens) {
    if (tokens.size() > cfg_.context)
        throw std::invalid_argument("forward: " + std::to_string(tokens.size()) +
                                    " tokens exceed context " + std::to_string(cfg_.context));
    ForwardResult res;
    Tensor h = cfg_.attention ? attention_path(tape, tokens, &res.records)
                              : block_stack(tape, rows_no_attention(tape, tokens, tokens.size()),
                                            &res.records);
    res.logits = tape.matmul(h, tape.transpose(embedding_));
    return res;
}

ForwardResult TinyLM::forward_windows(Tape& tape, const std::vector<std::vector<int>>& windows) {
    if (windows.empty()) throw std::invalid_argument("forward_windows: empty batch");
    const std::size_t w_len = windows[0].size();
    for (const auto& w : windows)
        if (w.size() != w_len)
            throw std::invalid_argument("forward_windows: windows must share one length");
    if (w_len > cfg_.context)
        throw std::invalid_argument("forward_windows: window exceeds context");

    ForwardResult res;
    if (!cfg_.attention) {
        std::vector<int> flat;
        flat.reserve(windows.size() * w_len);
        for (const auto& w : windows) flat.insert(flat.end(), w.begin(), w.end());
        Tensor h = block_stack(tape, rows_no_attention(tape, flat, w_len), &res.records);
        res.logits = tape.matmul(h, tape.transpose(embedding_));
        return res;
    }
    // Attention mode: per-window graphs, losses combined by the caller.
    // Only the first window's logits layout differs, so stack rows.
    std::vector<Tensor> parts;
    for (const auto& w : windows) {
        Tensor h = attention_path(tape, w, &res.records);
        parts.push_back(tape.matmul(h, tape.transpose(embedding_)));
    }
    if (parts.size() == 1) {
        res.logits = parts[0];
        return res;
    }
    // Row-stack via transpose+concat (batch sizes here are small).
    std::vector<Tensor> tposed;
    for (Tensor& p : parts) tposed.push_back(tape.transpose(p));
    res.logits = tape.transpose(tape.concat_last_axis(tposed));
    return res;
}

double TinyLM::perplexity(std::span<const int> tokens, std::vector<RoutingRecord>* records_out) {
    if (tokens.size() < 2)
        throw std::invalid_argument("perplexity: need at least 2 tokens");
    const std::size_t c = cfg_.context;
    Tape eval(false);
    double total_nll = 0.0;
    std::size_t total_preds = 0;

    // Non-overlapping windows of c+1 tokens (stride c); a shorter trailing
    // window covers the remainder.
    std::vector<std::vector<int>> batch_windows;
    std::vector<int> batch_targets;
    auto flush = [&]() {
        if (batch_windows.empty()) return;
        ForwardResult fr = forward_windows(eval, batch_windows);
        Tensor loss = eval.cross_entropy(fr.logits, batch_targets);
        total_nll += loss.value() * static_cast<double>(batch_targets.size());
        total_preds += batch_targets.size();
        if (records_out)
            for (RoutingRecord& r : fr.records) records_out->push_back(std::move(r));
        batch_windows.clear();
        batch_targets.clear();
    };

    const std::size_t batch_cap = 64;
    for (std::size_t start = 0; start + 1 < tokens.size(); start += c) {
        const std::size_t len = std::min(c, tokens.size() - 1 - start);
        if (!batch_windows.empty() && batch_windows[0].size() != len) flush();
        std::vector<int> w(tokens.begin() + start, tokens.begin() + start + len);
        batch_windows.push_back(std::move(w));
        for (std::size_t i = 1; i <= len; ++i) batch_targets.push_back(tokens[start + i]);
        if (batch_windows.size() >= batch_cap) flush();
    }
    flush();
    return std::exp(total_nll / static_cast<double>(total_preds));
}

LmLoss lm_loss(Tape& tape, TinyLM& model, const std::vector<std::vector<int>>& windows,
               const std::vector<std::vector<int>>& targets) {
    if (windows.size() != targets.size())
        throw std::invalid_argument("lm_loss: window/target count mismatch");
    LmLoss out;
    ForwardResult fr = model.forward_windows(tape, windows);
    std::vector<int> flat;
    for (const auto& t : targets) flat.insert(flat.end(), t.begin(), t.end());
    if (flat.size() != fr.logits.rows())
        throw std::invalid_argument("lm_loss: target rows do not match logits");
    out.loss = tape.cross_entropy(fr.logits, flat);
    out.records = std::move(fr.records);
    return out;
}

std::vector<double> pretrain(TinyLM& model, std::span<const int> pooled, std::size_t steps,
                             double lr, std::size_t batch_windows, Rng& rng) {
    if (pooled.empty()) throw std::invalid_argument("pretrain: empty corpus");
    const std::size_t c = model.config().context;
    if (pooled.size() < c + 2) throw std::invalid_argument("pretrain: corpus shorter than context");

    std::vector<NamedParam> base = model.parameters(ParamRole::Base);
    std::vector<std::vector<double>> m(base.size()), v(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        m[i].assign(base[i].tensor->size(), 0.0);
        v[i].assign(base[i].tensor->size(), 0.0);
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    std::vector<double> losses;
    for (std::size_t step = 1; step <= steps; ++step) {
        std::vector<std::vector<int>> windows(batch_windows), targets(batch_windows);
        for (std::size_t w = 0; w < batch_windows; ++w) {
            const std::size_t start = rng.uniform_int(pooled.size() - c - 1);
            windows[w].assign(pooled.begin() + start, pooled.begin() + start + c);
            targets[w].assign(pooled.begin() + start + 1, pooled.begin() + start + c + 1);
        }
        Tape tape;
        for (NamedParam& p : base) tape.watch(*p.tensor);
        LmLoss ll = lm_loss(tape, model, windows, targets);
        const double loss_val = ll.loss.value();
        if (!std::isfinite(loss_val))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        losses.push_back(loss_val);
        GradientMap grads = tape.backward(ll.loss);
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
        for (std::size_t i = 0; i < base.size(); ++i) {
            Tensor g = grads.grad(*base[i].tensor);
            std::vector<double>& pd = *base[i].tensor->data;
            for (std::size_t k = 0; k < pd.size(); ++k) {
                const double gk = (*g.data)[k];
                m[i][k] = b1 * m[i][k] + (1.0 - b1) * gk;
                v[i][k] = b2 * v[i][k] + (1.0 - b2) * gk * gk;
                pd[k] -= lr * (m[i][k] / bc1) / (std::sqrt(v[i][k] / bc2) + eps);
            }
        }
    }
    return losses;
}

}  // namespace comigs
