#include "comigs/federation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include "comigs/errors.hpp"

namespace comigs {

Method method_from_string(const std::string& s) {
    if (s == "pretrained") return Method::Pretrained;
    if (s == "centralized") return Method::Centralized;
    if (s == "local") return Method::Local;
    if (s == "fedavg") return Method::FedAvg;
    if (s == "comigs-2g") return Method::Comigs2G;
    if (s == "comigs-2s") return Method::Comigs2S;
    if (s == "comigs-1g1s") return Method::Comigs1G1S;
    if (s == "comigs-1gxs") return Method::Comigs1GXS;
    throw ConfigError("unknown method '" + s + "'");
}

std::string method_to_string(Method m) {
    switch (m) {
        case Method::Pretrained: return "pretrained";
        case Method::Centralized: return "centralized";
        case Method::Local: return "local";
        case Method::FedAvg: return "fedavg";
        case Method::Comigs2G: return "comigs-2g";
        case Method::Comigs2S: return "comigs-2s";
        case Method::Comigs1G1S: return "comigs-1g1s";
        case Method::Comigs1GXS: return "comigs-1gxs";
    }
    return "?";
}

bool method_aggregates(Method m) {
    return m == Method::FedAvg || m == Method::Comigs2G || m == Method::Comigs1G1S ||
           m == Method::Comigs1GXS;
}

bool method_trains(Method m) { return m != Method::Pretrained; }

bool method_has_router(Method m) {
    return m == Method::Comigs2G || m == Method::Comigs2S || m == Method::Comigs1G1S ||
           m == Method::Comigs1GXS;
}

void FederationConfig::validate() const {
    if (n_clients < 1) throw ConfigError("federation: need at least one client");
    if (experts_per_client.size() != n_clients)
        throw ConfigError("federation: one expert count per client required");
    for (std::size_t n : experts_per_client)
        if (n < 1) throw ConfigError("federation: expert counts must be >= 1");
    if (method == Method::Comigs1G1S || method == Method::Comigs2G || method == Method::Comigs2S)
        for (std::size_t n : experts_per_client)
            if (n != 2)
                throw ConfigError("federation: " + method_to_string(method) +
                                  " requires exactly 2 experts per client");
    if (threads < 1) throw ConfigError("federation: threads must be >= 1");
    trainer.validate();
}

std::size_t generalist_expert_count(Method method, std::size_t n_experts) {
    switch (method) {
        case Method::FedAvg:
        case Method::Centralized:
        case Method::Comigs2G: return n_experts;
        case Method::Local:
        case Method::Comigs2S: return 0;
        default: return 1;  // Pretrained, 1G1S, 1GXS: expert 0 is the generalist
    }
}

ModelConfig client_model_config(const ModelConfig& base, Method method, std::size_t n_experts) {
    ModelConfig cfg = base;
    if (method_has_router(method)) {
        cfg.gating = GatingMode::TopK;
        cfg.n_experts = n_experts;
        cfg.top_k = static_cast<int>(std::min<std::size_t>(2, n_experts));
    } else {
        // Parameter-matched router-free baselines carry two adapter sets.
        cfg.gating = GatingMode::Dense;
        cfg.n_experts = 2;
        cfg.top_k = 1;
    }
    if (method == Method::Local || method == Method::Comigs2S) cfg.aggregate_nonrouted = false;
    return cfg;
}

namespace {

void copy_base_params(TinyLM& dst, TinyLM& src) {
    std::map<std::string, Tensor*> src_base;
    for (NamedParam& p : src.parameters(ParamRole::Base)) src_base[p.name] = p.tensor;
    for (NamedParam& p : dst.parameters(ParamRole::Base)) {
        auto it = src_base.find(p.name);
        if (it == src_base.end()) throw ShapeError("pretrained base lacks parameter " + p.name);
        if (it->second->shape != p.tensor->shape)
            throw ShapeError("pretrained base shape mismatch for " + p.name);
        *p.tensor->data = *it->second->data;
    }
}

void parallel_over_clients(std::size_t n, std::size_t threads,
                           const std::function<void(std::size_t)>& work) {
    const std::size_t t = std::min(threads, n);
    if (t <= 1) {
        for (std::size_t i = 0; i < n; ++i) work(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::mutex err_mutex;
    for (std::size_t w = 0; w < t; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += t) {
                try {
                    work(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (std::thread& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

struct EvalOutcome {
    double ppl = 0.0;
    std::vector<std::vector<double>> scores;  // layer -> expert
};

EvalOutcome evaluate_on_stream(TinyLM& model, const std::vector<int>& stream,
                               std::size_t n_layers) {
    EvalOutcome out;
    std::vector<RoutingRecord> records;
    out.ppl = model.perplexity(stream, &records);
    std::vector<std::vector<RoutingRecord>> grouped(n_layers);
    for (RoutingRecord& r : records) grouped[r.layer_id].push_back(std::move(r));
    out.scores.assign(n_layers, {});
    for (std::size_t l = 0; l < n_layers; ++l)
        if (!grouped[l].empty()) out.scores[l] = expert_score_summary(grouped[l]);
    return out;
}

}  // namespace

void AggregationChannel::note_round(const std::vector<Upload>& uploads, std::uint64_t scalars) {
    log_.insert(log_.end(), uploads.begin(), uploads.end());
    scalars_per_client_ = scalars;
}

void aggregate_generalists(std::vector<ClientState>& clients, AggregationChannel* channel) {
    if (clients.empty()) return;
    std::vector<std::vector<NamedParam>> per_client;
    for (ClientState& c : clients)
        per_client.push_back(c.model->parameters(ParamRole::Generalist));
    const std::size_t n_params = per_client[0].size();
    for (const auto& params : per_client)
        if (params.size() != n_params)
            throw ShapeError("aggregate_generalists: clients disagree on generalist layout");

    std::vector<AggregationChannel::Upload> uploads;
    std::uint64_t scalars = 0;
    for (std::size_t p = 0; p < n_params; ++p) {
        Tensor* first = per_client[0][p].tensor;
        for (std::size_t c = 1; c < clients.size(); ++c) {
            if (per_client[c][p].name != per_client[0][p].name ||
                per_client[c][p].tensor->shape != first->shape)
                throw ShapeError("aggregate_generalists: shape mismatch for " +
                                 per_client[0][p].name);
        }
        std::vector<double> mean(first->size(), 0.0);
        for (std::size_t c = 0; c < clients.size(); ++c) {
            const std::vector<double>& d = *per_client[c][p].tensor->data;
            for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += d[k];
        }
        const double inv = 1.0 / static_cast<double>(clients.size());
        for (double& v : mean) v *= inv;
        for (std::size_t c = 0; c < clients.size(); ++c) *per_client[c][p].tensor->data = mean;
        uploads.push_back({per_client[0][p].name, first->size()});
        scalars += first->size();
    }
    if (channel) channel->note_round(uploads, scalars);
}

CommCost comm_bytes_per_round(const ModelConfig& model_cfg, Method method,
                              std::size_t n_experts) {
    CommCost cost;
    Rng rng(0);
    if (method_aggregates(method)) {
        ModelConfig cc = client_model_config(model_cfg, method, n_experts);
        TinyLM skeleton(cc, rng);
        skeleton.assign_roles(generalist_expert_count(method, cc.n_experts));
        for (NamedParam& p : skeleton.parameters(ParamRole::Generalist))
            cost.params_exchanged += p.tensor->size();
    }
    cost.comigs_bytes = cost.params_exchanged * 2 * 2;  // bf16, up + down

    ModelConfig fed = client_model_config(model_cfg, Method::FedAvg, 2);
    TinyLM fed_skeleton(fed, rng);
    fed_skeleton.assign_roles(generalist_expert_count(Method::FedAvg, fed.n_experts));
    std::uint64_t fed_params = 0;
    for (NamedParam& p : fed_skeleton.parameters(ParamRole::Generalist))
        fed_params += p.tensor->size();
    cost.fedavg_matched_bytes = fed_params * 2 * 2;
    cost.ratio =
        static_cast<double>(cost.comigs_bytes) / static_cast<double>(cost.fedavg_matched_bytes);
    return cost;
}

TinyLM build_pretrained_base(const ModelConfig& base_cfg, const PretrainConfig& pre,
                             const std::vector<ClientCorpus>& data, std::uint64_t seed,
                             std::vector<double>* losses) {
    ModelConfig skeleton_cfg = base_cfg;
    skeleton_cfg.gating = GatingMode::Dense;
    skeleton_cfg.n_experts = 1;
    skeleton_cfg.top_k = 1;
    Rng init_rng(stream_seed(seed, 0, 0, /*purpose=*/10));
    TinyLM base(skeleton_cfg, init_rng);
    std::vector<int> pooled;
    for (const ClientCorpus& c : data) pooled.insert(pooled.end(), c.train.begin(), c.train.end());
    if (pooled.empty()) throw ConfigError("build_pretrained_base: empty pooled corpus");
    if (pre.steps > 0) {
        Rng train_rng(stream_seed(seed, 0, 0, /*purpose=*/11));
        std::vector<double> l =
            pretrain(base, pooled, pre.steps, pre.lr, pre.batch_windows, train_rng);
        if (losses) *losses = std::move(l);
    }
    return base;
}

namespace {

std::vector<ClientState> build_clients(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                       const std::vector<ClientCorpus>& data, TinyLM& base) {
    std::vector<ClientState> clients(cfg.n_clients);
    for (std::size_t i = 0; i < cfg.n_clients; ++i) {
        ModelConfig cc = client_model_config(model_cfg, cfg.method, cfg.experts_per_client[i]);
        Rng init_rng(stream_seed(cfg.seed, i, 0, /*purpose=*/12));
        clients[i].model = std::make_unique<TinyLM>(cc, init_rng);
        clients[i].model->assign_roles(generalist_expert_count(cfg.method, cc.n_experts));
        copy_base_params(*clients[i].model, base);

        TrainerConfig tc = cfg.trainer;
        tc.total_expert_steps = cfg.rounds * cfg.local_iters;
        clients[i].problem = std::make_unique<LmBilevelProblem>(*clients[i].model, data[i].train,
                                                                data[i].valid, tc);
        clients[i].test_stream = data[i].test;
    }
    return clients;
}

RoundMetrics evaluate_all(std::vector<ClientState>& clients, const FederationConfig& cfg,
                          std::size_t n_layers, std::size_t round_index) {
    RoundMetrics m;
    m.round = round_index;
    m.test_ppl.resize(clients.size());
    m.expert_scores.resize(clients.size());
    m.bytes_up.assign(clients.size(), 0);
    m.bytes_down.assign(clients.size(), 0);
    parallel_over_clients(clients.size(), cfg.threads, [&](std::size_t i) {
        EvalOutcome out = evaluate_on_stream(*clients[i].model, clients[i].test_stream, n_layers);
        m.test_ppl[i] = out.ppl;
        m.expert_scores[i] = std::move(out.scores);
    });
    return m;
}

std::vector<TokenRouting> dump_routing(TinyLM& model, const std::vector<int>& stream) {
    std::vector<TokenRouting> dump;
    if (model.config().gating != GatingMode::TopK) return dump;
    const std::size_t c = model.config().context;
    const std::size_t limit = std::min<std::size_t>(256, stream.size());
    for (std::size_t start = 0; start + 1 < limit; start += c) {
        const std::size_t len = std::min(c, limit - start);
        std::vector<int> window(stream.begin() + start, stream.begin() + start + len);
        Tape eval(false);
        ForwardResult fr = model.forward(eval, window);
        for (const RoutingRecord& rec : fr.records)
            for (std::size_t t = 0; t < window.size(); ++t)
                dump.push_back(TokenRouting{window[t], rec.layer_id, rec.selected[t][0]});
    }
    return dump;
}

ExperimentResult run_centralized(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                 const std::vector<ClientCorpus>& data, TinyLM& base) {
    ExperimentResult result;
    result.train_log.resize(cfg.n_clients);

    ModelConfig cc = client_model_config(model_cfg, Method::Centralized, 2);
    Rng init_rng(stream_seed(cfg.seed, 0, 0, /*purpose=*/12));
    TinyLM model(cc, init_rng);
    model.assign_roles(generalist_expert_count(Method::Centralized, cc.n_experts));
    copy_base_params(model, base);

    std::vector<int> pooled_train, pooled_valid;
    for (const ClientCorpus& c : data) {
        pooled_train.insert(pooled_train.end(), c.train.begin(), c.train.end());
        pooled_valid.insert(pooled_valid.end(), c.valid.begin(), c.valid.end());
    }
    TrainerConfig tc = cfg.trainer;
    tc.total_expert_steps = cfg.rounds * cfg.local_iters;
    LmBilevelProblem problem(model, pooled_train, pooled_valid, tc);
    BilevelState bilevel;

    const std::size_t n_layers = model_cfg.blocks;
    auto eval_round = [&](std::size_t round_index) {
        RoundMetrics m;
        m.round = round_index;
        m.test_ppl.resize(cfg.n_clients);
        m.expert_scores.assign(cfg.n_clients, {});
        m.bytes_up.assign(cfg.n_clients, 0);
        m.bytes_down.assign(cfg.n_clients, 0);
        for (std::size_t i = 0; i < cfg.n_clients; ++i) {
            EvalOutcome out = evaluate_on_stream(model, data[i].test, n_layers);
            m.test_ppl[i] = out.ppl;
            m.expert_scores[i] = std::move(out.scores);
        }
        result.rounds.push_back(std::move(m));
    };

    eval_round(0);
    for (std::size_t r = 1; r <= cfg.rounds; ++r) {
        Rng rng(stream_seed(cfg.seed, 0, r, /*purpose=*/20));
        local_train(problem, bilevel, tc, cfg.local_iters, rng, &result.train_log[0]);
        eval_round(r);
    }
    result.routing_dump.resize(cfg.n_clients);
    for (std::size_t i = 0; i < cfg.n_clients; ++i)
        result.routing_dump[i] = dump_routing(model, data[i].test);
    result.final_models.push_back(std::make_unique<TinyLM>(std::move(model)));
    return result;
}

}  // namespace

RoundMetrics run_round(std::vector<ClientState>& clients, const FederationConfig& cfg,
                       std::size_t round_index, AggregationChannel* channel,
                       std::vector<std::vector<IterationRow>>* train_log) {
    const std::size_t n_layers = clients[0].model->config().blocks;
    std::uint64_t scalars = 0;
    if (method_aggregates(cfg.method)) {
        aggregate_generalists(clients, channel);
        if (channel) scalars = channel->scalars_per_client();
    }

    if (method_trains(cfg.method)) {
        TrainerConfig tc = cfg.trainer;
        tc.total_expert_steps = cfg.rounds * cfg.local_iters;
        parallel_over_clients(clients.size(), cfg.threads, [&](std::size_t i) {
            Rng rng(stream_seed(cfg.seed, i, round_index, /*purpose=*/20));
            std::vector<IterationRow>* log = train_log ? &(*train_log)[i] : nullptr;
            local_train(*clients[i].problem, clients[i].bilevel, tc, cfg.local_iters, rng, log);
        });
    }

    RoundMetrics metrics = evaluate_all(clients, cfg, n_layers, round_index);
    const std::uint64_t bytes = scalars * 2;  // bf16 accounting
    for (std::size_t i = 0; i < clients.size(); ++i) {
        metrics.bytes_up[i] = bytes;
        metrics.bytes_down[i] = bytes;
    }
    return metrics;
}

ExperimentResult run_experiment(const FederationConfig& cfg, const ModelConfig& model_cfg,
                                const PretrainConfig& pre, const std::vector<ClientCorpus>& data,
                                const TinyLM* base) {
    cfg.validate();
    model_cfg.validate();
    if (data.size() != cfg.n_clients)
        throw ConfigError("run_experiment: one corpus per client required");

    TinyLM owned_base;
    TinyLM* base_ptr = const_cast<TinyLM*>(base);  // base weights are only read
    if (!base_ptr) {
        owned_base = build_pretrained_base(model_cfg, pre, data, cfg.seed);
        base_ptr = &owned_base;
    }

    if (cfg.method == Method::Centralized)
        return run_centralized(cfg, model_cfg, data, *base_ptr);

    ExperimentResult result;
    result.train_log.resize(cfg.n_clients);
    std::vector<ClientState> clients = build_clients(cfg, model_cfg, data, *base_ptr);
    const std::size_t n_layers = model_cfg.blocks;

    result.rounds.push_back(evaluate_all(clients, cfg, n_layers, 0));

    if (method_trains(cfg.method)) {
        for (std::size_t r = 1; r <= cfg.rounds; ++r)
            result.rounds.push_back(
                run_round(clients, cfg, r, &result.channel, &result.train_log));
        if (cfg.final_aggregate_eval && method_aggregates(cfg.method) && cfg.rounds > 0) {
            aggregate_generalists(clients, &result.channel);
            result.rounds.push_back(evaluate_all(clients, cfg, n_layers, cfg.rounds + 1));
        }
    }

    result.routing_dump.resize(cfg.n_clients);
    for (std::size_t i = 0; i < cfg.n_clients; ++i)
        result.routing_dump[i] = dump_routing(*clients[i].model, clients[i].test_stream);
    for (ClientState& c : clients) {
        c.problem.reset();  // drops the reference into the model
        result.final_models.push_back(std::move(c.model));
    }
    return result;
}

}  // namespace comigs
