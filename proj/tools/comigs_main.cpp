#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "comigs/certify.hpp"
#include "comigs/config.hpp"
#include "comigs/errors.hpp"
#include "comigs/io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace comigs;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    long long seed = -1;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "TOML config file");
    cmd->add_option("--out", flags.out_dir, "output directory");
    cmd->add_option("--seed", flags.seed, "RNG seed");
    cmd->add_option("--set", flags.overrides, "dotted override, e.g. trainer.tau=15")
        ->take_all();
}

RunConfig resolve_config(const CommonFlags& flags, std::vector<std::string> extra = {}) {
    std::vector<std::string> overrides = flags.overrides;
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    if (flags.seed >= 0) overrides.push_back("seed=" + std::to_string(flags.seed));
    RunConfig cfg = load_run_config(flags.config_path, overrides);
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    return cfg;
}

std::uint64_t corpora_hash(const std::vector<ClientCorpus>& data, std::uint64_t h) {
    for (const ClientCorpus& c : data) {
        h = fnv1a(c.train.data(), c.train.size() * sizeof(int), h);
        h = fnv1a(c.valid.data(), c.valid.size() * sizeof(int), h);
        h = fnv1a(c.test.data(), c.test.size() * sizeof(int), h);
    }
    return h;
}

int cmd_train(const CommonFlags& flags, const std::vector<std::string>& extra) {
    RunConfig cfg = resolve_config(flags, extra);
    std::vector<ClientCorpus> data = materialize_data(cfg);

    fs::create_directories(cfg.out_dir);
    const std::string snapshot = run_config_to_toml(cfg);
    write_text_file(cfg.out_dir + "/config.toml", snapshot);
    std::uint64_t hash = fnv1a(snapshot.data(), snapshot.size());
    hash = corpora_hash(data, hash);
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(hash));
    write_text_file(cfg.out_dir + "/inputs.hash", std::string(hash_hex) + "\n");

    ExperimentResult result =
        run_experiment(cfg.federation, cfg.model, cfg.pretrain, data);

    write_text_file(cfg.out_dir + "/metrics.csv", metrics_csv(result.rounds));
    write_text_file(cfg.out_dir + "/train_log.csv",
                    train_log_csv(result.train_log, cfg.model.blocks));
    write_text_file(cfg.out_dir + "/expert_scores.json", expert_scores_json(result.rounds));
    write_text_file(cfg.out_dir + "/routing_dump.json", routing_dump_json(result.routing_dump));

    std::vector<TinyLM*> models;
    for (auto& m : result.final_models) models.push_back(m.get());
    save_run_checkpoint(cfg.out_dir + "/checkpoint.json", models);

    const RoundMetrics& last = result.rounds.back();
    std::cout << "final test perplexity (round " << last.round << "):\n";
    for (std::size_t c = 0; c < last.test_ppl.size(); ++c)
        std::cout << "  client " << c << ": " << format_double(last.test_ppl[c]) << "\n";
    double mean = 0.0;
    for (double p : last.test_ppl) mean += p;
    mean /= static_cast<double>(last.test_ppl.size());
    std::cout << "  mean: " << format_double(mean) << "\n";
    std::cout << "artifacts written to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_gen_data(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    if (!cfg.data.dir.empty())
        throw ConfigError("gen-data writes to --out; leave data.dir empty");
    std::vector<CategorySpec> specs =
        build_category_specs(cfg.model.vocab, cfg.data.shared_tokens, cfg.federation.n_clients,
                             cfg.data.shared_mix, cfg.seed);
    std::uint64_t spec_hash = 0xcbf29ce484222325ULL;
    for (const CategorySpec& s : specs)
        spec_hash = fnv1a(s.transition.data(), s.transition.size() * sizeof(double), spec_hash);
    std::vector<ClientCorpus> data = materialize_data(cfg);
    write_corpus_dir(cfg.out_dir, data, cfg.model.vocab, cfg.seed, spec_hash);
    std::cout << "wrote " << data.size() << " client corpora to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_commcost(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    std::printf("%-14s %18s %14s %10s\n", "method", "params_exchanged", "bytes/round", "ratio");
    const Method methods[] = {Method::Local,      Method::FedAvg,     Method::Comigs2G,
                              Method::Comigs2S,   Method::Comigs1G1S, Method::Comigs1GXS};
    for (Method m : methods) {
        std::size_t n_experts = 2;
        if (m == Method::Comigs1GXS && !cfg.federation.experts_per_client.empty())
            n_experts = cfg.federation.experts_per_client[0];
        CommCost cost = comm_bytes_per_round(cfg.model, m, n_experts);
        std::printf("%-14s %18llu %14llu %10.4f\n", method_to_string(m).c_str(),
                    static_cast<unsigned long long>(cost.params_exchanged),
                    static_cast<unsigned long long>(cost.comigs_bytes), cost.ratio);
    }
    return 0;
}

int cmd_verify_convex(const CommonFlags& flags) {
    RunConfig cfg = resolve_config(flags);
    fs::create_directories(cfg.out_dir);

    json report;
    bool ok = true;

    if (!cfg.convex.instance_file.empty()) {
        json doc = json::parse(read_text_file(cfg.convex.instance_file));
        auto to_matrix = [](const json& rows) {
            Eigen::MatrixXd m(rows.size(), rows.at(0).size());
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j)
                    m(i, j) = rows.at(i).at(j).get<double>();
            return m;
        };
        try {
            QuadraticBilevel q(to_matrix(doc.at("A")), to_matrix(doc.at("B")),
                               to_matrix(doc.at("C")));
            ContractionRate r = contraction_rate(q);
            report["explicit_instance"] = {{"operator_norm", r.operator_norm},
                                           {"loose_bound", r.loose_bound}};
        } catch (const std::exception& e) {
            std::cerr << "explicit instance rejected: " << e.what() << "\n";
            return 2;
        }
    }

    QuadCertification quad = certify_quadratic(cfg.convex.quad_instances, cfg.convex.quad_dim_max,
                                               cfg.convex.quad_iters, cfg.seed);
    json quad_rows = json::array();
    for (const QuadInstanceReport& r : quad.instances)
        quad_rows.push_back({{"dim_theta", r.dim_theta},
                             {"dim_phi", r.dim_phi},
                             {"operator_norm", r.operator_norm},
                             {"spectral_radius", r.spectral_radius},
                             {"loose_bound", r.loose_bound},
                             {"max_step_ratio", r.max_step_ratio},
                             {"max_weighted_step_ratio", r.max_weighted_step_ratio},
                             {"contraction_ok", r.contraction_ok},
                             {"weighted_ok", r.weighted_ok},
                             {"bound_ok", r.bound_ok}});
    report["quadratic"] = {{"instances", std::move(quad_rows)},
                           {"hand_instance_ok", quad.hand_instance_ok},
                           {"all_ok", quad.all_ok()}};
    ok = ok && quad.all_ok();
    std::cout << "quadratic contraction sweep: " << (quad.all_ok() ? "PASS" : "FAIL") << " ("
              << quad.instances.size() << " instances)\n";

    DecoupledCertification dec = certify_decoupled(
        cfg.convex.dec_instances, cfg.convex.dec_sweeps, cfg.convex.dec_d_max,
        cfg.convex.dec_n_max, cfg.convex.dec_specialists_max, cfg.convex.kl_instances,
        cfg.convex.curvature_trials, cfg.seed);
    json dec_rows = json::array();
    for (const DecoupledInstanceReport& r : dec.instances)
        dec_rows.push_back({{"d", r.d},
                            {"n", r.n},
                            {"specialists", r.n_specialists},
                            {"alpha", r.alpha},
                            {"mu_pen", r.mu_pen},
                            {"mu_sc", r.mu_sc},
                            {"l_sc", r.l_sc},
                            {"f_start", r.f_start},
                            {"f_star", r.f_star},
                            {"min_curvature", r.min_curvature},
                            {"curvature_positive", r.curvature_positive},
                            {"monotone_ok", r.monotone_ok},
                            {"envelope_ok", r.envelope_ok},
                            {"first_violation", r.first_violation}});
    report["decoupled"] = {{"instances", std::move(dec_rows)},
                           {"kl_checked", dec.kl_checked},
                           {"kl_max_err", dec.kl_max_err},
                           {"kl_ok", dec.kl_ok},
                           {"all_ok", dec.all_ok()}};
    ok = ok && dec.all_ok();
    std::cout << "decoupled certification:     " << (dec.all_ok() ? "PASS" : "FAIL") << " ("
              << dec.instances.size() << " instances, kl_max_err "
              << format_double(dec.kl_max_err) << ")\n";

    write_text_file(cfg.out_dir + "/convex_report.json", report.dump(2));
    std::cout << "report written to " << cfg.out_dir << "/convex_report.json\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collaborative mixture-of-generalists-and-specialists trainer"};
    app.require_subcommand(1);

    CommonFlags train_flags, gen_flags, comm_flags, convex_flags;
    std::string method, experts;
    long long rounds = -1, local_iters = -1, tau = -1, router_steps = -1;
    double lb_weight = -1.0;

    CLI::App* train = app.add_subcommand("train", "run a federated fine-tuning experiment");
    add_common(train, train_flags);
    train->add_option("--method", method, "pretrained|centralized|local|fedavg|comigs-2g|comigs-2s|comigs-1g1s|comigs-1gxs");
    train->add_option("--rounds", rounds, "communication rounds");
    train->add_option("--local-iters", local_iters, "local iterations per round");
    train->add_option("--tau", tau, "router update period");
    train->add_option("--router-steps", router_steps, "router gradient steps per update");
    train->add_option("--lb-weight", lb_weight, "load balancing weight");
    train->add_option("--experts", experts, "per-client expert counts, e.g. 1,2,4,8");

    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic client corpora");
    add_common(gen, gen_flags);

    CLI::App* comm = app.add_subcommand("commcost", "print per-round communication accounting");
    add_common(comm, comm_flags);

    CLI::App* convex = app.add_subcommand("verify-convex", "run the convergence certification");
    add_common(convex, convex_flags);

    try {
        app.parse(argc, argv);
        if (train->parsed()) {
            std::vector<std::string> extra;
            if (!method.empty()) extra.push_back("federation.method=\"" + method + "\"");
            if (rounds >= 0) extra.push_back("federation.rounds=" + std::to_string(rounds));
            if (local_iters >= 0)
                extra.push_back("federation.local_iters=" + std::to_string(local_iters));
            if (tau >= 0) extra.push_back("trainer.tau=" + std::to_string(tau));
            if (router_steps >= 0)
                extra.push_back("trainer.router_steps=" + std::to_string(router_steps));
            if (lb_weight >= 0.0)
                extra.push_back("trainer.lb_weight=" + format_double(lb_weight));
            if (!experts.empty()) {
                std::string arr = "[";
                for (char c : experts) arr += (c == ',') ? ',' : c;
                arr += "]";
                extra.push_back("federation.experts=" + arr);
            }
            return cmd_train(train_flags, extra);
        }
        if (gen->parsed()) return cmd_gen_data(gen_flags);
        if (comm->parsed()) return cmd_commcost(comm_flags);
        if (convex->parsed()) return cmd_verify_convex(convex_flags);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
