#include "comigs/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "comigs/errors.hpp"
#include "comigs/io.hpp"

namespace comigs {

namespace {

struct TomlValue {
    enum class Kind { Int, Float, Bool, String, Array };
    Kind kind = Kind::Int;
    long long i = 0;
    double d = 0.0;
    bool b = false;
    std::string s;
    std::vector<TomlValue> arr;

    double as_float(const std::string& key) const {
        if (kind == Kind::Float) return d;
        if (kind == Kind::Int) return static_cast<double>(i);
        throw ConfigError("config field '" + key + "' expects a number");
    }
    long long as_int(const std::string& key) const {
        if (kind != Kind::Int) throw ConfigError("config field '" + key + "' expects an integer");
        return i;
    }
    std::size_t as_size(const std::string& key) const {
        const long long v = as_int(key);
        if (v < 0) throw ConfigError("config field '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }
    bool as_bool(const std::string& key) const {
        if (kind != Kind::Bool) throw ConfigError("config field '" + key + "' expects a boolean");
        return b;
    }
    const std::string& as_string(const std::string& key) const {
        if (kind != Kind::String) throw ConfigError("config field '" + key + "' expects a string");
        return s;
    }
    std::vector<std::size_t> as_size_array(const std::string& key) const {
        if (kind != Kind::Array)
            throw ConfigError("config field '" + key + "' expects an array");
        std::vector<std::size_t> out;
        for (const TomlValue& v : arr) out.push_back(v.as_size(key));
        return out;
    }
};

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

TomlValue parse_value(const std::string& raw, const std::string& key) {
    const std::string v = trim(raw);
    if (v.empty()) throw ConfigError("config field '" + key + "' has an empty value");
    TomlValue out;
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"')
            throw ConfigError("config field '" + key + "' has an unterminated string");
        out.kind = TomlValue::Kind::String;
        out.s = v.substr(1, v.size() - 2);
        return out;
    }
    if (v == "true" || v == "false") {
        out.kind = TomlValue::Kind::Bool;
        out.b = v == "true";
        return out;
    }
    if (v.front() == '[') {
        if (v.back() != ']')
            throw ConfigError("config field '" + key + "' has an unterminated array");
        out.kind = TomlValue::Kind::Array;
        const std::string body = trim(v.substr(1, v.size() - 2));
        if (body.empty()) return out;
        std::size_t start = 0;
        while (start <= body.size()) {
            std::size_t comma = body.find(',', start);
            const std::string item =
                comma == std::string::npos ? body.substr(start) : body.substr(start, comma - start);
            out.arr.push_back(parse_value(item, key));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }
    // Number: integer unless it carries a decimal point or exponent.
    const bool is_float = v.find_first_of(".eE") != std::string::npos &&
                          v.find_first_not_of("+-0123456789") != std::string::npos;
    try {
        std::size_t used = 0;
        if (is_float) {
            out.kind = TomlValue::Kind::Float;
            out.d = std::stod(v, &used);
        } else {
            out.kind = TomlValue::Kind::Int;
            out.i = std::stoll(v, &used);
        }
        if (used != v.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw ConfigError("config field '" + key + "' has an unparsable value '" + v + "'");
    }
    return out;
}

std::vector<std::pair<std::string, TomlValue>> parse_toml(const std::string& text) {
    std::vector<std::pair<std::string, TomlValue>> out;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": malformed table");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        out.emplace_back(key, parse_value(line.substr(eq + 1), key));
    }
    return out;
}

void apply_kv(RunConfig& cfg, const std::string& key, const TomlValue& v) {
    // top level
    if (key == "seed") { cfg.seed = static_cast<std::uint64_t>(v.as_int(key)); cfg.federation.seed = cfg.seed; return; }
    if (key == "out") { cfg.out_dir = v.as_string(key); return; }
    // federation
    if (key == "federation.method") { cfg.federation.method = method_from_string(v.as_string(key)); return; }
    if (key == "federation.clients") { cfg.federation.n_clients = v.as_size(key); return; }
    if (key == "federation.experts") { cfg.federation.experts_per_client = v.as_size_array(key); return; }
    if (key == "federation.rounds") { cfg.federation.rounds = v.as_size(key); return; }
    if (key == "federation.local_iters") { cfg.federation.local_iters = v.as_size(key); return; }
    if (key == "federation.threads") { cfg.federation.threads = v.as_size(key); return; }
    if (key == "federation.final_aggregate_eval") { cfg.federation.final_aggregate_eval = v.as_bool(key); return; }
    // trainer
    if (key == "trainer.expert_lr") { cfg.federation.trainer.expert_lr = v.as_float(key); return; }
    if (key == "trainer.router_lr") { cfg.federation.trainer.router_lr = v.as_float(key); return; }
    if (key == "trainer.tau") { cfg.federation.trainer.tau = v.as_size(key); return; }
    if (key == "trainer.router_steps") { cfg.federation.trainer.router_steps = v.as_size(key); return; }
    if (key == "trainer.lb_weight") { cfg.federation.trainer.lb_weight = v.as_float(key); return; }
    if (key == "trainer.batch_size") { cfg.federation.trainer.batch_size = v.as_size(key); return; }
    if (key == "trainer.lb_mode") {
        const std::string& s = v.as_string(key);
        if (s == "uniform") cfg.federation.trainer.lb_mode = LoadBalanceMode::Uniform;
        else if (s == "generalist_favored") cfg.federation.trainer.lb_mode = LoadBalanceMode::GeneralistFavored;
        else throw ConfigError("trainer.lb_mode must be 'uniform' or 'generalist_favored'");
        return;
    }
    if (key == "trainer.router_on_train") { cfg.federation.trainer.router_on_train = v.as_bool(key); return; }
    // model
    if (key == "model.vocab") { cfg.model.vocab = v.as_size(key); return; }
    if (key == "model.dim") { cfg.model.dim = v.as_size(key); return; }
    if (key == "model.context") { cfg.model.context = v.as_size(key); return; }
    if (key == "model.blocks") { cfg.model.blocks = v.as_size(key); return; }
    if (key == "model.mlp_mult") { cfg.model.mlp_mult = v.as_size(key); return; }
    if (key == "model.attention") { cfg.model.attention = v.as_bool(key); return; }
    if (key == "model.lora_rank") { cfg.model.lora_rank = v.as_size(key); return; }
    if (key == "model.lora_alpha") { cfg.model.lora_alpha = v.as_float(key); return; }
    if (key == "model.aggregate_nonrouted") { cfg.model.aggregate_nonrouted = v.as_bool(key); return; }
    // pretrain
    if (key == "pretrain.steps") { cfg.pretrain.steps = v.as_size(key); return; }
    if (key == "pretrain.lr") { cfg.pretrain.lr = v.as_float(key); return; }
    if (key == "pretrain.batch_windows") { cfg.pretrain.batch_windows = v.as_size(key); return; }
    // data
    if (key == "data.dir") { cfg.data.dir = v.as_string(key); return; }
    if (key == "data.shared_tokens") { cfg.data.shared_tokens = v.as_size(key); return; }
    if (key == "data.shared_mix") { cfg.data.shared_mix = v.as_float(key); return; }
    if (key == "data.train_tokens") { cfg.data.train_tokens = v.as_size(key); return; }
    if (key == "data.valid_tokens") { cfg.data.valid_tokens = v.as_size(key); return; }
    if (key == "data.test_tokens") { cfg.data.test_tokens = v.as_size(key); return; }
    if (key == "data.train_lengths") { cfg.data.train_lengths = v.as_size_array(key); return; }
    if (key == "data.split") {
        const std::string& s = v.as_string(key);
        if (s == "in_distribution") cfg.data.split = SplitMode::InDistribution;
        else if (s == "out_of_distribution") cfg.data.split = SplitMode::OutOfDistribution;
        else throw ConfigError("data.split must be 'in_distribution' or 'out_of_distribution'");
        return;
    }
    // convex
    if (key == "convex.quad_instances") { cfg.convex.quad_instances = v.as_size(key); return; }
    if (key == "convex.quad_dim_max") { cfg.convex.quad_dim_max = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.quad_iters") { cfg.convex.quad_iters = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.dec_instances") { cfg.convex.dec_instances = v.as_size(key); return; }
    if (key == "convex.dec_sweeps") { cfg.convex.dec_sweeps = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.dec_d_max") { cfg.convex.dec_d_max = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.dec_n_max") { cfg.convex.dec_n_max = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.dec_specialists_max") { cfg.convex.dec_specialists_max = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.kl_instances") { cfg.convex.kl_instances = v.as_size(key); return; }
    if (key == "convex.curvature_trials") { cfg.convex.curvature_trials = static_cast<int>(v.as_int(key)); return; }
    if (key == "convex.instance_file") { cfg.convex.instance_file = v.as_string(key); return; }
    throw ConfigError("unknown config field '" + key + "'");
}

}  // namespace

RunConfig parse_run_config(const std::string& toml_text,
                           const std::vector<std::string>& dotted_overrides) {
    RunConfig cfg;
    for (const auto& [key, value] : parse_toml(toml_text)) apply_kv(cfg, key, value);
    for (const std::string& ov : dotted_overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' must look like section.key=value");
        const std::string key = trim(ov.substr(0, eq));
        apply_kv(cfg, key, parse_value(ov.substr(eq + 1), key));
    }
    if (cfg.federation.experts_per_client.size() != cfg.federation.n_clients)
        cfg.federation.experts_per_client.resize(cfg.federation.n_clients, 2);
    return cfg;
}

RunConfig load_run_config(const std::string& toml_path,
                          const std::vector<std::string>& dotted_overrides) {
    const std::string text = toml_path.empty() ? std::string() : read_text_file(toml_path);
    return parse_run_config(text, dotted_overrides);
}

std::string run_config_to_toml(const RunConfig& cfg) {
    std::ostringstream os;
    os << "seed = " << cfg.seed << "\n";
    os << "out = \"" << cfg.out_dir << "\"\n\n";
    os << "[federation]\n";
    os << "method = \"" << method_to_string(cfg.federation.method) << "\"\n";
    os << "clients = " << cfg.federation.n_clients << "\n";
    os << "experts = [";
    for (std::size_t i = 0; i < cfg.federation.experts_per_client.size(); ++i)
        os << (i ? ", " : "") << cfg.federation.experts_per_client[i];
    os << "]\n";
    os << "rounds = " << cfg.federation.rounds << "\n";
    os << "local_iters = " << cfg.federation.local_iters << "\n";
    os << "threads = " << cfg.federation.threads << "\n";
    os << "final_aggregate_eval = " << (cfg.federation.final_aggregate_eval ? "true" : "false")
       << "\n\n";
    os << "[trainer]\n";
    os << "expert_lr = " << format_double(cfg.federation.trainer.expert_lr) << "\n";
    os << "router_lr = " << format_double(cfg.federation.trainer.router_lr) << "\n";
    os << "tau = " << cfg.federation.trainer.tau << "\n";
    os << "router_steps = " << cfg.federation.trainer.router_steps << "\n";
    os << "lb_weight = " << format_double(cfg.federation.trainer.lb_weight) << "\n";
    os << "batch_size = " << cfg.federation.trainer.batch_size << "\n";
    os << "lb_mode = \""
       << (cfg.federation.trainer.lb_mode == LoadBalanceMode::Uniform ? "uniform"
                                                                      : "generalist_favored")
       << "\"\n";
    os << "router_on_train = " << (cfg.federation.trainer.router_on_train ? "true" : "false")
       << "\n\n";
    os << "[model]\n";
    os << "vocab = " << cfg.model.vocab << "\n";
    os << "dim = " << cfg.model.dim << "\n";
    os << "context = " << cfg.model.context << "\n";
    os << "blocks = " << cfg.model.blocks << "\n";
    os << "mlp_mult = " << cfg.model.mlp_mult << "\n";
    os << "attention = " << (cfg.model.attention ? "true" : "false") << "\n";
    os << "lora_rank = " << cfg.model.lora_rank << "\n";
    os << "lora_alpha = " << format_double(cfg.model.lora_alpha) << "\n";
    os << "aggregate_nonrouted = " << (cfg.model.aggregate_nonrouted ? "true" : "false") << "\n\n";
    os << "[pretrain]\n";
    os << "steps = " << cfg.pretrain.steps << "\n";
    os << "lr = " << format_double(cfg.pretrain.lr) << "\n";
    os << "batch_windows = " << cfg.pretrain.batch_windows << "\n\n";
    os << "[data]\n";
    os << "dir = \"" << cfg.data.dir << "\"\n";
    os << "shared_tokens = " << cfg.data.shared_tokens << "\n";
    os << "shared_mix = " << format_double(cfg.data.shared_mix) << "\n";
    os << "train_tokens = " << cfg.data.train_tokens << "\n";
    os << "valid_tokens = " << cfg.data.valid_tokens << "\n";
    os << "test_tokens = " << cfg.data.test_tokens << "\n";
    if (!cfg.data.train_lengths.empty()) {
        os << "train_lengths = [";
        for (std::size_t i = 0; i < cfg.data.train_lengths.size(); ++i)
            os << (i ? ", " : "") << cfg.data.train_lengths[i];
        os << "]\n";
    }
    os << "split = \""
       << (cfg.data.split == SplitMode::InDistribution ? "in_distribution"
                                                       : "out_of_distribution")
       << "\"\n\n";
    os << "[convex]\n";
    os << "quad_instances = " << cfg.convex.quad_instances << "\n";
    os << "quad_dim_max = " << cfg.convex.quad_dim_max << "\n";
    os << "quad_iters = " << cfg.convex.quad_iters << "\n";
    os << "dec_instances = " << cfg.convex.dec_instances << "\n";
    os << "dec_sweeps = " << cfg.convex.dec_sweeps << "\n";
    os << "dec_d_max = " << cfg.convex.dec_d_max << "\n";
    os << "dec_n_max = " << cfg.convex.dec_n_max << "\n";
    os << "dec_specialists_max = " << cfg.convex.dec_specialists_max << "\n";
    os << "kl_instances = " << cfg.convex.kl_instances << "\n";
    os << "curvature_trials = " << cfg.convex.curvature_trials << "\n";
    if (!cfg.convex.instance_file.empty())
        os << "instance_file = \"" << cfg.convex.instance_file << "\"\n";
    return os.str();
}

std::vector<ClientCorpus> materialize_data(const RunConfig& cfg) {
    if (!cfg.data.dir.empty()) return load_corpus_dir(cfg.data.dir, cfg.model.vocab);
    std::vector<CategorySpec> specs =
        build_category_specs(cfg.model.vocab, cfg.data.shared_tokens, cfg.federation.n_clients,
                             cfg.data.shared_mix, cfg.seed);
    CorpusLengths lengths;
    lengths.train = cfg.data.train_tokens;
    lengths.valid = cfg.data.valid_tokens;
    lengths.test = cfg.data.test_tokens;
    if (!cfg.data.train_lengths.empty())
        return quantity_profile(specs, cfg.seed, cfg.data.train_lengths, lengths, cfg.data.split);
    return generate(specs, cfg.seed, lengths, cfg.data.split);
}

}  // namespace comigs
