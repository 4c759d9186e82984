#include "comigs/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "comigs/errors.hpp"
#include "json.hpp"

namespace comigs {

using nlohmann::json;

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path, std::uint64_t seed) {
    std::string content = read_text_file(path);
    return fnv1a(content.data(), content.size(), seed);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json model_to_json(TinyLM& model) {
    json params = json::object();
    for (NamedParam& p : model.parameters()) {
        json entry;
        entry["shape"] = p.tensor->shape;
        entry["data"] = *p.tensor->data;  // doubles round-trip exactly
        params[p.name] = std::move(entry);
    }
    json doc;
    const ModelConfig& c = model.config();
    doc["config"] = {{"vocab", c.vocab},       {"dim", c.dim},
                     {"context", c.context},   {"blocks", c.blocks},
                     {"mlp_mult", c.mlp_mult}, {"attention", c.attention},
                     {"n_experts", c.n_experts}, {"top_k", c.top_k},
                     {"lora_rank", c.lora_rank}, {"lora_alpha", c.lora_alpha}};
    doc["params"] = std::move(params);
    return doc;
}

void json_into_model(const json& doc, TinyLM& model) {
    const json& params = doc.at("params");
    for (NamedParam& p : model.parameters()) {
        if (!params.contains(p.name))
            throw std::runtime_error("checkpoint lacks parameter " + p.name);
        const json& entry = params.at(p.name);
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != p.tensor->shape)
            throw ShapeError("checkpoint shape mismatch for " + p.name);
        std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (data.size() != p.tensor->size())
            throw ShapeError("checkpoint size mismatch for " + p.name);
        *p.tensor->data = std::move(data);
    }
}

}  // namespace

void save_model_checkpoint(const std::string& path, TinyLM& model) {
    write_text_file(path, model_to_json(model).dump());
}

void load_model_checkpoint(const std::string& path, TinyLM& model) {
    json_into_model(json::parse(read_text_file(path)), model);
}

void save_run_checkpoint(const std::string& path, std::vector<TinyLM*> models) {
    json doc;
    doc["clients"] = json::array();
    for (TinyLM* m : models) doc["clients"].push_back(model_to_json(*m));
    write_text_file(path, doc.dump());
}

// ---------------------------------------------------------------------------
// Token files

void write_token_file(const std::string& path, const std::vector<int>& tokens) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    for (int t : tokens) {
        if (t < 0 || t > 0xFFFF) throw std::runtime_error("token out of uint16 range");
        const unsigned char lo = static_cast<unsigned char>(t & 0xFF);
        const unsigned char hi = static_cast<unsigned char>((t >> 8) & 0xFF);
        f.put(static_cast<char>(lo));
        f.put(static_cast<char>(hi));
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<int> read_token_file(const std::string& path) {
    std::string raw = read_text_file(path);
    if (raw.size() % 2 != 0) throw std::runtime_error("odd token file size: " + path);
    std::vector<int> tokens(raw.size() / 2);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const unsigned char lo = static_cast<unsigned char>(raw[2 * i]);
        const unsigned char hi = static_cast<unsigned char>(raw[2 * i + 1]);
        tokens[i] = lo | (hi << 8);
    }
    return tokens;
}

void write_corpus_dir(const std::string& dir, const std::vector<ClientCorpus>& corpora,
                      std::size_t vocab, std::uint64_t seed, std::uint64_t spec_hash) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json manifest;
    manifest["vocab"] = vocab;
    manifest["seed"] = seed;
    manifest["spec_hash"] = spec_hash;
    manifest["clients"] = json::array();
    for (std::size_t i = 0; i < corpora.size(); ++i) {
        const std::string base = "client" + std::to_string(i);
        write_token_file(dir + "/" + base + ".train.tok", corpora[i].train);
        write_token_file(dir + "/" + base + ".valid.tok", corpora[i].valid);
        write_token_file(dir + "/" + base + ".test.tok", corpora[i].test);
        json entry;
        entry["train_len"] = corpora[i].train.size();
        entry["valid_len"] = corpora[i].valid.size();
        entry["test_len"] = corpora[i].test.size();
        entry["mode"] = corpora[i].mode == SplitMode::InDistribution ? "in_distribution"
                                                                     : "out_of_distribution";
        manifest["clients"].push_back(std::move(entry));
    }
    write_text_file(dir + "/manifest.json", manifest.dump(2));
}

std::vector<ClientCorpus> load_corpus_dir(const std::string& dir, std::size_t expect_vocab) {
    json manifest = json::parse(read_text_file(dir + "/manifest.json"));
    if (manifest.at("vocab").get<std::size_t>() != expect_vocab)
        throw ConfigError("corpus vocab " + manifest.at("vocab").dump() +
                          " does not match model vocab " + std::to_string(expect_vocab));
    std::vector<ClientCorpus> out;
    const std::size_t n = manifest.at("clients").size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::string base = dir + "/client" + std::to_string(i);
        ClientCorpus c;
        c.train = read_token_file(base + ".train.tok");
        c.valid = read_token_file(base + ".valid.tok");
        c.test = read_token_file(base + ".test.tok");
        const json& entry = manifest.at("clients").at(i);
        if (c.train.size() != entry.at("train_len").get<std::size_t>() ||
            c.valid.size() != entry.at("valid_len").get<std::size_t>() ||
            c.test.size() != entry.at("test_len").get<std::size_t>())
            throw std::runtime_error("corpus manifest disagrees with token files");
        c.mode = entry.at("mode").get<std::string>() == "in_distribution"
                     ? SplitMode::InDistribution
                     : SplitMode::OutOfDistribution;
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run artifacts

std::string metrics_csv(const std::vector<RoundMetrics>& rounds) {
    std::ostringstream os;
    os << "round,client,test_ppl,bytes_up,bytes_down\n";
    for (const RoundMetrics& r : rounds)
        for (std::size_t c = 0; c < r.test_ppl.size(); ++c)
            os << r.round << "," << c << "," << format_double(r.test_ppl[c]) << ","
               << r.bytes_up[c] << "," << r.bytes_down[c] << "\n";
    return os.str();
}

std::string train_log_csv(const std::vector<std::vector<IterationRow>>& per_client,
                          std::size_t n_layers) {
    std::ostringstream os;
    os << "client,iteration,train_loss,valid_loss";
    for (std::size_t l = 0; l < n_layers; ++l) os << ",gen_score_l" << l;
    os << "\n";
    for (std::size_t c = 0; c < per_client.size(); ++c)
        for (const IterationRow& row : per_client[c]) {
            os << c << "," << row.iteration << "," << format_double(row.train_loss) << ","
               << format_double(row.valid_loss);
            for (std::size_t l = 0; l < n_layers; ++l)
                os << ","
                   << (l < row.generalist_scores.size()
                           ? format_double(row.generalist_scores[l])
                           : "");
            os << "\n";
        }
    return os.str();
}

std::string expert_scores_json(const std::vector<RoundMetrics>& rounds) {
    json doc = json::array();
    for (const RoundMetrics& r : rounds) {
        json entry;
        entry["round"] = r.round;
        entry["scores"] = r.expert_scores;  // client -> layer -> expert
        doc.push_back(std::move(entry));
    }
    return doc.dump(2);
}

std::string routing_dump_json(const std::vector<std::vector<TokenRouting>>& dumps) {
    json doc = json::array();
    for (std::size_t c = 0; c < dumps.size(); ++c) {
        json rows = json::array();
        for (const TokenRouting& t : dumps[c])
            rows.push_back({{"token", t.token}, {"layer", t.layer}, {"top1_expert", t.top1_expert}});
        doc.push_back({{"client", c}, {"tokens", std::move(rows)}});
    }
    return doc.dump(2);
}

}  // namespace comigs
