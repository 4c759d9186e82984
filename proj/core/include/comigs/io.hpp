#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comigs/data_synth.hpp"
#include "comigs/federation.hpp"
#include "comigs/model.hpp"

namespace comigs {

/// Shortest text form that restores the exact double ("%.17g").
std::string format_double(double v);

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::string& path, std::uint64_t seed = 0xcbf29ce484222325ULL);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// --- model checkpoints: one JSON document of named arrays with shapes ---
void save_model_checkpoint(const std::string& path, TinyLM& model);
void load_model_checkpoint(const std::string& path, TinyLM& model);
void save_run_checkpoint(const std::string& path, std::vector<TinyLM*> models);

// --- corpora: raw uint16 little-endian token files plus a JSON manifest ---
void write_token_file(const std::string& path, const std::vector<int>& tokens);
std::vector<int> read_token_file(const std::string& path);
void write_corpus_dir(const std::string& dir, const std::vector<ClientCorpus>& corpora,
                      std::size_t vocab, std::uint64_t seed, std::uint64_t spec_hash);
std::vector<ClientCorpus> load_corpus_dir(const std::string& dir, std::size_t expect_vocab);

// --- run artifacts ---
std::string metrics_csv(const std::vector<RoundMetrics>& rounds);
std::string train_log_csv(const std::vector<std::vector<IterationRow>>& per_client,
                          std::size_t n_layers);
std::string expert_scores_json(const std::vector<RoundMetrics>& rounds);
std::string routing_dump_json(const std::vector<std::vector<TokenRouting>>& dumps);

}  // namespace comigs
