#pragma once

#include <string>
#include <vector>

#include "comigs/data_synth.hpp"
#include "comigs/federation.hpp"

namespace comigs {

struct DataConfig {
    std::string dir;  // load corpora from here when non-empty, else generate
    std::size_t shared_tokens = 16;
    double shared_mix = 0.6;
    std::size_t train_tokens = 50000;
    std::size_t valid_tokens = 5000;
    std::size_t test_tokens = 5000;
    std::vector<std::size_t> train_lengths;  // optional per-client skew
    SplitMode split = SplitMode::InDistribution;
};

struct ConvexConfig {
    std::size_t quad_instances = 100;
    int quad_dim_max = 8;
    int quad_iters = 50;
    std::size_t dec_instances = 20;
    int dec_sweeps = 200;
    int dec_d_max = 4;
    int dec_n_max = 20;
    int dec_specialists_max = 3;
    std::size_t kl_instances = 50;
    int curvature_trials = 500;
    std::string instance_file;  // optional explicit quadratic instance (JSON)
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";
    FederationConfig federation;
    ModelConfig model;
    PretrainConfig pretrain;
    DataConfig data;
    ConvexConfig convex;
};

/// Parses the TOML subset used by the config files: [section] tables and
/// key = value lines with integers, floats, booleans, quoted strings and
/// flat arrays. Unknown keys are rejected with the offending field name.
RunConfig parse_run_config(const std::string& toml_text,
                           const std::vector<std::string>& dotted_overrides = {});

RunConfig load_run_config(const std::string& toml_path,
                          const std::vector<std::string>& dotted_overrides = {});

/// Canonical TOML snapshot of a config (written into every run directory).
std::string run_config_to_toml(const RunConfig& cfg);

/// Builds (or loads) the per-client corpora described by the config.
std::vector<ClientCorpus> materialize_data(const RunConfig& cfg);

}  // namespace comigs
