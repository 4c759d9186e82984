#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comigs/rng.hpp"

namespace comigs {

/// First-order Markov source for one client category: every row of the
/// transition matrix is a mix of a shared component (identical across
/// categories, supported on the shared token set) and a category-specific
/// component over the category's own content tokens.
struct CategorySpec {
    std::size_t vocab = 64;
    std::vector<int> shared_tokens;
    std::vector<int> content_tokens;
    std::vector<double> transition;  // vocab x vocab, row-stochastic
    double shared_mix = 0.5;

    double row(std::size_t from, std::size_t to) const { return transition[from * vocab + to]; }
    void validate() const;
};

enum class SplitMode { InDistribution, OutOfDistribution };

struct ClientCorpus {
    std::vector<int> train;
    std::vector<int> valid;
    std::vector<int> test;
    SplitMode mode = SplitMode::InDistribution;
};

struct CorpusLengths {
    std::size_t train = 50000;
    std::size_t valid = 5000;
    std::size_t test = 5000;
};

/// Builds one spec per client with disjoint content-token blocks and a
/// shared block, all transition structure derived from `structure_seed`.
std::vector<CategorySpec> build_category_specs(std::size_t vocab, std::size_t n_shared,
                                               std::size_t n_clients, double shared_mix,
                                               std::uint64_t structure_seed);

/// Deterministic corpora: per-client train streams from the client's own
/// chain; validation and test either from the same chain (in-distribution)
/// or from a uniform mixture over all categories (out-of-distribution).
std::vector<ClientCorpus> generate(const std::vector<CategorySpec>& specs, std::uint64_t seed,
                                   const CorpusLengths& lengths, SplitMode mode);

/// Same, with per-client train lengths (data-quantity skew experiments).
std::vector<ClientCorpus> quantity_profile(const std::vector<CategorySpec>& specs,
                                           std::uint64_t seed,
                                           const std::vector<std::size_t>& train_lengths,
                                           const CorpusLengths& eval_lengths, SplitMode mode);

/// Normalized token histogram of a stream.
std::vector<double> token_histogram(const std::vector<int>& stream, std::size_t vocab);

/// Total variation distance between two distributions.
double total_variation(const std::vector<double>& p, const std::vector<double>& q);

/// Jensen-Shannon divergence (natural log).
double jensen_shannon(const std::vector<double>& p, const std::vector<double>& q);

}  // namespace comigs
