#include "comigs/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "comigs/errors.hpp"

namespace comigs {

void CategorySpec::validate() const {
    if (transition.size() != vocab * vocab)
        throw ShapeError("CategorySpec: transition must be vocab x vocab");
    for (std::size_t i = 0; i < vocab; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double p = row(i, j);
            if (p < 0.0) throw ConfigError("CategorySpec: negative transition probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw ConfigError("CategorySpec: row " + std::to_string(i) + " sums to " +
                              std::to_string(sum));
        if (row(i, i) == 1.0)
            throw ConfigError("CategorySpec: state " + std::to_string(i) + " is absorbing");
    }
    for (int s : shared_tokens)
        for (int c : content_tokens)
            if (s == c) throw ConfigError("CategorySpec: shared and content sets overlap");
}

namespace {

// A strictly positive random distribution over `support` inside a row of
// width `vocab`, derived deterministically from the rng stream.
void fill_support_row(std::vector<double>& row, const std::vector<int>& support, Rng& rng) {
    double sum = 0.0;
    for (int j : support) {
        row[j] = 0.05 + rng.uniform();
        sum += row[j];
    }
    for (int j : support) row[j] /= sum;
}

int sample_row(const CategorySpec& spec, int state, Rng& rng) {
    double u = rng.uniform();
    const double* r = spec.transition.data() + static_cast<std::size_t>(state) * spec.vocab;
    for (std::size_t j = 0; j + 1 < spec.vocab; ++j) {
        u -= r[j];
        if (u < 0.0) return static_cast<int>(j);
    }
    return static_cast<int>(spec.vocab - 1);
}

std::vector<int> walk(const CategorySpec& spec, std::size_t length, Rng& rng, int* state_io) {
    std::vector<int> stream;
    stream.reserve(length);
    int state = *state_io;
    for (std::size_t t = 0; t < length; ++t) {
        state = sample_row(spec, state, rng);
        stream.push_back(state);
    }
    *state_io = state;
    return stream;
}

// Out-of-distribution stream: fixed-size blocks cycling through every
// category, each continuing its own chain.
std::vector<int> mixture_walk(const std::vector<CategorySpec>& specs, std::size_t length,
                              Rng& rng) {
    constexpr std::size_t kBlock = 256;
    std::vector<int> states(specs.size());
    for (std::size_t c = 0; c < specs.size(); ++c)
        states[c] = specs[c].shared_tokens[rng.uniform_int(specs[c].shared_tokens.size())];
    std::vector<int> stream;
    stream.reserve(length);
    std::size_t c = 0;
    while (stream.size() < length) {
        const std::size_t take = std::min(kBlock, length - stream.size());
        std::vector<int> seg = walk(specs[c], take, rng, &states[c]);
        stream.insert(stream.end(), seg.begin(), seg.end());
        c = (c + 1) % specs.size();
    }
    return stream;
}

}  // namespace

std::vector<CategorySpec> build_category_specs(std::size_t vocab, std::size_t n_shared,
                                               std::size_t n_clients, double shared_mix,
                                               std::uint64_t structure_seed) {
    if (n_clients == 0) throw ConfigError("build_category_specs: need at least one client");
    if (n_shared < 2 || n_shared >= vocab)
        throw ConfigError("build_category_specs: shared set must satisfy 2 <= |S| < vocab");
    if (shared_mix < 0.0 || shared_mix > 1.0)
        throw ConfigError("build_category_specs: shared_mix must lie in [0, 1]");
    const std::size_t content_per = (vocab - n_shared) / n_clients;
    if (content_per < 2)
        throw ConfigError("build_category_specs: not enough content tokens per client");

    std::vector<int> shared(n_shared);
    for (std::size_t j = 0; j < n_shared; ++j) shared[j] = static_cast<int>(j);

    // The shared component must be byte-identical across categories, so it
    // is drawn first from its own stream.
    std::vector<std::vector<double>> shared_rows(vocab, std::vector<double>(vocab, 0.0));
    {
        Rng rng(mix_seed(structure_seed ^ 0x5eed5eedULL));
        for (std::size_t i = 0; i < vocab; ++i) fill_support_row(shared_rows[i], shared, rng);
    }

    std::vector<CategorySpec> specs;
    for (std::size_t c = 0; c < n_clients; ++c) {
        CategorySpec spec;
        spec.vocab = vocab;
        spec.shared_tokens = shared;
        spec.shared_mix = shared_mix;
        for (std::size_t j = 0; j < content_per; ++j)
            spec.content_tokens.push_back(static_cast<int>(n_shared + c * content_per + j));

        // Function-token states chain mostly among themselves (identically
        // across clients, with a small client-specific escape into content);
        // content states are client-specific with `shared_mix` weight back
        // toward the shared set. This gives tokens a source-dependent
        // generalist/specialist character rather than one global blend.
        const double escape = 0.3 * (1.0 - shared_mix);
        Rng rng(stream_seed(structure_seed, c, 0, /*purpose=*/7));
        spec.transition.assign(vocab * vocab, 0.0);
        std::vector<double> content_row(vocab, 0.0);
        for (std::size_t i = 0; i < vocab; ++i) {
            std::fill(content_row.begin(), content_row.end(), 0.0);
            fill_support_row(content_row, spec.content_tokens, rng);
            const bool from_shared = i < n_shared;
            const double w = from_shared ? 1.0 - escape : shared_mix;
            for (std::size_t j = 0; j < vocab; ++j)
                spec.transition[i * vocab + j] =
                    w * shared_rows[i][j] + (1.0 - w) * content_row[j];
        }
        spec.validate();
        specs.push_back(std::move(spec));
    }
    return specs;
}

std::vector<ClientCorpus> quantity_profile(const std::vector<CategorySpec>& specs,
                                           std::uint64_t seed,
                                           const std::vector<std::size_t>& train_lengths,
                                           const CorpusLengths& eval_lengths, SplitMode mode) {
    if (train_lengths.size() != specs.size())
        throw ConfigError("quantity_profile: one train length per client required");
    for (std::size_t len : train_lengths)
        if (len == 0) throw ConfigError("quantity_profile: zero-length train stream");
    if (eval_lengths.valid == 0 || eval_lengths.test == 0)
        throw ConfigError("quantity_profile: zero-length eval stream");

    std::vector<ClientCorpus> out;
    for (std::size_t c = 0; c < specs.size(); ++c) {
        specs[c].validate();
        ClientCorpus corpus;
        corpus.mode = mode;
        {
            Rng rng(stream_seed(seed, c, 0, /*purpose=*/1));
            int state = specs[c].shared_tokens[rng.uniform_int(specs[c].shared_tokens.size())];
            corpus.train = walk(specs[c], train_lengths[c], rng, &state);
        }
        if (mode == SplitMode::InDistribution) {
            Rng rng(stream_seed(seed, c, 0, /*purpose=*/2));
            int state = specs[c].shared_tokens[rng.uniform_int(specs[c].shared_tokens.size())];
            corpus.valid = walk(specs[c], eval_lengths.valid, rng, &state);
            corpus.test = walk(specs[c], eval_lengths.test, rng, &state);
        } else {
            Rng rng(stream_seed(seed, c, 0, /*purpose=*/3));
            corpus.valid = mixture_walk(specs, eval_lengths.valid, rng);
            corpus.test = mixture_walk(specs, eval_lengths.test, rng);
        }
        out.push_back(std::move(corpus));
    }
    return out;
}

std::vector<ClientCorpus> generate(const std::vector<CategorySpec>& specs, std::uint64_t seed,
                                   const CorpusLengths& lengths, SplitMode mode) {
    return quantity_profile(specs, seed,
                            std::vector<std::size_t>(specs.size(), lengths.train), lengths, mode);
}

std::vector<double> token_histogram(const std::vector<int>& stream, std::size_t vocab) {
    std::vector<double> h(vocab, 0.0);
    for (int t : stream) h[t] += 1.0;
    for (double& v : h) v /= static_cast<double>(stream.size());
    return h;
}

double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
    return 0.5 * tv;
}

double jensen_shannon(const std::vector<double>& p, const std::vector<double>& q) {
    auto kl = [](const std::vector<double>& a, const std::vector<double>& b) {
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i] > 0.0) d += a[i] * std::log(a[i] / b[i]);
        return d;
    };
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

}  // namespace comigs
