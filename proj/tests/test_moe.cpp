#include "doctest.h"

#include <cmath>

#include "comigs/grad_check.hpp"
#include "comigs/moe.hpp"
#include "comigs/rng.hpp"
#include "oracles.hpp"

using namespace comigs;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(s);
    for (double& v : *t.data) v = scale * rng.normal();
    return t;
}

MoELoraLayer small_layer(Rng& rng, std::size_t n_experts, int top_k, bool zero_adapters = false) {
    MoELoraLayer layer;
    layer.base = random_tensor({4, 5}, rng, 0.4);
    for (std::size_t j = 0; j < n_experts; ++j) {
        LoraAdapter ad;
        ad.a = zero_adapters ? Tensor::zeros({4, 2}) : random_tensor({4, 2}, rng, 0.4);
        ad.b = zero_adapters ? Tensor::zeros({2, 5}) : random_tensor({2, 5}, rng, 0.4);
        ad.rank = 2;
        ad.alpha = 4.0;
        layer.experts.push_back(ad);
    }
    layer.router = RouterLinear{random_tensor({4, n_experts}, rng, 0.4)};
    layer.top_k = top_k;
    layer.validate();
    return layer;
}

RoutingRecord record_from_probs(Tape& tape, const std::vector<std::vector<double>>& probs,
                                int k) {
    // Logits = log(p) reproduce p exactly up to normalization.
    const std::size_t t_count = probs.size(), n = probs[0].size();
    Tensor logits = Tensor::zeros({t_count, n});
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t j = 0; j < n; ++j) logits.at(t, j) = std::log(probs[t][j]);
    RouterLinear router{Tensor::zeros({t_count, n})};
    // Bypass the matmul: feed identity activations through a router whose
    // weight equals the logits.
    Tensor eye = Tensor::zeros({t_count, t_count});
    for (std::size_t i = 0; i < t_count; ++i) eye.at(i, i) = 1.0;
    router.weight = logits;
    return route_topk(tape, router, eye, k);
}

}  // namespace

TEST_SUITE("moe") {

TEST_CASE("lora delta: zero adapter, rank-stabilized scaling, rank-1 hand case") {
    Rng rng(3);
    Tape t(false);
    MoELoraLayer layer = small_layer(rng, 2, 2, /*zero_adapters=*/true);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor delta = lora_delta_apply(t, layer, 0, x);
    for (double v : *delta.data) CHECK(v == 0.0);

    LoraAdapter scaled;
    scaled.rank = 8;
    scaled.alpha = 16.0;
    CHECK(scaled.scaling() == doctest::Approx(16.0 / std::sqrt(8.0)).epsilon(1e-15));
    CHECK(scaled.scaling() == doctest::Approx(5.656854).epsilon(1e-6));

    MoELoraLayer rank1;
    rank1.base = Tensor::zeros({2, 2});
    LoraAdapter ad;
    ad.a = Tensor({2, 1}, {1, 0});
    ad.b = Tensor({1, 2}, {1, 0});
    ad.rank = 1;
    ad.alpha = 1.0;  // gamma = 1
    rank1.experts.push_back(ad);
    rank1.top_k = 1;
    Tensor x1({1, 2}, {1, 0});
    Tensor d1 = lora_delta_apply(t, rank1, 0, x1);
    CHECK(d1.at(0, 0) == 1.0);
    CHECK(d1.at(0, 1) == 0.0);

    CHECK_THROWS_AS(lora_delta_apply(t, layer, 7, x), std::out_of_range);
}

TEST_CASE("route_topk: symmetric, renormalization, single expert, ties") {
    Tape t(false);
    RoutingRecord sym = record_from_probs(t, {{0.5, 0.5}}, 2);
    CHECK(sym.selected[0] == std::vector<int>{0, 1});
    CHECK(sym.mix.at(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(sym.mix.at(0, 1) == doctest::Approx(0.5).epsilon(1e-14));

    RoutingRecord r = record_from_probs(t, {{0.5, 0.3, 0.2}}, 2);
    CHECK(r.selected[0] == std::vector<int>{0, 1});
    CHECK(r.mix.at(0, 0) == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(r.mix.at(0, 1) == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(r.mix.at(0, 2) == 0.0);

    RoutingRecord one = record_from_probs(t, {{1.0}}, 1);
    CHECK(one.selected[0] == std::vector<int>{0});
    CHECK(one.mix.at(0, 0) == 1.0);

    // Exact three-way tie: lower indices win.
    RoutingRecord tie = record_from_probs(t, {{0.25, 0.25, 0.25}}, 2);
    CHECK(tie.selected[0] == std::vector<int>{0, 1});
}

TEST_CASE("route_topk selected set is invariant under logit shifts") {
    Rng rng(5);
    Tape t(false);
    for (int trial = 0; trial < 30; ++trial) {
        RouterLinear router{random_tensor({4, 5}, rng)};
        Tensor x = random_tensor({6, 4}, rng);
        RoutingRecord base = route_topk(t, router, x, 2);

        // Adding a constant to every logit leaves the top-k set alone.
        const double c = 3.7 * rng.normal();
        Tensor shifted_logits = t.matmul(x, router.weight).clone();
        for (double& v : *shifted_logits.data) v += c;
        RouterLinear direct{shifted_logits};
        Tensor eye = Tensor::zeros({6, 6});
        for (std::size_t i = 0; i < 6; ++i) eye.at(i, i) = 1.0;
        RoutingRecord after = route_topk(t, direct, eye, 2);
        CHECK(base.selected == after.selected);
    }
}

TEST_CASE("renormalized top-k weights sum to one") {
    Rng rng(9);
    Tape t(false);
    for (int trial = 0; trial < 30; ++trial) {
        RouterLinear router{random_tensor({4, 6}, rng, 2.0)};
        Tensor x = random_tensor({8, 4}, rng);
        RoutingRecord rec = route_topk(t, router, x, 3);
        for (std::size_t tok = 0; tok < 8; ++tok) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 6; ++j) sum += rec.mix.at(tok, j);
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("moe_forward degenerate cases") {
    Rng rng(11);
    Tape t(false);

    // Zero adapters: base passthrough regardless of router.
    MoELoraLayer zero = small_layer(rng, 3, 2, /*zero_adapters=*/true);
    Tensor x = random_tensor({5, 4}, rng);
    MoeForwardResult r = moe_forward(t, zero, x);
    Tensor base_only = t.matmul(x, zero.base);
    CHECK(*r.y.data == *base_only.data);

    // Single expert: router irrelevant, y = base + delta0.
    MoELoraLayer one = small_layer(rng, 1, 1);
    MoeForwardResult r1 = moe_forward(t, one, x);
    Tensor manual = t.add(t.matmul(x, one.base), lora_delta_apply(t, one, 0, x));
    CHECK(*r1.y.data == *manual.data);

    // Symmetric router: equal mixture of both deltas.
    MoELoraLayer sym = small_layer(rng, 2, 2);
    sym.router->weight = Tensor::zeros({4, 2});
    MoeForwardResult r2 = moe_forward(t, sym, x);
    Tensor expect = t.add(
        t.matmul(x, sym.base),
        t.add(t.scale(lora_delta_apply(t, sym, 0, x), 0.5),
              t.scale(lora_delta_apply(t, sym, 1, x), 0.5)));
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK((*r2.y.data)[i] == doctest::Approx((*expect.data)[i]).epsilon(1e-14));
}

TEST_CASE("moe_forward + cross_entropy gradient check includes router softmax") {
    Rng rng(13);
    MoELoraLayer layer = small_layer(rng, 3, 2);
    Tensor x = random_tensor({4, 4}, rng, 0.5);
    std::vector<int> ys{1, 0, 4, 2};
    auto f = [&](Tape& t) {
        t.watch(layer.base);
        t.watch(layer.router->weight);
        for (LoraAdapter& ad : layer.experts) {
            t.watch(ad.a);
            t.watch(ad.b);
        }
        MoeForwardResult r = moe_forward(t, layer, x);
        return t.cross_entropy(r.y, ys);
    };
    std::vector<Tensor*> params{&layer.router->weight, &layer.base};
    for (LoraAdapter& ad : layer.experts) {
        params.push_back(&ad.a);
        params.push_back(&ad.b);
    }
    CHECK(grad_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("load balance loss worked examples") {
    Tape t(false);

    // n=2, top-2: every token selects both, P = (0.5, 0.5).
    RoutingRecord both = record_from_probs(t, {{0.5, 0.5}, {0.5, 0.5}}, 2);
    CHECK(load_balance_loss(t, both, LoadBalanceMode::GeneralistFavored).value() ==
          doctest::Approx(0.5).epsilon(1e-15));

    // n=3, top-2, constant probs (0.5, 0.3, 0.2): f = (1,1,0).
    RoutingRecord three = record_from_probs(t, {{0.5, 0.3, 0.2}, {0.5, 0.3, 0.2}}, 2);
    CHECK(load_balance_loss(t, three, LoadBalanceMode::GeneralistFavored).value() ==
          doctest::Approx(0.22).epsilon(1e-12));

    // Uniform convention scales every f_j P_j term by n.
    CHECK(load_balance_loss(t, three, LoadBalanceMode::Uniform).value() ==
          doctest::Approx(3.0 * (0.5 + 0.3)).epsilon(1e-12));

    RoutingRecord empty;
    empty.n_experts = 2;
    empty.probs = Tensor::zeros({0, 2});
    CHECK_THROWS_AS(load_balance_loss(t, empty, LoadBalanceMode::Uniform),
                    std::invalid_argument);
}

TEST_CASE("generalist-favored coefficients at n=2 match the uniform weighting") {
    std::vector<double> gf = load_balance_coefficients(2, LoadBalanceMode::GeneralistFavored);
    CHECK(gf[0] == 0.5);
    CHECK(gf[1] == 0.5);

    std::vector<double> uni = load_balance_coefficients(2, LoadBalanceMode::Uniform);
    // Identical per-expert coefficients up to the global scaling constant.
    CHECK(gf[0] / uni[0] == gf[1] / uni[1]);

    std::vector<double> gf5 = load_balance_coefficients(5, LoadBalanceMode::GeneralistFavored);
    CHECK(gf5[0] == doctest::Approx(1.0 / 17.0).epsilon(1e-15));
    CHECK(gf5[3] == doctest::Approx(4.0 / 17.0).epsilon(1e-15));
}

TEST_CASE("selection frequencies sum to top_k and probabilities to one") {
    Rng rng(17);
    Tape t(false);
    for (int trial = 0; trial < 20; ++trial) {
        RouterLinear router{random_tensor({4, 5}, rng, 2.0)};
        Tensor x = random_tensor({16, 4}, rng);
        const int k = 1 + static_cast<int>(rng.uniform_int(4));
        RoutingRecord rec = route_topk(t, router, x, k);
        std::vector<double> f(5, 0.0), p(5, 0.0);
        for (const auto& sel : rec.selected)
            for (int j : sel) f[j] += 1.0 / 16.0;
        double fsum = 0.0, psum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            fsum += f[j];
            for (std::size_t tok = 0; tok < 16; ++tok) p[j] += rec.probs.at(tok, j) / 16.0;
            psum += p[j];
        }
        CHECK(fsum == doctest::Approx(static_cast<double>(k)).epsilon(1e-12));
        CHECK(std::abs(psum - 1.0) <= 1e-12);
    }
}

TEST_CASE("expert score summary") {
    Tape t(false);
    RoutingRecord single = record_from_probs(t, {{0.7, 0.3}}, 1);
    std::vector<double> s1 = expert_score_summary({single});
    CHECK(s1[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(s1[1] == doctest::Approx(0.3).epsilon(1e-12));

    RoutingRecord two = record_from_probs(t, {{0.999, 0.001}, {0.001, 0.999}}, 1);
    std::vector<double> s2 = expert_score_summary({two});
    CHECK(s2[0] == doctest::Approx(0.5).epsilon(1e-12));

    // Uniform router: every score exactly 1/n.
    Rng rng(19);
    RouterLinear router{Tensor::zeros({4, 4})};
    Tensor x = random_tensor({64, 4}, rng);
    RoutingRecord uni = route_topk(t, router, x, 2);
    for (double v : expert_score_summary({uni})) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

    RoutingRecord other = record_from_probs(t, {{0.5, 0.2, 0.3}}, 1);
    CHECK_THROWS_AS(expert_score_summary({single, other}), ShapeError);
    CHECK_THROWS_AS(expert_score_summary({}), std::invalid_argument);
}

}  // TEST_SUITE
