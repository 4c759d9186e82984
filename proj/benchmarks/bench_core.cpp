#include <benchmark/benchmark.h>

#include "comigs/decoupled.hpp"
#include "comigs/certify.hpp"
#include "comigs/model.hpp"
#include "comigs/trainer.hpp"

using namespace comigs;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng) {
    Tensor t = Tensor::zeros(s);
    for (double& v : *t.data) v = rng.normal();
    return t;
}

void bm_matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
    Tape tape(false);
    for (auto _ : state) {
        Tensor c = tape.matmul(a, b);
        benchmark::DoNotOptimize(c.data->data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(32)->Arg(128)->Arg(512);

void bm_forward_backward(benchmark::State& state) {
    ModelConfig cfg;  // desk-scale defaults
    Rng rng(2);
    TinyLM model(cfg, rng);
    std::vector<std::vector<int>> windows(4), targets(4);
    for (int w = 0; w < 4; ++w)
        for (std::size_t t = 0; t <= cfg.context; ++t) {
            const int tok = static_cast<int>(rng.uniform_int(cfg.vocab));
            if (t < cfg.context) windows[w].push_back(tok);
            if (t > 0) targets[w].push_back(tok);
        }
    for (auto _ : state) {
        Tape tape;
        for (NamedParam& p : model.parameters()) tape.watch(*p.tensor);
        LmLoss ll = lm_loss(tape, model, windows, targets);
        GradientMap grads = tape.backward(ll.loss);
        benchmark::DoNotOptimize(grads.has(ll.loss));
    }
}
BENCHMARK(bm_forward_backward);

void bm_perplexity(benchmark::State& state) {
    ModelConfig cfg;
    Rng rng(3);
    TinyLM model(cfg, rng);
    std::vector<int> stream(5000);
    for (int& t : stream) t = static_cast<int>(rng.uniform_int(cfg.vocab));
    for (auto _ : state) benchmark::DoNotOptimize(model.perplexity(stream));
    state.SetItemsProcessed(state.iterations() * stream.size());
}
BENCHMARK(bm_perplexity);

void bm_decoupled_sweep(benchmark::State& state) {
    Rng rng(4);
    DecoupledInstance inst = random_decoupled(4, 20, 3, LossKind::Quadratic, rng);
    for (auto _ : state) {
        DecoupledInstance work = inst;
        work.init_start();
        step_lambda(work);
        step_phi(work);
        step_theta(work);
        benchmark::DoNotOptimize(decoupled_objective(work));
    }
}
BENCHMARK(bm_decoupled_sweep);

}  // namespace

BENCHMARK_MAIN();
