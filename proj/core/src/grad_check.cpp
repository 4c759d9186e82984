#include "comigs/grad_check.hpp"

#include <cmath>
#include <stdexcept>

namespace comigs {

double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor*>& params,
                  double h) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

    Tape tape;
    Tensor loss = f(tape);
    GradientMap grads = tape.backward(loss);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Tensor* p : params) analytic.push_back(grads.grad(*p));

    double worst = 0.0;
    Tape eval(false);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* p = params[pi];
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = (*p->data)[i];
            (*p->data)[i] = saved + h;
            const double fp = f(eval).value();
            (*p->data)[i] = saved - h;
            const double fm = f(eval).value();
            (*p->data)[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = (*analytic[pi].data)[i];
            const double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace comigs
