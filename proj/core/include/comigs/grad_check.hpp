#pragma once

#include <functional>
#include <vector>

#include "comigs/tensor.hpp"

namespace comigs {

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` evaluates the scalar objective on the given tape; it must watch the
/// parameters itself and read their current storage. Returns the maximum
/// over all parameter coordinates of
///   |autodiff - central difference| / max(1, |central difference|).
double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor*>& params,
                  double h);

}  // namespace comigs
