#pragma once

#include <functional>
#include <vector>

#include "mixri/tensor.hpp"

namespace mixri {

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, elementwise. Returns the max relative error,
/// |ad - fd| / max(|ad|, |fd|, 1e-3). Use 64-bit inputs.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5);

/// Same check for a function of ambient parameters: `params` are perturbed in
/// place (and restored) while `f` re-evaluates the scalar loss.
double finite_diff_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                double eps = 1e-5, int64_t max_elems_per_param = -1);

}  // namespace mixri
