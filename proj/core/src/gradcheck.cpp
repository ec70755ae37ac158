#include "mixri/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "mixri/ops.hpp"

namespace mixri {

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps) {
  Tensor xp = x.clone();
  xp.set_requires_grad(true);
  Tensor y = f(xp);
  if (y.numel() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
  backward(y);

  std::vector<double> g(static_cast<size_t>(x.numel()), 0.0);
  if (xp.has_grad())
    for (int64_t i = 0; i < x.numel(); ++i) g[static_cast<size_t>(i)] = xp.grad_at(i);

  double worst = 0.0;
  Tensor xe = x.clone();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = xe.value_at(i);
    double fp, fm;
    {
      ops::NoGrad ng;
      xe.set_value(i, orig + eps);
      fp = f(xe).scalar_value();
      xe.set_value(i, orig - eps);
      fm = f(xe).scalar_value();
      xe.set_value(i, orig);
    }
    const double fd = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, rel_err(g[static_cast<size_t>(i)], fd));
  }
  return worst;
}

double finite_diff_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                double eps, int64_t max_elems_per_param) {
  for (auto& p : params) p.impl()->grad = nullptr;
  Tensor y = f();
  if (y.numel() != 1)
    throw std::invalid_argument("finite_diff_check_params: f must return a scalar");
  backward(y);

  double worst = 0.0;
  for (const auto& p : params) {
    std::vector<double> g(static_cast<size_t>(p.numel()), 0.0);
    if (p.has_grad())
      for (int64_t i = 0; i < p.numel(); ++i) g[static_cast<size_t>(i)] = p.grad_at(i);

    int64_t n = p.numel();
    int64_t step = 1;
    if (max_elems_per_param > 0 && n > max_elems_per_param) step = n / max_elems_per_param;
    for (int64_t i = 0; i < n; i += step) {
      const double orig = p.value_at(i);
      double fp, fm;
      {
        ops::NoGrad ng;
        p.impl()->storage->set(i, orig + eps);
        fp = f().scalar_value();
        p.impl()->storage->set(i, orig - eps);
        fm = f().scalar_value();
        p.impl()->storage->set(i, orig);
      }
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, rel_err(g[static_cast<size_t>(i)], fd));
    }
  }
  return worst;
}

}  // namespace mixri
