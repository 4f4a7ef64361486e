#pragma once

#include <functional>

#include "mpg/ops.hpp"
#include "mpg/tensor.hpp"

namespace mpg {

// Central finite differences against the analytic gradient of a scalar-valued
// tensor function. Returns the worst relative error over all coordinates,
// falling back to the absolute error when both magnitudes are below 1e-6.
// f must be deterministic. Intended for double-precision instantiation.
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x0,
                  T step = T(1e-3)) {
  if (!(step > T(0))) throw UsageError("grad_check requires step > 0");
  Tensor<T> x = x0.clone();
  x.set_requires_grad(true);

  std::vector<T> analytic(static_cast<size_t>(x.size()), T(0));
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f(x);
    tape.backward(loss);
    if (x.has_grad())
      analytic.assign(x.grad_vector().begin(), x.grad_vector().end());
  }

  double worst = 0.0;
  const long n = x.size();
  for (long i = 0; i < n; ++i) {
    const T saved = x.data()[i];
    x.data()[i] = saved + step;
    const double fp = static_cast<double>(f(x).item());
    x.data()[i] = saved - step;
    const double fm = static_cast<double>(f(x).item());
    x.data()[i] = saved;
    const double fd = (fp - fm) / (2.0 * static_cast<double>(step));
    const double an = static_cast<double>(analytic[i]);
    const double diff = std::abs(fd - an);
    const double denom = std::max(std::abs(fd), std::abs(an));
    const double err = denom < 1e-6 ? diff : diff / denom;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mpg
