#pragma once

#include <functional>
#include <string>

#include "gazekit/nn.hpp"

namespace testutil {

using gazekit::Index;
using gazekit::Mat;

// Guarded relative error between analytic and central-difference gradients.
// The floor keeps finite-difference roundoff on near-zero gradients from
// dominating the ratio.
struct GradCheckResult {
  double max_rel = 0;
  std::string worst;
};

template <class S>
GradCheckResult gradcheck(gazekit::nn::ParamRegistry<S>& reg,
                          const std::function<double()>& loss,
                          double h = 1e-5, double floor_ = 1e-6) {
  GradCheckResult r;
  for (auto& p : reg.items) {
    for (Index i = 0; i < p.value->size(); ++i) {
      const double orig = p.value->data()[i];
      p.value->data()[i] = static_cast<S>(orig + h);
      const double lp = loss();
      p.value->data()[i] = static_cast<S>(orig - h);
      const double lm = loss();
      p.value->data()[i] = static_cast<S>(orig);
      const double fd = (lp - lm) / (2 * h);
      const double an = p.grad->data()[i];
      const double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor_});
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

template <class S>
double max_abs_diff(const Mat<S>& a, const Mat<S>& b) {
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

}  // namespace testutil
