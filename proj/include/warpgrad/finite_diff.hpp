// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "warpgrad/params.hpp"
#include "warpgrad/tensor.hpp"

namespace warpgrad {

/// Central finite differences over the selected slots:
/// (f(p + eps e_i) - f(p - eps e_i)) / (2 eps) per coordinate.
/// The test oracle for every analytic gradient in this library; it deliberately
/// shares no code with the graph backward pass.
inline GradMap finite_diff_gradient(
    const std::function<double(const ParamStore&)>& f, ParamStore& params,
    const std::vector<int>& slot_ids, double eps) {
  if (!(eps > 0.0)) throw TensorError("finite_diff_gradient: eps must be > 0");
  GradMap out;
  out.ids = slot_ids;
  for (int id : slot_ids) {
    const Tensor base = params.value(id);
    Tensor grad(base.shape());
    double* gd = grad.mutable_data();
    for (std::size_t i = 0; i < base.numel(); ++i) {
      Tensor& live = params.value(id);
      live.mutable_data()[i] = base.at(i) + eps;
      const double fp = f(params);
      live.mutable_data()[i] = base.at(i) - eps;
      const double fm = f(params);
      live.mutable_data()[i] = base.at(i);
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw TensorError("finite_diff_gradient: non-finite evaluation at slot '" +
                          params.slot(id).name + "' index " + std::to_string(i));
      }
      gd[i] = (fp - fm) / (2.0 * eps);
    }
    params.value(id) = base;
    out.grads.push_back(std::move(grad));
  }
  return out;
}

}  // namespace warpgrad
