// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "warpgrad/graph.hpp"
#include "warpgrad/network.hpp"

namespace warpgrad {

/// A differentiable scalar loss over points in R^d, built on a graph so its
/// gradient comes from the same machinery as everything else.
class PointLoss {
 public:
  virtual ~PointLoss() = default;

  /// point is a [1,d] variable; result must have a single element.
  virtual Var build(Graph& g, Var point) const = 0;

  double value(const std::vector<double>& p) const {
    Graph g;
    return build(g, g.constant(row(p))).value().item();
  }

  std::vector<double> gradient(const std::vector<double>& p) const {
    Graph g;
    Var x = g.leaf(row(p));
    auto grads = g.backward(build(g, x), {x});
    const Tensor& t = grads[0].value();
    return {t.data(), t.data() + t.numel()};
  }

  static Tensor row(const std::vector<double>& p) {
    return Tensor(Shape::matrix(1, static_cast<int>(p.size())),
                  std::vector<double>(p));
  }
};

/// For nets whose warps are all linear: the composed warp matrix sitting
/// immediately downstream of each task linear layer (row convention, identity
/// when a task layer has no warp before the next one). These are the
/// preconditioning blocks; with identity warps every block is the identity.
inline std::vector<Tensor> explicit_preconditioner(const WarpedNetwork& net) {
  std::vector<Tensor> blocks;
  int open = -1;  // index into `blocks` of the task layer awaiting its warp
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.role == Role::kWarp) {
      if (l.kind != LayerSpec::Kind::kLinear) {
        throw TensorError(
            "explicit_preconditioner: non-linear warp layer present");
      }
      const Tensor& T = net.params.value(net.layer_slots[i][0]);
      if (open < 0) {
        throw TensorError("explicit_preconditioner: warp before any task layer");
      }
      Tensor& P = blocks[static_cast<std::size_t>(open)];
      // compose in application order: z -> z P -> z P T
      Tensor out(Shape::matrix(P.rows(), T.cols()));
      for (int r = 0; r < P.rows(); ++r) {
        for (int c = 0; c < T.cols(); ++c) {
          double s = 0.0;
          for (int k = 0; k < P.cols(); ++k) s += P(r, k) * T(k, c);
          out.mutable_data()[r * T.cols() + c] = s;
        }
      }
      P = std::move(out);
    } else if (l.kind == LayerSpec::Kind::kLinear) {
      blocks.push_back(Tensor::identity(l.out_dim));
      open = static_cast<int>(blocks.size()) - 1;
    }
  }
  return blocks;
}

/// Hand-rolled matrix backprop through a feed-forward net with linear warps:
/// the independent oracle for the warped task gradient (Eq.-6-style chains
/// written out explicitly, no graph involved).
inline GradMap preconditioned_gradient_oracle(const WarpedNetwork& net,
                                              const Batch& batch) {
  for (const LayerSpec& l : net.layers) {
    if (l.role == Role::kWarp && l.kind != LayerSpec::Kind::kLinear) {
      throw TensorError(
          "preconditioned_gradient_oracle: non-linear warp layer present");
    }
  }
  const int B = batch.size();
  // forward, storing each layer's input
  std::vector<Tensor> inputs;
  Tensor h = batch.inputs;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    inputs.push_back(h);
    const LayerSpec& l = net.layers[i];
    if (l.kind == LayerSpec::Kind::kLinear) {
      const Tensor& W = net.params.value(net.layer_slots[i][0]);
      Tensor out(Shape::matrix(B, l.out_dim));
      for (int r = 0; r < B; ++r) {
        for (int c = 0; c < l.out_dim; ++c) {
          double s = 0.0;
          for (int k = 0; k < l.in_dim; ++k) s += h(r, k) * W(k, c);
          out.mutable_data()[r * l.out_dim + c] = s;
        }
      }
      if (l.role == Role::kTask && l.bias) {
        const Tensor& b = net.params.value(net.layer_slots[i][1]);
        for (int r = 0; r < B; ++r) {
          for (int c = 0; c < l.out_dim; ++c) {
            out.mutable_data()[r * l.out_dim + c] += b(0, c);
          }
        }
      }
      h = std::move(out);
    } else if (l.kind == LayerSpec::Kind::kActivation) {
      Tensor out(h.shape());
      for (std::size_t k = 0; k < h.numel(); ++k) {
        const double x = h.at(k);
        double y = 0.0;
        switch (l.act) {
          case Activation::kTanh: y = std::tanh(x); break;
          case Activation::kRelu: y = x > 0 ? x : 0.0; break;
          case Activation::kSigmoid: y = 1.0 / (1.0 + std::exp(-x)); break;
        }
        out.mutable_data()[k] = y;
      }
      h = std::move(out);
    }
  }

  // backward from the halved mean squared error
  Tensor delta(Shape::matrix(B, net.out_dim));
  for (std::size_t k = 0; k < delta.numel(); ++k) {
    delta.mutable_data()[k] = (h.at(k) - batch.targets.at(k)) / B;
  }

  GradMap out;
  std::vector<std::pair<int, Tensor>> task_grads;  // slot id -> grad
  for (std::size_t ii = net.layers.size(); ii-- > 0;) {
    const LayerSpec& l = net.layers[ii];
    const Tensor& x = inputs[ii];
    if (l.kind == LayerSpec::Kind::kLinear) {
      const Tensor& W = net.params.value(net.layer_slots[ii][0]);
      if (l.role == Role::kTask) {
        Tensor dW(Shape::matrix(l.in_dim, l.out_dim));
        for (int a = 0; a < l.in_dim; ++a) {
          for (int c = 0; c < l.out_dim; ++c) {
            double s = 0.0;
            for (int r = 0; r < B; ++r) s += x(r, a) * delta(r, c);
            dW.mutable_data()[a * l.out_dim + c] = s;
          }
        }
        if (l.bias) {
          Tensor db(Shape::matrix(1, l.out_dim));
          for (int c = 0; c < l.out_dim; ++c) {
            double s = 0.0;
            for (int r = 0; r < B; ++r) s += delta(r, c);
            db.mutable_data()[c] = s;
          }
          task_grads.emplace_back(net.layer_slots[ii][1], std::move(db));
        }
        task_grads.emplace_back(net.layer_slots[ii][0], std::move(dW));
      }
      Tensor prev(Shape::matrix(B, l.in_dim));
      for (int r = 0; r < B; ++r) {
        for (int a = 0; a < l.in_dim; ++a) {
          double s = 0.0;
          for (int c = 0; c < l.out_dim; ++c) s += delta(r, c) * W(a, c);
          prev.mutable_data()[r * l.in_dim + a] = s;
        }
      }
      delta = std::move(prev);
    } else if (l.kind == LayerSpec::Kind::kActivation) {
      for (std::size_t k = 0; k < delta.numel(); ++k) {
        const double xv = x.at(k);
        double d = 0.0;
        switch (l.act) {
          case Activation::kTanh: {
            const double t = std::tanh(xv);
            d = 1.0 - t * t;
            break;
          }
          case Activation::kRelu: d = xv > 0 ? 1.0 : 0.0; break;
          case Activation::kSigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-xv));
            d = s * (1.0 - s);
            break;
          }
        }
        delta.mutable_data()[k] *= d;
      }
    }
  }

  // emit in partition order
  for (int id : net.partition.task_ids) {
    for (auto& [slot, grad] : task_grads) {
      if (slot == id) {
        out.ids.push_back(id);
        out.grads.push_back(grad);
      }
    }
  }
  return out;
}

/// The two update directions of the warped-space picture plus the gap between
/// taking the step in P-space versus W-space:
///   dtheta = grad of (loss . Omega) at theta
///   dgamma = J dtheta = (J J^T) grad loss(gamma), the push-forward update
///   taylor_gap(a) = |(loss . Omega)(theta - a dtheta) - loss(gamma - a dgamma)|
/// First-order equivalence of the two steps means the gap decays as a^2.
struct WarpedSpaceSteps {
  std::vector<double> gamma;
  std::vector<double> dtheta;
  std::vector<double> dgamma;
  Tensor g_inv;  // [d,d] push-forward inverse metric J J^T
  std::function<double(double)> taylor_gap;
};

/// `omega_net` supplies the warp layers (its task layers are ignored); `loss`
/// must outlive the returned taylor_gap functor.
inline WarpedSpaceSteps warped_space_steps(const WarpedNetwork& omega_net,
                                           const std::vector<double>& theta,
                                           const PointLoss& loss) {
  const int d = static_cast<int>(theta.size());
  auto omega_value = [&omega_net, d](const std::vector<double>& p) {
    Graph g;
    Binding b = bind_params(g, omega_net);
    Var y = forward_warps_only(g, omega_net, b, g.constant(PointLoss::row(p)));
    const Tensor& t = y.value();
    return std::vector<double>(t.data(), t.data() + t.numel());
  };

  WarpedSpaceSteps out;
  out.gamma = omega_value(theta);

  // Jacobian J[j][i] = d Omega_j / d theta_i via one backward per output
  Graph g;
  Binding bind = bind_params(g, omega_net);
  Var x = g.leaf(PointLoss::row(theta));
  Var gamma_var = forward_warps_only(g, omega_net, bind, x);
  std::vector<std::vector<double>> J(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    Tensor e(Shape::matrix(d, 1));
    e.mutable_data()[j] = 1.0;
    Var comp = g.matmul(gamma_var, g.constant(e));
    auto grads = g.backward(comp, {x}, /*create_graph=*/true);
    const Tensor& t = grads[0].value();
    J[static_cast<std::size_t>(j)] = {t.data(), t.data() + t.numel()};
  }

  const std::vector<double> grad_gamma = loss.gradient(out.gamma);

  out.dtheta.assign(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      out.dtheta[static_cast<std::size_t>(i)] +=
          J[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] *
          grad_gamma[static_cast<std::size_t>(j)];
    }
  }
  out.dgamma.assign(static_cast<std::size_t>(d), 0.0);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) {
      out.dgamma[static_cast<std::size_t>(j)] +=
          J[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] *
          out.dtheta[static_cast<std::size_t>(i)];
    }
  }
  out.g_inv = Tensor(Shape::matrix(d, d));
  for (int a = 0; a < d; ++a) {
    for (int b = 0; b < d; ++b) {
      double s = 0.0;
      for (int i = 0; i < d; ++i) {
        s += J[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] *
             J[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
      }
      out.g_inv.mutable_data()[a * d + b] = s;
    }
  }

  out.taylor_gap = [omega_value, theta, gamma = out.gamma, dtheta = out.dtheta,
                    dgamma = out.dgamma, lp = &loss](double alpha) {
    std::vector<double> tp(theta.size()), gp(gamma.size());
    for (std::size_t i = 0; i < theta.size(); ++i) tp[i] = theta[i] - alpha * dtheta[i];
    for (std::size_t i = 0; i < gamma.size(); ++i) gp[i] = gamma[i] - alpha * dgamma[i];
    return std::abs(lp->value(omega_value(tp)) - lp->value(gp));
  };
  return out;
}

}  // namespace warpgrad
