// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "warpgrad/graph.hpp"
#include "warpgrad/params.hpp"
#include "warpgrad/rng.hpp"

namespace warpgrad {

enum class Activation : std::uint8_t { kTanh, kRelu, kSigmoid };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

inline std::optional<Activation> activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  return std::nullopt;
}

/// One entry of a network description. Task layers hold theta, warp layers
/// hold phi. A residual warp block is x + W_last act(... act(W_1 x + b_1)) +
/// b_last with the final linear zero-initialised, so it is the identity map
/// until meta-training moves it.
struct LayerSpec {
  enum class Kind : std::uint8_t { kLinear, kActivation, kResidualWarpBlock };

  Kind kind = Kind::kLinear;
  Role role = Role::kTask;
  int in_dim = 0;
  int out_dim = 0;
  std::vector<int> hidden;               // residual block hidden widths
  Activation act = Activation::kTanh;    // activation kind / block non-linearity
  bool bias = true;

  static LayerSpec task_linear(int in, int out, bool bias = true) {
    LayerSpec s;
    s.kind = Kind::kLinear;
    s.role = Role::kTask;
    s.in_dim = in;
    s.out_dim = out;
    s.bias = bias;
    return s;
  }

  static LayerSpec activation(Activation a, int dim) {
    LayerSpec s;
    s.kind = Kind::kActivation;
    s.role = Role::kTask;
    s.act = a;
    s.in_dim = dim;
    s.out_dim = dim;
    return s;
  }

  /// Square linear warp, identity at init (the T-Net special case).
  static LayerSpec warp_linear(int dim) {
    LayerSpec s;
    s.kind = Kind::kLinear;
    s.role = Role::kWarp;
    s.in_dim = dim;
    s.out_dim = dim;
    s.bias = false;
    return s;
  }

  static LayerSpec warp_residual(int dim, std::vector<int> hidden,
                                 Activation a = Activation::kTanh) {
    LayerSpec s;
    s.kind = Kind::kResidualWarpBlock;
    s.role = Role::kWarp;
    s.in_dim = dim;
    s.out_dim = dim;
    s.hidden = std::move(hidden);
    s.act = a;
    return s;
  }
};

/// Disjoint split of slot ids into task (theta) and warp (phi) sets.
struct ParameterPartition {
  std::vector<int> task_ids;
  std::vector<int> warp_ids;
};

/// A task-learner with interleaved warp-layers plus its parameter store.
struct WarpedNetwork {
  std::vector<LayerSpec> layers;
  ParamStore params;
  ParameterPartition partition;
  std::vector<std::vector<int>> layer_slots;  // parameter slot ids per layer
  int in_dim = 0;
  int out_dim = 0;

  bool has_warp_layers() const { return !partition.warp_ids.empty(); }
};

namespace detail {

inline Tensor fan_in_uniform(RngStream& rng, int in, int out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor t(Shape::matrix(in, out));
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(-bound, bound);
  return t;
}

inline Tensor fan_in_uniform_row(RngStream& rng, int in, int out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor t(Shape::matrix(1, out));
  double* d = t.mutable_data();
  for (int i = 0; i < out; ++i) d[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

/// Assert the partition invariant: task and warp ids are disjoint and together
/// cover every slot. Cheap enough to run after construction or checkpoint load.
inline void check_partition(const WarpedNetwork& net) {
  std::vector<int> seen(static_cast<std::size_t>(net.params.size()), 0);
  for (int id : net.partition.task_ids) seen.at(static_cast<std::size_t>(id))++;
  for (int id : net.partition.warp_ids) seen.at(static_cast<std::size_t>(id))++;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != 1) {
      throw TensorError("parameter partition violated at slot '" +
                        net.params.slot(static_cast<int>(i)).name + "'");
    }
    const Role r = net.params.slot(static_cast<int>(i)).role;
    const bool in_task =
        std::find(net.partition.task_ids.begin(), net.partition.task_ids.end(),
                  static_cast<int>(i)) != net.partition.task_ids.end();
    if ((r == Role::kTask) != in_task) {
      throw TensorError("role tag / partition mismatch at slot '" +
                        net.params.slot(static_cast<int>(i)).name + "'");
    }
  }
}

/// Build a network from a layer list. Dimensions must chain; at least one task
/// layer is required. Warp layers start as the identity map, so the warped
/// forward equals the warp-free forward until meta-training changes phi.
inline WarpedNetwork build_network(const std::vector<LayerSpec>& spec,
                                   RngStream rng) {
  if (spec.empty()) throw TensorError("build_network: empty layer list");
  WarpedNetwork net;
  net.layers = spec;
  net.in_dim = spec.front().in_dim;
  net.out_dim = spec.back().out_dim;

  bool has_task = false;
  for (std::size_t i = 0; i + 1 < spec.size(); ++i) {
    if (spec[i].out_dim != spec[i + 1].in_dim) {
      throw TensorError("build_network: dim mismatch between layer " +
                        std::to_string(i) + " (out " +
                        std::to_string(spec[i].out_dim) + ") and layer " +
                        std::to_string(i + 1) + " (in " +
                        std::to_string(spec[i + 1].in_dim) + ")");
    }
  }

  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    std::vector<int> slots;
    const std::string prefix =
        (l.role == Role::kTask ? "t" : "w") + std::to_string(i);
    switch (l.kind) {
      case LayerSpec::Kind::kLinear: {
        if (l.role == Role::kTask) {
          has_task = true;
          slots.push_back(net.params.add(prefix + ".W", l.role,
                                         detail::fan_in_uniform(rng, l.in_dim,
                                                                l.out_dim)));
          if (l.bias) {
            slots.push_back(net.params.add(
                prefix + ".b", l.role,
                detail::fan_in_uniform_row(rng, l.in_dim, l.out_dim)));
          }
        } else {
          if (l.in_dim != l.out_dim) {
            throw TensorError("warp_linear must be square, got " +
                              std::to_string(l.in_dim) + "x" +
                              std::to_string(l.out_dim));
          }
          slots.push_back(
              net.params.add(prefix + ".T", l.role, Tensor::identity(l.in_dim)));
        }
        break;
      }
      case LayerSpec::Kind::kActivation:
        has_task = true;
        break;
      case LayerSpec::Kind::kResidualWarpBlock: {
        if (l.role != Role::kWarp) {
          throw TensorError("residual blocks are warp layers");
        }
        if (l.hidden.empty()) {
          throw TensorError("residual warp block needs at least one hidden dim");
        }
        int d = l.in_dim;
        for (std::size_t h = 0; h < l.hidden.size(); ++h) {
          slots.push_back(net.params.add(
              prefix + ".W" + std::to_string(h), l.role,
              detail::fan_in_uniform(rng, d, l.hidden[h])));
          slots.push_back(net.params.add(
              prefix + ".b" + std::to_string(h), l.role,
              detail::fan_in_uniform_row(rng, d, l.hidden[h])));
          d = l.hidden[h];
        }
        // zero-initialised output projection makes the block the identity
        slots.push_back(net.params.add(prefix + ".Wout", l.role,
                                       Tensor(Shape::matrix(d, l.out_dim))));
        slots.push_back(net.params.add(prefix + ".bout", l.role,
                                       Tensor(Shape::matrix(1, l.out_dim))));
        break;
      }
    }
    net.layer_slots.push_back(std::move(slots));
  }
  if (!has_task) throw TensorError("build_network: no task layer in spec");
  net.partition.task_ids = net.params.ids(Role::kTask);
  net.partition.warp_ids = net.params.ids(Role::kWarp);
  check_partition(net);
  return net;
}

/// Per-graph binding of parameter slots to graph variables. Task slots may be
/// rebound to arbitrary expressions (e.g. an on-graph inner update) before
/// running a forward pass.
struct Binding {
  std::vector<Var> vars;  // indexed by slot id

  Var var(int slot) const { return vars.at(static_cast<std::size_t>(slot)); }
  void rebind(int slot, Var v) { vars.at(static_cast<std::size_t>(slot)) = v; }
};

inline Binding bind_params(Graph& g, const WarpedNetwork& net) {
  Binding b;
  b.vars.reserve(static_cast<std::size_t>(net.params.size()));
  for (int i = 0; i < net.params.size(); ++i) {
    b.vars.push_back(g.leaf(net.params.value(i)));
  }
  return b;
}

/// Bind with task slots taken from a snapshot (aligned with partition order).
inline Binding bind_params_with_task(Graph& g, const WarpedNetwork& net,
                                     const std::vector<Tensor>& task_values) {
  if (task_values.size() != net.partition.task_ids.size()) {
    throw TensorError("bind_params_with_task: snapshot size mismatch");
  }
  Binding b = bind_params(g, net);
  for (std::size_t i = 0; i < task_values.size(); ++i) {
    b.rebind(net.partition.task_ids[i], g.leaf(task_values[i]));
  }
  return b;
}

inline Var apply_activation(Graph& g, Activation a, Var x) {
  switch (a) {
    case Activation::kTanh: return g.tanh(x);
    case Activation::kRelu: return g.relu(x);
    case Activation::kSigmoid: return g.sigmoid(x);
  }
  throw TensorError("unknown activation");
}

/// Run the composed network on x ([batch, in_dim]). With `include_warps`
/// false, warp layers are skipped, giving the warp-free task-learner.
inline Var forward(Graph& g, const WarpedNetwork& net, const Binding& bind,
                   Var x, bool include_warps = true) {
  Var h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (!include_warps && l.role == Role::kWarp) continue;
    const auto& slots = net.layer_slots[i];
    switch (l.kind) {
      case LayerSpec::Kind::kLinear: {
        h = g.matmul(h, bind.var(slots[0]));
        if (l.role == Role::kTask && l.bias) {
          h = g.add(h, g.repeat_rows(bind.var(slots[1]), h.value().rows()));
        }
        break;
      }
      case LayerSpec::Kind::kActivation:
        h = apply_activation(g, l.act, h);
        break;
      case LayerSpec::Kind::kResidualWarpBlock: {
        Var z = h;
        std::size_t s = 0;
        for (std::size_t hid = 0; hid < l.hidden.size(); ++hid) {
          z = g.add(g.matmul(z, bind.var(slots[s])),
                    g.repeat_rows(bind.var(slots[s + 1]), z.value().rows()));
          z = apply_activation(g, l.act, z);
          s += 2;
        }
        z = g.add(g.matmul(z, bind.var(slots[s])),
                  g.repeat_rows(bind.var(slots[s + 1]), z.value().rows()));
        h = g.add(h, z);
        break;
      }
    }
  }
  return h;
}

/// Compose only the warp layers, in order: the explicit reparameterisation
/// Omega used by the geometry diagnostics and the 2-D experiments.
inline Var forward_warps_only(Graph& g, const WarpedNetwork& net,
                              const Binding& bind, Var x) {
  Var h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.role != Role::kWarp) continue;
    const auto& slots = net.layer_slots[i];
    if (l.kind == LayerSpec::Kind::kLinear) {
      h = g.matmul(h, bind.var(slots[0]));
    } else {
      Var z = h;
      std::size_t s = 0;
      for (std::size_t hid = 0; hid < l.hidden.size(); ++hid) {
        z = g.add(g.matmul(z, bind.var(slots[s])),
                  g.repeat_rows(bind.var(slots[s + 1]), z.value().rows()));
        z = apply_activation(g, l.act, z);
        s += 2;
      }
      z = g.add(g.matmul(z, bind.var(slots[s])),
                g.repeat_rows(bind.var(slots[s + 1]), z.value().rows()));
      h = g.add(h, z);
    }
  }
  return h;
}

/// Value-level forward pass on a fresh graph.
inline Tensor forward_value(const WarpedNetwork& net, const Tensor& x,
                            bool include_warps = true) {
  Graph g;
  Binding b = bind_params(g, net);
  return forward(g, net, b, g.constant(x), include_warps).value();
}

struct Batch {
  Tensor inputs;   // [n, in_dim]
  Tensor targets;  // [n, out_dim]

  int size() const { return inputs.rows(); }
};

/// Halved mean squared error: (1 / (2 |D|)) sum (f(x) - y)^2.
inline Var mse_half(Graph& g, Var pred, const Tensor& targets) {
  if (pred.value().rows() != targets.rows()) {
    throw TensorError("mse_half: prediction/target row mismatch");
  }
  if (targets.rows() == 0) throw TensorError("mse_half: empty batch");
  Var r = g.sub(pred, g.constant(targets));
  return g.scale(g.sum(g.square(r)), 1.0 / (2.0 * targets.rows()));
}

inline Var task_loss(Graph& g, const WarpedNetwork& net, const Binding& bind,
                     const Batch& batch) {
  Var pred = forward(g, net, bind, g.constant(batch.inputs));
  return mse_half(g, pred, batch.targets);
}

inline double task_loss_value(const WarpedNetwork& net, const Batch& batch) {
  Graph g;
  Binding b = bind_params(g, net);
  return task_loss(g, net, b, batch).value().item();
}

/// Gradient of the task loss restricted to theta. Warp slots are untouched;
/// backpropagation through the warp layers is what makes this the
/// preconditioned gradient.
inline GradMap task_gradient(const WarpedNetwork& net, const Batch& batch) {
  Graph g;
  Binding b = bind_params(g, net);
  Var loss = task_loss(g, net, b, batch);
  std::vector<Var> wrt;
  for (int id : net.partition.task_ids) wrt.push_back(b.var(id));
  auto grads = g.backward(loss, wrt);
  GradMap out;
  out.ids = net.partition.task_ids;
  for (const Var& v : grads) out.grads.push_back(v.value());
  return out;
}

/// One plain inner step theta' = theta - alpha * task_gradient. Returns the
/// pre-step loss. phi is never touched here.
inline double inner_sgd_step(WarpedNetwork& net, const Batch& batch,
                             double alpha) {
  if (alpha < 0.0) throw TensorError("inner_sgd_step: alpha must be >= 0");
  Graph g;
  Binding b = bind_params(g, net);
  Var loss = task_loss(g, net, b, batch);
  std::vector<Var> wrt;
  for (int id : net.partition.task_ids) wrt.push_back(b.var(id));
  auto grads = g.backward(loss, wrt);
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    axpy(net.params.value(net.partition.task_ids[i]), grads[i].value(), -alpha);
  }
  return loss.value().item();
}

/// The continual sine-regression architecture: four 200-wide relu task layers
/// (1 -> 200 -> 200 -> 200 -> 200 -> 1) with a 200 -> 100 -> 200 tanh residual
/// warp block after each non-linearity.
inline std::vector<LayerSpec> continual_sine_layers(int hidden = 200,
                                                    int warp_hidden = 100) {
  std::vector<LayerSpec> spec;
  int in = 1;
  for (int l = 0; l < 4; ++l) {
    spec.push_back(LayerSpec::task_linear(in, hidden));
    spec.push_back(LayerSpec::activation(Activation::kRelu, hidden));
    spec.push_back(LayerSpec::warp_residual(hidden, {warp_hidden}));
    in = hidden;
  }
  spec.push_back(LayerSpec::task_linear(hidden, 1));
  return spec;
}

/// The 2-D explicit warp: a single residual block with two 30-wide tanh
/// hidden layers, preceded by a bias-free 1 -> 2 task linear whose weights are
/// the optimised point.
inline std::vector<LayerSpec> surface2d_layers(int hidden = 30) {
  return {LayerSpec::task_linear(1, 2, /*bias=*/false),
          LayerSpec::warp_residual(2, {hidden, hidden}, Activation::kTanh)};
}

}  // namespace warpgrad
