// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "warpgrad/network.hpp"

namespace warpgrad {

/// One draw from the task-parameter distribution p(theta | tau): the snapshot
/// of theta at step k of some task's adaptation, plus the stream ids that
/// regenerate the data batches belonging to that step.
struct TrajectorySample {
  std::int64_t task_uid = 0;
  int step = 0;                          // k, in [0, K]
  std::vector<Tensor> theta;             // task slots, partition order
  std::vector<Tensor> momentum;          // inner optimiser state at k (may be empty)
  std::uint64_t task_batch_stream = 0;   // data handle: inner batch at step k
  std::uint64_t meta_batch_stream = 0;   // data handle: meta batch for step k
  int subtask = 0;                       // continual runs: 1-based sub-task index
};

/// Accumulates meta-gradients over samples; averaging divides by the sample
/// count exactly once, so the meta-update interval does not rescale the step.
class MetaGradient {
 public:
  MetaGradient() = default;
  MetaGradient(const ParamStore& ps, std::vector<int> ids) : ids_(std::move(ids)) {
    for (int id : ids_) acc_.push_back(Tensor::zeros(ps.value(id).shape()));
  }

  void accumulate(const std::vector<Tensor>& g) {
    if (g.size() != acc_.size()) {
      throw TensorError("MetaGradient: arity mismatch");
    }
    for (std::size_t i = 0; i < g.size(); ++i) axpy(acc_[i], g[i], 1.0);
    ++count_;
  }

  const std::vector<int>& ids() const { return ids_; }
  std::int64_t sample_count() const { return count_; }
  bool empty() const { return count_ == 0; }

  std::vector<Tensor> averaged() const {
    if (count_ == 0) throw TensorError("MetaGradient: averaging empty accumulator");
    std::vector<Tensor> out;
    out.reserve(acc_.size());
    const double inv = 1.0 / static_cast<double>(count_);
    for (const Tensor& t : acc_) {
      Tensor s(t.shape());
      double* d = s.mutable_data();
      for (std::size_t i = 0; i < t.numel(); ++i) d[i] = t.at(i) * inv;
      out.push_back(std::move(s));
    }
    return out;
  }

  void reset() {
    for (Tensor& t : acc_) t = Tensor::zeros(t.shape());
    count_ = 0;
  }

 private:
  std::vector<int> ids_;
  std::vector<Tensor> acc_;
  std::int64_t count_ = 0;
};

/// Builds a scalar loss at the parameters bound in `bind`. The task loss and
/// meta loss of an experiment are both expressed this way, so the meta
/// machinery below is agnostic to what is being regressed or which surface is
/// being descended.
using LossBuilder =
    std::function<Var(Graph&, const WarpedNetwork&, const Binding&)>;

inline LossBuilder batch_loss(Batch batch) {
  return [batch = std::move(batch)](Graph& g, const WarpedNetwork& net,
                                    const Binding& bind) {
    return task_loss(g, net, bind, batch);
  };
}

struct MetaStepResult {
  double task_loss = 0.0;          // L_task at the sample
  double meta_loss = 0.0;          // the meta objective term value
  std::vector<Tensor> inner_grad;  // grad L_task wrt theta (values, for the update)
  std::vector<Tensor> g_phi;       // d meta / d phi, warp partition order
};

/// One term of the warp meta-objective at the network's current task
/// parameters:
///   full:   L_meta(theta - alpha grad L_task(theta; phi); phi)   with the
///           exact d/dphi, including the second-order path through the task
///           gradient (double backprop);
///   approx: the same value with the update target wrapped in stop-gradient,
///           so d/dphi flows only through the outer evaluation.
/// Forward values of the two modes are identical by construction.
/// With `momentum_mu` and a stored state u, the update target becomes
/// theta - alpha (mu u + grad).
inline MetaStepResult warp_meta_step(
    const WarpedNetwork& net, double alpha, const LossBuilder& task_builder,
    const LossBuilder& meta_builder, bool full_objective,
    double momentum_mu = 0.0, const std::vector<Tensor>* momentum = nullptr) {
  Graph g;
  Binding bind = bind_params(g, net);
  Var ltask = task_builder(g, net, bind);

  std::vector<Var> theta_vars;
  for (int id : net.partition.task_ids) theta_vars.push_back(bind.var(id));
  auto gtheta = g.backward(ltask, theta_vars, /*create_graph=*/true);

  MetaStepResult out;
  out.task_loss = ltask.value().item();
  for (const Var& v : gtheta) out.inner_grad.push_back(v.value());

  Binding meta_bind = bind;
  for (std::size_t i = 0; i < theta_vars.size(); ++i) {
    Var update = gtheta[i];
    if (momentum != nullptr && momentum_mu != 0.0) {
      Tensor scaled = (*momentum)[i];
      double* d = scaled.mutable_data();
      for (std::size_t k = 0; k < scaled.numel(); ++k) d[k] *= momentum_mu;
      update = g.add(g.constant(std::move(scaled)), update);
    }
    Var target = g.sub(theta_vars[i], g.scale(update, alpha));
    if (!full_objective) target = g.stop_gradient(target);
    meta_bind.rebind(net.partition.task_ids[i], target);
  }

  Var lmeta = meta_builder(g, net, meta_bind);
  out.meta_loss = lmeta.value().item();
  std::vector<Var> phi_vars;
  for (int id : net.partition.warp_ids) phi_vars.push_back(bind.var(id));
  auto gphi = g.backward(lmeta, phi_vars);
  for (const Var& v : gphi) out.g_phi.push_back(v.value());
  return out;
}

struct MetaLossResult {
  double loss = 0.0;
  std::vector<Tensor> g_phi;
};

/// The exact warp meta-objective term (second order included).
inline MetaLossResult warp_meta_loss_full(const WarpedNetwork& net, double alpha,
                                          const LossBuilder& task_builder,
                                          const LossBuilder& meta_builder) {
  auto r = warp_meta_step(net, alpha, task_builder, meta_builder, true);
  return {r.meta_loss, std::move(r.g_phi)};
}

/// The stop-gradient approximation: same forward value, first-order d/dphi.
inline MetaLossResult warp_meta_loss_approx(const WarpedNetwork& net,
                                            double alpha,
                                            const LossBuilder& task_builder,
                                            const LossBuilder& meta_builder) {
  auto r = warp_meta_step(net, alpha, task_builder, meta_builder, false);
  return {r.meta_loss, std::move(r.g_phi)};
}

/// Cosine similarity between two gradient stacks (diagnostic for comparing the
/// approximate and full meta-gradients).
inline double gradient_cosine(const std::vector<Tensor>& a,
                              const std::vector<Tensor>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].numel(); ++k) {
      dot += a[i].at(k) * b[i].at(k);
      na += a[i].at(k) * a[i].at(k);
      nb += b[i].at(k) * b[i].at(k);
    }
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

struct MamlResult {
  double value = 0.0;                 // sum of test losses at theta_K
  std::vector<Tensor> g_theta0;       // exact gradient through the unroll
};

/// Backpropagation through K steps of (warped) gradient descent from a shared
/// initialisation: C = sum_tau L_test(theta_K^tau). Warp parameters shape the
/// inner gradients through the network but receive no gradient from C.
inline MamlResult maml_objective(
    const WarpedNetwork& net,
    const std::vector<std::vector<Batch>>& train_batches,
    const std::vector<Batch>& test_batches, double alpha, int steps,
    int unroll_limit = 10) {
  if (steps > unroll_limit) {
    throw TensorError("maml_objective: K=" + std::to_string(steps) +
                      " exceeds the unroll limit " +
                      std::to_string(unroll_limit));
  }
  if (train_batches.size() != test_batches.size()) {
    throw TensorError("maml_objective: task count mismatch");
  }
  Graph g;
  Binding theta0_bind = bind_params(g, net);
  std::vector<Var> theta0_vars;
  for (int id : net.partition.task_ids) theta0_vars.push_back(theta0_bind.var(id));

  Var total;
  for (std::size_t t = 0; t < test_batches.size(); ++t) {
    Binding bind = theta0_bind;
    std::vector<Var> theta = theta0_vars;
    for (int k = 0; k < steps; ++k) {
      if (static_cast<std::size_t>(k) >= train_batches[t].size()) {
        throw TensorError("maml_objective: missing train batch for step " +
                          std::to_string(k));
      }
      Var l = task_loss(g, net, bind, train_batches[t][k]);
      auto grads = g.backward(l, theta, /*create_graph=*/true);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] = g.sub(theta[i], g.scale(grads[i], alpha));
        bind.rebind(net.partition.task_ids[i], theta[i]);
      }
    }
    Var ltest = task_loss(g, net, bind, test_batches[t]);
    total = total.valid() ? g.add(total, ltest) : ltest;
  }

  auto grads = g.backward(total, theta0_vars);
  MamlResult out;
  out.value = total.value().item();
  for (const Var& v : grads) out.g_theta0.push_back(v.value());
  return out;
}

/// A point of the extended trajectory (theta_k, L_task(theta_k; phi)).
struct ExtendedPoint {
  std::vector<Tensor> theta;
  double loss = 0.0;
};

inline double chordal_distance(const ExtendedPoint& a, const ExtendedPoint& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.theta.size(); ++i) {
    for (std::size_t k = 0; k < a.theta[i].numel(); ++k) {
      const double d = a.theta[i].at(k) - b.theta[i].at(k);
      s += d * d;
    }
  }
  const double dl = a.loss - b.loss;
  return std::sqrt(s + dl * dl);
}

/// Expected cumulative chordal distance over the extended trajectory:
/// sum_k || sg[extended_k] - extended_{k-1} ||_2.
inline double leap_objective(const std::vector<ExtendedPoint>& trajectory) {
  if (trajectory.size() < 2) {
    throw TensorError("leap_objective: trajectory needs at least 2 points");
  }
  double total = 0.0;
  for (std::size_t k = 1; k < trajectory.size(); ++k) {
    total += chordal_distance(trajectory[k], trajectory[k - 1]);
  }
  return total;
}

struct LeapIncrement {
  bool degenerate = false;         // zero chordal distance: term skipped
  std::vector<Tensor> g;           // per-step pull-back increment
};

/// The first-order per-step meta-gradient increment:
///   -(dLoss * grad_prev + dTheta) / || extended_k - extended_{k-1} ||
/// where grad_prev is the task gradient at the step's start. Terms with zero
/// chordal distance are flagged degenerate and skipped by callers.
inline LeapIncrement leap_increment(const ExtendedPoint& prev,
                                    const std::vector<Tensor>& grad_prev,
                                    const ExtendedPoint& cur) {
  LeapIncrement out;
  const double dist = chordal_distance(cur, prev);
  if (dist == 0.0) {
    out.degenerate = true;
    return out;
  }
  const double dloss = cur.loss - prev.loss;
  out.g.reserve(prev.theta.size());
  for (std::size_t i = 0; i < prev.theta.size(); ++i) {
    Tensor t(prev.theta[i].shape());
    double* d = t.mutable_data();
    for (std::size_t k = 0; k < t.numel(); ++k) {
      const double dtheta = cur.theta[i].at(k) - prev.theta[i].at(k);
      d[k] = -(dloss * grad_prev[i].at(k) + dtheta) / dist;
    }
    out.g.push_back(std::move(t));
  }
  return out;
}

/// Streaming accumulator for the Leap meta-gradient along one trajectory.
class LeapAccumulator {
 public:
  void start(ExtendedPoint p, std::vector<Tensor> grad) {
    prev_ = std::move(p);
    prev_grad_ = std::move(grad);
    started_ = true;
  }

  /// Observe the point reached after an update; `grad` is the task gradient at
  /// that new point (used by the following term).
  void observe(ExtendedPoint p, std::vector<Tensor> grad) {
    if (!started_) throw TensorError("LeapAccumulator: observe before start");
    LeapIncrement inc = leap_increment(prev_, prev_grad_, p);
    if (inc.degenerate) {
      ++degenerate_;
    } else {
      if (sum_.empty()) {
        sum_ = inc.g;
      } else {
        for (std::size_t i = 0; i < sum_.size(); ++i) axpy(sum_[i], inc.g[i], 1.0);
      }
      ++terms_;
    }
    objective_ += chordal_distance(p, prev_);
    prev_ = std::move(p);
    prev_grad_ = std::move(grad);
  }

  int term_count() const { return terms_; }
  int degenerate_count() const { return degenerate_; }
  double objective() const { return objective_; }
  const std::vector<Tensor>& gradient() const { return sum_; }

 private:
  ExtendedPoint prev_;
  std::vector<Tensor> prev_grad_;
  std::vector<Tensor> sum_;
  double objective_ = 0.0;
  int terms_ = 0;
  int degenerate_ = 0;
  bool started_ = false;
};

/// J = L(phi) + lambda C(theta0). The phi gradient is L's alone; the theta0
/// gradient is C's scaled by lambda, so trainers can apply both with the same
/// meta learning rate.
struct JointObjective {
  double value = 0.0;
  std::vector<Tensor> g_phi;
  std::vector<Tensor> g_theta0;
};

inline JointObjective joint_objective(double l_value,
                                      std::vector<Tensor> g_phi,
                                      double c_value,
                                      std::vector<Tensor> g_theta0,
                                      double lambda) {
  if (lambda < 0.0) throw TensorError("joint_objective: lambda must be >= 0");
  JointObjective out;
  out.value = l_value + lambda * c_value;
  out.g_phi = std::move(g_phi);
  out.g_theta0 = std::move(g_theta0);
  for (Tensor& t : out.g_theta0) {
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] *= lambda;
  }
  return out;
}

/// Continual meta-loss weighting. With n steps per sub-task and T sub-tasks,
/// sub-task i's validation loss enters the meta-objective n (T - i + 1) times
/// over a trajectory; the per-appearance normalisation gives every sub-task
/// the same total weight. The uniform mode averages the terms present at
/// sub-task t instead.
enum class ContinualWeighting : std::uint8_t { kAppendixStyle, kUniform };

inline double continual_weight(ContinualWeighting mode, int term, int subtask,
                               int steps_per_subtask, int total_subtasks) {
  if (term < 1 || term > subtask || subtask > total_subtasks) {
    throw TensorError("continual_weight: term/sub-task indices out of range");
  }
  if (mode == ContinualWeighting::kUniform) {
    return 1.0 / static_cast<double>(subtask);
  }
  return 1.0 / (static_cast<double>(steps_per_subtask) *
                static_cast<double>(total_subtasks - term + 1));
}

/// Weighted sum of validation losses, at whatever parameters the binding
/// carries, for the current sub-task t and all earlier ones. The trainers
/// compose this builder with the full or stop-gradient update target.
inline LossBuilder continual_meta_builder(std::vector<Batch> val_batches, int t,
                                          int steps_per_subtask,
                                          int total_subtasks,
                                          ContinualWeighting mode) {
  if (static_cast<int>(val_batches.size()) != t) {
    throw TensorError("continual_meta_builder: need one validation batch per "
                      "sub-task 1..t, got " +
                      std::to_string(val_batches.size()) + " for t=" +
                      std::to_string(t));
  }
  return [val_batches = std::move(val_batches), t, steps_per_subtask,
          total_subtasks, mode](Graph& g, const WarpedNetwork& net,
                                const Binding& bind) {
    Var total;
    for (int i = 1; i <= t; ++i) {
      const Batch& b = val_batches[static_cast<std::size_t>(i - 1)];
      const double w =
          continual_weight(mode, i, t, steps_per_subtask, total_subtasks);
      Var term = g.scale(task_loss(g, net, bind, b), w);
      total = total.valid() ? g.add(total, term) : term;
    }
    return total;
  };
}

/// The spec-level operation: evaluate the weighted continual meta-loss at the
/// given task-parameter snapshot and return its phi gradient.
inline MetaLossResult continual_meta_loss(const WarpedNetwork& net,
                                          const std::vector<Tensor>& theta,
                                          std::vector<Batch> val_batches, int t,
                                          int steps_per_subtask,
                                          int total_subtasks,
                                          ContinualWeighting mode) {
  Graph g;
  Binding bind = bind_params_with_task(g, net, theta);
  Var loss = continual_meta_builder(std::move(val_batches), t,
                                    steps_per_subtask, total_subtasks,
                                    mode)(g, net, bind);
  std::vector<Var> phi_vars;
  for (int id : net.partition.warp_ids) phi_vars.push_back(bind.var(id));
  auto grads = g.backward(loss, phi_vars);
  MetaLossResult out;
  out.loss = loss.value().item();
  for (const Var& v : grads) out.g_phi.push_back(v.value());
  return out;
}

}  // namespace warpgrad
