// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "warpgrad/tensor.hpp"

namespace warpgrad {

/// Role of a trainable slot: task parameters (theta) adapt during task
/// learning, warp parameters (phi) are fixed there and only move in the outer
/// loop.
enum class Role : std::uint8_t { kTask, kWarp };

inline const char* role_name(Role r) { return r == Role::kTask ? "task" : "warp"; }

/// Named parameter slots with a role tag each. Iteration order is insertion
/// order, which keeps every gradient reduction and update deterministic.
class ParamStore {
 public:
  struct Slot {
    std::string name;
    Role role;
    Tensor value;
  };

  int add(std::string name, Role role, Tensor value) {
    if (index_.count(name)) {
      throw TensorError("duplicate parameter slot '" + name + "'");
    }
    const int id = static_cast<int>(slots_.size());
    index_.emplace(name, id);
    slots_.push_back(Slot{std::move(name), role, std::move(value)});
    return id;
  }

  int size() const { return static_cast<int>(slots_.size()); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw TensorError("unknown parameter slot '" + name + "'");
    }
    return it->second;
  }

  Slot& slot(int id) { return slots_.at(static_cast<std::size_t>(id)); }
  const Slot& slot(int id) const { return slots_.at(static_cast<std::size_t>(id)); }

  Tensor& value(int id) { return slot(id).value; }
  const Tensor& value(int id) const { return slot(id).value; }

  std::vector<int> ids(Role role) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (slots_[static_cast<std::size_t>(i)].role == role) out.push_back(i);
    }
    return out;
  }

  std::vector<int> all_ids() const {
    std::vector<int> out(slots_.size());
    for (int i = 0; i < size(); ++i) out[static_cast<std::size_t>(i)] = i;
    return out;
  }

  std::vector<Tensor> snapshot(const std::vector<int>& which) const {
    std::vector<Tensor> out;
    out.reserve(which.size());
    for (int id : which) out.push_back(value(id));
    return out;
  }

  void restore(const std::vector<int>& which, const std::vector<Tensor>& vals) {
    if (which.size() != vals.size()) {
      throw TensorError("restore: id/value count mismatch");
    }
    for (std::size_t i = 0; i < which.size(); ++i) {
      Tensor& dst = value(which[i]);
      if (dst.shape() != vals[i].shape()) {
        throw TensorError("restore: shape mismatch on slot '" +
                          slot(which[i]).name + "'");
      }
      dst = vals[i];
    }
  }

 private:
  std::vector<Slot> slots_;
  std::unordered_map<std::string, int> index_;
};

/// Gradient keyed by slot id, in the order the ids were requested.
struct GradMap {
  std::vector<int> ids;
  std::vector<Tensor> grads;

  const Tensor& for_id(int id) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == id) return grads[i];
    }
    throw TensorError("gradient for slot id " + std::to_string(id) +
                      " not present");
  }
};

}  // namespace warpgrad
