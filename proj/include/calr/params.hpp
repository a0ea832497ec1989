#pragma once

// Named parameter registry used by the optimizer and the graph builder.
// Parameters reference model weights in place; each trainable entry owns a
// gradient slot of matching shape and an optional 0/1 mask applied when
// gradients land (sparse corrective terms train only inside their mask).

#include <string>
#include <unordered_map>
#include <vector>

#include "calr/error.hpp"
#include "calr/matrix.hpp"

namespace calr {

struct Param {
  std::string name;
  Matrix* value = nullptr;
  bool trainable = true;
  const Matrix* grad_mask = nullptr;
  Matrix grad;
  bool has_grad = false;
};

class ParamSet {
 public:
  void add(const std::string& name, Matrix* value, bool trainable = true,
           const Matrix* grad_mask = nullptr) {
    if (by_name_.count(name)) {
      throw Error(ErrorCode::kInvalidArgument, "ParamSet: duplicate name " + name);
    }
    Param p;
    p.name = name;
    p.value = value;
    p.trainable = trainable;
    p.grad_mask = grad_mask;
    by_name_[name] = params_.size();
    by_ptr_[value] = params_.size();
    params_.push_back(std::move(p));
  }

  size_t size() const { return params_.size(); }

  size_t trainable_count() const {
    size_t n = 0;
    for (const Param& p : params_)
      if (p.trainable) ++n;
    return n;
  }

  size_t trainable_scalar_count() const {
    size_t n = 0;
    for (const Param& p : params_)
      if (p.trainable) n += p.value->size();
    return n;
  }

  Param& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) {
      throw Error(ErrorCode::kInvalidArgument, "ParamSet: unknown name " + name);
    }
    return params_[it->second];
  }

  const Param* find(const Matrix* value) const {
    auto it = by_ptr_.find(value);
    return it == by_ptr_.end() ? nullptr : &params_[it->second];
  }

  Param* find(const Matrix* value) {
    auto it = by_ptr_.find(value);
    return it == by_ptr_.end() ? nullptr : &params_[it->second];
  }

  /// Store a gradient for one parameter, applying its mask if present.
  void set_grad(Param& p, Matrix grad) {
    if (!grad.same_shape(*p.value)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "ParamSet: gradient shape " + grad.shape_str() + " for " +
                      p.name + " " + p.value->shape_str());
    }
    if (p.grad_mask) {
      for (size_t i = 0; i < grad.size(); ++i)
        grad.data()[i] *= p.grad_mask->data()[i];
    }
    p.grad = std::move(grad);
    p.has_grad = true;
  }

  void clear_grads() {
    for (Param& p : params_) {
      p.grad = Matrix();
      p.has_grad = false;
    }
  }

  std::vector<Param>::iterator begin() { return params_.begin(); }
  std::vector<Param>::iterator end() { return params_.end(); }
  std::vector<Param>::const_iterator begin() const { return params_.begin(); }
  std::vector<Param>::const_iterator end() const { return params_.end(); }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, size_t> by_name_;
  std::unordered_map<const Matrix*, size_t> by_ptr_;
};

}  // namespace calr
