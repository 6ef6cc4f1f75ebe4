#pragma once

#include "gklsbi/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace gklsbi {

// Named trainable weights. Names are unique and shapes are fixed once added.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  void set(const std::string& name, Tensor value);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& mutable_get(const std::string& name);

  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return tensors_.size(); }
  std::size_t scalar_count() const;

  const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

using GradientMap = std::map<std::string, Tensor>;

}  // namespace gklsbi
