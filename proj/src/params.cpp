#include "gklsbi/params.hpp"

#include <stdexcept>

namespace gklsbi {

void ParamStore::add(const std::string& name, Tensor value) {
  if (!tensors_.emplace(name, std::move(value)).second) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto& slot = mutable_get(name);
  if (!slot.same_shape(value)) {
    throw ShapeError("parameter " + name + " has shape " + slot.shape_string() +
                     ", cannot assign " + value.shape_string());
  }
  slot = std::move(value);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamStore::mutable_get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

}  // namespace gklsbi
