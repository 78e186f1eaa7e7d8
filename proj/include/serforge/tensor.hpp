#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace serforge {

// Dense row-major n-d array. Single precision in training, double in DSP
// and gradient-check paths.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    data_.assign(numel(dims_), T(0));
  }

  Tensor(std::initializer_list<std::size_t> dims)
      : Tensor(std::vector<std::size_t>(dims)) {}

  static Tensor full(std::vector<std::size_t> dims, T value) {
    Tensor t(std::move(dims));
    t.fill(value);
    return t;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // unchecked row-major indexing
  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k,
                      std::size_t l) const {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }

  void fill(T value) { data_.assign(data_.size(), value); }

  Tensor reshaped(std::vector<std::size_t> new_dims) const {
    if (numel(new_dims) != data_.size()) {
      throw std::invalid_argument("tensor reshape: element count mismatch");
    }
    Tensor out;
    out.dims_ = std::move(new_dims);
    out.data_ = data_;
    return out;
  }

  bool same_dims(const Tensor& other) const { return dims_ == other.dims_; }

  static std::size_t numel(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& in) {
  Tensor<To> out(in.dims());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<To>(in[i]);
  }
  return out;
}

inline std::string dims_to_string(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace serforge
