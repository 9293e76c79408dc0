// capslid/tensor.hpp
//
// Dense row-major tensor of doubles. Shapes are explicit everywhere; there
// is no broadcasting. This is the value type flowing through the autodiff
// graph and the model parameters.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "capslid/error.hpp"

namespace capslid {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // row-major, size == product(shape)

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {}

  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor data length does not match shape");
  }

  static std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D convenience accessor (row-major).
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<std::size_t>& s,
                          const char* what) {
  if (t.shape != s)
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + ": expected " + shape_string(s) + ", got " +
                    shape_string(t.shape));
}

}  // namespace capslid
