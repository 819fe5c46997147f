#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "qest/errors.hpp"

namespace qest::nn {

/// Dense row-major n-d array; the dataset and checkpoint carrier type.
struct Tensor {
  std::vector<long> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<long> s) : shape(std::move(s)) {
    values.assign(static_cast<size_t>(count()), 0.0);
  }

  long count() const {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
  }

  long dim(int axis) const { return shape.at(static_cast<size_t>(axis)); }

  double& at(long i, long j, long k, long l) {
    return values[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }
  double at(long i, long j, long k, long l) const {
    return values[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }

  void require_rank(int rank) const {
    if (static_cast<int>(shape.size()) != rank)
      throw ShapeMismatch("tensor rank mismatch");
  }
};

}  // namespace qest::nn
