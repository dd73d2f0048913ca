#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "prunevc/errors.hpp"

namespace prunevc {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense n-d value, row-major, flat Eigen array storage.
template <typename S>
struct TensorT {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatrixRM =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Shape shape;
  Array data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)) {
    data = Array::Zero(shape_numel(shape));
  }
  TensorT(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

  static TensorT full(Shape s, S v) {
    TensorT t(std::move(s));
    t.data.setConstant(v);
    return t;
  }

  static TensorT scalar(S v) { return full({1}, v); }

  static TensorT from(Shape s, std::initializer_list<S> vals) {
    TensorT t(std::move(s));
    if (static_cast<std::int64_t>(vals.size()) != t.numel())
      throw ShapeError("tensor: initializer length mismatch");
    std::int64_t i = 0;
    for (S v : vals) t.data[i++] = v;
    return t;
  }

  std::int64_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool is_scalar() const { return numel() == 1; }
  S scalar_value() const {
    if (!is_scalar()) throw ShapeError("tensor: not a scalar");
    return data[0];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }
  bool all_finite() const { return data.allFinite(); }

  S& operator[](std::int64_t i) { return data[i]; }
  S operator[](std::int64_t i) const { return data[i]; }

  // NCHW accessors; the 4-d layout is the convention for feature maps
  S& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  S at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  Eigen::Map<MatrixRM> mat_view(std::int64_t rows, std::int64_t cols) {
    if (rows * cols != numel())
      throw ShapeError("tensor: matrix view " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " does not cover " +
                       shape_str(shape));
    return Eigen::Map<MatrixRM>(data.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM> mat_view(std::int64_t rows,
                                      std::int64_t cols) const {
    if (rows * cols != numel())
      throw ShapeError("tensor: matrix view " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " does not cover " +
                       shape_str(shape));
    return Eigen::Map<const MatrixRM>(data.data(), rows, cols);
  }

  template <typename S2>
  TensorT<S2> cast() const {
    TensorT<S2> out(shape);
    out.data = data.template cast<S2>();
    return out;
  }
};

using Tensor = TensorT<float>;

}  // namespace prunevc
