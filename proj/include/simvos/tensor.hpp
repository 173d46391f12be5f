#pragma once

// Dense row-major tensor templated on scalar. float is the compute type
// throughout the pipeline; double is instantiated only by the gradient
// oracle. Eigen provides the heavy matrix kernels via Map views.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace simvos {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyRegionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StructureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << "]";
  return os.str();
}

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using MatrixXs = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapMat = Eigen::Map<MatrixXs>;
  using ConstMapMat = Eigen::Map<const MatrixXs>;

  Tensor() = default;

  explicit Tensor(Shape dims) : dims_(std::move(dims)), data_(checked_numel(dims_), S(0)) {}

  Tensor(Shape dims, std::vector<S> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != checked_numel(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_str(dims_));
    }
  }

  static Tensor full(Shape dims, S value) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors (row-major).
  S& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  // Eigen view of a rank-2 tensor (or an explicit rows x cols reinterpretation).
  MapMat mat() {
    require_rank2();
    return MapMat(data_.data(), static_cast<Eigen::Index>(dims_[0]),
                  static_cast<Eigen::Index>(dims_[1]));
  }
  ConstMapMat mat() const {
    require_rank2();
    return ConstMapMat(data_.data(), static_cast<Eigen::Index>(dims_[0]),
                       static_cast<Eigen::Index>(dims_[1]));
  }
  MapMat mat(std::size_t rows, std::size_t cols) {
    if (rows * cols != data_.size()) throw ShapeError("mat view size mismatch");
    return MapMat(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  ConstMapMat mat(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data_.size()) throw ShapeError("mat view size mismatch");
    return ConstMapMat(data_.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(cols));
  }

  Tensor reshaped(Shape dims) const {
    if (shape_numel(dims) != data_.size()) {
      throw ShapeError("reshape from " + shape_str(dims_) + " to " + shape_str(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }
  void set_zero() { fill(S(0)); }

  bool all_finite() const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(dims_, std::move(out));
  }

 private:
  static std::size_t checked_numel(const Shape& dims) {
    if (dims.empty()) throw ShapeError("tensor dims must be non-empty");
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
    }
    return shape_numel(dims);
  }
  void require_rank2() const {
    if (dims_.size() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(dims_));
  }

  Shape dims_;
  std::vector<S> data_;
};

template <typename S>
void ensure_finite(const Tensor<S>& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <typename S>
bool exactly_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_dims(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_dims(b)) throw ShapeError("max_abs_diff dims mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace simvos
