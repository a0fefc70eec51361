#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ookd/common.hpp"

namespace ookd::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatRM>;
using ConstMatMap = Eigen::Map<const MatRM>;

// Dense row-major double tensor with shared storage. Copies are shallow;
// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<int64_t>(values.size()) != count(t.shape_)) {
      throw ValidationError("Tensor::from: data size does not match shape");
    }
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return data_ != nullptr; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  const std::vector<int>& shape() const { return shape_; }

  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  double& at(int r, int c) { return (*data_)[static_cast<size_t>(r) * dim(1) + c]; }
  double at(int r, int c) const { return (*data_)[static_cast<size_t>(r) * dim(1) + c]; }

  double item() const {
    if (numel() != 1) throw ValidationError("Tensor::item: tensor is not scalar");
    return (*data_)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != numel()) {
      throw ValidationError("Tensor::reshaped: element count mismatch");
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  // 2D Eigen view: first dim is rows, remaining dims flattened into columns.
  MatMap mat() {
    return MatMap(data(), rows(), cols());
  }
  ConstMatMap mat() const {
    return ConstMatMap(data(), rows(), cols());
  }
  // Flat 1 x numel view.
  MatMap vec() { return MatMap(data(), 1, numel()); }
  ConstMatMap vec() const { return ConstMatMap(data(), 1, numel()); }

  int64_t rows() const { return ndim() == 0 ? 0 : dim(0); }
  int64_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  void fill(double v) { std::fill(data(), data() + numel(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (int64_t i = 0; i < numel(); ++i) {
      if (!std::isfinite((*data_)[static_cast<size_t>(i)])) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

inline void check_shape(const Tensor& t, const std::vector<int>& expect,
                        const char* where) {
  if (t.shape() != expect) {
    Tensor e;
    std::ostringstream os;
    os << where << ": expected shape [";
    for (size_t i = 0; i < expect.size(); ++i) os << (i ? "," : "") << expect[i];
    os << "], got " << t.shape_str();
    throw ValidationError(os.str());
  }
}

}  // namespace ookd::nn
