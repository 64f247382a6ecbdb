#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace iip {

using Shape = std::vector<std::size_t>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Rank is arbitrary; most kernels view
/// the data as a matrix whose columns are the trailing dimension.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    // Aligned so vectorized kernels take the same path for every tensor.
    using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor identity(std::size_t n);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    /// Trailing dimension (1 for scalars).
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    /// Product of all leading dimensions.
    std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const Storage& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double item() const;

    MatrixMap matrix() {
        return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
    }
    ConstMatrixMap matrix() const {
        return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
    }

    Tensor reshaped(Shape shape) const;
    void fill(double v);
    bool all_finite() const;
    /// Throws NonFiniteError naming `where` if any element is NaN or Inf.
    void require_finite(const char* where) const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    Storage data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace iip
