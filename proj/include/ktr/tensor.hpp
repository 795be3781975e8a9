#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ktr::diff {

/// Dense row-major array of 64-bit reals.
///
/// A scalar is a tensor of shape {1}. Shapes hold positive extents only and
/// the element count always equals the product of the extents.
class Tensor {
  public:
    Tensor() : shape_{1}, data_(1, 0.0) {}
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    // 2-D view helpers. A rank-1 tensor is treated as a single row.
    std::size_t rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
    std::size_t cols() const { return shape_.back(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& storage() { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double item() const;

    bool all_finite() const;
    std::string shape_string() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

  private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

/// Log-softmax of a logit vector, computed with max subtraction.
/// Throws std::invalid_argument for fewer than two entries and
/// std::domain_error for non-finite input.
std::vector<double> log_softmax(std::span<const double> logits);
Tensor log_softmax(const Tensor& logits);

/// Softmax of a logit vector (same preconditions as log_softmax).
std::vector<double> softmax(std::span<const double> logits);

}  // namespace ktr::diff
