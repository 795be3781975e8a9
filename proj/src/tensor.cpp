#include "ktr/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ktr/kernels.hpp"

namespace ktr::diff {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace {

void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) {
        throw std::invalid_argument("tensor shape must have at least one extent");
    }
    for (const auto extent : shape) {
        if (extent == 0) {
            throw std::invalid_argument("tensor extents must be positive");
        }
    }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_string());
    }
}

Tensor Tensor::vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw std::logic_error("item() on non-scalar tensor of shape " + shape_string());
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (const double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_string() const {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        out << (i ? "," : "") << shape_[i];
    }
    out << ']';
    return out.str();
}

std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.size() < 2) {
        throw std::invalid_argument("log_softmax needs at least two logits");
    }
    for (const double v : logits) {
        if (!std::isfinite(v)) {
            throw std::domain_error("log_softmax: non-finite logit");
        }
    }
    std::vector<double> out(logits.size());
    kernels::serial::log_softmax_rows(logits, out, 1, logits.size());
    return out;
}

Tensor log_softmax(const Tensor& logits) {
    return Tensor(logits.shape(), log_softmax(logits.data()));
}

std::vector<double> softmax(std::span<const double> logits) {
    auto out = log_softmax(logits);
    for (auto& v : out) {
        v = std::exp(v);
    }
    return out;
}

}  // namespace ktr::diff
