#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace zsq {

using Vec = std::vector<double>;

// Dense double tensor, row-major, dynamic rank. All model math runs in
// double so analytic gradients can be checked against central differences
// without precision games.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    const std::vector<std::size_t>& shape() const { return shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    Tensor& operator+=(const Tensor& o) {
        if (o.size() != size()) throw std::invalid_argument("Tensor +=: size mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }
    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace zsq
