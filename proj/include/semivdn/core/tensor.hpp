#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace semivdn {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major n-d array with value semantics. Rank 2 is treated as a
// matrix (rows, cols); rank 4 as (n, c, h, w) feature maps.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // (rows, cols) access for rank-2 tensors.
    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
    const T& operator()(int r, int c) const {
        return data_[static_cast<std::size_t>(r) * shape_[1] + c];
    }

    // (c, h, w) access for rank-3 tensors.
    T& operator()(int c, int h, int w) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    const T& operator()(int c, int h, int w) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }

    // (n, c, h, w) access for rank-4 tensors.
    T& operator()(int n, int c, int h, int w) { return data_[idx4(n, c, h, w)]; }
    const T& operator()(int n, int c, int h, int w) const { return data_[idx4(n, c, h, w)]; }

    std::size_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    int rows() const { return shape_[0]; }
    int cols() const { return shape_[1]; }

    Tensor reshaped(std::vector<int> shape) const {
        if (checked_numel(shape) != numel())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min_value() const { return *std::min_element(data_.begin(), data_.end()); }
    T max_value() const { return *std::max_element(data_.begin(), data_.end()); }

    double sum() const {
        double s = 0.0;
        for (const T& v : data_) s += static_cast<double>(v);
        return s;
    }
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

    Eigen::Map<MatRM<T>> mat(int r, int c) {
        return Eigen::Map<MatRM<T>>(data_.data(), r, c);
    }
    Eigen::Map<const MatRM<T>> mat(int r, int c) const {
        return Eigen::Map<const MatRM<T>>(data_.data(), r, c);
    }
    Eigen::Map<MatRM<T>> mat() { return mat(shape_[0], shape_[1]); }
    Eigen::Map<const MatRM<T>> mat() const { return mat(shape_[0], shape_[1]); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out = Tensor<U>(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i)
            out[i] = static_cast<U>(data_[i]);
        return out;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "(";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += ", ";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }

private:
    static std::size_t checked_numel(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor<T>::shape_str(a.shape()) + " vs " +
                                    Tensor<T>::shape_str(b.shape()));
}

} // namespace semivdn
