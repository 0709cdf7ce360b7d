#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace a4 {

/// Dense row-major tensor of doubles. Shapes are explicit; all layout
/// conversions copy. This is the only storage type the network uses.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor scalar(double value) { return full({1}, value); }

    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size(int axis) const;  // negative axis counts from the back
    const std::vector<int64_t>& shape() const { return shape_; }
    std::vector<int64_t> strides() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(std::initializer_list<int64_t> idx) { return data_[static_cast<size_t>(offset_of(idx))]; }
    double at(std::initializer_list<int64_t> idx) const { return data_[static_cast<size_t>(offset_of(idx))]; }

    Tensor reshaped(std::vector<int64_t> new_shape) const;
    void fill(double value);
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool empty() const { return data_.empty(); }

    double max_abs() const;
    bool all_finite() const;
    std::string shape_str() const;

private:
    int64_t offset_of(std::initializer_list<int64_t> idx) const;

    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

/// NumPy-style broadcast result shape; throws ShapeError when incompatible.
std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                     const std::vector<int64_t>& b);

/// Shape mismatches and malformed tensor arguments.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid model / block configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset or file-level problems (missing files, bad headers, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace a4
