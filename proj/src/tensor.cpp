#include "a4unet/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace a4 {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

int64_t Tensor::size(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    return shape_[static_cast<size_t>(axis)];
}

std::vector<int64_t> Tensor::strides() const {
    std::vector<int64_t> s(shape_.size(), 1);
    for (int i = rank() - 2; i >= 0; --i) s[i] = s[i + 1] * shape_[i + 1];
    return s;
}

int64_t Tensor::offset_of(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor rank " + std::to_string(rank()));
    auto st = strides();
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
        if (v < 0 || v >= shape_[i]) throw ShapeError("index out of bounds at axis " + std::to_string(i));
        off += v * st[i];
        ++i;
    }
    return off;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(new_shape));
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
}

void Tensor::fill(double value) {
    for (auto& v : data_) v = value;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    size_t r = std::max(a.size(), b.size());
    std::vector<int64_t> out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

}  // namespace a4
