#include "uniedit/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace uniedit {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<float> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank()));
    }
    return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::stride(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank()));
    }
    int64_t s = 1;
    for (int a = axis + 1; a < rank(); ++a) s *= shape_[static_cast<size_t>(a)];
    return s;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

uint64_t checksum_bytes(const void* data, size_t size, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t checksum(const Tensor& t) {
    return checksum_bytes(t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
}

std::string shape_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::string shape_string(const Tensor& t) { return shape_string(t.shape()); }

void require_rank(const Tensor& t, int rank, const std::string& name) {
    if (t.rank() != rank) {
        throw ShapeError(name + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(t));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what) {
    if (!a.same_shape(b)) {
        throw ShapeError(what + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
}

}  // namespace uniedit
