#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uniedit/errors.hpp"

namespace uniedit {

/// Dense row-major float32 tensor. Value semantics, always contiguous.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);

    static Tensor full(std::vector<int64_t> shape, float value);
    static Tensor from_data(std::vector<int64_t> shape, std::vector<float> data);

    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const;
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    float& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    float& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * stride(0) + j)]; }
    float at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * stride(0) + j)]; }
    float& at(int64_t i, int64_t j, int64_t k) {
        return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    float at(int64_t i, int64_t j, int64_t k) const {
        return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    float& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
    }
    float at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
    }

    /// Elements per step along `axis` (row-major).
    int64_t stride(int axis) const;

    Tensor reshaped(std::vector<int64_t> shape) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    void fill(float value);

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

/// FNV-1a 64-bit hash over the raw little-endian float bytes.
uint64_t checksum(const Tensor& t);
uint64_t checksum_bytes(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);

std::string shape_string(const std::vector<int64_t>& shape);
std::string shape_string(const Tensor& t);

/// Throws ShapeError naming `name` unless t has exactly `rank` axes.
void require_rank(const Tensor& t, int rank, const std::string& name);

/// Throws ShapeError unless a and b have identical shapes.
void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what);

}  // namespace uniedit
