#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lplm/rng.hpp"

namespace lplm::core {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(std::span<const int> shape);

// Dense row-major float64 tensor. Rank is 1 or 2 everywhere in this codebase;
// scalars are shape {1}.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor gaussian(std::vector<int> shape, double stddev, Rng& rng);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator()(int i) { return data_[static_cast<size_t>(i)]; }
    double operator()(int i) const { return data_[static_cast<size_t>(i)]; }
    double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + static_cast<size_t>(j)]; }
    double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + static_cast<size_t>(j)]; }

    // Rows/cols view: rank-1 tensors are 1 x n.
    int rows() const { return rank() == 2 ? shape_[0] : 1; }
    int cols() const { return cols_; }

    bool all_finite() const;
    void check_finite(const std::string& what) const;

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
    int cols_ = 0;
};

// C[m,n] = A[m,k] * B[k,n]; fixed per-element summation order (k ascending),
// rows parallelized. Throws ShapeError naming both shapes on mismatch.
void matmul_into(Tensor& out, const Tensor& a, const Tensor& b);

// C[m,n] += A[m,k] * B[k,n]
void matmul_acc(Tensor& out, const Tensor& a, const Tensor& b);

// C[m,k] += A[m,n] * B[k,n]^T   (i.e. A * transpose(B))
void matmul_nt_acc(Tensor& out, const Tensor& a, const Tensor& b);

// C[k,n] += A[m,k]^T * B[m,n]   (i.e. transpose(A) * B)
void matmul_tn_acc(Tensor& out, const Tensor& a, const Tensor& b);

}  // namespace lplm::core
