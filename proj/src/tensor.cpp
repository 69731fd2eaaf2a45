#include "lplm/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "lplm/thread_pool.hpp"

namespace lplm::core {

std::string shape_str(std::span<const int> shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {
size_t checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), 0.0);
    cols_ = shape_.back();
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }
    cols_ = shape_.back();
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::gaussian(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = stddev * rng.next_gauss();
    return t;
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void Tensor::check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite values in " + what);
}

namespace {
void require_matmul_shapes(const Tensor& a, const Tensor& b, int ak, int bk, const char* op) {
    if (a.rank() != 2 || b.rank() != 2 || ak != bk) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
}

constexpr int64_t kParallelFlopCutoff = 1 << 21;  // ~2 MFLOP
}  // namespace

void matmul_into(Tensor& out, const Tensor& a, const Tensor& b) {
    std::fill(out.vec().begin(), out.vec().end(), 0.0);
    matmul_acc(out, a, b);
}

// Inner kernel: C[r0:r1,:] += A[r0:r1,:] * B with a 4-way unrolled k loop.
// Each output element keeps a fixed accumulation order, so results are
// independent of threading.
namespace {
void matmul_rows(const double* pa, const double* pb, double* pc, int k, int n, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        double* c = pc + static_cast<size_t>(i) * n;
        const double* ar = pa + static_cast<size_t>(i) * k;
        int kk = 0;
        for (; kk + 4 <= k; kk += 4) {
            const double a0 = ar[kk], a1 = ar[kk + 1], a2 = ar[kk + 2], a3 = ar[kk + 3];
            const double* b0 = pb + static_cast<size_t>(kk) * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (int j = 0; j < n; ++j) c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; kk < k; ++kk) {
            const double av = ar[kk];
            const double* br = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) c[j] += av * br[j];
        }
    }
}
}  // namespace

void matmul_acc(Tensor& out, const Tensor& a, const Tensor& b) {
    require_matmul_shapes(a, b, a.dim(1), b.dim(0), "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (out.dim(0) != m || out.dim(1) != n) {
        throw ShapeError("matmul: output shape " + shape_str(out.shape()) + " does not match result [" +
                         std::to_string(m) + "," + std::to_string(n) + "]");
    }
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    if (static_cast<int64_t>(m) * k * n * 2 >= kParallelFlopCutoff && m >= 2) {
        parallel_for(m, [&](int r0, int r1) { matmul_rows(pa, pb, pc, k, n, r0, r1); });
    } else {
        matmul_rows(pa, pb, pc, k, n, 0, m);
    }
}

void matmul_nt_acc(Tensor& out, const Tensor& a, const Tensor& b) {
    require_matmul_shapes(a, b, a.dim(1), b.dim(1), "matmul_nt");
    const int m = a.dim(0), n = a.dim(1), k = b.dim(0);
    if (out.dim(0) != m || out.dim(1) != k) {
        throw ShapeError("matmul_nt: bad output shape " + shape_str(out.shape()));
    }
    // transpose b so the inner loops stream contiguously
    std::vector<double> bt(static_cast<size_t>(n) * k);
    const double* pb = b.data();
    for (int kk = 0; kk < k; ++kk) {
        for (int j = 0; j < n; ++j) bt[static_cast<size_t>(j) * k + kk] = pb[static_cast<size_t>(kk) * n + j];
    }
    const double* pa = a.data();
    double* pc = out.data();
    if (static_cast<int64_t>(m) * k * n * 2 >= kParallelFlopCutoff && m >= 2) {
        parallel_for(m, [&](int r0, int r1) { matmul_rows(pa, bt.data(), pc, n, k, r0, r1); });
    } else {
        matmul_rows(pa, bt.data(), pc, n, k, 0, m);
    }
}

void matmul_tn_acc(Tensor& out, const Tensor& a, const Tensor& b) {
    require_matmul_shapes(a, b, a.dim(0), b.dim(0), "matmul_tn");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (out.dim(0) != k || out.dim(1) != n) {
        throw ShapeError("matmul_tn: bad output shape " + shape_str(out.shape()));
    }
    std::vector<double> at(static_cast<size_t>(k) * m);
    const double* pa = a.data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) at[static_cast<size_t>(kk) * m + i] = pa[static_cast<size_t>(i) * k + kk];
    }
    const double* pb = b.data();
    double* pc = out.data();
    if (static_cast<int64_t>(m) * k * n * 2 >= kParallelFlopCutoff && k >= 2) {
        parallel_for(k, [&](int r0, int r1) { matmul_rows(at.data(), pb, pc, m, n, r0, r1); });
    } else {
        matmul_rows(at.data(), pb, pc, m, n, 0, k);
    }
}

int sample_categorical(std::span<const double> probs, Rng& rng) {
    double total = 0.0;
    int last_positive = -1;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] < 0.0) throw NumericError("sample_categorical: negative probability at index " + std::to_string(i));
        if (probs[i] > 0.0) last_positive = static_cast<int>(i);
        total += probs[i];
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw NumericError("sample_categorical: probabilities sum to " + std::to_string(total));
    }
    if (last_positive < 0) throw NumericError("sample_categorical: all-zero distribution");
    const double u = rng.next_double();
    double cum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) return static_cast<int>(i);
    }
    return last_positive;  // u landed in rounding slack at the top
}

}  // namespace lplm::core
