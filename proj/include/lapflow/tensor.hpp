#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lapflow/common.hpp"

namespace lapflow {

// Dense row-major tensor, double precision everywhere. Training paths could
// drop to single precision but at desk scale the double path is fast enough
// and keeps verification and training on one code path.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        require(numel_of(shape) == static_cast<int64_t>(data.size()),
                "tensor: shape does not match data length");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            require(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = stddev * rng.normal();
        return t;
    }

    // 2-D convenience constructor for tests and fixtures.
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        int64_t r = static_cast<int64_t>(rows.size());
        int64_t c = r > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
        Tensor t({r, c});
        int64_t i = 0;
        for (const auto& row : rows) {
            require(static_cast<int64_t>(row.size()) == c, "tensor: ragged rows");
            for (double v : row) t.data[i++] = v;
        }
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    int64_t rows() const { require(rank() == 2, "tensor: rows() needs rank 2"); return shape[0]; }
    int64_t cols() const { require(rank() == 2, "tensor: cols() needs rank 2"); return shape[1]; }

    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    double* row_ptr(int64_t i) { return data.data() + i * shape.back(); }
    const double* row_ptr(int64_t i) const { return data.data() + i * shape.back(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        require(same_shape(o), "tensor: += shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require(same_shape(o), "tensor: -= shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (auto& x : data) x *= s;
        return *this;
    }
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline void ensure_finite(const Tensor& t, const std::string& what) {
    require_io(all_finite(t), "non-finite values in " + what);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// C = A * B for 2-D tensors. ikj loop order so the inner loop streams rows.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    require(a.cols() == b.rows(), "matmul: inner dimensions do not match");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C += A^T * B, used by weight-gradient accumulation.
inline void matmul_at_b_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    require(a.rank() == 2 && b.rank() == 2 && c.rank() == 2, "matmul_at_b_acc: rank-2 required");
    require(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(),
            "matmul_at_b_acc: shape mismatch");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        const double* brow = b.data.data() + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* crow = c.data.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = A * B^T.
inline Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_a_bt: rank-2 required");
    require(a.cols() == b.cols(), "matmul_a_bt: inner dimensions do not match");
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        double* crow = c.data.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b.data.data() + j * k;
            double s = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            crow[j] = s;
        }
    }
    return c;
}

// Row-wise softmax with max subtraction; rows sum to 1 for any finite input.
// Treats the last axis as the row.
inline Tensor softmax_rows(const Tensor& x) {
    require(x.rank() >= 1, "softmax_rows: rank >= 1 required");
    Tensor y = x;
    const int64_t w = x.shape.back();
    require(w > 0, "softmax_rows: empty rows");
    const int64_t nrows = x.numel() / w;
    for (int64_t r = 0; r < nrows; ++r) {
        double* row = y.data.data() + r * w;
        double mx = row[0];
        for (int64_t j = 1; j < w; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < w; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < w; ++j) row[j] /= sum;
    }
    return y;
}

constexpr double kRmsNormEps = 1e-6;

// y[i] = gain[i] * x[i] / sqrt(mean(x^2) + eps), row-wise over the last axis.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    const int64_t w = x.shape.back();
    require(gain.numel() == w, "rms_norm: gain length must equal last dimension");
    Tensor y = x;
    const int64_t nrows = x.numel() / w;
    for (int64_t r = 0; r < nrows; ++r) {
        double* row = y.data.data() + r * w;
        double ms = 0.0;
        for (int64_t j = 0; j < w; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(w);
        const double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
        for (int64_t j = 0; j < w; ++j) row[j] = gain.data[static_cast<size_t>(j)] * row[j] * inv;
    }
    return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// x * sigmoid(x), elementwise.
inline Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.data) v = v * sigmoid(v);
    return y;
}

inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

struct AttentionMask {
    enum class Kind { Causal, Full, Explicit };
    Kind kind = Kind::Full;
    // Row-major (sl_q x sl_k) visibility for Kind::Explicit; 1 = visible.
    std::vector<uint8_t> visible;
    int64_t sl_q = 0, sl_k = 0;

    static AttentionMask causal() { return {Kind::Causal, {}, 0, 0}; }
    static AttentionMask full() { return {Kind::Full, {}, 0, 0}; }
    static AttentionMask explicit_mask(int64_t q, int64_t k, std::vector<uint8_t> vis) {
        require(static_cast<int64_t>(vis.size()) == q * k, "mask: size mismatch");
        return {Kind::Explicit, std::move(vis), q, k};
    }

    bool at(int64_t i, int64_t j) const {
        switch (kind) {
            case Kind::Causal: return j <= i;
            case Kind::Full: return true;
            case Kind::Explicit: return visible[static_cast<size_t>(i * sl_k + j)] != 0;
        }
        return true;
    }

    // Materialized boolean matrix; causal satisfies explicit[i][j] == (j <= i).
    std::vector<uint8_t> materialize(int64_t q, int64_t k) const {
        if (kind == Kind::Explicit)
            require(q == sl_q && k == sl_k, "mask: materialize size mismatch");
        std::vector<uint8_t> m(static_cast<size_t>(q * k));
        for (int64_t i = 0; i < q; ++i)
            for (int64_t j = 0; j < k; ++j) m[static_cast<size_t>(i * k + j)] = at(i, j) ? 1 : 0;
        return m;
    }
};

}  // namespace lapflow
