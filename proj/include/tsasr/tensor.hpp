#pragma once

// Dense row-major tensors over 64-bit floats plus the pure kernels used by
// both inference and the gradient tape. Everything is deterministic: loops
// run in a fixed order and no reduction is reordered.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tsasr/errors.hpp"

namespace tsasr {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            require_dim(d > 0, "tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor eye(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = 1.0;
        return t;
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        require_dim(!rows.empty(), "from_rows: empty input");
        const int c = static_cast<int>(rows[0].size());
        Tensor t({static_cast<int>(rows.size()), c});
        for (size_t i = 0; i < rows.size(); ++i) {
            require_dim(static_cast<int>(rows[i].size()) == c, "from_rows: ragged rows");
            std::copy(rows[i].begin(), rows[i].end(), t.data.begin() + static_cast<int64_t>(i) * c);
        }
        return t;
    }

    static Tensor vector(std::vector<double> v) {
        Tensor t;
        t.shape = {static_cast<int>(v.size())};
        t.data = std::move(v);
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor randn(std::vector<int> s, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& x : t.data) x = dist(rng);
        return t;
    }

    static Tensor uniform(std::vector<int> s, std::mt19937_64& rng, double lo, double hi) {
        Tensor t(std::move(s));
        std::uniform_real_distribution<double> dist(lo, hi);
        for (double& x : t.data) x = dist(rng);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int rows() const {
        require_dim(ndim() == 2, "rows(): tensor is not 2-D");
        return shape[0];
    }
    int cols() const {
        require_dim(ndim() == 2, "cols(): tensor is not 2-D");
        return shape[1];
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }

    double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * shape[1]; }
    const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void check_finite(const char* where) const {
        if (!all_finite()) throw NumericError(std::string("non-finite values in ") + where);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_dim(a.same_shape(b), std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// ---------------------------------------------------------------------------
// Elementwise and matrix kernels
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (double& x : out.data) x *= s;
    return out;
}

// a: [R x C], v: [C]; adds v to every row.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_dim(a.ndim() == 2 && v.ndim() == 1 && v.shape[0] == a.shape[1], "add_rowvec: shape mismatch");
    Tensor out = a;
    const int r = a.shape[0], c = a.shape[1];
    for (int i = 0; i < r; ++i) {
        double* p = out.row_ptr(i);
        for (int j = 0; j < c; ++j) p[j] += v.data[j];
    }
    return out;
}

// a: [R x C], s: [R]; scales row i by s[i].
inline Tensor row_scale(const Tensor& a, const Tensor& s) {
    require_dim(a.ndim() == 2 && s.ndim() == 1 && s.shape[0] == a.shape[0], "row_scale: shape mismatch");
    Tensor out = a;
    const int r = a.shape[0], c = a.shape[1];
    for (int i = 0; i < r; ++i) {
        double* p = out.row_ptr(i);
        const double f = s.data[static_cast<size_t>(i)];
        for (int j = 0; j < c; ++j) p[j] *= f;
    }
    return out;
}

// C = A * B, A: [m x k], B: [k x n]. ikj order keeps the inner loop contiguous.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_dim(a.ndim() == 2 && b.ndim() == 2 && a.shape[1] == b.shape[0],
                "matmul: incompatible " + a.shape_str() + " * " + b.shape_str());
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row_ptr(i);
        double* cr = c.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b.row_ptr(p);
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

// C = A * B^T, A: [m x k], B: [n x k]. Row-by-row dot products with a fixed
// four-lane accumulator split so the reduction vectorizes while staying
// bit-deterministic.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_dim(a.ndim() == 2 && b.ndim() == 2 && a.shape[1] == b.shape[1],
                "matmul_nt: incompatible " + a.shape_str() + " * " + b.shape_str() + "^T");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
    const int k4 = k - (k % 4);
    Tensor c({m, n});
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row_ptr(i);
        double* cr = c.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const double* br = b.row_ptr(j);
            double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
            for (int p = 0; p < k4; p += 4) {
                acc0 += ar[p] * br[p];
                acc1 += ar[p + 1] * br[p + 1];
                acc2 += ar[p + 2] * br[p + 2];
                acc3 += ar[p + 3] * br[p + 3];
            }
            double acc = (acc0 + acc1) + (acc2 + acc3);
            for (int p = k4; p < k; ++p) acc += ar[p] * br[p];
            cr[j] = acc;
        }
    }
    return c;
}

// C = A^T * B, A: [k x m], B: [k x n].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_dim(a.ndim() == 2 && b.ndim() == 2 && a.shape[0] == b.shape[0],
                "matmul_tn: incompatible " + a.shape_str() + "^T * " + b.shape_str());
    const int k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (int p = 0; p < k; ++p) {
        const double* ar = a.row_ptr(p);
        const double* br = b.row_ptr(p);
        for (int i = 0; i < m; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c.row_ptr(i);
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_dim(a.ndim() == 2, "transpose: tensor is not 2-D");
    const int r = a.shape[0], c = a.shape[1];
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline Tensor softmax_rows(const Tensor& a) {
    require_dim(a.ndim() == 2, "softmax_rows: tensor is not 2-D");
    Tensor out = a;
    const int r = a.shape[0], c = a.shape[1];
    for (int i = 0; i < r; ++i) {
        double* p = out.row_ptr(i);
        double mx = p[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < c; ++j) p[j] *= inv;
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
    require_dim(a.ndim() == 2, "log_softmax_rows: tensor is not 2-D");
    Tensor out = a;
    const int r = a.shape[0], c = a.shape[1];
    for (int i = 0; i < r; ++i) {
        double* p = out.row_ptr(i);
        double mx = p[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(p[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < c; ++j) p[j] -= lse;
    }
    return out;
}

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& a) {
    Tensor out = a;
    for (double& x : out.data) x = gelu_scalar(x);
    return out;
}

inline double sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data) s += x;
    return s;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_dim(a.ndim() == 2 && b.ndim() == 2 && a.shape[0] == b.shape[0], "concat_cols: row mismatch");
    const int r = a.shape[0], ca = a.shape[1], cb = b.shape[1];
    Tensor out({r, ca + cb});
    for (int i = 0; i < r; ++i) {
        std::copy(a.row_ptr(i), a.row_ptr(i) + ca, out.row_ptr(i));
        std::copy(b.row_ptr(i), b.row_ptr(i) + cb, out.row_ptr(i) + ca);
    }
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_dim(a.ndim() == 2 && b.ndim() == 2 && a.shape[1] == b.shape[1], "concat_rows: col mismatch");
    Tensor out({a.shape[0] + b.shape[0], a.shape[1]});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    require_dim(a.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.shape[1], "slice_cols: range out of bounds");
    const int r = a.shape[0];
    Tensor out({r, c1 - c0});
    for (int i = 0; i < r; ++i)
        std::copy(a.row_ptr(i) + c0, a.row_ptr(i) + c1, out.row_ptr(i));
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    require_dim(a.ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.shape[0], "slice_rows: range out of bounds");
    Tensor out({r1 - r0, a.shape[1]});
    std::copy(a.row_ptr(r0), a.row_ptr(r0) + out.numel(), out.data.begin());
    return out;
}

// Appends one column holding v[i] (or a constant) to each row.
inline Tensor append_col(const Tensor& a, const Tensor& v) {
    require_dim(a.ndim() == 2 && v.ndim() == 1 && v.shape[0] == a.shape[0], "append_col: length mismatch");
    const int r = a.shape[0], c = a.shape[1];
    Tensor out({r, c + 1});
    for (int i = 0; i < r; ++i) {
        std::copy(a.row_ptr(i), a.row_ptr(i) + c, out.row_ptr(i));
        out.at(i, c) = v.data[static_cast<size_t>(i)];
    }
    return out;
}

inline Tensor append_const_col(const Tensor& a, double v) {
    return append_col(a, Tensor::full({a.shape[0]}, v));
}

// Per-row layer norm with learned gain/offset: y = g * (x - mu) / sqrt(var + eps) + b.
inline Tensor layer_norm_rows(const Tensor& a, const Tensor& g, const Tensor& b, double eps = 1e-5) {
    require_dim(a.ndim() == 2 && g.ndim() == 1 && b.ndim() == 1 && g.shape[0] == a.shape[1] && b.shape[0] == a.shape[1],
                "layer_norm_rows: shape mismatch");
    const int r = a.shape[0], c = a.shape[1];
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        const double* p = a.row_ptr(i);
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += p[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (p[j] - mu) * (p[j] - mu);
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        double* q = out.row_ptr(i);
        for (int j = 0; j < c; ++j) q[j] = g.data[j] * (p[j] - mu) * inv + b.data[j];
    }
    return out;
}

// im2col for 1-D convolution over time. x: [T x C]; produces [T_out x (k*C)]
// where row t gathers frames t*stride-pad .. t*stride-pad+k-1 (zeros outside).
inline Tensor unfold1d(const Tensor& x, int kernel, int stride, int pad) {
    require_dim(x.ndim() == 2, "unfold1d: tensor is not 2-D");
    require_dim(kernel >= 1 && stride >= 1 && pad >= 0, "unfold1d: bad kernel/stride/pad");
    const int t_in = x.shape[0], c = x.shape[1];
    const int t_out = (t_in + 2 * pad - kernel) / stride + 1;
    require_dim(t_out >= 1, "unfold1d: input too short");
    Tensor out({t_out, kernel * c});
    for (int t = 0; t < t_out; ++t) {
        double* dst = out.row_ptr(t);
        for (int u = 0; u < kernel; ++u) {
            const int src = t * stride - pad + u;
            if (src >= 0 && src < t_in)
                std::copy(x.row_ptr(src), x.row_ptr(src) + c, dst + u * c);
        }
    }
    return out;
}

// Adjoint of unfold1d: scatter-adds patch gradients back to frame gradients.
inline Tensor fold1d(const Tensor& patches, int t_in, int channels, int kernel, int stride, int pad) {
    Tensor out({t_in, channels});
    const int t_out = patches.shape[0];
    for (int t = 0; t < t_out; ++t) {
        const double* src = patches.row_ptr(t);
        for (int u = 0; u < kernel; ++u) {
            const int dst = t * stride - pad + u;
            if (dst >= 0 && dst < t_in) {
                double* p = out.row_ptr(dst);
                for (int j = 0; j < channels; ++j) p[j] += src[u * channels + j];
            }
        }
    }
    return out;
}

inline double logaddexp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::fabs(a - b)));
}

// Sinusoidal positional encoding rows for explicit integer positions.
inline Tensor sinusoid_positions(const std::vector<int>& positions, int dim) {
    require_dim(dim % 2 == 0, "sinusoid_positions: dim must be even");
    Tensor out({static_cast<int>(positions.size()), dim});
    const int half = dim / 2;
    for (size_t i = 0; i < positions.size(); ++i) {
        double* p = out.row_ptr(static_cast<int>(i));
        for (int j = 0; j < half; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / half);
            const double angle = positions[i] * freq;
            p[j] = std::sin(angle);
            p[half + j] = std::cos(angle);
        }
    }
    return out;
}

}  // namespace tsasr
