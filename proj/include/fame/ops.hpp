#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fame/error.hpp"
#include "fame/tensor.hpp"

namespace fame {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits; stable across standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Child seed for a named subsystem ("init", "dropout", "shuffle", ...), so a
/// single root seed drives every random stream independently.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (h | 1);  // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Boolean mask with the same element count as the tensor it applies to.
/// `keep[i] == 1` marks entries that take part in the softmax.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> keep;
};

namespace detail {

using Node = Tensor::Node;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " tensor, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T, via an explicit transpose of B so the
// inner loop is the same axpy as gemm_nn.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    }
    gemm_nn(a, bt.data(), c, m, k, n);
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

/// C = A * B for A[m x k], B[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.value.data(), pa.grad_data(), m, n, k);
        if (pb.requires_grad) detail::gemm_tn(pa.value.data(), self.grad.data(), pb.grad_data(), m, k, n);
    });
}

/// C = A * B^T for A[m x k], B[n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul_nt");
    detail::require_rank(b, 2, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner extents differ for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
    return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // dA = dC * B ; dB = dC^T * A
        if (pa.requires_grad) detail::gemm_nn(self.grad.data(), pb.value.data(), pa.grad_data(), m, n, k);
        if (pb.requires_grad) detail::gemm_tn(self.grad.data(), pa.value.data(), pb.grad_data(), m, n, k);
    });
}

/// Batched C[b] = A[b] * B[b] for A[b x m x k], B[b x k x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 3, "bmm");
    detail::require_rank(b, 3, "bmm");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        detail::gemm_nn(a.values().data() + s * m * k, b.values().data() + s * k * n,
                        out.data() + s * m * n, m, k, n);
    }
    return Tensor::make_result({batch, m, n}, std::move(out), {a, b},
                               [batch, m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t s = 0; s < batch; ++s) {
            const double* dc = self.grad.data() + s * m * n;
            if (pa.requires_grad) {
                detail::gemm_nt(dc, pb.value.data() + s * k * n, pa.grad_data() + s * m * k, m, n, k);
            }
            if (pb.requires_grad) {
                detail::gemm_tn(pa.value.data() + s * m * k, dc, pb.grad_data() + s * k * n, m, k, n);
            }
        }
    });
}

/// Batched C[b] = A[b] * B[b]^T for A[b x m x k], B[b x n x k].
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 3, "bmm_nt");
    detail::require_rank(b, 3, "bmm_nt");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    if (b.dim(0) != batch || b.dim(2) != k) {
        throw DimensionError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        detail::gemm_nt(a.values().data() + s * m * k, b.values().data() + s * n * k,
                        out.data() + s * m * n, m, k, n);
    }
    return Tensor::make_result({batch, m, n}, std::move(out), {a, b},
                               [batch, m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t s = 0; s < batch; ++s) {
            const double* dc = self.grad.data() + s * m * n;
            if (pa.requires_grad) {
                detail::gemm_nn(dc, pb.value.data() + s * n * k, pa.grad_data() + s * m * k, m, n, k);
            }
            if (pb.requires_grad) {
                detail::gemm_tn(dc, pa.value.data() + s * m * k, pb.grad_data() + s * n * k, m, n, k);
            }
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            double* g = p->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            double* g = pa.grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            double* g = pb.grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.values()[i];
    return Tensor::make_result(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    });
}

/// x[..., j] + bias[j]
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(bias, 1, "add_bias");
    const std::size_t n = detail::last_dim(x);
    if (bias.dim(0) != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.values()[i % n];
    return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [n](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
            double* g = px.grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            double* g = pb.grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
    });
}

/// Row r of x[R x C] multiplied by w[r]; w has R elements (shape [R] or [R x 1]).
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 2, "scale_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (w.numel() != rows) {
        throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " do not match rows of " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double s = w.values()[r];
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = s * x.values()[r * cols + c];
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, w}, [rows, cols](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = self.grad.data() + r * cols;
            if (px.requires_grad) {
                double* g = px.grad_data() + r * cols;
                const double s = pw.value[r];
                for (std::size_t c = 0; c < cols; ++c) g[c] += s * gr[c];
            }
            if (pw.requires_grad) {
                const double* xr = px.value.data() + r * cols;
                double acc = 0.0;
                for (std::size_t c = 0; c < cols; ++c) acc += gr[c] * xr[c];
                pw.grad_data()[r] += acc;
            }
        }
    });
}

/// Same values under a new shape with the same element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

/// Columns [begin, end) of x[R x C].
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x, 2, "slice_cols");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (begin >= end || end > cols) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for " + shape_str(x.shape()));
    }
    const std::size_t width = end - begin;
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = x.values()[r * cols + begin + c];
    }
    return Tensor::make_result({rows, width}, std::move(out), {x},
                               [rows, cols, begin, width](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < width; ++c) g[r * cols + begin + c] += self.grad[r * width + c];
        }
    });
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto w = widths[k];
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = parts[k].values()[r * w + c];
        }
        offset += w;
    }
    return Tensor::make_result({rows, total}, std::move(out), parts,
                               [rows, total, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            const auto w = widths[k];
            auto& p = *self.parents[k];
            if (p.requires_grad) {
                double* g = p.grad_data();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
                }
            }
            off += w;
        }
    });
}

/// Rows idx[0], idx[1], ... of x[R x C]; the backward pass scatter-adds, so
/// repeated indices accumulate. Rows equal to `frozen_row` receive no gradient.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx,
                          std::optional<std::size_t> frozen_row = std::nullopt) {
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (idx.empty()) throw DimensionError("gather_rows: empty index list");
    std::vector<double> out(idx.size() * cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= rows) {
            throw IndexError("index " + std::to_string(idx[i]) + " out of range for table with " +
                             std::to_string(rows) + " rows");
        }
        std::copy_n(x.values().data() + idx[i] * cols, cols, out.data() + i * cols);
    }
    return Tensor::make_result({idx.size(), cols}, std::move(out), {x},
                               [idx, cols, frozen_row](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (frozen_row && idx[i] == *frozen_row) continue;
            double* dst = g + idx[i] * cols;
            const double* src = self.grad.data() + i * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
}

/// Row gather from an embedding table[V x d].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids,
                               std::optional<std::size_t> padding_id = std::nullopt) {
    return gather_rows(table, ids, padding_id);
}

/// Softmax over the last axis. Entries with mask keep == 0 are exactly zero;
/// each row is shifted by its maximum before exponentiation.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr) {
    const std::size_t n = detail::last_dim(x);
    const std::size_t rows = x.numel() / n;
    if (mask && mask->keep.size() != x.numel()) {
        throw DimensionError("softmax_rows: mask " + shape_str(mask->shape) + " does not match " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.numel(), 0.0);
    const double* in = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = in + r * n;
        double* yr = out.data() + r * n;
        const std::uint8_t* keep = mask ? mask->keep.data() + r * n : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!keep || keep[j]) mx = std::max(mx, xr[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is fully masked");
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!keep || keep[j]) {
                yr[j] = std::exp(xr[j] - mx);
                sum += yr[j];
            }
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, n](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * n;
            const double* dy = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
        }
    });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    return Tensor::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        double* g = p.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (p.value[i] > 0.0) g[i] += self.grad[i];
        }
    });
}

inline constexpr double kLayerNormEps = 1e-8;

/// Standardizes the last axis and applies gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps) {
    const std::size_t d = detail::last_dim(x);
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
            out[r * d + j] = gamma.values()[j] * xhat[r * d + j] + beta.values()[j];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (pg.requires_grad) {
                    double* g = pg.grad_data();
                    for (std::size_t j = 0; j < d; ++j) g[j] += dy[j] * xh[j];
                }
                if (pb.requires_grad) {
                    double* g = pb.grad_data();
                    for (std::size_t j = 0; j < d; ++j) g[j] += dy[j];
                }
                if (px.requires_grad) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = dy[j] * pg.value[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xh[j];
                    }
                    mean_d /= static_cast<double>(d);
                    mean_dx /= static_cast<double>(d);
                    double* g = px.grad_data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        g[j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            }
        });
}

/// Inverted dropout: in training, each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p). Identity otherwise.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> factor(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        factor[i] = uniform01(rng) < p ? 0.0 : keep_scale;
        out[i] = x.values()[i] * factor[i];
    }
    return Tensor::make_result(x.shape(), std::move(out), {x},
                               [factor = std::move(factor)](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return Tensor::make_result({1}, {acc}, {x}, [](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        const double d = self.grad[0];
        for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += d;
    });
}

inline Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean over rows of -log softmax(logits[r])[target[r]], via log-sum-exp.
/// The gradient is (softmax - onehot) / rows.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t rows = logits.dim(0), n = logits.dim(1);
    if (targets.size() != rows) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_str(logits.shape()));
    }
    std::vector<double> probs(logits.numel());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= n) {
            throw IndexError("target column " + std::to_string(targets[r]) + " out of range for " +
                             std::to_string(n) + " classes");
        }
        const double* xr = logits.values().data() + r * n;
        double mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            probs[r * n + j] = std::exp(xr[j] - mx);
            s += probs[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= s;
        total += (mx + std::log(s)) - xr[targets[r]];
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    return Tensor::make_result({1}, {total * inv_rows}, {logits},
                               [rows, n, inv_rows, targets, probs = std::move(probs)](detail::Node& self) {
        double* g = self.parents[0]->grad_data();
        const double d = self.grad[0] * inv_rows;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                const double onehot = j == targets[r] ? 1.0 : 0.0;
                g[r * n + j] += d * (probs[r * n + j] - onehot);
            }
        }
    });
}

}  // namespace fame
