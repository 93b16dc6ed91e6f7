#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>

#include "vqt/matrix.hpp"

namespace vqt::kernels {

enum class Exec { Serial, Parallel };

/// Process-wide default execution mode for row-parallel kernels. Parallel and
/// serial paths are bitwise identical: parallelism is only ever across
/// independent output rows, each row accumulated in a fixed serial order.
Exec default_exec();
void set_default_exec(Exec e);

namespace detail {
std::atomic<int>& exec_flag();
}

/// Runs `body(row)` for rows [0, nrows). OpenMP is used only for plain
/// float/double; instrumented scalar types always run serially.
template <typename T, typename F>
void for_each_row(int64_t nrows, Exec exec, F&& body) {
    if constexpr (std::is_floating_point_v<T>) {
        if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < nrows; ++r) body(r);
            return;
        }
    }
    for (int64_t r = 0; r < nrows; ++r) body(r);
}

// ---------------------------------------------------------------------------
// Scalar kernels. Accumulation order is fixed (ascending index) everywhere so
// results are bitwise deterministic and independent of the execution mode.
// ---------------------------------------------------------------------------

/// tanh-approximation GELU, fixed formula. 9 ops.
template <typename T>
inline T gelu(T x) {
    using std::tanh;
    const T beta = T(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    const T coef = T(0.044715);
    T x3 = x * x * x;
    T u = beta * (x + coef * x3);
    T t = tanh(u);
    return T(0.5) * x * (T(1) + t);
}

/// 2d ops.
template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
    T acc = T(0);
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

/// d ops.
template <typename T>
inline void add_vec(std::span<const T> a, std::span<const T> b, std::span<T> out) {
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
}

/// Standard layer norm with learned scale/shift. 8d + 5 ops.
template <typename T>
inline void layer_norm_vec(std::span<const T> x, std::span<const T> scale, std::span<const T> shift,
                           std::span<T> out) {
    using std::sqrt;
    const int64_t d = static_cast<int64_t>(x.size());
    const T eps = T(1e-5);
    T sum = T(0);
    for (int64_t i = 0; i < d; ++i) sum += x[i];
    T mean = sum / T(d);
    T acc = T(0);
    for (int64_t i = 0; i < d; ++i) {
        T c = x[i] - mean;
        acc += c * c;
    }
    T var = acc / T(d);
    T rstd = T(1) / sqrt(var + eps);
    for (int64_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * scale[i] + shift[i];
}

/// out = x * W^T + bias with W stored output-major (out_dim x in_dim).
/// out_dim * (2*in_dim + 1) ops.
template <typename T>
inline void affine_vec(std::span<const T> x, const Matrix<T>& w, std::span<const T> bias, std::span<T> out) {
    const int64_t p = w.rows();
    for (int64_t o = 0; o < p; ++o) out[o] = dot<T>(x, w.row(o)) + bias[o];
}

/// 9d ops.
template <typename T>
inline void gelu_vec(std::span<const T> x, std::span<T> out) {
    for (size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
}

// ---------------------------------------------------------------------------
// Row-batched kernels (OpenMP-parallel over rows).
// ---------------------------------------------------------------------------

template <typename T>
void layer_norm_rows(const Matrix<T>& x, std::span<const T> scale, std::span<const T> shift, Matrix<T>& out,
                     Exec exec) {
    for_each_row<T>(x.rows(), exec, [&](int64_t r) { layer_norm_vec<T>(x.row(r), scale, shift, out.row(r)); });
}

template <typename T>
void affine_rows(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias, Matrix<T>& out, Exec exec) {
    for_each_row<T>(x.rows(), exec, [&](int64_t r) { affine_vec<T>(x.row(r), w, bias, out.row(r)); });
}

// ---------------------------------------------------------------------------
// Attention kernels. `key_pad` marks slots that must contribute exactly zero
// (pad columns); masked and future entries are skipped, not multiplied by 0.
// ---------------------------------------------------------------------------

/// One GELU-attention row: a_row[i] = gelu(scale * <q, K_i>) for allowed keys
/// i <= causal_limit, o_row = sum_i a_row[i] * V_i. `o_row` must be zeroed by
/// the caller; `a_row` may be empty when the attention matrix is not needed.
/// Cost: allowed * (2*d_qk + 10 + 2*d_v) ops, where allowed is the number of
/// unmasked causal keys.
template <typename T>
inline void attn_row(std::span<const T> q_row, const Matrix<T>& k, const Matrix<T>& v, int64_t causal_limit,
                     std::span<const uint8_t> key_pad, T scale, std::span<T> a_row, std::span<T> o_row) {
    const int64_t d_v = v.cols();
    for (int64_t i = 0; i <= causal_limit; ++i) {
        if (!key_pad.empty() && key_pad[i]) continue;
        T s = dot<T>(q_row, k.row(i)) * scale;
        T a = gelu(s);
        if (!a_row.empty()) a_row[i] = a;
        auto vi = v.row(i);
        for (int64_t c = 0; c < d_v; ++c) o_row[c] += a * vi[c];
    }
}

/// out = x * W^T, no bias. 2 * in * out ops.
template <typename T>
inline void matvec_vec(std::span<const T> x, const Matrix<T>& w, std::span<T> out) {
    const int64_t p = w.rows();
    for (int64_t o = 0; o < p; ++o) out[o] = dot<T>(x, w.row(o));
}

template <typename T>
void matvec_rows(const Matrix<T>& x, const Matrix<T>& w, Matrix<T>& out, Exec exec) {
    for_each_row<T>(x.rows(), exec, [&](int64_t r) { matvec_vec<T>(x.row(r), w, out.row(r)); });
}

template <typename T>
void gelu_rows(const Matrix<T>& x, Matrix<T>& out, Exec exec) {
    for_each_row<T>(x.rows(), exec, [&](int64_t r) { gelu_vec<T>(x.row(r), out.row(r)); });
}

template <typename T>
void add_rows(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, Exec exec) {
    for_each_row<T>(a.rows(), exec, [&](int64_t r) { add_vec<T>(a.row(r), b.row(r), out.row(r)); });
}

/// One score-only attention entry. 2*d_qk + 10 ops.
template <typename T>
inline T attn_entry(std::span<const T> q_row, std::span<const T> k_row, T scale) {
    return gelu(dot<T>(q_row, k_row) * scale);
}

/// out += w * row (no zero-weight skipping so executed ops are predictable).
/// 2 * row.size() ops.
template <typename T>
inline void axpy(T w, std::span<const T> row, std::span<T> out) {
    for (size_t i = 0; i < row.size(); ++i) out[i] += w * row[i];
}

/// Attention score scale, evaluated in double and rounded once so the value
/// is identical wherever it is used (and costs no working-precision ops).
template <typename T>
inline T attn_scale(int64_t d_qk) {
    return T(1.0 / std::sqrt(static_cast<double>(d_qk)));
}

/// Counts unmasked causal keys for a row; bookkeeping only.
inline int64_t allowed_keys(int64_t causal_limit, std::span<const uint8_t> key_pad) {
    if (key_pad.empty()) return causal_limit + 1;
    int64_t c = 0;
    for (int64_t i = 0; i <= causal_limit; ++i)
        if (!key_pad[i]) ++c;
    return c;
}

} // namespace vqt::kernels
