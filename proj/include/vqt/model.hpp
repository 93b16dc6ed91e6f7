#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqt/flops.hpp"
#include "vqt/kernels.hpp"
#include "vqt/matrix.hpp"

namespace vqt {

/// Reserved pad token: zero embedding, masked out of attention columns.
constexpr int32_t kPadToken = 0;

enum class Precision { Single, Double };

struct ModelConfig {
    int64_t num_layers = 2;
    int64_t d_model = 16;
    int64_t d_qk = 8;
    int64_t d_v = 8;
    int64_t num_attn_heads = 2;
    int64_t vq_heads = 2;
    int64_t vq_entries_per_head = 64;
    int64_t d_mlp = 32;
    int64_t vocab_size = 256;
    int64_t max_seq_len = 64;
    int64_t position_pool_factor = 100;  // G
    Precision precision = Precision::Single;

    int64_t position_pool_size() const { return position_pool_factor * max_seq_len; }
    int64_t vq_chunk_dim() const { return d_model / vq_heads; }

    void validate() const {
        auto positive = [](int64_t v, const char* name) {
            if (v < 1) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be >= 1");
        };
        positive(num_layers, "num_layers");
        positive(d_model, "d_model");
        positive(d_qk, "d_qk");
        positive(d_v, "d_v");
        positive(num_attn_heads, "num_attn_heads");
        positive(vq_heads, "vq_heads");
        positive(vq_entries_per_head, "vq_entries_per_head");
        positive(d_mlp, "d_mlp");
        positive(vocab_size, "vocab_size");
        positive(max_seq_len, "max_seq_len");
        positive(position_pool_factor, "position_pool_factor");
        if (d_model % num_attn_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by num_attn_heads");
        if (d_model % vq_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by vq_heads");
        if (num_attn_heads * d_v != d_model)
            throw std::invalid_argument(
                "ModelConfig: num_attn_heads * d_v must equal d_model (attention heads are "
                "concatenated back into the residual width before quantization)");
    }

    std::string canonical_string() const;
    uint64_t fingerprint() const;
};

// ---------------------------------------------------------------------------
// Multi-head vector quantizer.
// ---------------------------------------------------------------------------

/// Per-head codebooks with precomputed inner-product biases b_i = -|q_i|^2/2,
/// so nearest-by-distance reduces to argmax of x.q_i + b_i.
template <typename T>
struct VQCodebook {
    int64_t heads = 0;
    int64_t entries_per_head = 0;
    int64_t chunk_dim = 0;
    std::vector<Matrix<T>> entries;        // per head: m x chunk_dim
    std::vector<std::vector<T>> biases;    // per head: m

    static VQCodebook from_entries(std::vector<Matrix<T>> per_head) {
        VQCodebook cb;
        cb.heads = static_cast<int64_t>(per_head.size());
        cb.entries_per_head = per_head.empty() ? 0 : per_head[0].rows();
        cb.chunk_dim = per_head.empty() ? 0 : per_head[0].cols();
        cb.entries = std::move(per_head);
        cb.biases.resize(cb.heads);
        for (int64_t h = 0; h < cb.heads; ++h) {
            cb.biases[h].resize(cb.entries_per_head);
            for (int64_t i = 0; i < cb.entries_per_head; ++i) {
                T nrm = T(0);
                auto row = cb.entries[h].row(i);
                for (int64_t c = 0; c < cb.chunk_dim; ++c) nrm += row[c] * row[c];
                cb.biases[h][i] = -nrm / T(2);
            }
        }
        return cb;
    }

    int64_t d_model() const { return heads * chunk_dim; }

    /// Checks the bias/entry consistency invariant; returns the violated
    /// invariant name, or empty when valid.
    std::string check() const {
        const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-10;
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < entries_per_head; ++i) {
                double nrm = 0;
                auto row = entries[h].row(i);
                for (int64_t c = 0; c < chunk_dim; ++c) nrm += double(row[c]) * double(row[c]);
                double want = -nrm / 2;
                double got = double(biases[h][i]);
                double scale = std::max(1.0, std::abs(want));
                if (std::abs(want - got) > tol * scale) return "codebook-bias-consistency";
            }
        }
        return {};
    }
};

template <typename T>
struct VqDecision {
    std::vector<int32_t> indices;   // one per head
    std::vector<T> quantized;       // d_model, concatenated selected entries
    double margin = 0.0;            // min over heads of (best - second best) score
};

/// Scores one chunk set: out[h*m + c] = <x_chunk_h, entry_c> + bias_c.
/// Cost: vq_scores(d, h, m) ops.
template <typename T>
inline void vq_score_vec(std::span<const T> x, const VQCodebook<T>& cb, std::span<T> out) {
    const int64_t dc = cb.chunk_dim;
    for (int64_t h = 0; h < cb.heads; ++h) {
        std::span<const T> chunk = x.subspan(h * dc, dc);
        for (int64_t c = 0; c < cb.entries_per_head; ++c)
            out[h * cb.entries_per_head + c] = kernels::dot<T>(chunk, cb.entries[h].row(c)) + cb.biases[h][c];
    }
}

/// Argmax per head over a score vector laid out head-major; ties go to the
/// lowest index. Returns the minimum winning margin across heads, computed
/// in double as a diagnostic. Comparisons only (bookkeeping, no arithmetic
/// in the working precision).
template <typename T>
inline double vq_argmax(std::span<const T> scores, int64_t heads, int64_t m, std::span<int32_t> idx_out) {
    double min_margin = std::numeric_limits<double>::infinity();
    for (int64_t h = 0; h < heads; ++h) {
        const T* s = scores.data() + h * m;
        int64_t best = 0;
        T best_v = s[0];
        T second = std::numeric_limits<T>::lowest();
        for (int64_t c = 1; c < m; ++c) {
            if (s[c] > best_v) {
                second = best_v;
                best_v = s[c];
                best = c;
            } else if (s[c] > second) {
                second = s[c];
            }
        }
        idx_out[h] = static_cast<int32_t>(best);
        if (m > 1) min_margin = std::min(min_margin, double(best_v) - double(second));
    }
    return min_margin;
}

/// Quantizes a d_model vector against the codebook: per head the entry that
/// maximizes x.q + b (equivalently, minimizes Euclidean distance).
template <typename T>
VqDecision<T> vq_quantize(std::span<const T> x, const VQCodebook<T>& cb, FlopCounter* counter = nullptr) {
    using std::isfinite;
    if (static_cast<int64_t>(x.size()) != cb.d_model())
        throw std::invalid_argument("vq_quantize: input dimension mismatch");
    for (T v : x)
        if (!isfinite(double(v))) throw std::invalid_argument("vq_quantize: non-finite input");
    std::vector<T> scores(static_cast<size_t>(cb.heads * cb.entries_per_head));
    vq_score_vec<T>(x, cb, scores);
    if (counter) {
        counter->add(FlopCategory::VqScores, cost::vq_scores(cb.d_model(), cb.heads, cb.entries_per_head));
        counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(cb.heads * cb.entries_per_head));
    }
    VqDecision<T> out;
    out.indices.resize(cb.heads);
    out.margin = vq_argmax<T>(scores, cb.heads, cb.entries_per_head, out.indices);
    out.quantized.resize(x.size());
    for (int64_t h = 0; h < cb.heads; ++h) {
        auto row = cb.entries[h].row(out.indices[h]);
        std::copy(row.begin(), row.end(), out.quantized.begin() + h * cb.chunk_dim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerParams {
    // Projections are stored output-major (rows = output dim) and applied as
    // x * W^T; Q/K/V/O carry no bias, the MLP does.
    Matrix<T> w_q;    // (H*d_qk) x d_model
    Matrix<T> w_k;    // (H*d_qk) x d_model
    Matrix<T> w_v;    // (H*d_v) x d_model
    Matrix<T> w_o;    // d_model x (H*d_v)
    Matrix<T> w_mlp1; // d_mlp x d_model
    Matrix<T> w_mlp2; // d_model x d_mlp
    std::vector<T> b_mlp1, b_mlp2;
    std::vector<T> ln1_scale, ln1_shift, ln2_scale, ln2_shift;
    VQCodebook<T> codebook;
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Matrix<T> token_embedding;   // vocab x d_model
    Matrix<T> positional_table;  // (G * max_seq_len) x d_model
    std::vector<LayerParams<T>> layers;

    /// Seeded Gaussian init (scale 0.02) followed by k-means codebook
    /// calibration on attention outputs of a synthetic batch.
    static ModelParams init_seeded(const ModelConfig& cfg, uint64_t seed);
};

// ---------------------------------------------------------------------------
// Dense oracle forward pass.
// ---------------------------------------------------------------------------

/// GELU self-attention, single head: O[n] = sum_i gelu(<Q_n,K_i>/sqrt(d_qk)) *
/// M[n,i] * V[i]. The causal mask and pad columns contribute exactly zero.
/// Optionally returns the post-activation attention matrix.
template <typename T>
Matrix<T> gelu_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal_mask,
                         std::span<const uint8_t> key_pad = {}, FlopCounter* counter = nullptr,
                         Matrix<T>* attn_out = nullptr, kernels::Exec exec = kernels::default_exec());

/// Everything the dense pass produces that the incremental engine must match.
template <typename T>
struct DenseTrace {
    std::vector<Matrix<T>> layer_outputs;          // residual stream after each layer, n x d
    std::vector<std::vector<int32_t>> vq_indices;  // per layer: n * vq_heads, head-major per position
    std::vector<double> vq_margins;                // min winning margin per layer
    Matrix<T> final_hidden;                        // n x d_model
};

/// Pre-layer-norm VQ-transformer forward pass over explicit position indices.
/// Deterministic bitwise for fixed inputs, parameters and precision.
template <typename T>
DenseTrace<T> dense_forward(std::span<const int32_t> tokens, std::span<const int64_t> positions,
                            const ModelParams<T>& params, std::span<const uint8_t> pad_mask = {},
                            FlopCounter* counter = nullptr, kernels::Exec exec = kernels::default_exec());

uint64_t dense_reference_ops(const ModelConfig& cfg, int64_t b, int64_t n);

// ---------------------------------------------------------------------------

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template Matrix<float> gelu_attention<float>(const Matrix<float>&, const Matrix<float>&,
                                                    const Matrix<float>&, bool, std::span<const uint8_t>,
                                                    FlopCounter*, Matrix<float>*, kernels::Exec);
extern template Matrix<double> gelu_attention<double>(const Matrix<double>&, const Matrix<double>&,
                                                      const Matrix<double>&, bool, std::span<const uint8_t>,
                                                      FlopCounter*, Matrix<double>*, kernels::Exec);
extern template DenseTrace<float> dense_forward<float>(std::span<const int32_t>, std::span<const int64_t>,
                                                       const ModelParams<float>&, std::span<const uint8_t>,
                                                       FlopCounter*, kernels::Exec);
extern template DenseTrace<double> dense_forward<double>(std::span<const int32_t>, std::span<const int64_t>,
                                                         const ModelParams<double>&, std::span<const uint8_t>,
                                                         FlopCounter*, kernels::Exec);

} // namespace vqt
