#pragma once

#include <map>
#include <unordered_map>

#include "vqt/compressed.hpp"
#include "vqt/model.hpp"

namespace vqt {

/// Per-layer attention state for the committed base index assignment: the
/// masked post-activation attention matrix, the base outputs, and the base
/// Q/K/V rows backing them. `s_base` optionally carries base quantization
/// scores so edits can correct scores the same way they correct outputs.
template <typename T>
struct AttentionCache {
    int64_t n = 0;
    int64_t num_heads = 0;
    int64_t d_qk = 0;
    int64_t d_v = 0;
    bool store_attention = true;

    std::vector<Matrix<T>> a;      // per head: n x n, exact zeros at masked entries
    std::vector<Matrix<T>> base_q; // per head: n x d_qk
    std::vector<Matrix<T>> base_k; // per head: n x d_qk
    std::vector<Matrix<T>> base_v; // per head: n x d_v
    Matrix<T> o_base;              // n x (num_heads * d_v)
    Matrix<T> s_base;              // n x (vq_heads * m); engine-managed, may be empty
    std::vector<uint8_t> base_pad; // pad mask of the base assignment

    T scale() const { return kernels::attn_scale<T>(d_qk); }

    /// Post-activation base attention entry (r, i); exact zero when masked.
    /// Recomputed from base rows when the matrix is not stored (the
    /// memory-saving mode), charging the recomputation.
    T a_entry(int64_t head, int64_t r, int64_t i, FlopCounter* counter) const {
        if (store_attention) return a[head](r, i);
        if (i > r || (!base_pad.empty() && base_pad[i])) return T(0);
        if (counter) counter->add(FlopCategory::AttentionDelta, cost::attn_score_entry(d_qk));
        return kernels::attn_entry<T>(base_q[head].row(r), base_k[head].row(i), scale());
    }

    /// Grows every slot-indexed structure by one zeroed slot at `at`
    /// (bookkeeping only; used when a token is inserted).
    void insert_slot(int64_t at);
    /// Drops slot `at` everywhere.
    void erase_slot(int64_t at);
};

/// Per batch row, the sorted positions whose effective Q/K/V indices differ
/// from the base assignment.
struct DeltaSet {
    std::vector<std::vector<int64_t>> rows;

    template <typename T>
    static DeltaSet from_tensors(const CompressedTensor<T>& qc, const CompressedTensor<T>& kc,
                                 const CompressedTensor<T>& vc) {
        DeltaSet ds;
        ds.rows.resize(static_cast<size_t>(qc.batch));
        std::vector<std::map<int64_t, bool>> seen(static_cast<size_t>(qc.batch));
        for (const auto* ct : {&qc, &kc, &vc})
            for (auto& [key, idx] : ct->overrides) seen[static_cast<size_t>(cell_row(key))][cell_pos(key)] = true;
        for (size_t r = 0; r < seen.size(); ++r)
            for (auto& [pos, _] : seen[r]) ds.rows[r].push_back(pos);
        return ds;
    }
};

/// Output of a delta pass for one batch row: fully recomputed rows at the
/// delta positions, and corrected rows (cached base output plus the
/// subtract/add fix for the altered columns) elsewhere.
template <typename T>
struct DeltaFullRow {
    std::vector<T> o; // num_heads * d_v concat
    Matrix<T> a;      // num_heads x n, entries only at allowed keys
};

template <typename T>
struct DeltaCorrection {
    std::vector<T> o; // corrected output row, num_heads * d_v
    Matrix<T> a_new;  // num_heads x |S|: new attention entries at the delta columns
};

template <typename T>
struct DeltaRowResult {
    std::vector<int64_t> s;                     // delta positions for this row
    std::map<int64_t, DeltaFullRow<T>> full;    // slot -> full recomputation
    std::map<int64_t, DeltaCorrection<T>> corr; // slot -> correction
    bool fallback = false;                      // row recomputed wholesale
};

template <typename T>
struct DeltaResult {
    std::vector<DeltaRowResult<T>> rows;
};

/// Computes the attention matrix and outputs for the base index assignment
/// only; cost is charged once regardless of the batch size. Pad query rows
/// are left zeroed.
template <typename T>
AttentionCache<T> attention_base(const CompressedTensor<T>& qc, const CompressedTensor<T>& kc,
                                 const CompressedTensor<T>& vc, int64_t num_heads,
                                 std::span<const uint8_t> base_pad = {}, FlopCounter* counter = nullptr,
                                 bool store_attention = true, kernels::Exec exec = kernels::default_exec());

/// Delta self-attention: full row recomputation at delta positions, cached
/// base output plus per-column corrections elsewhere. Corrections are applied
/// subtract-then-add in one fused loop, ascending column order. Rows whose
/// delta set exceeds `fallback_fraction * n` are recomputed wholesale.
template <typename T>
DeltaResult<T> attention_delta(const AttentionCache<T>& cache, const CompressedTensor<T>& qc,
                               const CompressedTensor<T>& kc, const CompressedTensor<T>& vc,
                               const DeltaSet& deltas,
                               const std::vector<std::vector<uint8_t>>& row_pads = {},
                               FlopCounter* counter = nullptr, double fallback_fraction = 0.25,
                               kernels::Exec exec = kernels::default_exec());

/// Materializes the full output rows for one batch row: base outputs
/// overlaid with the delta result. Bitwise O_base when the row's delta set is
/// empty.
template <typename T>
Matrix<T> materialize_delta_output(const AttentionCache<T>& cache, const DeltaResult<T>& delta, int64_t row);

// ---------------------------------------------------------------------------
// Quantization through linearity: inner products against the VQ codebook are
// taken on the compressed values tensor once, then pushed through the same
// base+delta attention structure as the outputs themselves.
// ---------------------------------------------------------------------------

/// Column geometry tying attention heads to the VQ head chunks they overlap.
struct ScoreGeometry {
    int64_t num_attn_heads = 0, d_v = 0, vq_heads = 0, m = 0, chunk_dim = 0;
    struct HeadCols {
        int64_t vh_lo = 0, vh_hi = 0; // overlapped vq heads [lo, hi)
        int64_t ncols = 0;            // (vh_hi - vh_lo) * m
    };
    std::vector<HeadCols> heads;

    static ScoreGeometry make(int64_t num_attn_heads, int64_t d_v, int64_t vq_heads, int64_t m) {
        ScoreGeometry geo;
        geo.num_attn_heads = num_attn_heads;
        geo.d_v = d_v;
        geo.vq_heads = vq_heads;
        geo.m = m;
        geo.chunk_dim = num_attn_heads * d_v / vq_heads;
        geo.heads.resize(static_cast<size_t>(num_attn_heads));
        for (int64_t ah = 0; ah < num_attn_heads; ++ah) {
            auto& hc = geo.heads[static_cast<size_t>(ah)];
            hc.vh_lo = (ah * d_v) / geo.chunk_dim;
            hc.vh_hi = ((ah + 1) * d_v + geo.chunk_dim - 1) / geo.chunk_dim;
            hc.ncols = (hc.vh_hi - hc.vh_lo) * m;
        }
        return geo;
    }
    int64_t score_width() const { return vq_heads * m; }
    /// ops to build one G row for one attention head: 2 * m * d_v.
    uint64_t g_row_cost() const { return cost::weighted_rows(m, d_v); }
};

/// G row: inner products of one value row (restricted to attention head `ah`)
/// against every codebook entry of the overlapped VQ heads.
template <typename T>
void build_g_row(std::span<const T> v_full, int64_t ah, const ScoreGeometry& geo, const VQCodebook<T>& cb,
                 std::span<T> out);

/// Lazily built per-value-row score features, aligned with a value codebook.
template <typename T>
struct GTable {
    ScoreGeometry geo;
    std::vector<Matrix<T>> rows;      // per attention head: q_v x ncols
    std::vector<uint8_t> filled;

    void reset(const ScoreGeometry& g) {
        geo = g;
        rows.assign(static_cast<size_t>(g.num_attn_heads), {});
        for (auto& m_ : rows) m_.resize(0, 0);
        filled.clear();
    }

    /// Ensures the feature row for value-codebook id `idx` exists; charges
    /// vq-scores for newly built rows.
    void ensure(int32_t idx, const Matrix<T>& v_codebook, const VQCodebook<T>& cb, FlopCounter* counter);
};

/// Result of scoring every position of every batch row.
template <typename T>
struct VqLinearityResult {
    std::vector<std::vector<int32_t>> indices; // per row: n * vq_heads, head-major per position
    std::vector<std::vector<double>> margins;  // per row: n (infinity where untouched/pad)
};

/// Quantization head-indices for the attention block output, computed without
/// materializing dense outputs: codebook inner products on the compressed
/// values, pushed through the cached base attention plus delta corrections.
template <typename T>
VqLinearityResult<T> vq_via_linearity(const AttentionCache<T>& cache, const CompressedTensor<T>& qc,
                                      const CompressedTensor<T>& kc, const CompressedTensor<T>& vc,
                                      const DeltaSet& deltas, const VQCodebook<T>& cb,
                                      const std::vector<std::vector<uint8_t>>& row_pads = {},
                                      FlopCounter* counter = nullptr, double fallback_fraction = 0.25,
                                      kernels::Exec exec = kernels::default_exec());

// ---------------------------------------------------------------------------

/// Restores the compressed format after the attention block: positions where
/// every batch row agrees with the previous base assignment keep it,
/// disagreements become overrides, and codebook rows are materialized from
/// the product codebook on demand.
template <typename T>
struct RecompressResult {
    CompressedTensor<T> tensor;
    DeltaSet deltas;
};

template <typename T>
RecompressResult<T> recompress_output(const std::vector<std::vector<int32_t>>& indices,
                                      const VQCodebook<T>& cb,
                                      const std::vector<int32_t>& prev_base_indices,
                                      FlopCounter* counter = nullptr);

} // namespace vqt
