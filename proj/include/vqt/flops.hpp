#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace vqt {

/// Arithmetic-operation categories. Multiplies, adds, divisions, square roots
/// and transcendentals each count as one operation, so a multiply-add pair
/// counts as 2. Bookkeeping (index comparisons, hashing, table lookups) is
/// tracked separately and excluded from speedup ratios.
enum class FlopCategory : int {
    AttentionBase = 0,
    AttentionDelta,
    PerLocation,
    BinaryElementwise,
    VqScores,
    ReindexRecompute,
    Bookkeeping,
    kCount
};

constexpr int kNumFlopCategories = static_cast<int>(FlopCategory::kCount);

const char* flop_category_name(FlopCategory c);

class FlopCounter {
public:
    void add(FlopCategory cat, uint64_t ops) {
        if (redirect_ && cat != FlopCategory::Bookkeeping) cat = FlopCategory::ReindexRecompute;
        counts_[static_cast<int>(cat)] += ops;
    }

    uint64_t count(FlopCategory cat) const { return counts_[static_cast<int>(cat)]; }

    /// Total arithmetic work, bookkeeping excluded.
    uint64_t total_arith() const {
        uint64_t t = 0;
        for (int i = 0; i < kNumFlopCategories; ++i)
            if (i != static_cast<int>(FlopCategory::Bookkeeping)) t += counts_[i];
        return t;
    }

    uint64_t total_bookkeeping() const { return counts_[static_cast<int>(FlopCategory::Bookkeeping)]; }

    /// While set, all non-bookkeeping charges land in ReindexRecompute.
    void set_redirect_to_reindex(bool on) { redirect_ = on; }

    void reset() { counts_.fill(0); }

    std::array<uint64_t, kNumFlopCategories> snapshot() const { return counts_; }

private:
    std::array<uint64_t, kNumFlopCategories> counts_{};
    bool redirect_ = false;
};

/// Per-edit / per-revision accumulation scope: captures a snapshot at open and
/// reports the per-category delta.
class FlopScope {
public:
    explicit FlopScope(const FlopCounter& c) : counter_(&c), start_(c.snapshot()) {}

    uint64_t delta(FlopCategory cat) const {
        return counter_->count(cat) - start_[static_cast<int>(cat)];
    }

    uint64_t delta_arith() const {
        uint64_t t = 0;
        for (int i = 0; i < kNumFlopCategories; ++i)
            if (i != static_cast<int>(FlopCategory::Bookkeeping))
                t += counter_->snapshot()[i] - start_[i];
        return t;
    }

    uint64_t delta_bookkeeping() const { return delta(FlopCategory::Bookkeeping); }

private:
    const FlopCounter* counter_;
    std::array<uint64_t, kNumFlopCategories> start_;
};

// ---------------------------------------------------------------------------
// Exact per-kernel operation counts. These formulas are the single source of
// truth shared by the counter charges, the closed-form dense reference, and
// the instrumented-scalar audit tests; they must match the kernels exactly.
// ---------------------------------------------------------------------------
namespace cost {

constexpr uint64_t gelu_scalar = 9;

constexpr uint64_t dot(int64_t d) { return 2 * static_cast<uint64_t>(d); }

constexpr uint64_t layer_norm(int64_t d) { return 8 * static_cast<uint64_t>(d) + 5; }

constexpr uint64_t affine(int64_t in, int64_t out) {
    return static_cast<uint64_t>(out) * (2 * static_cast<uint64_t>(in) + 1);
}

constexpr uint64_t matvec(int64_t in, int64_t out) {
    return 2 * static_cast<uint64_t>(in) * static_cast<uint64_t>(out);
}

constexpr uint64_t add_vec(int64_t d) { return static_cast<uint64_t>(d); }

/// One attention row entry: score dot, scale, GELU, value accumulate.
constexpr uint64_t attn_entry(int64_t d_qk, int64_t d_v) {
    return dot(d_qk) + 1 + gelu_scalar + 2 * static_cast<uint64_t>(d_v);
}

/// Attention-entry cost without the value push (score only).
constexpr uint64_t attn_score_entry(int64_t d_qk) { return dot(d_qk) + 1 + gelu_scalar; }

/// Quantization scores for one vector: per head, m dot products plus bias add.
constexpr uint64_t vq_scores(int64_t d, int64_t h, int64_t m) {
    return static_cast<uint64_t>(h) * static_cast<uint64_t>(m) * (2 * static_cast<uint64_t>(d / h) + 1);
}

constexpr uint64_t mlp(int64_t d, int64_t d_mlp) {
    return affine(d, d_mlp) + gelu_scalar * static_cast<uint64_t>(d_mlp) + affine(d_mlp, d);
}

/// Weighted row accumulation: out += w * row, over `entries` rows of width `cols`.
constexpr uint64_t weighted_rows(int64_t entries, int64_t cols) {
    return 2 * static_cast<uint64_t>(entries) * static_cast<uint64_t>(cols);
}

} // namespace cost

/// Closed-form multiply-add count of one dense forward pass (token/positional
/// embedding lookups excluded). Mirrors the dense oracle exactly, term by
/// term; the audit suite cross-checks this against executed operations.
uint64_t dense_reference_ops(int64_t num_layers, int64_t d_model, int64_t d_qk, int64_t d_v,
                             int64_t num_attn_heads, int64_t vq_heads, int64_t vq_entries,
                             int64_t d_mlp, int64_t b, int64_t n);

/// One benchmark measurement: dense baseline vs. charged incremental work.
struct SpeedupReport {
    uint64_t dense_flops = 0;
    uint64_t incremental_flops = 0;
    double ratio = 0.0;           // dense / max(incremental, 1)
    double fraction_modified = 0.0;
    std::string edit_descriptor;
    uint64_t config_fingerprint = 0;

    static SpeedupReport make(uint64_t dense, uint64_t incremental, double fraction,
                              std::string descriptor, uint64_t fingerprint);
};

} // namespace vqt
