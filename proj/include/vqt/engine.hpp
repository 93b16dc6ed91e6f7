#pragma once

#include <map>
#include <memory>

#include "vqt/attention.hpp"
#include "vqt/compressed.hpp"
#include "vqt/model.hpp"
#include "vqt/positions.hpp"

namespace vqt {

struct Document {
    std::vector<int32_t> tokens;
    PositionMap positions;
    int64_t revision = 0;

    static Document make(std::vector<int32_t> tokens, const ModelConfig& cfg) {
        Document d;
        d.positions = init_positions(static_cast<int64_t>(tokens.size()), cfg.position_pool_factor,
                                     cfg.position_pool_size());
        d.tokens = std::move(tokens);
        return d;
    }
};

struct EditOp {
    enum class Kind { Replace, Insert, Delete };
    Kind kind = Kind::Replace;
    int64_t slot = 0;
    int32_t token = 0;

    static EditOp replace(int64_t slot, int32_t token) { return {Kind::Replace, slot, token}; }
    static EditOp insert(int64_t slot, int32_t token) { return {Kind::Insert, slot, token}; }
    static EditOp erase(int64_t slot) { return {Kind::Delete, slot, 0}; }
};

struct EngineSettings {
    /// Rows whose delta set exceeds this fraction of the sequence are
    /// recomputed wholesale instead of corrected.
    double row_fallback_fraction = 0.25;
    /// Winning margins below this are surfaced as near-tie warnings.
    double margin_flag_threshold = 1e-9;
    /// Correction-path quantization decisions whose relative margin falls
    /// below this are re-scored through the direct per-location route.
    double recheck_margin_rel = 1e-3;
    /// Store the full base attention matrices (O(n^2) memory per layer/head);
    /// when off, base entries are recomputed on demand.
    bool cache_full_attention = true;
    /// Commits between codebook compactions (bookkeeping-only gc).
    int64_t compact_every = 64;
};

template <typename T>
struct ApplyResult {
    Matrix<T> hidden; // final hidden states of the new revision
    SpeedupReport report;
    bool reindexed = false;
    double min_margin = std::numeric_limits<double>::infinity();
    int64_t flagged_near_ties = 0;
    int64_t rechecked = 0;
};

struct ReplayReport {
    std::vector<double> layer_max_abs;
    double final_max_abs = 0.0;
    int64_t index_disagreements = 0;
    double min_margin = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Per-layer committed state: the memoized stage families (codebooks keyed by
/// stable row ids), the committed per-slot assignment, and the attention
/// cache for the base assignment.
template <typename T>
struct LayerState {
    // Derived per-location rows, row-aligned with the layer's input family.
    Matrix<T> ln1_rows;
    CompressedTensor<T> qc, kc, vc; // codebooks row-aligned with the input family
    std::vector<uint8_t> derived_filled;
    GTable<T> g;

    // Quantized-output family, keyed by the per-head index tuple.
    std::map<std::vector<int32_t>, int32_t> combo_ids;
    std::vector<std::vector<int32_t>> combo_keys;
    Matrix<T> vq_rows; // quantized vectors
    Matrix<T> wo_rows; // output projection applied

    // Output family, keyed by (input id, combo id); rows live in the next
    // layer's input matrix.
    std::map<std::pair<int32_t, int32_t>, int32_t> out_ids;
    std::vector<std::pair<int32_t, int32_t>> out_keys;

    // Committed assignment per slot.
    std::vector<int32_t> committed_in;
    std::vector<int32_t> committed_combo;
    std::vector<int32_t> committed_out;

    AttentionCache<T> cache;
    std::vector<int32_t> pad_combo; // combo chosen for zero (pad) outputs, lazily set
};

/// Work produced by one layer of a delta pass, applied at commit.
template <typename T>
struct LayerWork {
    std::map<int64_t, int32_t> d_in;  // col -> row-1 input id
    DeltaResult<T> dres;
    std::map<int64_t, std::vector<T>> scores; // col -> score row (affected, non-pad cols)
    std::map<int64_t, int32_t> combo1;        // col -> row-1 combo id (affected + delta cols)
    std::map<int64_t, int32_t> d_out;         // col -> row-1 output id where it differs
};

/// Pad-aligned description of one edit batch against the committed document.
struct EditFrame {
    std::vector<int32_t> base_tokens, new_tokens;
    std::vector<uint8_t> base_pad, new_pad;
    std::vector<int64_t> positions;
    std::vector<int64_t> inserted_cols; // columns not present in the committed document
    bool needs_reindex = false;
};

} // namespace detail

/// Online editing session: committed document, per-layer caches and stage
/// memos, and the running operation counter. Single writer; committed state
/// may be read concurrently.
template <typename T>
class EditSession {
public:
    EditSession(Document doc, const ModelParams<T>& params, EngineSettings settings = {});

    /// Applies one atomic edit, commits the result, and reports the charged
    /// work against the dense baseline.
    ApplyResult<T> apply_edit(const EditOp& edit);

    /// Applies a batch of edits as a single delta set with one commit.
    ApplyResult<T> apply_edits(std::span<const EditOp> edits);

    /// Recomputes the committed document densely and reports per-layer
    /// deviations and quantization-index disagreements.
    ReplayReport replay_verify() const;

    Matrix<T> final_hidden() const;
    const Document& document() const { return doc_; }
    const FlopCounter& counter() const { return counter_; }
    uint64_t open_flops() const { return open_flops_; }
    const EngineSettings& settings() const { return settings_; }

    /// Drops family rows not referenced by the committed assignment
    /// (bookkeeping only). Runs automatically every `compact_every` commits.
    void compact();

    template <typename U>
    friend struct OfflinePair;

private:
    EditSession() = default; // used by the offline-pair driver

    detail::EditFrame build_frame(std::span<const EditOp> edits) const;
    void open(const std::vector<int32_t>& tokens, std::span<const int64_t> positions,
              const std::vector<uint8_t>& base_pad);
    int32_t intern_embedding(int32_t token, int64_t position);
    void ensure_derived(int64_t layer, const std::vector<int32_t>& ids);
    int32_t ensure_combo(int64_t layer, std::span<const int32_t> combo);
    int32_t ensure_out(int64_t layer, int32_t in_id, int32_t combo_id);
    int32_t pad_combo_id(int64_t layer);

    struct DeltaPass {
        std::vector<detail::LayerWork<T>> layers;
        Matrix<T> hidden; // row-1 final states over the aligned frame
        double min_margin = std::numeric_limits<double>::infinity();
        int64_t flagged = 0;
        int64_t rechecked = 0;
    };
    DeltaPass run_delta(const detail::EditFrame& frame);
    void commit(const detail::EditFrame& frame, DeltaPass& pass);
    void rebuild_committed(); // full recomputation (reindex path)

    Document doc_;
    const ModelParams<T>* params_ = nullptr;
    EngineSettings settings_;
    FlopCounter counter_;
    uint64_t open_flops_ = 0;
    int64_t commits_since_compact_ = 0;

    std::map<std::pair<int32_t, int64_t>, int32_t> emb_ids_;
    std::vector<Matrix<T>> x_rows_; // per layer inputs; index num_layers = final outputs
    std::vector<detail::LayerState<T>> layers_;
    std::vector<uint8_t> committed_pad_;
};

template <typename T>
struct OfflineResult {
    Matrix<T> states_a, states_b; // per-revision final states (pads stripped)
    SpeedupReport report;
    int64_t lcs = 0;
    int64_t aligned_len = 0;
    double min_margin = std::numeric_limits<double>::infinity();
    int64_t flagged_near_ties = 0;
    uint64_t base_flops = 0; // work attributed to processing rev_a
};

/// Offline revision pair: aligns the revisions with pads, processes rev_a as
/// the base assignment and rev_b as a delta against it in one compressed
/// batch-of-two pass. The reported incremental cost is the marginal work of
/// the second revision, measured against a dense from-scratch pass.
template <typename T>
OfflineResult<T> process_offline(const std::vector<int32_t>& rev_a, const std::vector<int32_t>& rev_b,
                                 const ModelParams<T>& params, EngineSettings settings = {});

extern template class EditSession<float>;
extern template class EditSession<double>;
extern template OfflineResult<float> process_offline<float>(const std::vector<int32_t>&,
                                                            const std::vector<int32_t>&,
                                                            const ModelParams<float>&, EngineSettings);
extern template OfflineResult<double> process_offline<double>(const std::vector<int32_t>&,
                                                              const std::vector<int32_t>&,
                                                              const ModelParams<double>&, EngineSettings);

} // namespace vqt
