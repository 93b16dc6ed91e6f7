#pragma once

#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

namespace vqt {

/// Gap-based positional index assignment: token slot i holds a position in
/// [0, pool_size), strictly increasing in token order, with gaps left for
/// insertions.
struct PositionMap {
    std::vector<int64_t> positions; // strictly increasing
    int64_t gap_factor = 100;       // G
    int64_t pool_size = 0;          // G * max_seq_len

    int64_t size() const { return static_cast<int64_t>(positions.size()); }
    void validate() const; // throws std::logic_error on invariant violation
};

/// Signal (not a failure): the gap at the requested slot is exhausted and the
/// map must be reindexed before the insertion can succeed.
struct ReindexNeeded {};

constexpr int64_t kFrontSlot = -1; // sentinel: insert before the first token

/// Token i gets position i * G (deterministic uniform spreading).
PositionMap init_positions(int64_t n, int64_t gap_factor, int64_t pool_size);

/// Floor midpoint between the neighbors of the insertion point, or
/// ReindexNeeded when the neighbors are adjacent. Does not mutate the map.
std::variant<int64_t, ReindexNeeded> insert_position(const PositionMap& pm, int64_t after_slot);

/// Removes a slot; all other assignments are untouched.
void delete_position(PositionMap& pm, int64_t slot);

/// Reassigns position i * G in current token order. Callers must treat this
/// as invalidating every cache derived from old positions.
struct CacheInvalidation {
    bool all_layers = true;
};
CacheInvalidation reindex(PositionMap& pm);

/// Pad-aligned pair of token revisions (offline batch setting).
struct Alignment {
    std::vector<int32_t> row_a, row_b;   // aligned tokens, kPadToken where absent
    std::vector<uint8_t> pad_a, pad_b;   // pad masks
    PositionMap positions;               // contiguous i * G over the aligned length
    int64_t lcs = 0;
    int64_t aligned_len() const { return static_cast<int64_t>(row_a.size()); }
};

/// Longest-common-subsequence alignment; unmatched tokens pair against pads.
/// Aligned length is at most |a| + |b|.
Alignment align_offline(const std::vector<int32_t>& a, const std::vector<int32_t>& b, int64_t gap_factor,
                        int64_t pool_size);

/// Coupon-collector sizing: ceil(k * log2(k) / samples_per_iter), with the log
/// term clamped to at least 1.
int64_t coupon_iterations(int64_t pool_size, int64_t samples_per_iter);

} // namespace vqt
