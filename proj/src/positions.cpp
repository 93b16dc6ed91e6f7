#include "vqt/positions.hpp"

#include <cmath>
#include <stdexcept>

#include "vqt/model.hpp"

namespace vqt {

void PositionMap::validate() const {
    for (size_t i = 0; i < positions.size(); ++i) {
        if (positions[i] < 0 || positions[i] >= pool_size)
            throw std::logic_error("PositionMap: position outside pool");
        if (i > 0 && positions[i] <= positions[i - 1])
            throw std::logic_error("PositionMap: positions not strictly increasing");
    }
}

PositionMap init_positions(int64_t n, int64_t gap_factor, int64_t pool_size) {
    if (n < 0 || gap_factor < 1) throw std::invalid_argument("init_positions: bad arguments");
    if (n * gap_factor > pool_size) throw std::invalid_argument("init_positions: n exceeds pool capacity");
    PositionMap pm;
    pm.gap_factor = gap_factor;
    pm.pool_size = pool_size;
    pm.positions.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pm.positions[static_cast<size_t>(i)] = i * gap_factor;
    return pm;
}

std::variant<int64_t, ReindexNeeded> insert_position(const PositionMap& pm, int64_t after_slot) {
    if (after_slot < kFrontSlot || after_slot >= pm.size())
        throw std::out_of_range("insert_position: slot out of range");
    const int64_t left = after_slot == kFrontSlot ? -1 : pm.positions[static_cast<size_t>(after_slot)];
    const int64_t right =
        after_slot + 1 == pm.size() ? pm.pool_size : pm.positions[static_cast<size_t>(after_slot + 1)];
    if (right - left <= 1) return ReindexNeeded{};
    return left + (right - left) / 2;
}

void delete_position(PositionMap& pm, int64_t slot) {
    if (slot < 0 || slot >= pm.size()) throw std::out_of_range("delete_position: slot out of range");
    pm.positions.erase(pm.positions.begin() + slot);
}

CacheInvalidation reindex(PositionMap& pm) {
    if (pm.size() * pm.gap_factor > pm.pool_size)
        throw std::logic_error("reindex: map no longer fits the pool");
    for (int64_t i = 0; i < pm.size(); ++i) pm.positions[static_cast<size_t>(i)] = i * pm.gap_factor;
    return CacheInvalidation{};
}

Alignment align_offline(const std::vector<int32_t>& a, const std::vector<int32_t>& b, int64_t gap_factor,
                        int64_t pool_size) {
    if (a.empty() || b.empty()) throw std::invalid_argument("align_offline: revisions must be nonempty");
    const int64_t na = static_cast<int64_t>(a.size());
    const int64_t nb = static_cast<int64_t>(b.size());

    // Classic LCS table; desk-scale lengths keep the quadratic table cheap.
    Matrix<int32_t> lcs(na + 1, nb + 1);
    for (int64_t i = na - 1; i >= 0; --i) {
        for (int64_t j = nb - 1; j >= 0; --j) {
            if (a[static_cast<size_t>(i)] == b[static_cast<size_t>(j)])
                lcs(i, j) = lcs(i + 1, j + 1) + 1;
            else
                lcs(i, j) = std::max(lcs(i + 1, j), lcs(i, j + 1));
        }
    }

    Alignment out;
    out.lcs = lcs(0, 0);
    int64_t i = 0, j = 0;
    auto emit = [&](std::optional<int32_t> ta, std::optional<int32_t> tb) {
        out.row_a.push_back(ta.value_or(kPadToken));
        out.row_b.push_back(tb.value_or(kPadToken));
        out.pad_a.push_back(ta ? 0 : 1);
        out.pad_b.push_back(tb ? 0 : 1);
    };
    while (i < na && j < nb) {
        if (a[static_cast<size_t>(i)] == b[static_cast<size_t>(j)] && lcs(i, j) == lcs(i + 1, j + 1) + 1) {
            emit(a[static_cast<size_t>(i)], b[static_cast<size_t>(j)]);
            ++i;
            ++j;
        } else if (lcs(i + 1, j) >= lcs(i, j + 1)) {
            emit(a[static_cast<size_t>(i)], std::nullopt);
            ++i;
        } else {
            emit(std::nullopt, b[static_cast<size_t>(j)]);
            ++j;
        }
    }
    while (i < na) emit(a[static_cast<size_t>(i++)], std::nullopt);
    while (j < nb) emit(std::nullopt, b[static_cast<size_t>(j++)]);

    out.positions = init_positions(out.aligned_len(), gap_factor, pool_size);
    return out;
}

int64_t coupon_iterations(int64_t pool_size, int64_t samples_per_iter) {
    if (pool_size < 1 || samples_per_iter < 1) throw std::invalid_argument("coupon_iterations: bad arguments");
    double log_term = std::max(1.0, std::log2(static_cast<double>(pool_size)));
    double steps = static_cast<double>(pool_size) * log_term / static_cast<double>(samples_per_iter);
    return static_cast<int64_t>(std::ceil(steps));
}

} // namespace vqt
