#pragma once

#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqt/flops.hpp"
#include "vqt/kernels.hpp"
#include "vqt/matrix.hpp"

namespace vqt {

inline uint64_t cell_key(int64_t row, int64_t pos) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(row)) << 32) | static_cast<uint32_t>(pos);
}
inline int64_t cell_row(uint64_t key) { return static_cast<int64_t>(key >> 32); }
inline int64_t cell_pos(uint64_t key) { return static_cast<int64_t>(key & 0xffffffffu); }

/// Compressed b x n x d activation tensor: a codebook of unique row vectors,
/// one base index per sequence position, and sparse per-(row, position)
/// overrides where a batch row deviates from the base.
template <typename T>
struct CompressedTensor {
    Matrix<T> codebook;                              // q x d
    std::vector<int32_t> base;                       // n
    std::unordered_map<uint64_t, int32_t> overrides; // cell_key(row, pos) -> index
    int64_t batch = 0;
    int64_t seq = 0;

    int64_t q() const { return codebook.rows(); }
    int64_t dim() const { return codebook.cols(); }

    int32_t effective_index(int64_t row, int64_t pos) const {
        auto it = overrides.find(cell_key(row, pos));
        return it == overrides.end() ? base[pos] : it->second;
    }

    /// Override cells in deterministic (row, pos) order.
    std::vector<std::pair<uint64_t, int32_t>> sorted_overrides() const {
        std::vector<std::pair<uint64_t, int32_t>> cells(overrides.begin(), overrides.end());
        std::sort(cells.begin(), cells.end(), [](auto& a, auto& b) { return a.first < b.first; });
        return cells;
    }

    /// Returns the violated invariant name, or empty when valid.
    std::string check(bool require_canonical = true) const {
        if (static_cast<int64_t>(base.size()) != seq) return "compressed-base-length";
        for (int32_t idx : base)
            if (idx < 0 || idx >= q()) return "compressed-index-range";
        for (auto& [key, idx] : overrides) {
            if (idx < 0 || idx >= q()) return "compressed-index-range";
            if (cell_row(key) >= batch || cell_pos(key) >= seq) return "compressed-cell-range";
            if (require_canonical && idx == base[cell_pos(key)]) return "compressed-canonical-form";
        }
        return {};
    }
};

/// Descriptor of a pure vector-to-vector function applied identically at
/// every (batch, sequence) location, with its exact operation count.
template <typename T>
struct PerLocationOp {
    int64_t in_dim = 0;
    int64_t out_dim = 0;
    uint64_t cost_ops = 0;
    std::function<void(std::span<const T>, std::span<T>)> apply;
    std::string name;
};

template <typename T>
PerLocationOp<T> make_layer_norm_op(std::vector<T> scale, std::vector<T> shift) {
    const int64_t d = static_cast<int64_t>(scale.size());
    return PerLocationOp<T>{d, d, cost::layer_norm(d),
                            [scale = std::move(scale), shift = std::move(shift)](std::span<const T> x, std::span<T> y) {
                                kernels::layer_norm_vec<T>(x, scale, shift, y);
                            },
                            "layer-norm"};
}

template <typename T>
PerLocationOp<T> make_affine_op(Matrix<T> w, std::vector<T> bias) {
    const int64_t in = w.cols(), out = w.rows();
    return PerLocationOp<T>{in, out, cost::affine(in, out),
                            [w = std::move(w), bias = std::move(bias)](std::span<const T> x, std::span<T> y) {
                                kernels::affine_vec<T>(x, w, bias, y);
                            },
                            "affine"};
}

template <typename T>
PerLocationOp<T> make_matvec_op(Matrix<T> w) {
    const int64_t in = w.cols(), out = w.rows();
    return PerLocationOp<T>{in, out, cost::matvec(in, out),
                            [w = std::move(w)](std::span<const T> x, std::span<T> y) {
                                kernels::matvec_vec<T>(x, w, y);
                            },
                            "matvec"};
}

template <typename T>
PerLocationOp<T> make_gelu_op(int64_t d) {
    return PerLocationOp<T>{d, d, cost::gelu_scalar * static_cast<uint64_t>(d),
                            [](std::span<const T> x, std::span<T> y) { kernels::gelu_vec<T>(x, y); }, "gelu"};
}

template <typename T>
PerLocationOp<T> make_scale_op(T factor, int64_t d) {
    return PerLocationOp<T>{d, d, static_cast<uint64_t>(d),
                            [factor](std::span<const T> x, std::span<T> y) {
                                for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
                            },
                            "scale"};
}

/// Scalar binary op with its per-element cost.
template <typename T>
struct BinaryOp {
    std::function<T(T, T)> f;
    uint64_t cost_per_element = 1;
    std::string name;
};

template <typename T>
BinaryOp<T> make_add_op() {
    return BinaryOp<T>{[](T a, T b) { return a + b; }, 1, "add"};
}

template <typename T>
BinaryOp<T> make_mul_op() {
    return BinaryOp<T>{[](T a, T b) { return a * b; }, 1, "mul"};
}

namespace detail {

template <typename T>
std::string row_bytes(std::span<const T> row) {
    return std::string(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(T));
}

/// Most frequent effective index per column; ties go to the lowest index.
template <typename T>
int32_t column_mode(const CompressedTensor<T>& ct, int64_t pos, int32_t current_base) {
    std::map<int32_t, int64_t> counts;
    int64_t override_count = 0;
    for (int64_t r = 0; r < ct.batch; ++r) {
        auto it = ct.overrides.find(cell_key(r, pos));
        if (it != ct.overrides.end()) {
            ++counts[it->second];
            ++override_count;
        }
    }
    counts[current_base] += ct.batch - override_count;
    int32_t best = current_base;
    int64_t best_count = -1;
    for (auto& [idx, c] : counts) {
        if (c > best_count) {
            best = idx;
            best_count = c;
        }
    }
    return best;
}

} // namespace detail

/// Groups location vectors by exact bit equality into a codebook, elects the
/// per-column most frequent index as base, and stores deviations as
/// overrides. decompress(compress(x)) is bitwise x.
template <typename T>
CompressedTensor<T> compress(const Tensor3<T>& dense, FlopCounter* counter = nullptr) {
    CompressedTensor<T> ct;
    ct.batch = dense.batch();
    ct.seq = dense.seq();
    const int64_t b = ct.batch, n = ct.seq, d = dense.dim();
    ct.codebook = Matrix<T>(0, d);

    std::unordered_map<std::string, int32_t> ids;
    Matrix<int32_t> p(b, n);
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            auto [it, inserted] = ids.try_emplace(detail::row_bytes(dense.at(i, j)),
                                                  static_cast<int32_t>(ct.codebook.rows()));
            if (inserted) ct.codebook.append_row(dense.at(i, j));
            p(i, j) = it->second;
        }
    }

    ct.base.resize(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        std::map<int32_t, int64_t> counts;
        for (int64_t i = 0; i < b; ++i) ++counts[p(i, j)];
        int32_t best = 0;
        int64_t best_count = -1;
        for (auto& [idx, c] : counts) {
            if (c > best_count) {
                best = idx;
                best_count = c;
            }
        }
        ct.base[j] = best;
        for (int64_t i = 0; i < b; ++i)
            if (p(i, j) != best) ct.overrides.emplace(cell_key(i, j), p(i, j));
    }

    if (counter) counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(b * n));
    return ct;
}

template <typename T>
Tensor3<T> decompress(const CompressedTensor<T>& ct, FlopCounter* counter = nullptr) {
    Tensor3<T> out(ct.batch, ct.seq, ct.dim());
    for (int64_t i = 0; i < ct.batch; ++i) {
        for (int64_t j = 0; j < ct.seq; ++j) {
            auto row = ct.codebook.row(ct.effective_index(i, j));
            std::copy(row.begin(), row.end(), out.at(i, j).begin());
        }
    }
    if (counter) counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(ct.batch * ct.seq));
    return out;
}

/// Applies f to the codebook only; indices are shared with the input, so the
/// arithmetic cost is q * cost(f), independent of the batch size.
template <typename T>
CompressedTensor<T> apply_per_location(const PerLocationOp<T>& op, const CompressedTensor<T>& ct,
                                       FlopCounter* counter = nullptr,
                                       kernels::Exec exec = kernels::default_exec()) {
    if (op.in_dim != ct.dim())
        throw std::invalid_argument("apply_per_location: op input dimension != tensor dimension");
    CompressedTensor<T> out;
    out.batch = ct.batch;
    out.seq = ct.seq;
    out.base = ct.base;
    out.overrides = ct.overrides;
    out.codebook = Matrix<T>(ct.q(), op.out_dim);
    kernels::for_each_row<T>(ct.q(), exec,
                             [&](int64_t r) { op.apply(ct.codebook.row(r), out.codebook.row(r)); });
    if (counter) counter->add(FlopCategory::PerLocation, static_cast<uint64_t>(ct.q()) * op.cost_ops);
    return out;
}

/// Element-wise f over two compressed tensors. When the index structures
/// coincide the codebooks are combined row by row; otherwise one output row
/// is created per unique effective index pair (at most n + #overrides).
template <typename T>
CompressedTensor<T> binary_elementwise(const BinaryOp<T>& op, const CompressedTensor<T>& x,
                                       const CompressedTensor<T>& y, FlopCounter* counter = nullptr) {
    if (x.batch != y.batch || x.seq != y.seq || x.dim() != y.dim())
        throw std::invalid_argument("binary_elementwise: dimension mismatch");
    const int64_t d = x.dim();

    CompressedTensor<T> out;
    out.batch = x.batch;
    out.seq = x.seq;

    if (x.base == y.base && x.overrides == y.overrides && x.q() == y.q()) {
        out.base = x.base;
        out.overrides = x.overrides;
        out.codebook = Matrix<T>(x.q(), d);
        for (int64_t r = 0; r < x.q(); ++r) {
            auto xr = x.codebook.row(r), yr = y.codebook.row(r);
            auto o = out.codebook.row(r);
            for (int64_t c = 0; c < d; ++c) o[c] = op.f(xr[c], yr[c]);
        }
        if (counter)
            counter->add(FlopCategory::BinaryElementwise,
                         static_cast<uint64_t>(x.q() * d) * op.cost_per_element);
        return out;
    }

    std::map<std::pair<int32_t, int32_t>, int32_t> pair_ids;
    out.codebook = Matrix<T>(0, d);
    auto intern = [&](int32_t ix, int32_t iy) {
        auto [it, inserted] = pair_ids.try_emplace({ix, iy}, static_cast<int32_t>(out.codebook.rows()));
        if (inserted) {
            int64_t r = out.codebook.append_zero_row();
            auto xr = x.codebook.row(ix), yr = y.codebook.row(iy);
            auto o = out.codebook.row(r);
            for (int64_t c = 0; c < d; ++c) o[c] = op.f(xr[c], yr[c]);
        }
        return it->second;
    };

    out.base.resize(static_cast<size_t>(x.seq));
    for (int64_t j = 0; j < x.seq; ++j) out.base[j] = intern(x.base[j], y.base[j]);

    std::vector<uint64_t> cells;
    for (auto& [key, idx] : x.overrides) cells.push_back(key);
    for (auto& [key, idx] : y.overrides) cells.push_back(key);
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    for (uint64_t key : cells) {
        int64_t i = cell_row(key), j = cell_pos(key);
        int32_t id = intern(x.effective_index(i, j), y.effective_index(i, j));
        if (id != out.base[j]) out.overrides.emplace(key, id);
    }

    if (counter) {
        counter->add(FlopCategory::BinaryElementwise,
                     static_cast<uint64_t>(out.q() * d) * op.cost_per_element);
        counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(x.seq) + cells.size());
    }
    return out;
}

/// Drops unreferenced codebook rows, merges bit-identical duplicates, and
/// re-elects the per-column base so the canonical form holds again. The
/// decompressed value is unchanged bitwise.
template <typename T>
CompressedTensor<T> gc_codebook(const CompressedTensor<T>& ct, FlopCounter* counter = nullptr) {
    const int64_t d = ct.dim();
    std::vector<uint8_t> referenced(static_cast<size_t>(ct.q()), 0);
    for (int32_t idx : ct.base) referenced[static_cast<size_t>(idx)] = 1;
    for (auto& [key, idx] : ct.overrides) referenced[static_cast<size_t>(idx)] = 1;

    CompressedTensor<T> out;
    out.batch = ct.batch;
    out.seq = ct.seq;
    out.codebook = Matrix<T>(0, d);
    std::vector<int32_t> remap(static_cast<size_t>(ct.q()), -1);
    std::unordered_map<std::string, int32_t> dedupe;
    for (int64_t r = 0; r < ct.q(); ++r) {
        if (!referenced[static_cast<size_t>(r)]) continue;
        auto [it, inserted] =
            dedupe.try_emplace(detail::row_bytes(ct.codebook.row(r)), static_cast<int32_t>(out.codebook.rows()));
        if (inserted) out.codebook.append_row(ct.codebook.row(r));
        remap[static_cast<size_t>(r)] = it->second;
    }

    CompressedTensor<T> mapped;
    mapped.batch = ct.batch;
    mapped.seq = ct.seq;
    mapped.base.resize(static_cast<size_t>(ct.seq));
    for (int64_t j = 0; j < ct.seq; ++j) mapped.base[j] = remap[static_cast<size_t>(ct.base[j])];
    for (auto& [key, idx] : ct.overrides) mapped.overrides.emplace(key, remap[static_cast<size_t>(idx)]);

    out.base.resize(static_cast<size_t>(ct.seq));
    for (int64_t j = 0; j < ct.seq; ++j)
        out.base[j] = detail::column_mode(mapped, j, mapped.base[j]);
    for (int64_t j = 0; j < ct.seq; ++j) {
        for (int64_t i = 0; i < ct.batch; ++i) {
            auto it = mapped.overrides.find(cell_key(i, j));
            int32_t eff = it == mapped.overrides.end() ? mapped.base[j] : it->second;
            if (eff != out.base[j]) out.overrides.emplace(cell_key(i, j), eff);
        }
    }

    if (counter)
        counter->add(FlopCategory::Bookkeeping,
                     static_cast<uint64_t>(ct.q()) + static_cast<uint64_t>(ct.batch * ct.seq));
    return out;
}

} // namespace vqt
