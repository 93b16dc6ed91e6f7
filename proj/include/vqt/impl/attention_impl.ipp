// Template definitions for attention.hpp. Included by src/attention.cpp for
// the float/double instantiations and by the audit tests.
#pragma once

#include <algorithm>

#include "vqt/attention.hpp"

namespace vqt {

template <typename T>
void AttentionCache<T>::insert_slot(int64_t at) {
    for (int64_t h = 0; h < num_heads; ++h) {
        base_q[h].insert_zero_row(at);
        base_k[h].insert_zero_row(at);
        base_v[h].insert_zero_row(at);
        if (store_attention) {
            Matrix<T> grown(n + 1, n + 1);
            for (int64_t r = 0; r < n; ++r) {
                int64_t rr = r < at ? r : r + 1;
                for (int64_t c = 0; c < n; ++c) {
                    int64_t cc = c < at ? c : c + 1;
                    grown(rr, cc) = a[h](r, c);
                }
            }
            a[h] = std::move(grown);
        }
    }
    o_base.insert_zero_row(at);
    if (s_base.rows() > 0) s_base.insert_zero_row(at);
    base_pad.insert(base_pad.begin() + at, 0);
    ++n;
}

template <typename T>
void AttentionCache<T>::erase_slot(int64_t at) {
    for (int64_t h = 0; h < num_heads; ++h) {
        base_q[h].erase_row(at);
        base_k[h].erase_row(at);
        base_v[h].erase_row(at);
        if (store_attention) {
            Matrix<T> shrunk(n - 1, n - 1);
            for (int64_t r = 0; r < n - 1; ++r) {
                int64_t rr = r < at ? r : r + 1;
                for (int64_t c = 0; c < n - 1; ++c) {
                    int64_t cc = c < at ? c : c + 1;
                    shrunk(r, c) = a[h](rr, cc);
                }
            }
            a[h] = std::move(shrunk);
        }
    }
    o_base.erase_row(at);
    if (s_base.rows() > 0) s_base.erase_row(at);
    base_pad.erase(base_pad.begin() + at);
    --n;
}

template <typename T>
AttentionCache<T> attention_base(const CompressedTensor<T>& qc, const CompressedTensor<T>& kc,
                                 const CompressedTensor<T>& vc, int64_t num_heads,
                                 std::span<const uint8_t> base_pad, FlopCounter* counter,
                                 bool store_attention, kernels::Exec exec) {
    const int64_t n = qc.seq;
    if (kc.seq != n || vc.seq != n) throw std::invalid_argument("attention_base: sequence length mismatch");
    if (qc.dim() % num_heads != 0 || vc.dim() % num_heads != 0 || kc.dim() != qc.dim())
        throw std::invalid_argument("attention_base: head dimension mismatch");

    AttentionCache<T> cache;
    cache.n = n;
    cache.num_heads = num_heads;
    cache.d_qk = qc.dim() / num_heads;
    cache.d_v = vc.dim() / num_heads;
    cache.store_attention = store_attention;
    cache.base_pad.assign(static_cast<size_t>(n), 0);
    if (!base_pad.empty()) std::copy(base_pad.begin(), base_pad.end(), cache.base_pad.begin());

    cache.base_q.resize(static_cast<size_t>(num_heads));
    cache.base_k.resize(static_cast<size_t>(num_heads));
    cache.base_v.resize(static_cast<size_t>(num_heads));
    for (int64_t h = 0; h < num_heads; ++h) {
        cache.base_q[h].resize(n, cache.d_qk);
        cache.base_k[h].resize(n, cache.d_qk);
        cache.base_v[h].resize(n, cache.d_v);
        for (int64_t i = 0; i < n; ++i) {
            auto qrow = qc.codebook.row(qc.base[i]).subspan(h * cache.d_qk, cache.d_qk);
            auto krow = kc.codebook.row(kc.base[i]).subspan(h * cache.d_qk, cache.d_qk);
            auto vrow = vc.codebook.row(vc.base[i]).subspan(h * cache.d_v, cache.d_v);
            std::copy(qrow.begin(), qrow.end(), cache.base_q[h].row(i).begin());
            std::copy(krow.begin(), krow.end(), cache.base_k[h].row(i).begin());
            std::copy(vrow.begin(), vrow.end(), cache.base_v[h].row(i).begin());
        }
    }

    cache.o_base.resize(n, num_heads * cache.d_v);
    if (store_attention) {
        cache.a.resize(static_cast<size_t>(num_heads));
        for (auto& m : cache.a) m.resize(n, n);
    }

    const T scale = cache.scale();
    std::span<const uint8_t> pad(cache.base_pad);
    for (int64_t h = 0; h < num_heads; ++h) {
        kernels::for_each_row<T>(n, exec, [&](int64_t r) {
            if (cache.base_pad[static_cast<size_t>(r)]) return;
            std::span<T> a_row = store_attention ? cache.a[h].row(r) : std::span<T>{};
            auto o_row = cache.o_base.row(r).subspan(h * cache.d_v, cache.d_v);
            kernels::attn_row<T>(cache.base_q[h].row(r), cache.base_k[h], cache.base_v[h], r, pad, scale,
                                 a_row, o_row);
        });
    }

    if (counter) {
        uint64_t entries = 0;
        for (int64_t r = 0; r < n; ++r)
            if (!cache.base_pad[static_cast<size_t>(r)])
                entries += static_cast<uint64_t>(kernels::allowed_keys(r, pad));
        counter->add(FlopCategory::AttentionBase,
                     static_cast<uint64_t>(num_heads) * entries * cost::attn_entry(cache.d_qk, cache.d_v));
        counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(3 * n));
    }
    return cache;
}

namespace detail {

template <typename T>
void validate_delta_consistency(const AttentionCache<T>& cache, const CompressedTensor<T>& qc,
                                const CompressedTensor<T>& kc, const CompressedTensor<T>& vc,
                                const DeltaSet& deltas, const std::vector<std::vector<uint8_t>>& row_pads) {
    const int64_t n = cache.n;
    if (qc.seq != n || kc.seq != n || vc.seq != n)
        throw std::runtime_error("attention_delta: tensors inconsistent with cache");
    if (static_cast<int64_t>(deltas.rows.size()) != qc.batch)
        throw std::runtime_error("attention_delta: delta set row count inconsistent");
    for (size_t b = 0; b < deltas.rows.size(); ++b) {
        const auto& s = deltas.rows[b];
        if (!std::is_sorted(s.begin(), s.end())) throw std::runtime_error("attention_delta: delta set unsorted");
        for (int64_t p : s)
            if (p < 0 || p >= n) throw std::runtime_error("attention_delta: delta position out of range");
    }
    auto covered = [&](int64_t row, int64_t pos) {
        const auto& s = deltas.rows[static_cast<size_t>(row)];
        return std::binary_search(s.begin(), s.end(), pos);
    };
    for (const auto* ct : {&qc, &kc, &vc})
        for (auto& [key, idx] : ct->overrides)
            if (!covered(cell_row(key), cell_pos(key)))
                throw std::runtime_error("attention_delta: override outside delta set (internal consistency)");
    if (!row_pads.empty()) {
        if (static_cast<int64_t>(row_pads.size()) != qc.batch)
            throw std::runtime_error("attention_delta: pad mask row count inconsistent");
        for (size_t b = 0; b < row_pads.size(); ++b) {
            if (static_cast<int64_t>(row_pads[b].size()) != n)
                throw std::runtime_error("attention_delta: pad mask length inconsistent");
            for (int64_t i = 0; i < n; ++i)
                if (row_pads[b][static_cast<size_t>(i)] != cache.base_pad[static_cast<size_t>(i)] &&
                    !covered(static_cast<int64_t>(b), i))
                    throw std::runtime_error("attention_delta: pad change outside delta set");
        }
    }
}

} // namespace detail

template <typename T>
DeltaResult<T> attention_delta(const AttentionCache<T>& cache, const CompressedTensor<T>& qc,
                               const CompressedTensor<T>& kc, const CompressedTensor<T>& vc,
                               const DeltaSet& deltas, const std::vector<std::vector<uint8_t>>& row_pads,
                               FlopCounter* counter, double fallback_fraction, kernels::Exec exec) {
    detail::validate_delta_consistency(cache, qc, kc, vc, deltas, row_pads);

    const int64_t n = cache.n;
    const int64_t heads = cache.num_heads;
    const int64_t d_qk = cache.d_qk;
    const int64_t d_v = cache.d_v;
    const T scale = cache.scale();

    DeltaResult<T> out;
    out.rows.resize(deltas.rows.size());

    for (size_t b = 0; b < deltas.rows.size(); ++b) {
        DeltaRowResult<T>& rr = out.rows[b];
        rr.s = deltas.rows[b];
        if (rr.s.empty()) continue;

        std::span<const uint8_t> rp =
            row_pads.empty() ? std::span<const uint8_t>(cache.base_pad) : std::span<const uint8_t>(row_pads[b]);
        auto is_pad = [&](int64_t i) { return rp[static_cast<size_t>(i)] != 0; };

        rr.fallback = static_cast<double>(rr.s.size()) > fallback_fraction * static_cast<double>(n);
        std::vector<int64_t> full_slots;
        if (rr.fallback) {
            for (int64_t p = 0; p < n; ++p)
                if (!is_pad(p)) full_slots.push_back(p);
        } else {
            for (int64_t p : rr.s)
                if (!is_pad(p)) full_slots.push_back(p);
        }

        auto eff_row = [&](const CompressedTensor<T>& ct, int64_t i) {
            return ct.codebook.row(ct.effective_index(static_cast<int64_t>(b), i));
        };

        // Full row recomputation at the delta positions (or everywhere, on
        // fallback) from the row's effective Q/K/V.
        std::vector<DeltaFullRow<T>> full_results(full_slots.size());
        kernels::for_each_row<T>(static_cast<int64_t>(full_slots.size()), exec, [&](int64_t fi) {
            const int64_t p = full_slots[static_cast<size_t>(fi)];
            DeltaFullRow<T>& fr = full_results[static_cast<size_t>(fi)];
            fr.o.assign(static_cast<size_t>(heads * d_v), T(0));
            fr.a.resize(heads, n);
            for (int64_t h = 0; h < heads; ++h) {
                auto q_row = eff_row(qc, p).subspan(h * d_qk, d_qk);
                for (int64_t i = 0; i <= p; ++i) {
                    if (is_pad(i)) continue;
                    T a_new = kernels::attn_entry<T>(q_row, eff_row(kc, i).subspan(h * d_qk, d_qk), scale);
                    fr.a(h, i) = a_new;
                    auto v_i = eff_row(vc, i).subspan(h * d_v, d_v);
                    auto o_seg = std::span<T>(fr.o).subspan(h * d_v, d_v);
                    for (int64_t c = 0; c < d_v; ++c) o_seg[c] += a_new * v_i[c];
                }
            }
        });
        uint64_t full_entries = 0;
        for (int64_t p : full_slots) full_entries += static_cast<uint64_t>(kernels::allowed_keys(p, rp));
        if (counter)
            counter->add(FlopCategory::AttentionDelta,
                         static_cast<uint64_t>(heads) * full_entries * cost::attn_entry(d_qk, d_v));
        for (size_t fi = 0; fi < full_slots.size(); ++fi)
            rr.full.emplace(full_slots[fi], std::move(full_results[fi]));

        if (rr.fallback) continue;

        // Correction rows: cached output fixed up at the altered columns,
        // subtract-then-add fused, ascending column order.
        std::vector<int64_t> corr_slots;
        for (int64_t r = rr.s.front(); r < n; ++r) {
            if (is_pad(r)) continue;
            if (std::binary_search(rr.s.begin(), rr.s.end(), r)) continue;
            corr_slots.push_back(r);
        }
        std::vector<DeltaCorrection<T>> corr_results(corr_slots.size());
        std::atomic<uint64_t> recompute_entries{0};
        kernels::for_each_row<T>(static_cast<int64_t>(corr_slots.size()), exec, [&](int64_t ci) {
            const int64_t r = corr_slots[static_cast<size_t>(ci)];
            DeltaCorrection<T>& corr = corr_results[static_cast<size_t>(ci)];
            auto base_row = cache.o_base.row(r);
            corr.o.assign(base_row.begin(), base_row.end());
            corr.a_new.resize(heads, static_cast<int64_t>(rr.s.size()));
            for (int64_t h = 0; h < heads; ++h) {
                auto o_seg = std::span<T>(corr.o).subspan(h * d_v, d_v);
                for (size_t si = 0; si < rr.s.size() && rr.s[si] <= r; ++si) {
                    const int64_t i = rr.s[si];
                    T a_old = cache.a_entry(h, r, i, nullptr);
                    if (!cache.store_attention && !(i > r) && !cache.base_pad[static_cast<size_t>(i)])
                        recompute_entries.fetch_add(1, std::memory_order_relaxed);
                    auto v_old = cache.base_v[h].row(i);
                    if (is_pad(i)) {
                        for (int64_t c = 0; c < d_v; ++c) o_seg[c] -= a_old * v_old[c];
                    } else {
                        T a_new = kernels::attn_entry<T>(eff_row(qc, r).subspan(h * d_qk, d_qk),
                                                         eff_row(kc, i).subspan(h * d_qk, d_qk), scale);
                        corr.a_new(h, static_cast<int64_t>(si)) = a_new;
                        auto v_new = eff_row(vc, i).subspan(h * d_v, d_v);
                        for (int64_t c = 0; c < d_v; ++c) o_seg[c] += a_new * v_new[c] - a_old * v_old[c];
                    }
                }
            }
        });
        if (counter) {
            uint64_t ops = 0;
            for (int64_t r : corr_slots) {
                for (int64_t i : rr.s) {
                    if (i > r) break;
                    if (is_pad(i))
                        ops += static_cast<uint64_t>(heads) * 2 * static_cast<uint64_t>(d_v);
                    else
                        ops += static_cast<uint64_t>(heads) *
                               (cost::attn_score_entry(d_qk) + 4 * static_cast<uint64_t>(d_v));
                }
            }
            counter->add(FlopCategory::AttentionDelta, ops);
            counter->add(FlopCategory::AttentionDelta,
                         recompute_entries.load() * cost::attn_score_entry(d_qk));
        }
        for (size_t ci = 0; ci < corr_slots.size(); ++ci)
            rr.corr.emplace(corr_slots[ci], std::move(corr_results[ci]));
    }
    return out;
}

template <typename T>
Matrix<T> materialize_delta_output(const AttentionCache<T>& cache, const DeltaResult<T>& delta, int64_t row) {
    Matrix<T> out = cache.o_base;
    const auto& rr = delta.rows[static_cast<size_t>(row)];
    for (auto& [slot, fr] : rr.full)
        std::copy(fr.o.begin(), fr.o.end(), out.row(slot).begin());
    for (auto& [slot, corr] : rr.corr)
        std::copy(corr.o.begin(), corr.o.end(), out.row(slot).begin());
    return out;
}

// ---------------------------------------------------------------------------
// Quantization through linearity.
// ---------------------------------------------------------------------------

template <typename T>
void build_g_row(std::span<const T> v_full, int64_t ah, const ScoreGeometry& geo, const VQCodebook<T>& cb,
                 std::span<T> out) {
    const auto& hc = geo.heads[static_cast<size_t>(ah)];
    for (int64_t vh = hc.vh_lo; vh < hc.vh_hi; ++vh) {
        const int64_t glo = std::max(ah * geo.d_v, vh * geo.chunk_dim);
        const int64_t ghi = std::min((ah + 1) * geo.d_v, (vh + 1) * geo.chunk_dim);
        for (int64_t c = 0; c < geo.m; ++c) {
            auto entry = cb.entries[vh].row(c);
            T acc = T(0);
            for (int64_t g = glo; g < ghi; ++g) acc += v_full[g] * entry[g - vh * geo.chunk_dim];
            out[(vh - hc.vh_lo) * geo.m + c] = acc;
        }
    }
}

template <typename T>
void GTable<T>::ensure(int32_t idx, const Matrix<T>& v_codebook, const VQCodebook<T>& cb, FlopCounter* counter) {
    if (static_cast<size_t>(idx) < filled.size() && filled[static_cast<size_t>(idx)]) return;
    if (static_cast<size_t>(idx) >= filled.size()) filled.resize(static_cast<size_t>(idx) + 1, 0);
    for (int64_t ah = 0; ah < geo.num_attn_heads; ++ah) {
        auto& m_ = rows[static_cast<size_t>(ah)];
        if (m_.cols() == 0) m_.resize(0, geo.heads[static_cast<size_t>(ah)].ncols);
        while (m_.rows() <= idx) m_.append_zero_row();
    }
    for (int64_t ah = 0; ah < geo.num_attn_heads; ++ah)
        build_g_row<T>(v_codebook.row(idx), ah, geo, cb, rows[static_cast<size_t>(ah)].row(idx));
    filled[static_cast<size_t>(idx)] = 1;
    if (counter)
        counter->add(FlopCategory::VqScores,
                     static_cast<uint64_t>(geo.num_attn_heads) * geo.g_row_cost());
}

namespace detail {

/// Adds one attention-weighted G row into the score vector at the right
/// chunk columns. 2 * ncols ops.
template <typename T>
void add_g(std::span<T> score, T weight, const GTable<T>& g, int64_t ah, int32_t idx) {
    const auto& hc = g.geo.heads[static_cast<size_t>(ah)];
    auto row = g.rows[static_cast<size_t>(ah)].row(idx);
    auto seg = score.subspan(hc.vh_lo * g.geo.m, hc.ncols);
    kernels::axpy<T>(weight, row, seg);
}

template <typename T>
void sub_g(std::span<T> score, T weight, const GTable<T>& g, int64_t ah, int32_t idx) {
    const auto& hc = g.geo.heads[static_cast<size_t>(ah)];
    auto row = g.rows[static_cast<size_t>(ah)].row(idx);
    auto seg = score.subspan(hc.vh_lo * g.geo.m, hc.ncols);
    for (size_t i = 0; i < row.size(); ++i) seg[i] -= weight * row[i];
}

template <typename T>
void add_biases(std::span<T> score, const VQCodebook<T>& cb) {
    for (int64_t vh = 0; vh < cb.heads; ++vh)
        for (int64_t c = 0; c < cb.entries_per_head; ++c) score[vh * cb.entries_per_head + c] += cb.biases[vh][c];
}

/// Assignment only, no arithmetic.
template <typename T>
void copy_biases(std::span<T> score, const VQCodebook<T>& cb) {
    for (int64_t vh = 0; vh < cb.heads; ++vh)
        for (int64_t c = 0; c < cb.entries_per_head; ++c) score[vh * cb.entries_per_head + c] = cb.biases[vh][c];
}

} // namespace detail

template <typename T>
VqLinearityResult<T> vq_via_linearity(const AttentionCache<T>& cache, const CompressedTensor<T>& qc,
                                      const CompressedTensor<T>& kc, const CompressedTensor<T>& vc,
                                      const DeltaSet& deltas, const VQCodebook<T>& cb,
                                      const std::vector<std::vector<uint8_t>>& row_pads, FlopCounter* counter,
                                      double fallback_fraction, kernels::Exec exec) {
    if (!cache.store_attention)
        throw std::invalid_argument("vq_via_linearity: requires a cached attention matrix");
    if (cb.d_model() != cache.num_heads * cache.d_v)
        throw std::invalid_argument("vq_via_linearity: codebook width mismatch");

    const int64_t n = cache.n;
    const int64_t heads = cache.num_heads;
    const int64_t m = cb.entries_per_head;
    const int64_t width = cb.heads * m;
    const ScoreGeometry geo = ScoreGeometry::make(heads, cache.d_v, cb.heads, m);

    GTable<T> g;
    g.reset(geo);
    for (int64_t i = 0; i < n; ++i)
        if (!cache.base_pad[static_cast<size_t>(i)]) g.ensure(vc.base[i], vc.codebook, cb, counter);

    // Base scores: the cached attention matrix applied to the G rows.
    Matrix<T> s_base(n, width);
    std::span<const uint8_t> bp(cache.base_pad);
    kernels::for_each_row<T>(n, exec, [&](int64_t r) {
        if (cache.base_pad[static_cast<size_t>(r)]) return;
        auto s = s_base.row(r);
        for (int64_t ah = 0; ah < heads; ++ah) {
            for (int64_t i = 0; i <= r; ++i) {
                if (cache.base_pad[static_cast<size_t>(i)]) continue;
                detail::add_g<T>(s, cache.a[ah](r, i), g, ah, vc.base[i]);
            }
        }
        detail::add_biases<T>(s, cb);
    });
    if (counter) {
        uint64_t ops = 0;
        for (int64_t r = 0; r < n; ++r) {
            if (cache.base_pad[static_cast<size_t>(r)]) continue;
            uint64_t allowed = static_cast<uint64_t>(kernels::allowed_keys(r, bp));
            for (int64_t ah = 0; ah < heads; ++ah)
                ops += allowed * 2 * static_cast<uint64_t>(geo.heads[static_cast<size_t>(ah)].ncols);
            ops += static_cast<uint64_t>(width);
        }
        counter->add(FlopCategory::VqScores, ops);
    }

    DeltaResult<T> delta = attention_delta<T>(cache, qc, kc, vc, deltas, row_pads, counter,
                                              fallback_fraction, exec);

    VqLinearityResult<T> out;
    out.indices.resize(deltas.rows.size());
    out.margins.resize(deltas.rows.size());

    std::vector<T> bias_scores(static_cast<size_t>(width));
    detail::copy_biases<T>(std::span<T>(bias_scores), cb);

    for (size_t b = 0; b < deltas.rows.size(); ++b) {
        const auto& rr = delta.rows[b];
        std::span<const uint8_t> rp =
            row_pads.empty() ? std::span<const uint8_t>(cache.base_pad) : std::span<const uint8_t>(row_pads[b]);
        auto is_pad = [&](int64_t i) { return rp[static_cast<size_t>(i)] != 0; };

        auto& idx_row = out.indices[b];
        auto& margin_row = out.margins[b];
        idx_row.assign(static_cast<size_t>(n * cb.heads), 0);
        margin_row.assign(static_cast<size_t>(n), std::numeric_limits<double>::infinity());

        std::vector<T> s(static_cast<size_t>(width));
        uint64_t charged = 0;
        for (int64_t r = 0; r < n; ++r) {
            std::span<int32_t> idx(idx_row.data() + r * cb.heads, static_cast<size_t>(cb.heads));
            if (is_pad(r)) {
                // Pad outputs are zero vectors; their scores are the biases.
                margin_row[static_cast<size_t>(r)] =
                    vq_argmax<T>(bias_scores, cb.heads, m, idx);
                continue;
            }
            auto full_it = rr.full.find(r);
            auto corr_it = rr.corr.find(r);
            if (full_it != rr.full.end()) {
                std::fill(s.begin(), s.end(), T(0));
                const auto& fr = full_it->second;
                for (int64_t ah = 0; ah < heads; ++ah) {
                    for (int64_t i = 0; i <= r; ++i) {
                        if (is_pad(i)) continue;
                        int32_t vid = vc.effective_index(static_cast<int64_t>(b), i);
                        g.ensure(vid, vc.codebook, cb, counter);
                        detail::add_g<T>(std::span<T>(s), fr.a(ah, i), g, ah, vid);
                        charged += 2 * static_cast<uint64_t>(geo.heads[static_cast<size_t>(ah)].ncols);
                    }
                }
                detail::add_biases<T>(std::span<T>(s), cb);
                charged += static_cast<uint64_t>(width);
            } else if (corr_it != rr.corr.end()) {
                auto sb = s_base.row(r);
                std::copy(sb.begin(), sb.end(), s.begin());
                const auto& corr = corr_it->second;
                for (int64_t ah = 0; ah < heads; ++ah) {
                    for (size_t si = 0; si < rr.s.size() && rr.s[si] <= r; ++si) {
                        const int64_t i = rr.s[si];
                        T a_old = cache.a[ah](r, i);
                        detail::sub_g<T>(std::span<T>(s), a_old, g, ah, vc.base[i]);
                        charged += 2 * static_cast<uint64_t>(geo.heads[static_cast<size_t>(ah)].ncols);
                        if (!is_pad(i)) {
                            int32_t vid = vc.effective_index(static_cast<int64_t>(b), i);
                            g.ensure(vid, vc.codebook, cb, counter);
                            detail::add_g<T>(std::span<T>(s), corr.a_new(ah, static_cast<int64_t>(si)), g, ah,
                                             vid);
                            charged += 2 * static_cast<uint64_t>(geo.heads[static_cast<size_t>(ah)].ncols);
                        }
                    }
                }
            } else {
                auto sb = s_base.row(r);
                std::copy(sb.begin(), sb.end(), s.begin());
            }
            margin_row[static_cast<size_t>(r)] = vq_argmax<T>(s, cb.heads, m, idx);
        }
        if (counter) {
            counter->add(FlopCategory::VqScores, charged);
            counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(n * width));
        }
    }
    return out;
}

template <typename T>
RecompressResult<T> recompress_output(const std::vector<std::vector<int32_t>>& indices, const VQCodebook<T>& cb,
                                      const std::vector<int32_t>& prev_base_indices, FlopCounter* counter) {
    const int64_t h = cb.heads;
    const int64_t n = static_cast<int64_t>(prev_base_indices.size()) / h;
    const int64_t b = static_cast<int64_t>(indices.size());
    const int64_t d = cb.d_model();

    RecompressResult<T> out;
    out.tensor.batch = b;
    out.tensor.seq = n;
    out.tensor.codebook = Matrix<T>(0, d);
    out.deltas.rows.resize(static_cast<size_t>(b));

    std::map<std::vector<int32_t>, int32_t> combo_ids;
    auto intern = [&](std::span<const int32_t> combo) {
        std::vector<int32_t> key(combo.begin(), combo.end());
        for (int64_t head = 0; head < h; ++head)
            if (key[static_cast<size_t>(head)] < 0 || key[static_cast<size_t>(head)] >= cb.entries_per_head)
                throw std::out_of_range("recompress_output: head index out of codebook range");
        auto [it, inserted] = combo_ids.try_emplace(std::move(key), static_cast<int32_t>(out.tensor.codebook.rows()));
        if (inserted) {
            int64_t r = out.tensor.codebook.append_zero_row();
            auto row = out.tensor.codebook.row(r);
            for (int64_t head = 0; head < h; ++head) {
                auto e = cb.entries[head].row(combo[static_cast<size_t>(head)]);
                std::copy(e.begin(), e.end(), row.begin() + head * cb.chunk_dim);
            }
        }
        return it->second;
    };

    out.tensor.base.resize(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j)
        out.tensor.base[j] = intern(std::span<const int32_t>(prev_base_indices).subspan(j * h, h));

    for (int64_t row = 0; row < b; ++row) {
        for (int64_t j = 0; j < n; ++j) {
            auto combo = std::span<const int32_t>(indices[static_cast<size_t>(row)]).subspan(j * h, h);
            auto base_combo = std::span<const int32_t>(prev_base_indices).subspan(j * h, h);
            if (std::equal(combo.begin(), combo.end(), base_combo.begin())) continue;
            int32_t id = intern(combo);
            out.tensor.overrides.emplace(cell_key(row, j), id);
            out.deltas.rows[static_cast<size_t>(row)].push_back(j);
        }
    }

    if (counter) counter->add(FlopCategory::Bookkeeping, static_cast<uint64_t>(b * n));
    return out;
}

} // namespace vqt
