// Template definitions for engine.hpp. Included by src/engine.cpp.
#pragma once

#include <algorithm>
#include <numeric>

#include "vqt/engine.hpp"
#include "vqt/impl/attention_impl.ipp"

namespace vqt {

// ---------------------------------------------------------------------------
// Construction and the full (session-open) pass.
// ---------------------------------------------------------------------------

template <typename T>
EditSession<T>::EditSession(Document doc, const ModelParams<T>& params, EngineSettings settings)
    : doc_(std::move(doc)), params_(&params), settings_(settings) {
    const ModelConfig& cfg = params.config;
    const int64_t n = static_cast<int64_t>(doc_.tokens.size());
    if (n == 0) throw std::invalid_argument("EditSession: empty document");
    if (n > cfg.max_seq_len) throw std::invalid_argument("EditSession: document longer than capacity");
    if (static_cast<int64_t>(doc_.positions.positions.size()) != n)
        throw std::invalid_argument("EditSession: token/position count mismatch");
    doc_.positions.validate();
    std::vector<uint8_t> pads(static_cast<size_t>(n), 0);
    FlopScope scope(counter_);
    open(doc_.tokens, doc_.positions.positions, pads);
    open_flops_ = scope.delta_arith();
}

template <typename T>
int32_t EditSession<T>::intern_embedding(int32_t token, int64_t position) {
    const ModelConfig& cfg = params_->config;
    if (token < 0 || token >= cfg.vocab_size) throw std::out_of_range("EditSession: token id out of vocabulary");
    if (position < 0 || position >= cfg.position_pool_size())
        throw std::out_of_range("EditSession: position out of pool range");
    auto [it, inserted] = emb_ids_.try_emplace(std::make_pair(token, position),
                                               static_cast<int32_t>(x_rows_[0].rows()));
    if (inserted) {
        // Embedding lookups/adds are excluded from counted work, matching the
        // dense reference scope.
        int64_t r = x_rows_[0].append_zero_row();
        auto row = x_rows_[0].row(r);
        auto te = params_->token_embedding.row(token);
        auto pe = params_->positional_table.row(position);
        for (int64_t c = 0; c < cfg.d_model; ++c) row[c] = te[c] + pe[c];
    }
    counter_.add(FlopCategory::Bookkeeping, 1);
    return it->second;
}

template <typename T>
void EditSession<T>::ensure_derived(int64_t layer, const std::vector<int32_t>& ids) {
    const ModelConfig& cfg = params_->config;
    auto& ls = layers_[static_cast<size_t>(layer)];
    const LayerParams<T>& lp = params_->layers[static_cast<size_t>(layer)];
    const kernels::Exec exec = kernels::default_exec();

    std::vector<int32_t> todo;
    int32_t max_id = -1;
    for (int32_t id : ids) {
        max_id = std::max(max_id, id);
        if (static_cast<size_t>(id) >= ls.derived_filled.size() || !ls.derived_filled[static_cast<size_t>(id)])
            todo.push_back(id);
    }
    std::sort(todo.begin(), todo.end());
    todo.erase(std::unique(todo.begin(), todo.end()), todo.end());
    if (todo.empty()) return;

    if (static_cast<size_t>(max_id) >= ls.derived_filled.size())
        ls.derived_filled.resize(static_cast<size_t>(max_id) + 1, 0);
    while (ls.ln1_rows.rows() <= max_id) {
        ls.ln1_rows.append_zero_row();
        ls.qc.codebook.append_zero_row();
        ls.kc.codebook.append_zero_row();
        ls.vc.codebook.append_zero_row();
    }

    kernels::for_each_row<T>(static_cast<int64_t>(todo.size()), exec, [&](int64_t t) {
        const int32_t id = todo[static_cast<size_t>(t)];
        kernels::layer_norm_vec<T>(x_rows_[static_cast<size_t>(layer)].row(id), lp.ln1_scale, lp.ln1_shift,
                                   ls.ln1_rows.row(id));
        kernels::matvec_vec<T>(ls.ln1_rows.row(id), lp.w_q, ls.qc.codebook.row(id));
        kernels::matvec_vec<T>(ls.ln1_rows.row(id), lp.w_k, ls.kc.codebook.row(id));
        kernels::matvec_vec<T>(ls.ln1_rows.row(id), lp.w_v, ls.vc.codebook.row(id));
    });
    for (int32_t id : todo) ls.derived_filled[static_cast<size_t>(id)] = 1;

    counter_.add(FlopCategory::PerLocation,
                 static_cast<uint64_t>(todo.size()) *
                     (cost::layer_norm(cfg.d_model) +
                      2 * cost::matvec(cfg.d_model, cfg.num_attn_heads * cfg.d_qk) +
                      cost::matvec(cfg.d_model, cfg.num_attn_heads * cfg.d_v)));
}

template <typename T>
int32_t EditSession<T>::ensure_combo(int64_t layer, std::span<const int32_t> combo) {
    const ModelConfig& cfg = params_->config;
    auto& ls = layers_[static_cast<size_t>(layer)];
    const LayerParams<T>& lp = params_->layers[static_cast<size_t>(layer)];
    std::vector<int32_t> key(combo.begin(), combo.end());
    auto [it, inserted] = ls.combo_ids.try_emplace(key, static_cast<int32_t>(ls.vq_rows.rows()));
    counter_.add(FlopCategory::Bookkeeping, 1);
    if (inserted) {
        ls.combo_keys.push_back(key);
        int64_t r = ls.vq_rows.append_zero_row();
        auto row = ls.vq_rows.row(r);
        for (int64_t h = 0; h < cfg.vq_heads; ++h) {
            auto e = lp.codebook.entries[h].row(key[static_cast<size_t>(h)]);
            std::copy(e.begin(), e.end(), row.begin() + h * cfg.vq_chunk_dim());
        }
        int64_t w = ls.wo_rows.append_zero_row();
        kernels::matvec_vec<T>(ls.vq_rows.row(r), lp.w_o, ls.wo_rows.row(w));
        counter_.add(FlopCategory::PerLocation, cost::matvec(cfg.num_attn_heads * cfg.d_v, cfg.d_model));
    }
    return it->second;
}

template <typename T>
int32_t EditSession<T>::ensure_out(int64_t layer, int32_t in_id, int32_t combo_id) {
    const ModelConfig& cfg = params_->config;
    auto& ls = layers_[static_cast<size_t>(layer)];
    const LayerParams<T>& lp = params_->layers[static_cast<size_t>(layer)];
    auto [it, inserted] = ls.out_ids.try_emplace(std::make_pair(in_id, combo_id),
                                                 static_cast<int32_t>(x_rows_[static_cast<size_t>(layer) + 1].rows()));
    counter_.add(FlopCategory::Bookkeeping, 1);
    if (inserted) {
        ls.out_keys.emplace_back(in_id, combo_id);
        const int64_t d = cfg.d_model;
        std::vector<T> r1(static_cast<size_t>(d)), h2(static_cast<size_t>(d)),
            m1(static_cast<size_t>(cfg.d_mlp)), g1(static_cast<size_t>(cfg.d_mlp));
        kernels::add_vec<T>(x_rows_[static_cast<size_t>(layer)].row(in_id), ls.wo_rows.row(combo_id), r1);
        kernels::layer_norm_vec<T>(r1, lp.ln2_scale, lp.ln2_shift, h2);
        kernels::affine_vec<T>(h2, lp.w_mlp1, lp.b_mlp1, m1);
        kernels::gelu_vec<T>(m1, g1);
        int64_t r = x_rows_[static_cast<size_t>(layer) + 1].append_zero_row();
        auto out = x_rows_[static_cast<size_t>(layer) + 1].row(r);
        kernels::affine_vec<T>(g1, lp.w_mlp2, lp.b_mlp2, std::span<T>(out.data(), out.size()));
        for (int64_t c = 0; c < d; ++c) out[c] = r1[static_cast<size_t>(c)] + out[c];
        counter_.add(FlopCategory::BinaryElementwise, 2 * cost::add_vec(d));
        counter_.add(FlopCategory::PerLocation,
                     cost::layer_norm(d) + cost::affine(d, cfg.d_mlp) +
                         cost::gelu_scalar * static_cast<uint64_t>(cfg.d_mlp) + cost::affine(cfg.d_mlp, d));
    }
    return it->second;
}

template <typename T>
int32_t EditSession<T>::pad_combo_id(int64_t layer) {
    const ModelConfig& cfg = params_->config;
    auto& ls = layers_[static_cast<size_t>(layer)];
    if (ls.pad_combo.empty()) {
        // The attention output at a pad slot is the zero vector, so its
        // scores are exactly the codebook biases.
        const LayerParams<T>& lp = params_->layers[static_cast<size_t>(layer)];
        std::vector<T> scores(static_cast<size_t>(cfg.vq_heads * cfg.vq_entries_per_head));
        detail::copy_biases<T>(std::span<T>(scores), lp.codebook);
        ls.pad_combo.resize(static_cast<size_t>(cfg.vq_heads));
        vq_argmax<T>(scores, cfg.vq_heads, cfg.vq_entries_per_head, ls.pad_combo);
        counter_.add(FlopCategory::Bookkeeping,
                     static_cast<uint64_t>(cfg.vq_heads * cfg.vq_entries_per_head));
    }
    return ensure_combo(layer, ls.pad_combo);
}

template <typename T>
void EditSession<T>::open(const std::vector<int32_t>& tokens, std::span<const int64_t> positions,
                          const std::vector<uint8_t>& base_pad) {
    const ModelConfig& cfg = params_->config;
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t d = cfg.d_model;
    const kernels::Exec exec = kernels::default_exec();

    emb_ids_.clear();
    x_rows_.assign(static_cast<size_t>(cfg.num_layers) + 1, Matrix<T>(0, d));
    layers_.assign(static_cast<size_t>(cfg.num_layers), detail::LayerState<T>{});
    committed_pad_ = base_pad;
    commits_since_compact_ = 0;

    const ScoreGeometry geo =
        ScoreGeometry::make(cfg.num_attn_heads, cfg.d_v, cfg.vq_heads, cfg.vq_entries_per_head);

    std::vector<int32_t> ids(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = intern_embedding(tokens[i], positions[i]);

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        auto& ls = layers_[static_cast<size_t>(l)];
        const LayerParams<T>& lp = params_->layers[static_cast<size_t>(l)];

        ls.ln1_rows = Matrix<T>(0, d);
        ls.qc.codebook = Matrix<T>(0, cfg.num_attn_heads * cfg.d_qk);
        ls.kc.codebook = Matrix<T>(0, cfg.num_attn_heads * cfg.d_qk);
        ls.vc.codebook = Matrix<T>(0, cfg.num_attn_heads * cfg.d_v);
        ls.vq_rows = Matrix<T>(0, d);
        ls.wo_rows = Matrix<T>(0, d);
        ls.qc.batch = ls.kc.batch = ls.vc.batch = 2;
        ls.g.reset(geo);

        ls.committed_in = ids;
        ensure_derived(l, ids);

        ls.qc.base = ids;
        ls.kc.base = ids;
        ls.vc.base = ids;
        ls.qc.seq = ls.kc.seq = ls.vc.seq = n;

        ls.cache = attention_base<T>(ls.qc, ls.kc, ls.vc, cfg.num_attn_heads, committed_pad_, &counter_,
                                     settings_.cache_full_attention, exec);

        // Direct (per-location) quantization scores on the base outputs; this
        // is the same arithmetic the dense pass runs, bit for bit.
        const int64_t width = cfg.vq_heads * cfg.vq_entries_per_head;
        ls.cache.s_base.resize(n, width);
        int64_t scored = 0;
        kernels::for_each_row<T>(n, exec, [&](int64_t r) {
            if (committed_pad_[static_cast<size_t>(r)]) return;
            vq_score_vec<T>(ls.cache.o_base.row(r), lp.codebook, ls.cache.s_base.row(r));
        });
        for (int64_t r = 0; r < n; ++r)
            if (!committed_pad_[static_cast<size_t>(r)]) ++scored;
        counter_.add(FlopCategory::VqScores,
                     static_cast<uint64_t>(scored) * cost::vq_scores(d, cfg.vq_heads, cfg.vq_entries_per_head));
        counter_.add(FlopCategory::Bookkeeping, static_cast<uint64_t>(scored) * static_cast<uint64_t>(width));

        ls.committed_combo.assign(static_cast<size_t>(n), 0);
        ls.committed_out.assign(static_cast<size_t>(n), 0);
        std::vector<int32_t> idx(static_cast<size_t>(cfg.vq_heads));
        for (int64_t r = 0; r < n; ++r) {
            int32_t combo;
            if (committed_pad_[static_cast<size_t>(r)]) {
                combo = pad_combo_id(l);
            } else {
                vq_argmax<T>(ls.cache.s_base.row(r), cfg.vq_heads, cfg.vq_entries_per_head, idx);
                combo = ensure_combo(l, idx);
            }
            ls.committed_combo[static_cast<size_t>(r)] = combo;
            ls.committed_out[static_cast<size_t>(r)] =
                ensure_out(l, ids[static_cast<size_t>(r)], combo);
        }
        ids = ls.committed_out;
    }
}

// ---------------------------------------------------------------------------
// Edit frames.
// ---------------------------------------------------------------------------

template <typename T>
detail::EditFrame EditSession<T>::build_frame(std::span<const EditOp> edits) const {
    const ModelConfig& cfg = params_->config;
    detail::EditFrame f;
    f.base_tokens = doc_.tokens;
    f.new_tokens = doc_.tokens;
    const int64_t n = static_cast<int64_t>(doc_.tokens.size());
    f.base_pad.assign(static_cast<size_t>(n), 0);
    f.new_pad.assign(static_cast<size_t>(n), 0);
    f.positions = doc_.positions.positions;

    // Column index of each current edited-document slot.
    std::vector<int64_t> cols(static_cast<size_t>(n));
    std::iota(cols.begin(), cols.end(), 0);

    for (const EditOp& e : edits) {
        const int64_t m = static_cast<int64_t>(cols.size());
        switch (e.kind) {
            case EditOp::Kind::Replace: {
                if (e.slot < 0 || e.slot >= m) throw std::out_of_range("apply_edit: replace slot out of range");
                if (e.token <= kPadToken || e.token >= cfg.vocab_size)
                    throw std::out_of_range("apply_edit: token id out of vocabulary");
                f.new_tokens[static_cast<size_t>(cols[static_cast<size_t>(e.slot)])] = e.token;
                break;
            }
            case EditOp::Kind::Insert: {
                if (e.slot < 0 || e.slot > m) throw std::out_of_range("apply_edit: insert slot out of range");
                if (e.token <= kPadToken || e.token >= cfg.vocab_size)
                    throw std::out_of_range("apply_edit: token id out of vocabulary");
                if (m + 1 > cfg.max_seq_len) throw std::invalid_argument("apply_edit: capacity exceeded");
                const int64_t ncols = static_cast<int64_t>(f.positions.size());
                const int64_t right_col = e.slot == m ? ncols : cols[static_cast<size_t>(e.slot)];
                const int64_t left_col = e.slot == 0 ? -1 : cols[static_cast<size_t>(e.slot - 1)];
                const int64_t left_pos = left_col < 0 ? -1 : f.positions[static_cast<size_t>(left_col)];
                const int64_t right_pos =
                    right_col == ncols ? cfg.position_pool_size() : f.positions[static_cast<size_t>(right_col)];
                if (right_pos - left_pos <= 1) {
                    f.needs_reindex = true;
                    return f;
                }
                const int64_t pos = left_pos + (right_pos - left_pos) / 2;
                const int64_t col = right_col;
                f.base_tokens.insert(f.base_tokens.begin() + col, kPadToken);
                f.new_tokens.insert(f.new_tokens.begin() + col, e.token);
                f.base_pad.insert(f.base_pad.begin() + col, 1);
                f.new_pad.insert(f.new_pad.begin() + col, 0);
                f.positions.insert(f.positions.begin() + col, pos);
                for (auto& c : cols)
                    if (c >= col) ++c;
                for (auto& c : f.inserted_cols)
                    if (c >= col) ++c;
                f.inserted_cols.push_back(col);
                cols.insert(cols.begin() + e.slot, col);
                break;
            }
            case EditOp::Kind::Delete: {
                if (e.slot < 0 || e.slot >= m) throw std::out_of_range("apply_edit: delete slot out of range");
                const int64_t col = cols[static_cast<size_t>(e.slot)];
                if (f.base_pad[static_cast<size_t>(col)]) {
                    // Token inserted earlier in this batch: the column vanishes.
                    f.base_tokens.erase(f.base_tokens.begin() + col);
                    f.new_tokens.erase(f.new_tokens.begin() + col);
                    f.base_pad.erase(f.base_pad.begin() + col);
                    f.new_pad.erase(f.new_pad.begin() + col);
                    f.positions.erase(f.positions.begin() + col);
                    f.inserted_cols.erase(std::find(f.inserted_cols.begin(), f.inserted_cols.end(), col));
                    for (auto& c : f.inserted_cols)
                        if (c > col) --c;
                    for (auto& c : cols)
                        if (c > col) --c;
                } else {
                    f.new_tokens[static_cast<size_t>(col)] = kPadToken;
                    f.new_pad[static_cast<size_t>(col)] = 1;
                }
                cols.erase(cols.begin() + e.slot);
                break;
            }
        }
    }
    if (cols.empty()) throw std::invalid_argument("apply_edit: edits delete the entire document");
    std::sort(f.inserted_cols.begin(), f.inserted_cols.end());
    return f;
}

// ---------------------------------------------------------------------------
// Delta pass.
// ---------------------------------------------------------------------------

template <typename T>
typename EditSession<T>::DeltaPass EditSession<T>::run_delta(const detail::EditFrame& frame) {
    const ModelConfig& cfg = params_->config;
    const kernels::Exec exec = kernels::default_exec();
    const int64_t n = static_cast<int64_t>(frame.new_tokens.size());
    const int64_t d = cfg.d_model;
    const int64_t m = cfg.vq_entries_per_head;
    const int64_t h = cfg.vq_heads;
    const int64_t width = h * m;
    const int64_t heads = cfg.num_attn_heads;

    DeltaPass pass;
    pass.layers.resize(static_cast<size_t>(cfg.num_layers));

    // Layer-0 delta: columns whose (token, padness) differ between rows.
    std::map<int64_t, int32_t> d_in;
    for (int64_t col = 0; col < n; ++col) {
        const bool bp = frame.base_pad[static_cast<size_t>(col)] != 0;
        const bool np = frame.new_pad[static_cast<size_t>(col)] != 0;
        if (bp == np && (np || frame.base_tokens[static_cast<size_t>(col)] ==
                                   frame.new_tokens[static_cast<size_t>(col)]))
            continue;
        const int32_t tok = np ? kPadToken : frame.new_tokens[static_cast<size_t>(col)];
        d_in[col] = intern_embedding(tok, frame.positions[static_cast<size_t>(col)]);
    }

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        auto& ls = layers_[static_cast<size_t>(l)];
        const LayerParams<T>& lp = params_->layers[static_cast<size_t>(l)];
        auto& work = pass.layers[static_cast<size_t>(l)];
        work.d_in = d_in;
        if (d_in.empty()) continue;

        std::vector<int32_t> new_ids;
        for (auto& [col, id] : d_in) new_ids.push_back(id);
        ensure_derived(l, new_ids);

        ls.qc.base = ls.committed_in;
        ls.kc.base = ls.committed_in;
        ls.vc.base = ls.committed_in;
        ls.qc.seq = ls.kc.seq = ls.vc.seq = n;
        ls.qc.overrides.clear();
        ls.kc.overrides.clear();
        ls.vc.overrides.clear();
        for (auto& [col, id] : d_in) {
            ls.qc.overrides.emplace(cell_key(1, col), id);
            ls.kc.overrides.emplace(cell_key(1, col), id);
            ls.vc.overrides.emplace(cell_key(1, col), id);
        }

        DeltaSet deltas;
        deltas.rows.resize(2);
        for (auto& [col, id] : d_in) deltas.rows[1].push_back(col);

        std::vector<std::vector<uint8_t>> row_pads = {frame.base_pad, frame.new_pad};
        work.dres = attention_delta<T>(ls.cache, ls.qc, ls.kc, ls.vc, deltas, row_pads, &counter_,
                                       settings_.row_fallback_fraction, exec);
        const auto& rr = work.dres.rows[1];

        // Scores for fully recomputed rows: direct per-location quantization
        // of the materialized output (the same arithmetic the dense path
        // runs on these bits).
        for (auto& [col, fr] : rr.full) {
            std::vector<T> s(static_cast<size_t>(width));
            vq_score_vec<T>(std::span<const T>(fr.o), lp.codebook, s);
            work.scores.emplace(col, std::move(s));
        }
        counter_.add(FlopCategory::VqScores,
                     static_cast<uint64_t>(rr.full.size()) * cost::vq_scores(d, h, m));

        // Scores for corrected rows: base scores fixed up through the value
        // codebook inner products (G rows), mirroring the output correction.
        uint64_t score_ops = 0;
        for (auto& [col, corr] : rr.corr) {
            std::vector<T> s(static_cast<size_t>(width));
            auto sb = ls.cache.s_base.row(col);
            std::copy(sb.begin(), sb.end(), s.begin());
            for (int64_t ah = 0; ah < heads; ++ah) {
                const int64_t ncols = ls.g.geo.heads[static_cast<size_t>(ah)].ncols;
                for (size_t si = 0; si < rr.s.size() && rr.s[si] <= col; ++si) {
                    const int64_t i = rr.s[si];
                    if (!ls.cache.base_pad[static_cast<size_t>(i)]) {
                        T a_old = ls.cache.a_entry(ah, col, i, &counter_);
                        const int32_t vid = ls.committed_in[static_cast<size_t>(i)];
                        ls.g.ensure(vid, ls.vc.codebook, lp.codebook, &counter_);
                        detail::sub_g<T>(std::span<T>(s), a_old, ls.g, ah, vid);
                        score_ops += 2 * static_cast<uint64_t>(ncols);
                    }
                    if (!frame.new_pad[static_cast<size_t>(i)]) {
                        const int32_t vid = d_in.at(i);
                        ls.g.ensure(vid, ls.vc.codebook, lp.codebook, &counter_);
                        detail::add_g<T>(std::span<T>(s), corr.a_new(ah, static_cast<int64_t>(si)), ls.g, ah,
                                         vid);
                        score_ops += 2 * static_cast<uint64_t>(ncols);
                    }
                }
            }
            work.scores.emplace(col, std::move(s));
        }
        counter_.add(FlopCategory::VqScores, score_ops);

        // Quantization decisions, with a direct-route re-score when the
        // winning margin is too small to trust the corrected scores.
        std::vector<int32_t> idx(static_cast<size_t>(h));
        for (auto& [col, s] : work.scores) {
            double margin = vq_argmax<T>(s, h, m, idx);
            counter_.add(FlopCategory::Bookkeeping, static_cast<uint64_t>(width));
            const bool is_corr = rr.corr.count(col) > 0;
            double best = double(s[static_cast<size_t>(idx[0])]);
            for (int64_t hh = 1; hh < h; ++hh)
                best = std::max(best, double(s[static_cast<size_t>(hh * m + idx[static_cast<size_t>(hh)])]));
            const double scale_ref = std::max(1.0, std::abs(best));
            if (is_corr && margin < settings_.recheck_margin_rel * scale_ref) {
                const auto& corr = rr.corr.at(col);
                vq_score_vec<T>(std::span<const T>(corr.o), lp.codebook, std::span<T>(s));
                counter_.add(FlopCategory::VqScores, cost::vq_scores(d, h, m));
                margin = vq_argmax<T>(s, h, m, idx);
                counter_.add(FlopCategory::Bookkeeping, static_cast<uint64_t>(width));
                ++pass.rechecked;
            }
            if (margin < settings_.margin_flag_threshold) ++pass.flagged;
            pass.min_margin = std::min(pass.min_margin, margin);
            work.combo1[col] = ensure_combo(l, idx);
        }
        for (auto& [col, id] : d_in)
            if (frame.new_pad[static_cast<size_t>(col)]) work.combo1[col] = pad_combo_id(l);

        // Next layer's delta: columns whose output pair changed.
        std::map<int64_t, int32_t> d_next;
        for (auto& [col, combo_new] : work.combo1) {
            auto it = d_in.find(col);
            const int32_t in_new = it != d_in.end() ? it->second : ls.committed_in[static_cast<size_t>(col)];
            counter_.add(FlopCategory::Bookkeeping, 1);
            if (it == d_in.end() && combo_new == ls.committed_combo[static_cast<size_t>(col)]) continue;
            const int32_t out_id = ensure_out(l, in_new, combo_new);
            if (out_id != ls.committed_out[static_cast<size_t>(col)]) {
                d_next[col] = out_id;
                work.d_out[col] = out_id;
            }
        }
        d_in = std::move(d_next);
    }

    // Row-1 final states over the aligned frame.
    pass.hidden.resize(n, d);
    const auto& last = layers_[static_cast<size_t>(cfg.num_layers - 1)];
    const auto& final_work = pass.layers[static_cast<size_t>(cfg.num_layers - 1)];
    for (int64_t col = 0; col < n; ++col) {
        auto it = final_work.d_out.find(col);
        const int32_t out_id =
            it != final_work.d_out.end() ? it->second : last.committed_out[static_cast<size_t>(col)];
        auto src = x_rows_[static_cast<size_t>(cfg.num_layers)].row(out_id);
        std::copy(src.begin(), src.end(), pass.hidden.row(col).begin());
    }
    return pass;
}

// ---------------------------------------------------------------------------
// Commit.
// ---------------------------------------------------------------------------

template <typename T>
void EditSession<T>::commit(const detail::EditFrame& frame, DeltaPass& pass) {
    const ModelConfig& cfg = params_->config;
    const int64_t n = static_cast<int64_t>(frame.new_tokens.size());

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        auto& ls = layers_[static_cast<size_t>(l)];
        auto& work = pass.layers[static_cast<size_t>(l)];
        ls.qc.overrides.clear();
        ls.kc.overrides.clear();
        ls.vc.overrides.clear();

        if (!work.d_in.empty()) {
            const auto& rr = work.dres.rows[1];
            for (auto& [col, fr] : rr.full) {
                if (ls.cache.store_attention)
                    for (int64_t ah = 0; ah < ls.cache.num_heads; ++ah) {
                        auto src = fr.a.row(ah);
                        std::copy(src.begin(), src.end(), ls.cache.a[ah].row(col).begin());
                    }
                std::copy(fr.o.begin(), fr.o.end(), ls.cache.o_base.row(col).begin());
            }
            for (auto& [col, corr] : rr.corr) {
                std::copy(corr.o.begin(), corr.o.end(), ls.cache.o_base.row(col).begin());
                if (ls.cache.store_attention)
                    for (int64_t ah = 0; ah < ls.cache.num_heads; ++ah)
                        for (size_t si = 0; si < rr.s.size() && rr.s[si] <= col; ++si)
                            ls.cache.a[ah](col, rr.s[si]) = corr.a_new(ah, static_cast<int64_t>(si));
            }
            for (auto& [col, s] : work.scores)
                std::copy(s.begin(), s.end(), ls.cache.s_base.row(col).begin());
            for (auto& [col, id] : work.d_in) {
                ls.committed_in[static_cast<size_t>(col)] = id;
                for (int64_t ah = 0; ah < ls.cache.num_heads; ++ah) {
                    auto q = ls.qc.codebook.row(id).subspan(ah * ls.cache.d_qk, ls.cache.d_qk);
                    auto k = ls.kc.codebook.row(id).subspan(ah * ls.cache.d_qk, ls.cache.d_qk);
                    auto v = ls.vc.codebook.row(id).subspan(ah * ls.cache.d_v, ls.cache.d_v);
                    std::copy(q.begin(), q.end(), ls.cache.base_q[ah].row(col).begin());
                    std::copy(k.begin(), k.end(), ls.cache.base_k[ah].row(col).begin());
                    std::copy(v.begin(), v.end(), ls.cache.base_v[ah].row(col).begin());
                }
            }
            for (auto& [col, cid] : work.combo1) ls.committed_combo[static_cast<size_t>(col)] = cid;
            for (auto& [col, oid] : work.d_out) ls.committed_out[static_cast<size_t>(col)] = oid;
        }

        for (int64_t col = n - 1; col >= 0; --col) {
            if (!frame.new_pad[static_cast<size_t>(col)]) continue;
            ls.cache.erase_slot(col);
            ls.committed_in.erase(ls.committed_in.begin() + col);
            ls.committed_combo.erase(ls.committed_combo.begin() + col);
            ls.committed_out.erase(ls.committed_out.begin() + col);
        }
        std::fill(ls.cache.base_pad.begin(), ls.cache.base_pad.end(), 0);
        ls.qc.seq = ls.kc.seq = ls.vc.seq = ls.cache.n;
        ls.qc.base = ls.committed_in;
        ls.kc.base = ls.committed_in;
        ls.vc.base = ls.committed_in;
    }

    doc_.tokens.clear();
    doc_.positions.positions.clear();
    for (int64_t col = 0; col < n; ++col) {
        if (frame.new_pad[static_cast<size_t>(col)]) continue;
        doc_.tokens.push_back(frame.new_tokens[static_cast<size_t>(col)]);
        doc_.positions.positions.push_back(frame.positions[static_cast<size_t>(col)]);
    }
    committed_pad_.assign(doc_.tokens.size(), 0);
    doc_.positions.validate();

    if (++commits_since_compact_ >= settings_.compact_every) {
        compact();
        commits_since_compact_ = 0;
    }
}

// ---------------------------------------------------------------------------
// Public edit entry points.
// ---------------------------------------------------------------------------

template <typename T>
ApplyResult<T> EditSession<T>::apply_edit(const EditOp& edit) { return apply_edits({&edit, 1}); }

template <typename T>
ApplyResult<T> EditSession<T>::apply_edits(std::span<const EditOp> edits) {
    const ModelConfig& cfg = params_->config;
    if (edits.empty()) throw std::invalid_argument("apply_edits: empty edit batch");

    detail::EditFrame frame = build_frame(edits);
    FlopScope scope(counter_);
    ApplyResult<T> out;

    if (frame.needs_reindex) {
        for (const EditOp& e : edits) {
            const int64_t m = static_cast<int64_t>(doc_.tokens.size());
            const bool writes_token = e.kind != EditOp::Kind::Delete;
            if (writes_token && (e.token <= kPadToken || e.token >= cfg.vocab_size))
                throw std::out_of_range("apply_edit: token id out of vocabulary");
            switch (e.kind) {
                case EditOp::Kind::Replace:
                    if (e.slot < 0 || e.slot >= m) throw std::out_of_range("apply_edit: replace slot out of range");
                    doc_.tokens[static_cast<size_t>(e.slot)] = e.token;
                    break;
                case EditOp::Kind::Insert:
                    if (e.slot < 0 || e.slot > m) throw std::out_of_range("apply_edit: insert slot out of range");
                    if (m + 1 > cfg.max_seq_len) throw std::invalid_argument("apply_edit: capacity exceeded");
                    doc_.tokens.insert(doc_.tokens.begin() + e.slot, e.token);
                    doc_.positions.positions.insert(doc_.positions.positions.begin() + e.slot, 0);
                    break;
                case EditOp::Kind::Delete:
                    if (e.slot < 0 || e.slot >= m) throw std::out_of_range("apply_edit: delete slot out of range");
                    doc_.tokens.erase(doc_.tokens.begin() + e.slot);
                    doc_.positions.positions.erase(doc_.positions.positions.begin() + e.slot);
                    break;
            }
        }
        if (doc_.tokens.empty()) throw std::invalid_argument("apply_edit: edits delete the entire document");
        reindex(doc_.positions);
        ++doc_.revision;
        counter_.set_redirect_to_reindex(true);
        std::vector<uint8_t> pads(doc_.tokens.size(), 0);
        open(doc_.tokens, doc_.positions.positions, pads);
        counter_.set_redirect_to_reindex(false);
        out.reindexed = true;
    } else {
        for (int64_t col : frame.inserted_cols) {
            for (auto& ls : layers_) {
                ls.cache.insert_slot(col);
                ls.cache.base_pad[static_cast<size_t>(col)] = 1;
                ls.committed_in.insert(ls.committed_in.begin() + col, -1);
                ls.committed_combo.insert(ls.committed_combo.begin() + col, -1);
                ls.committed_out.insert(ls.committed_out.begin() + col, -1);
            }
            committed_pad_.insert(committed_pad_.begin() + col, 1);
        }
        DeltaPass pass = run_delta(frame);
        commit(frame, pass);
        ++doc_.revision;
        out.min_margin = pass.min_margin;
        out.flagged_near_ties = pass.flagged;
        out.rechecked = pass.rechecked;
    }

    out.hidden = final_hidden();
    const int64_t n_new = static_cast<int64_t>(doc_.tokens.size());
    const uint64_t inc = scope.delta_arith();
    std::string descriptor = edits.size() == 1
                                 ? (edits[0].kind == EditOp::Kind::Replace  ? "replace"
                                    : edits[0].kind == EditOp::Kind::Insert ? "insert"
                                                                            : "delete")
                                 : "batch-" + std::to_string(edits.size());
    out.report = SpeedupReport::make(dense_reference_ops(cfg, 1, n_new), inc,
                                     static_cast<double>(edits.size()) / static_cast<double>(n_new),
                                     std::move(descriptor), cfg.fingerprint());
    return out;
}

template <typename T>
Matrix<T> EditSession<T>::final_hidden() const {
    const ModelConfig& cfg = params_->config;
    const auto& last = layers_.back();
    const int64_t n = static_cast<int64_t>(last.committed_out.size());
    Matrix<T> out(n, cfg.d_model);
    for (int64_t r = 0; r < n; ++r) {
        auto src = x_rows_.back().row(last.committed_out[static_cast<size_t>(r)]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

template <typename T>
ReplayReport EditSession<T>::replay_verify() const {
    const ModelConfig& cfg = params_->config;
    auto trace = dense_forward<T>(doc_.tokens, doc_.positions.positions, *params_, {}, nullptr);
    ReplayReport rep;
    const int64_t n = static_cast<int64_t>(doc_.tokens.size());
    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        const auto& ls = layers_[static_cast<size_t>(l)];
        double dev = 0;
        for (int64_t r = 0; r < n; ++r) {
            auto committed = x_rows_[static_cast<size_t>(l) + 1].row(ls.committed_out[static_cast<size_t>(r)]);
            auto dense = trace.layer_outputs[static_cast<size_t>(l)].row(r);
            for (int64_t c = 0; c < cfg.d_model; ++c)
                dev = std::max(dev, std::abs(double(committed[c]) - double(dense[c])));
        }
        rep.layer_max_abs.push_back(dev);
        for (int64_t r = 0; r < n; ++r) {
            const auto& key = ls.combo_keys[static_cast<size_t>(ls.committed_combo[static_cast<size_t>(r)])];
            for (int64_t hh = 0; hh < cfg.vq_heads; ++hh)
                if (key[static_cast<size_t>(hh)] !=
                    trace.vq_indices[static_cast<size_t>(l)][static_cast<size_t>(r * cfg.vq_heads + hh)]) {
                    ++rep.index_disagreements;
                    break;
                }
        }
        rep.min_margin = std::min(rep.min_margin, trace.vq_margins[static_cast<size_t>(l)]);
    }
    rep.final_max_abs = rep.layer_max_abs.back();
    return rep;
}

// ---------------------------------------------------------------------------
// Compaction: drop family rows not referenced by the committed assignment.
// Bookkeeping only; no arithmetic is charged.
// ---------------------------------------------------------------------------

template <typename T>
void EditSession<T>::compact() {
    const ModelConfig& cfg = params_->config;

    auto build_remap = [](const std::vector<int32_t>& referenced, int64_t old_size) {
        std::vector<int32_t> keep(referenced);
        std::sort(keep.begin(), keep.end());
        keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
        std::vector<int32_t> remap(static_cast<size_t>(old_size), -1);
        for (size_t i = 0; i < keep.size(); ++i) remap[static_cast<size_t>(keep[i])] = static_cast<int32_t>(i);
        return std::make_pair(std::move(remap), std::move(keep));
    };
    auto gather = [](Matrix<T>& mat, const std::vector<int32_t>& keep) {
        Matrix<T> out(static_cast<int64_t>(keep.size()), mat.cols());
        for (size_t i = 0; i < keep.size(); ++i) {
            auto src = mat.row(keep[i]);
            std::copy(src.begin(), src.end(), out.row(static_cast<int64_t>(i)).begin());
        }
        mat = std::move(out);
    };

    auto [remap_in, keep_in] = build_remap(layers_[0].committed_in, x_rows_[0].rows());
    gather(x_rows_[0], keep_in);
    {
        std::map<std::pair<int32_t, int64_t>, int32_t> kept;
        for (auto& [key, id] : emb_ids_)
            if (remap_in[static_cast<size_t>(id)] >= 0) kept.emplace(key, remap_in[static_cast<size_t>(id)]);
        emb_ids_ = std::move(kept);
    }

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        auto& ls = layers_[static_cast<size_t>(l)];
        for (auto& id : ls.committed_in) id = remap_in[static_cast<size_t>(id)];
        gather(ls.ln1_rows, keep_in);
        gather(ls.qc.codebook, keep_in);
        gather(ls.kc.codebook, keep_in);
        gather(ls.vc.codebook, keep_in);
        ls.derived_filled.assign(keep_in.size(), 1);
        ls.qc.base = ls.committed_in;
        ls.kc.base = ls.committed_in;
        ls.vc.base = ls.committed_in;

        {
            GTable<T> g2;
            g2.reset(ls.g.geo);
            g2.filled.assign(keep_in.size(), 0);
            for (int64_t ah = 0; ah < ls.g.geo.num_attn_heads; ++ah)
                g2.rows[static_cast<size_t>(ah)].resize(static_cast<int64_t>(keep_in.size()),
                                                        ls.g.geo.heads[static_cast<size_t>(ah)].ncols);
            for (size_t i = 0; i < keep_in.size(); ++i) {
                const int32_t old = keep_in[i];
                if (static_cast<size_t>(old) < ls.g.filled.size() && ls.g.filled[static_cast<size_t>(old)]) {
                    for (int64_t ah = 0; ah < ls.g.geo.num_attn_heads; ++ah) {
                        auto src = ls.g.rows[static_cast<size_t>(ah)].row(old);
                        std::copy(src.begin(), src.end(),
                                  g2.rows[static_cast<size_t>(ah)].row(static_cast<int64_t>(i)).begin());
                    }
                    g2.filled[i] = 1;
                }
            }
            ls.g = std::move(g2);
        }

        auto [remap_combo, keep_combo] = build_remap(ls.committed_combo, ls.vq_rows.rows());
        gather(ls.vq_rows, keep_combo);
        gather(ls.wo_rows, keep_combo);
        {
            std::vector<std::vector<int32_t>> new_keys(keep_combo.size());
            std::map<std::vector<int32_t>, int32_t> new_ids;
            for (size_t i = 0; i < keep_combo.size(); ++i) {
                new_keys[i] = ls.combo_keys[static_cast<size_t>(keep_combo[i])];
                new_ids.emplace(new_keys[i], static_cast<int32_t>(i));
            }
            ls.combo_keys = std::move(new_keys);
            ls.combo_ids = std::move(new_ids);
        }
        for (auto& c : ls.committed_combo) c = remap_combo[static_cast<size_t>(c)];

        auto [remap_out, keep_out] =
            build_remap(ls.committed_out, x_rows_[static_cast<size_t>(l) + 1].rows());
        gather(x_rows_[static_cast<size_t>(l) + 1], keep_out);
        {
            std::vector<std::pair<int32_t, int32_t>> new_keys(keep_out.size());
            std::map<std::pair<int32_t, int32_t>, int32_t> new_ids;
            for (size_t i = 0; i < keep_out.size(); ++i) {
                auto [xid, cid] = ls.out_keys[static_cast<size_t>(keep_out[i])];
                new_keys[i] = {remap_in[static_cast<size_t>(xid)], remap_combo[static_cast<size_t>(cid)]};
                new_ids.emplace(new_keys[i], static_cast<int32_t>(i));
            }
            ls.out_keys = std::move(new_keys);
            ls.out_ids = std::move(new_ids);
        }
        for (auto& o : ls.committed_out) o = remap_out[static_cast<size_t>(o)];

        remap_in = std::move(remap_out);
        keep_in = std::move(keep_out);
    }
}

// ---------------------------------------------------------------------------
// Offline revision pairs.
// ---------------------------------------------------------------------------

template <typename T>
struct OfflinePair {
    static OfflineResult<T> run(const std::vector<int32_t>& rev_a, const std::vector<int32_t>& rev_b,
                                const ModelParams<T>& params, EngineSettings settings) {
        const ModelConfig& cfg = params.config;
        Alignment al = align_offline(rev_a, rev_b, cfg.position_pool_factor, cfg.position_pool_size());
        if (al.aligned_len() > cfg.max_seq_len)
            throw std::invalid_argument("process_offline: capacity exceeded after padding");

        EditSession<T> s;
        s.params_ = &params;
        s.settings_ = settings;
        s.doc_.tokens = al.row_a;
        s.doc_.positions = al.positions;

        s.open(al.row_a, al.positions.positions, al.pad_a);
        const uint64_t base_ops = s.counter_.total_arith();

        detail::EditFrame frame;
        frame.base_tokens = al.row_a;
        frame.new_tokens = al.row_b;
        frame.base_pad = al.pad_a;
        frame.new_pad = al.pad_b;
        frame.positions = al.positions.positions;

        FlopScope delta_scope(s.counter_);
        auto pass = s.run_delta(frame);
        const uint64_t inc = delta_scope.delta_arith();

        OfflineResult<T> out;
        out.lcs = al.lcs;
        out.aligned_len = al.aligned_len();
        out.base_flops = base_ops;
        out.min_margin = pass.min_margin;
        out.flagged_near_ties = pass.flagged;

        Matrix<T> full_a = s.final_hidden();
        out.states_a = Matrix<T>(static_cast<int64_t>(rev_a.size()), cfg.d_model);
        out.states_b = Matrix<T>(static_cast<int64_t>(rev_b.size()), cfg.d_model);
        int64_t ra = 0, rb = 0;
        for (int64_t col = 0; col < al.aligned_len(); ++col) {
            if (!al.pad_a[static_cast<size_t>(col)]) {
                auto src = full_a.row(col);
                std::copy(src.begin(), src.end(), out.states_a.row(ra++).begin());
            }
            if (!al.pad_b[static_cast<size_t>(col)]) {
                auto src = pass.hidden.row(col);
                std::copy(src.begin(), src.end(), out.states_b.row(rb++).begin());
            }
        }

        const int64_t ed = static_cast<int64_t>(rev_a.size() + rev_b.size()) - 2 * al.lcs;
        const double fraction = static_cast<double>(ed) / static_cast<double>(al.aligned_len());
        out.report = SpeedupReport::make(dense_reference_ops(cfg, 1, al.aligned_len()), inc, fraction,
                                         "offline-pair", cfg.fingerprint());
        return out;
    }
};

template <typename T>
OfflineResult<T> process_offline(const std::vector<int32_t>& rev_a, const std::vector<int32_t>& rev_b,
                                 const ModelParams<T>& params, EngineSettings settings) {
    return OfflinePair<T>::run(rev_a, rev_b, params, settings);
}

} // namespace vqt
