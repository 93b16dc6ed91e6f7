// Template definitions for model.hpp. Included by src/model.cpp for the
// float/double instantiations and by the audit tests for the instrumented
// scalar build.
#pragma once

#include <algorithm>
#include <random>

#include "vqt/model.hpp"

namespace vqt {

namespace detail {

/// Lloyd k-means with seeded init, fixed iteration count, lowest-index tie
/// break; empty clusters keep their previous centroid.
template <typename T>
Matrix<T> kmeans_fit(const Matrix<T>& data, int64_t k, int iters, std::mt19937_64& rng) {
    const int64_t n = data.rows();
    const int64_t d = data.cols();
    Matrix<T> centroids(k, d);
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t c = 0; c < k; ++c) {
        auto src = data.row(order[static_cast<size_t>(c % n)]);
        std::copy(src.begin(), src.end(), centroids.row(c).begin());
    }

    std::vector<int64_t> assign(static_cast<size_t>(n), 0);
    for (int it = 0; it < iters; ++it) {
        kernels::for_each_row<T>(n, kernels::default_exec(), [&](int64_t i) {
            auto x = data.row(i);
            int64_t best = 0;
            T best_d = std::numeric_limits<T>::infinity();
            for (int64_t c = 0; c < k; ++c) {
                auto ce = centroids.row(c);
                T acc = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    T diff = x[j] - ce[j];
                    acc += diff * diff;
                }
                if (acc < best_d) {
                    best_d = acc;
                    best = c;
                }
            }
            assign[static_cast<size_t>(i)] = best;
        });
        Matrix<T> sums(k, d);
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (int64_t i = 0; i < n; ++i) {
            auto x = data.row(i);
            auto s = sums.row(assign[static_cast<size_t>(i)]);
            for (int64_t j = 0; j < d; ++j) s[j] += x[j];
            ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
        }
        for (int64_t c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) continue;
            auto s = sums.row(c);
            auto ce = centroids.row(c);
            for (int64_t j = 0; j < d; ++j) ce[j] = s[j] / T(counts[static_cast<size_t>(c)]);
        }
    }
    return centroids;
}

/// Per-head slices of a packed (H*dim)-wide row matrix, materialized
/// contiguously so attention kernels can take plain matrices.
template <typename T>
Matrix<T> head_slice(const Matrix<T>& packed, int64_t head, int64_t dim) {
    Matrix<T> out(packed.rows(), dim);
    for (int64_t r = 0; r < packed.rows(); ++r) {
        auto src = packed.row(r).subspan(head * dim, dim);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

} // namespace detail

template <typename T>
Matrix<T> gelu_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal_mask,
                         std::span<const uint8_t> key_pad, FlopCounter* counter, Matrix<T>* attn_out,
                         kernels::Exec exec) {
    using std::sqrt;
    const int64_t n = q.rows();
    if (k.rows() != n || v.rows() != n || k.cols() != q.cols())
        throw std::invalid_argument("gelu_attention: shape mismatch");
    if (!key_pad.empty() && static_cast<int64_t>(key_pad.size()) != n)
        throw std::invalid_argument("gelu_attention: pad mask size mismatch");

    Matrix<T> o(n, v.cols());
    if (attn_out) attn_out->resize(n, n);
    const T scale = kernels::attn_scale<T>(q.cols());

    kernels::for_each_row<T>(n, exec, [&](int64_t r) {
        int64_t limit = causal_mask ? r : n - 1;
        std::span<T> a_row = attn_out ? attn_out->row(r) : std::span<T>{};
        kernels::attn_row<T>(q.row(r), k, v, limit, key_pad, scale, a_row, o.row(r));
    });

    if (counter) {
        uint64_t entries = 0;
        for (int64_t r = 0; r < n; ++r)
            entries += static_cast<uint64_t>(kernels::allowed_keys(causal_mask ? r : n - 1, key_pad));
        counter->add(FlopCategory::AttentionBase, entries * cost::attn_entry(q.cols(), v.cols()));
    }
    return o;
}

template <typename T>
DenseTrace<T> dense_forward(std::span<const int32_t> tokens, std::span<const int64_t> positions,
                            const ModelParams<T>& params, std::span<const uint8_t> pad_mask,
                            FlopCounter* counter, kernels::Exec exec) {
    using std::sqrt;
    const ModelConfig& cfg = params.config;
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t d = cfg.d_model;
    const int64_t heads = cfg.num_attn_heads;

    if (positions.size() != tokens.size()) throw std::invalid_argument("dense_forward: tokens/positions mismatch");
    if (!pad_mask.empty() && static_cast<int64_t>(pad_mask.size()) != n)
        throw std::invalid_argument("dense_forward: pad mask size mismatch");
    if (n == 0) throw std::invalid_argument("dense_forward: empty input");
    for (int64_t i = 0; i < n; ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw std::out_of_range("dense_forward: token id out of vocabulary");
        if (positions[i] < 0 || positions[i] >= cfg.position_pool_size())
            throw std::out_of_range("dense_forward: position out of pool range");
        if (i > 0 && positions[i] <= positions[i - 1])
            throw std::invalid_argument("dense_forward: positions must be strictly increasing");
    }

    DenseTrace<T> trace;
    Matrix<T> x(n, d);
    for (int64_t i = 0; i < n; ++i) {
        auto te = params.token_embedding.row(tokens[i]);
        auto pe = params.positional_table.row(positions[i]);
        auto xr = x.row(i);
        for (int64_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }

    auto charge = [&](FlopCategory cat, uint64_t ops) {
        if (counter) counter->add(cat, ops);
    };

    Matrix<T> h1(n, d), packed_q(n, heads * cfg.d_qk), packed_k(n, heads * cfg.d_qk),
        packed_v(n, heads * cfg.d_v), ao(n, d), aq(n, d), wo_out(n, d), h2(n, d), m1(n, cfg.d_mlp),
        g1(n, cfg.d_mlp), m2(n, d);

    for (int64_t layer = 0; layer < cfg.num_layers; ++layer) {
        const LayerParams<T>& lp = params.layers[layer];

        kernels::layer_norm_rows<T>(x, lp.ln1_scale, lp.ln1_shift, h1, exec);
        charge(FlopCategory::PerLocation, static_cast<uint64_t>(n) * cost::layer_norm(d));

        kernels::matvec_rows<T>(h1, lp.w_q, packed_q, exec);
        kernels::matvec_rows<T>(h1, lp.w_k, packed_k, exec);
        kernels::matvec_rows<T>(h1, lp.w_v, packed_v, exec);
        charge(FlopCategory::PerLocation, static_cast<uint64_t>(n) * (2 * cost::matvec(d, heads * cfg.d_qk) +
                                                                      cost::matvec(d, heads * cfg.d_v)));

        const T scale = kernels::attn_scale<T>(cfg.d_qk);
        for (int64_t ah = 0; ah < heads; ++ah) {
            Matrix<T> qh = detail::head_slice(packed_q, ah, cfg.d_qk);
            Matrix<T> kh = detail::head_slice(packed_k, ah, cfg.d_qk);
            Matrix<T> vh = detail::head_slice(packed_v, ah, cfg.d_v);
            kernels::for_each_row<T>(n, exec, [&](int64_t r) {
                auto o_row = ao.row(r).subspan(ah * cfg.d_v, cfg.d_v);
                std::fill(o_row.begin(), o_row.end(), T(0));
                kernels::attn_row<T>(qh.row(r), kh, vh, r, pad_mask, scale, {}, o_row);
            });
        }
        {
            uint64_t entries = 0;
            for (int64_t r = 0; r < n; ++r)
                entries += static_cast<uint64_t>(kernels::allowed_keys(r, pad_mask));
            charge(FlopCategory::AttentionBase,
                   static_cast<uint64_t>(heads) * entries * cost::attn_entry(cfg.d_qk, cfg.d_v));
        }

        // Quantize the concatenated attention output per position.
        std::vector<int32_t> indices(static_cast<size_t>(n * cfg.vq_heads));
        std::vector<double> margins(static_cast<size_t>(n));
        const int64_t m = cfg.vq_entries_per_head;
        kernels::for_each_row<T>(n, exec, [&](int64_t r) {
            std::vector<T> scores(static_cast<size_t>(cfg.vq_heads * m));
            vq_score_vec<T>(ao.row(r), lp.codebook, scores);
            std::span<int32_t> idx(indices.data() + r * cfg.vq_heads, static_cast<size_t>(cfg.vq_heads));
            margins[static_cast<size_t>(r)] = vq_argmax<T>(scores, cfg.vq_heads, m, idx);
            auto out = aq.row(r);
            for (int64_t h = 0; h < cfg.vq_heads; ++h) {
                auto e = lp.codebook.entries[h].row(idx[h]);
                std::copy(e.begin(), e.end(), out.begin() + h * cfg.vq_chunk_dim());
            }
        });
        charge(FlopCategory::VqScores, static_cast<uint64_t>(n) * cost::vq_scores(d, cfg.vq_heads, m));
        charge(FlopCategory::Bookkeeping, static_cast<uint64_t>(n * cfg.vq_heads * m));

        kernels::matvec_rows<T>(aq, lp.w_o, wo_out, exec);
        charge(FlopCategory::PerLocation, static_cast<uint64_t>(n) * cost::matvec(heads * cfg.d_v, d));

        kernels::add_rows<T>(x, wo_out, x, exec);
        charge(FlopCategory::BinaryElementwise, static_cast<uint64_t>(n) * cost::add_vec(d));

        kernels::layer_norm_rows<T>(x, lp.ln2_scale, lp.ln2_shift, h2, exec);
        charge(FlopCategory::PerLocation, static_cast<uint64_t>(n) * cost::layer_norm(d));

        kernels::affine_rows<T>(h2, lp.w_mlp1, lp.b_mlp1, m1, exec);
        kernels::gelu_rows<T>(m1, g1, exec);
        kernels::affine_rows<T>(g1, lp.w_mlp2, lp.b_mlp2, m2, exec);
        charge(FlopCategory::PerLocation,
               static_cast<uint64_t>(n) * (cost::affine(d, cfg.d_mlp) + cost::gelu_scalar * static_cast<uint64_t>(cfg.d_mlp) +
                                           cost::affine(cfg.d_mlp, d)));

        kernels::add_rows<T>(x, m2, x, exec);
        charge(FlopCategory::BinaryElementwise, static_cast<uint64_t>(n) * cost::add_vec(d));

        trace.layer_outputs.push_back(x);
        trace.vq_indices.push_back(std::move(indices));
        double layer_margin = std::numeric_limits<double>::infinity();
        for (double mg : margins) layer_margin = std::min(layer_margin, mg);
        trace.vq_margins.push_back(layer_margin);
    }

    trace.final_hidden = x;
    return trace;
}

template <typename T>
ModelParams<T> ModelParams<T>::init_seeded(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams<T> p;
    p.config = cfg;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.02);
    auto fill_matrix = [&](Matrix<T>& m, int64_t r, int64_t c) {
        m.resize(r, c);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) m(i, j) = T(gauss(rng));
    };
    auto fill_vec = [&](std::vector<T>& v, int64_t s, double val, bool random) {
        v.resize(static_cast<size_t>(s));
        for (auto& e : v) e = random ? T(gauss(rng)) : T(val);
    };

    // Token embeddings are kept an order of magnitude below the positional
    // field. A single-token edit then reaches the network as a small
    // perturbation instead of a fresh random direction, which is the
    // redundancy a trained quantizer would provide and what keeps
    // quantization decisions stable across revisions.
    constexpr double kTokenScale = 0.1;
    fill_matrix(p.token_embedding, cfg.vocab_size, cfg.d_model);
    for (int64_t i = 0; i < cfg.vocab_size; ++i)
        for (int64_t j = 0; j < cfg.d_model; ++j)
            p.token_embedding(i, j) = T(double(p.token_embedding(i, j)) * kTokenScale);
    std::fill(p.token_embedding.row(kPadToken).begin(), p.token_embedding.row(kPadToken).end(), T(0));

    // Low-frequency positional field: nearby pool slots get nearly identical
    // vectors, so midpoint insertions and pad-alignment shifts reach the
    // network as small perturbations rather than fresh random directions.
    {
        const int64_t pool = cfg.position_pool_size();
        const int64_t waves = 8;
        p.positional_table.resize(pool, cfg.d_model);
        std::vector<double> freq(static_cast<size_t>(waves));
        std::uniform_real_distribution<double> fdist(0.5, 3.0);
        for (auto& f : freq) f = fdist(rng);
        std::vector<double> amp(static_cast<size_t>(waves * cfg.d_model)), phase(amp.size());
        std::uniform_real_distribution<double> pdist(0.0, 2.0 * 3.14159265358979323846);
        for (auto& a : amp) a = gauss(rng);
        for (auto& ph : phase) ph = pdist(rng);
        const double norm = 1.0 / std::sqrt(0.5 * static_cast<double>(waves)); // keeps entries at scale 0.02
        kernels::for_each_row<T>(pool, kernels::default_exec(), [&](int64_t pos) {
            for (int64_t c = 0; c < cfg.d_model; ++c) {
                double acc = 0;
                for (int64_t w = 0; w < waves; ++w) {
                    const size_t k = static_cast<size_t>(w * cfg.d_model + c);
                    acc += amp[k] * std::cos(2.0 * 3.14159265358979323846 * freq[static_cast<size_t>(w)] *
                                                 static_cast<double>(pos) / static_cast<double>(pool) +
                                             phase[k]);
                }
                p.positional_table(pos, c) = T(acc * norm);
            }
        });
    }

    // Value projections are drawn as a product of two thin Gaussians. The
    // resulting low-rank structure keeps attention outputs on a
    // low-dimensional manifold, which the k-means codebooks tile with
    // well-separated cells; quantization decisions then stay stable under
    // small upstream perturbations, standing in for the robustness a trained
    // quantizer would have.
    const int64_t v_rank = std::min<int64_t>(4, cfg.d_model);
    auto fill_low_rank = [&](Matrix<T>& m, int64_t rows, int64_t cols) {
        const double s = std::sqrt(0.02) / std::pow(static_cast<double>(v_rank), 0.25);
        Matrix<T> a(rows, v_rank), b(v_rank, cols);
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < v_rank; ++j) a(i, j) = T(gauss(rng) / 0.02 * s);
        for (int64_t i = 0; i < v_rank; ++i)
            for (int64_t j = 0; j < cols; ++j) b(i, j) = T(gauss(rng) / 0.02 * s);
        m.resize(rows, cols);
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j) {
                T acc = T(0);
                for (int64_t r = 0; r < v_rank; ++r) acc += a(i, r) * b(r, j);
                m(i, j) = acc;
            }
    };

    p.layers.resize(static_cast<size_t>(cfg.num_layers));
    for (auto& lp : p.layers) {
        fill_matrix(lp.w_q, cfg.num_attn_heads * cfg.d_qk, cfg.d_model);
        fill_matrix(lp.w_k, cfg.num_attn_heads * cfg.d_qk, cfg.d_model);
        fill_low_rank(lp.w_v, cfg.num_attn_heads * cfg.d_v, cfg.d_model);
        fill_matrix(lp.w_o, cfg.d_model, cfg.num_attn_heads * cfg.d_v);
        fill_matrix(lp.w_mlp1, cfg.d_mlp, cfg.d_model);
        fill_matrix(lp.w_mlp2, cfg.d_model, cfg.d_mlp);
        fill_vec(lp.b_mlp1, cfg.d_mlp, 0.0, true);
        fill_vec(lp.b_mlp2, cfg.d_model, 0.0, true);
        fill_vec(lp.ln1_scale, cfg.d_model, 1.0, false);
        fill_vec(lp.ln1_shift, cfg.d_model, 0.0, false);
        fill_vec(lp.ln2_scale, cfg.d_model, 1.0, false);
        fill_vec(lp.ln2_shift, cfg.d_model, 0.0, false);
    }

    // Codebook calibration: run a synthetic document through the network,
    // fitting each layer's codebook on that layer's attention outputs before
    // quantizing and moving on.
    std::mt19937_64 calib_rng(seed ^ 0x9e3779b97f4a7c15ull);
    const int64_t m = cfg.vq_entries_per_head;
    const int64_t n = std::max<int64_t>(2, std::min(cfg.max_seq_len, std::max<int64_t>(8 * m, 128)));
    std::uniform_int_distribution<int32_t> tok_dist(1, static_cast<int32_t>(cfg.vocab_size - 1));
    std::vector<int32_t> tokens(static_cast<size_t>(n));
    for (auto& t : tokens) t = tok_dist(calib_rng);

    const int64_t d = cfg.d_model;
    const kernels::Exec exec = kernels::default_exec();
    Matrix<T> x(n, d);
    for (int64_t i = 0; i < n; ++i) {
        auto te = p.token_embedding.row(tokens[i]);
        auto pe = p.positional_table.row(i * cfg.position_pool_factor);
        for (int64_t c = 0; c < d; ++c) x(i, c) = te[c] + pe[c];
    }

    using std::sqrt;
    Matrix<T> h1(n, d), pq(n, cfg.num_attn_heads * cfg.d_qk), pk(n, cfg.num_attn_heads * cfg.d_qk),
        pv(n, cfg.num_attn_heads * cfg.d_v), ao(n, d), aq(n, d), wo_out(n, d), h2(n, d), m1(n, cfg.d_mlp),
        g1(n, cfg.d_mlp), m2(n, d);
    for (auto& lp : p.layers) {
        kernels::layer_norm_rows<T>(x, lp.ln1_scale, lp.ln1_shift, h1, exec);
        kernels::matvec_rows<T>(h1, lp.w_q, pq, exec);
        kernels::matvec_rows<T>(h1, lp.w_k, pk, exec);
        kernels::matvec_rows<T>(h1, lp.w_v, pv, exec);
        const T scale = kernels::attn_scale<T>(cfg.d_qk);
        for (int64_t ah = 0; ah < cfg.num_attn_heads; ++ah) {
            Matrix<T> qh = detail::head_slice(pq, ah, cfg.d_qk);
            Matrix<T> kh = detail::head_slice(pk, ah, cfg.d_qk);
            Matrix<T> vh = detail::head_slice(pv, ah, cfg.d_v);
            kernels::for_each_row<T>(n, exec, [&](int64_t r) {
                auto o_row = ao.row(r).subspan(ah * cfg.d_v, cfg.d_v);
                std::fill(o_row.begin(), o_row.end(), T(0));
                kernels::attn_row<T>(qh.row(r), kh, vh, r, {}, scale, {}, o_row);
            });
        }

        std::vector<Matrix<T>> fitted;
        for (int64_t h = 0; h < cfg.vq_heads; ++h) {
            Matrix<T> chunk(n, cfg.vq_chunk_dim());
            for (int64_t r = 0; r < n; ++r) {
                auto src = ao.row(r).subspan(h * cfg.vq_chunk_dim(), cfg.vq_chunk_dim());
                std::copy(src.begin(), src.end(), chunk.row(r).begin());
            }
            fitted.push_back(detail::kmeans_fit(chunk, m, 25, calib_rng));
        }
        lp.codebook = VQCodebook<T>::from_entries(std::move(fitted));

        kernels::for_each_row<T>(n, exec, [&](int64_t r) {
            auto dec = vq_quantize<T>(ao.row(r), lp.codebook);
            std::copy(dec.quantized.begin(), dec.quantized.end(), aq.row(r).begin());
        });
        kernels::matvec_rows<T>(aq, lp.w_o, wo_out, exec);
        kernels::add_rows<T>(x, wo_out, x, exec);
        kernels::layer_norm_rows<T>(x, lp.ln2_scale, lp.ln2_shift, h2, exec);
        kernels::affine_rows<T>(h2, lp.w_mlp1, lp.b_mlp1, m1, exec);
        kernels::gelu_rows<T>(m1, g1, exec);
        kernels::affine_rows<T>(g1, lp.w_mlp2, lp.b_mlp2, m2, exec);
        kernels::add_rows<T>(x, m2, x, exec);
    }

    return p;
}

} // namespace vqt
