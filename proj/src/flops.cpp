#include "vqt/flops.hpp"

namespace vqt {

const char* flop_category_name(FlopCategory c) {
    switch (c) {
        case FlopCategory::AttentionBase: return "attention-base";
        case FlopCategory::AttentionDelta: return "attention-delta";
        case FlopCategory::PerLocation: return "per-location";
        case FlopCategory::BinaryElementwise: return "binary-elementwise";
        case FlopCategory::VqScores: return "vq-scores";
        case FlopCategory::ReindexRecompute: return "reindex-recompute";
        case FlopCategory::Bookkeeping: return "bookkeeping-comparisons";
        default: return "unknown";
    }
}

uint64_t dense_reference_ops(int64_t num_layers, int64_t d_model, int64_t d_qk, int64_t d_v,
                             int64_t num_attn_heads, int64_t vq_heads, int64_t vq_entries,
                             int64_t d_mlp, int64_t b, int64_t n) {
    const uint64_t un = static_cast<uint64_t>(n);
    uint64_t per_layer = 0;
    // Pre-attention layer norm.
    per_layer += un * cost::layer_norm(d_model);
    // Q, K, V projections.
    per_layer += un * (2 * cost::matvec(d_model, num_attn_heads * d_qk) +
                       cost::matvec(d_model, num_attn_heads * d_v));
    // Causal attention: row r attends to r+1 keys.
    per_layer += static_cast<uint64_t>(num_attn_heads) * (un * (un + 1) / 2) * cost::attn_entry(d_qk, d_v);
    // Quantization scores.
    per_layer += un * cost::vq_scores(d_model, vq_heads, vq_entries);
    // Output projection, residual add.
    per_layer += un * cost::matvec(num_attn_heads * d_v, d_model);
    per_layer += un * cost::add_vec(d_model);
    // Pre-MLP layer norm, MLP, residual add.
    per_layer += un * cost::layer_norm(d_model);
    if (d_mlp > 0) per_layer += un * cost::mlp(d_model, d_mlp);
    per_layer += un * cost::add_vec(d_model);
    return static_cast<uint64_t>(b) * static_cast<uint64_t>(num_layers) * per_layer;
}

SpeedupReport SpeedupReport::make(uint64_t dense, uint64_t incremental, double fraction,
                                  std::string descriptor, uint64_t fingerprint) {
    SpeedupReport r;
    r.dense_flops = dense;
    r.incremental_flops = incremental;
    r.ratio = static_cast<double>(dense) / static_cast<double>(incremental == 0 ? 1 : incremental);
    r.fraction_modified = fraction;
    r.edit_descriptor = std::move(descriptor);
    r.config_fingerprint = fingerprint;
    return r;
}

} // namespace vqt
