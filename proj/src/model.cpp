#include "vqt/impl/model_impl.ipp"

#include <sstream>

namespace vqt {

namespace kernels {

namespace detail {
std::atomic<int>& exec_flag() {
    static std::atomic<int> flag{1};
    return flag;
}
} // namespace detail

Exec default_exec() { return detail::exec_flag().load() ? Exec::Parallel : Exec::Serial; }
void set_default_exec(Exec e) { detail::exec_flag().store(e == Exec::Parallel ? 1 : 0); }

} // namespace kernels

std::string ModelConfig::canonical_string() const {
    std::ostringstream os;
    os << "L=" << num_layers << ";d=" << d_model << ";dqk=" << d_qk << ";dv=" << d_v
       << ";H=" << num_attn_heads << ";h=" << vq_heads << ";m=" << vq_entries_per_head
       << ";dmlp=" << d_mlp << ";V=" << vocab_size << ";N=" << max_seq_len
       << ";G=" << position_pool_factor << ";prec=" << (precision == Precision::Single ? "f32" : "f64");
    return os.str();
}

uint64_t ModelConfig::fingerprint() const {
    // FNV-1a over the canonical string.
    uint64_t h = 1469598103934665603ull;
    for (char c : canonical_string()) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t dense_reference_ops(const ModelConfig& cfg, int64_t b, int64_t n) {
    return dense_reference_ops(cfg.num_layers, cfg.d_model, cfg.d_qk, cfg.d_v, cfg.num_attn_heads,
                               cfg.vq_heads, cfg.vq_entries_per_head, cfg.d_mlp, b, n);
}

template struct ModelParams<float>;
template struct ModelParams<double>;

template Matrix<float> gelu_attention<float>(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&,
                                             bool, std::span<const uint8_t>, FlopCounter*, Matrix<float>*,
                                             kernels::Exec);
template Matrix<double> gelu_attention<double>(const Matrix<double>&, const Matrix<double>&,
                                               const Matrix<double>&, bool, std::span<const uint8_t>,
                                               FlopCounter*, Matrix<double>*, kernels::Exec);
template DenseTrace<float> dense_forward<float>(std::span<const int32_t>, std::span<const int64_t>,
                                                const ModelParams<float>&, std::span<const uint8_t>,
                                                FlopCounter*, kernels::Exec);
template DenseTrace<double> dense_forward<double>(std::span<const int32_t>, std::span<const int64_t>,
                                                  const ModelParams<double>&, std::span<const uint8_t>,
                                                  FlopCounter*, kernels::Exec);

} // namespace vqt
