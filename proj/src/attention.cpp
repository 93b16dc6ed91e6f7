#include "vqt/impl/attention_impl.ipp"

namespace vqt {

template struct AttentionCache<float>;
template struct AttentionCache<double>;
template struct GTable<float>;
template struct GTable<double>;

template AttentionCache<float> attention_base<float>(const CompressedTensor<float>&,
                                                     const CompressedTensor<float>&,
                                                     const CompressedTensor<float>&, int64_t,
                                                     std::span<const uint8_t>, FlopCounter*, bool,
                                                     kernels::Exec);
template AttentionCache<double> attention_base<double>(const CompressedTensor<double>&,
                                                       const CompressedTensor<double>&,
                                                       const CompressedTensor<double>&, int64_t,
                                                       std::span<const uint8_t>, FlopCounter*, bool,
                                                       kernels::Exec);
template DeltaResult<float> attention_delta<float>(const AttentionCache<float>&, const CompressedTensor<float>&,
                                                   const CompressedTensor<float>&, const CompressedTensor<float>&,
                                                   const DeltaSet&, const std::vector<std::vector<uint8_t>>&,
                                                   FlopCounter*, double, kernels::Exec);
template DeltaResult<double> attention_delta<double>(const AttentionCache<double>&,
                                                     const CompressedTensor<double>&,
                                                     const CompressedTensor<double>&,
                                                     const CompressedTensor<double>&, const DeltaSet&,
                                                     const std::vector<std::vector<uint8_t>>&, FlopCounter*,
                                                     double, kernels::Exec);
template Matrix<float> materialize_delta_output<float>(const AttentionCache<float>&, const DeltaResult<float>&,
                                                       int64_t);
template Matrix<double> materialize_delta_output<double>(const AttentionCache<double>&,
                                                         const DeltaResult<double>&, int64_t);
template VqLinearityResult<float> vq_via_linearity<float>(const AttentionCache<float>&,
                                                          const CompressedTensor<float>&,
                                                          const CompressedTensor<float>&,
                                                          const CompressedTensor<float>&, const DeltaSet&,
                                                          const VQCodebook<float>&,
                                                          const std::vector<std::vector<uint8_t>>&, FlopCounter*,
                                                          double, kernels::Exec);
template VqLinearityResult<double> vq_via_linearity<double>(const AttentionCache<double>&,
                                                            const CompressedTensor<double>&,
                                                            const CompressedTensor<double>&,
                                                            const CompressedTensor<double>&, const DeltaSet&,
                                                            const VQCodebook<double>&,
                                                            const std::vector<std::vector<uint8_t>>&,
                                                            FlopCounter*, double, kernels::Exec);
template RecompressResult<float> recompress_output<float>(const std::vector<std::vector<int32_t>>&,
                                                          const VQCodebook<float>&, const std::vector<int32_t>&,
                                                          FlopCounter*);
template RecompressResult<double> recompress_output<double>(const std::vector<std::vector<int32_t>>&,
                                                            const VQCodebook<double>&,
                                                            const std::vector<int32_t>&, FlopCounter*);

} // namespace vqt
