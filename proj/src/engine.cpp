#include "vqt/impl/engine_impl.ipp"

namespace vqt {

template class EditSession<float>;
template class EditSession<double>;

template OfflineResult<float> process_offline<float>(const std::vector<int32_t>&, const std::vector<int32_t>&,
                                                     const ModelParams<float>&, EngineSettings);
template OfflineResult<double> process_offline<double>(const std::vector<int32_t>&, const std::vector<int32_t>&,
                                                       const ModelParams<double>&, EngineSettings);

} // namespace vqt
