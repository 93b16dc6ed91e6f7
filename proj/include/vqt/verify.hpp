#pragma once

#include <random>
#include <string>
#include <vector>

#include "vqt/io.hpp"

namespace vqt::verify {

struct SuiteResult {
    std::string name;
    bool passed = true;
    std::string detail;
};

/// Seeded random desk-scale configuration (layers <= 4, d_model <= 32,
/// vq_heads in {1,2}, entries <= 16).
ModelConfig random_small_config(std::mt19937_64& rng, Precision prec);

std::vector<int32_t> random_tokens(std::mt19937_64& rng, const ModelConfig& cfg, int64_t n);

EditOp random_edit(std::mt19937_64& rng, int64_t doc_len, const ModelConfig& cfg);

/// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Runs the oracle-equivalence, index-agreement, complexity-slope and
/// format-property suites. `corrupt_codebook_bias` injects a fault before the
/// invariant checks (used to exercise the failure path).
std::vector<SuiteResult> run_suites(const io::RunConfig& cfg, int64_t trials, Precision prec,
                                    bool corrupt_codebook_bias);

} // namespace vqt::verify
