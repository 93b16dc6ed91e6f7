#include "vqt/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vqt/compressed.hpp"

namespace vqt::verify {

ModelConfig random_small_config(std::mt19937_64& rng, Precision prec) {
    auto pick = [&](std::initializer_list<int64_t> xs) {
        std::vector<int64_t> v(xs);
        return v[std::uniform_int_distribution<size_t>(0, v.size() - 1)(rng)];
    };
    ModelConfig cfg;
    cfg.num_layers = pick({1, 2, 3, 4});
    cfg.num_attn_heads = pick({1, 2});
    cfg.vq_heads = pick({1, 2});
    int64_t dv = pick({4, 8, 16});
    cfg.d_model = cfg.num_attn_heads * dv;
    while (cfg.d_model % cfg.vq_heads != 0 || cfg.d_model > 32) {
        dv = pick({4, 8, 16});
        cfg.d_model = cfg.num_attn_heads * dv;
    }
    cfg.d_v = dv;
    cfg.d_qk = pick({4, 8});
    cfg.vq_entries_per_head = pick({4, 8, 16});
    cfg.d_mlp = pick({8, 16, 32});
    cfg.vocab_size = 64;
    cfg.max_seq_len = 64;
    cfg.position_pool_factor = 100;
    cfg.precision = prec;
    cfg.validate();
    return cfg;
}

std::vector<int32_t> random_tokens(std::mt19937_64& rng, const ModelConfig& cfg, int64_t n) {
    std::uniform_int_distribution<int32_t> dist(1, static_cast<int32_t>(cfg.vocab_size - 1));
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (auto& x : t) x = dist(rng);
    return t;
}

EditOp random_edit(std::mt19937_64& rng, int64_t doc_len, const ModelConfig& cfg) {
    std::uniform_int_distribution<int32_t> tok(1, static_cast<int32_t>(cfg.vocab_size - 1));
    std::uniform_int_distribution<int> kind_dist(0, 2);
    int kind = kind_dist(rng);
    if (doc_len <= 1 && kind == 2) kind = 0;
    if (doc_len >= cfg.max_seq_len && kind == 1) kind = 0;
    switch (kind) {
        case 1: {
            std::uniform_int_distribution<int64_t> slot(0, doc_len);
            return EditOp::insert(slot(rng), tok(rng));
        }
        case 2: {
            std::uniform_int_distribution<int64_t> slot(0, doc_len - 1);
            return EditOp::erase(slot(rng));
        }
        default: {
            std::uniform_int_distribution<int64_t> slot(0, doc_len - 1);
            return EditOp::replace(slot(rng), tok(rng));
        }
    }
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> order(v.size());
        for (size_t i = 0; i < v.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        size_t i = 0;
        while (i < order.size()) {
            size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    auto rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    return num / std::sqrt(dx * dy);
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    const size_t n = x.size();
    std::vector<double> lx(n), ly(n);
    for (size_t i = 0; i < n; ++i) {
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double num = 0, den = 0;
    for (size_t i = 0; i < n; ++i) {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    return num / den;
}

namespace {

template <typename T>
SuiteResult suite_format_properties(uint64_t seed, int64_t trials) {
    SuiteResult res{"format-property", true, ""};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    for (int64_t t = 0; t < trials; ++t) {
        const int64_t b = 1 + static_cast<int64_t>(rng() % 4);
        const int64_t n = 2 + static_cast<int64_t>(rng() % 12);
        const int64_t d = 1 + static_cast<int64_t>(rng() % 6);
        Tensor3<T> dense(b, n, d);
        // Mostly-shared rows with sparse deviations, like real revisions.
        for (int64_t j = 0; j < n; ++j) {
            std::vector<T> shared(static_cast<size_t>(d));
            for (auto& v : shared) v = T(val(rng));
            for (int64_t i = 0; i < b; ++i) {
                auto row = dense.at(i, j);
                std::copy(shared.begin(), shared.end(), row.begin());
                if (rng() % 5 == 0) row[static_cast<int64_t>(rng() % static_cast<uint64_t>(d))] += T(0.5);
            }
        }
        auto ct = compress<T>(dense);
        if (!ct.check().empty()) return {"format-property", false, "canonical form after compress: " + ct.check()};
        auto back = decompress<T>(ct);
        if (std::memcmp(back.data(), dense.data(), sizeof(T) * b * n * d) != 0)
            return {"format-property", false, "decompress(compress(x)) != x"};

        auto op = make_gelu_op<T>(d);
        auto mapped = apply_per_location<T>(op, ct);
        auto mapped_dense = decompress<T>(mapped);
        Tensor3<T> expect(b, n, d);
        for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < n; ++j) op.apply(dense.at(i, j), expect.at(i, j));
        if (std::memcmp(mapped_dense.data(), expect.data(), sizeof(T) * b * n * d) != 0)
            return {"format-property", false, "apply_per_location does not commute with decompress"};

        auto sum = binary_elementwise<T>(make_add_op<T>(), ct, mapped);
        auto sum_dense = decompress<T>(sum);
        for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < n; ++j)
                for (int64_t c = 0; c < d; ++c) {
                    T want = dense.at(i, j)[c] + expect.at(i, j)[c];
                    if (std::memcmp(&want, &sum_dense.at(i, j)[c], sizeof(T)) != 0)
                        return {"format-property", false, "binary_elementwise does not commute with decompress"};
                }

        auto cleaned = gc_codebook<T>(sum);
        auto cleaned_dense = decompress<T>(cleaned);
        if (std::memcmp(cleaned_dense.data(), sum_dense.data(), sizeof(T) * b * n * d) != 0)
            return {"format-property", false, "gc_codebook changed decompressed values"};
        if (!cleaned.check().empty()) return {"format-property", false, "gc canonical form: " + cleaned.check()};
    }
    std::ostringstream os;
    os << trials << " randomized trials";
    res.detail = os.str();
    return res;
}

template <typename T>
SuiteResult suite_oracle_equivalence(uint64_t seed, int64_t trials, double tol) {
    SuiteResult res{"oracle-equivalence", true, ""};
    std::mt19937_64 rng(seed);
    double worst = 0;
    for (int64_t t = 0; t < trials; ++t) {
        ModelConfig cfg = random_small_config(rng, std::is_same_v<T, float> ? Precision::Single : Precision::Double);
        auto params = ModelParams<T>::init_seeded(cfg, rng());
        const int64_t n = 8 + static_cast<int64_t>(rng() % 57);
        auto doc = Document::make(random_tokens(rng, cfg, n), cfg);
        EditSession<T> session(doc, params);
        auto edit = random_edit(rng, n, cfg);
        auto result = session.apply_edit(edit);
        auto trace = dense_forward<T>(session.document().tokens, session.document().positions.positions, params);
        double dev = 0;
        for (int64_t r = 0; r < result.hidden.rows(); ++r)
            dev = std::max(dev, double(max_abs_diff<T>(result.hidden.row(r), trace.final_hidden.row(r))));
        worst = std::max(worst, dev);
        if (dev > tol) {
            std::ostringstream os;
            os << "trial " << t << ": max-abs " << dev << " > " << tol;
            return {"oracle-equivalence", false, os.str()};
        }
    }
    std::ostringstream os;
    os << trials << " trials, worst max-abs " << worst;
    res.detail = os.str();
    return res;
}

SuiteResult suite_index_agreement(uint64_t seed, int64_t trials) {
    SuiteResult res{"index-agreement", true, ""};
    std::mt19937_64 rng(seed);
    int64_t flagged = 0;
    double min_margin = std::numeric_limits<double>::infinity();
    for (int64_t t = 0; t < trials; ++t) {
        ModelConfig cfg = random_small_config(rng, Precision::Double);
        auto params = ModelParams<double>::init_seeded(cfg, rng());
        const auto& lp = params.layers[0];
        const int64_t n = 6 + static_cast<int64_t>(rng() % 10);
        const int64_t dqk = cfg.num_attn_heads * cfg.d_qk;
        const int64_t dv = cfg.num_attn_heads * cfg.d_v;

        std::uniform_real_distribution<double> val(-0.5, 0.5);
        Tensor3<double> q(2, n, dqk), k(2, n, dqk), v(2, n, dv);
        for (auto* tns : {&q, &k, &v})
            for (int64_t j = 0; j < n; ++j) {
                for (int64_t c = 0; c < tns->dim(); ++c) tns->at(0, j)[c] = val(rng);
                std::copy(tns->at(0, j).begin(), tns->at(0, j).end(), tns->at(1, j).begin());
            }
        // One modified location in the second row.
        const int64_t p = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
        for (auto* tns : {&q, &k, &v})
            for (int64_t c = 0; c < tns->dim(); ++c) tns->at(1, p)[c] = val(rng);

        auto qc = compress<double>(q), kc = compress<double>(k), vc = compress<double>(v);
        auto deltas = DeltaSet::from_tensors<double>(qc, kc, vc);
        auto cache = attention_base<double>(qc, kc, vc, cfg.num_attn_heads);
        auto lin = vq_via_linearity<double>(cache, qc, kc, vc, deltas, lp.codebook);

        for (int64_t row = 0; row < 2; ++row) {
            auto dres = attention_delta<double>(cache, qc, kc, vc, deltas);
            auto dense_rows = materialize_delta_output<double>(cache, dres, row);
            for (int64_t r = 0; r < n; ++r) {
                auto dec = vq_quantize<double>(dense_rows.row(r), lp.codebook);
                double margin = double(lin.margins[static_cast<size_t>(row)][static_cast<size_t>(r)]);
                min_margin = std::min(min_margin, margin);
                if (margin <= 1e-9) {
                    ++flagged;
                    continue;
                }
                for (int64_t hh = 0; hh < cfg.vq_heads; ++hh)
                    if (dec.indices[static_cast<size_t>(hh)] !=
                        lin.indices[static_cast<size_t>(row)][static_cast<size_t>(r * cfg.vq_heads + hh)]) {
                        std::ostringstream os;
                        os << "trial " << t << " row " << row << " pos " << r << ": index mismatch at margin "
                           << margin;
                        return {"index-agreement", false, os.str()};
                    }
            }
        }
    }
    std::ostringstream os;
    os << trials << " trials, min margin " << min_margin << ", flagged " << flagged;
    res.detail = os.str();
    return res;
}

template <typename T>
SuiteResult suite_complexity_slope(const io::RunConfig& run) {
    SuiteResult res{"complexity-slope", true, ""};
    ModelConfig cfg = run.model;
    cfg.max_seq_len = std::max<int64_t>(cfg.max_seq_len, 320);
    auto params = ModelParams<T>::init_seeded(cfg, run.seed);
    std::mt19937_64 rng(run.seed ^ 0x5bf03635u);
    const int64_t n = 256;
    auto rev_a = random_tokens(rng, cfg, n);
    std::vector<double> fractions, ratios;
    for (int64_t e : {1, 4, 16, 64}) {
        auto rev_b = rev_a;
        std::uniform_int_distribution<int32_t> tok(1, static_cast<int32_t>(cfg.vocab_size - 1));
        std::vector<int64_t> slots(static_cast<size_t>(n));
        std::iota(slots.begin(), slots.end(), 0);
        std::shuffle(slots.begin(), slots.end(), rng);
        for (int64_t i = 0; i < e; ++i) {
            int32_t t = tok(rng);
            while (t == rev_a[static_cast<size_t>(slots[static_cast<size_t>(i)])]) t = tok(rng);
            rev_b[static_cast<size_t>(slots[static_cast<size_t>(i)])] = t;
        }
        auto out = process_offline<T>(rev_a, rev_b, params, run.engine);
        fractions.push_back(static_cast<double>(e) / static_cast<double>(n));
        ratios.push_back(out.report.ratio);
    }
    double rho = spearman(ratios, fractions);
    double slope = loglog_slope(fractions, ratios);
    std::ostringstream os;
    os << "spearman " << rho << ", log-log slope " << slope;
    res.detail = os.str();
    if (!(rho < -0.8)) {
        res.passed = false;
        res.detail += " (expected spearman < -0.8)";
    }
    if (!(slope > -1.3 && slope < -0.7)) {
        res.passed = false;
        res.detail += " (expected slope in [-1.3, -0.7])";
    }
    return res;
}

template <typename T>
SuiteResult suite_codebook_invariants(const io::RunConfig& run, bool corrupt) {
    auto params = ModelParams<T>::init_seeded(run.model, run.seed);
    if (corrupt) params.layers[0].codebook.biases[0][0] += T(0.5);
    for (size_t l = 0; l < params.layers.size(); ++l) {
        std::string bad = params.layers[l].codebook.check();
        if (!bad.empty())
            return {"codebook-invariants", false, "layer " + std::to_string(l) + ": " + bad};
    }
    return {"codebook-invariants", true, std::to_string(params.layers.size()) + " layers checked"};
}

} // namespace

std::vector<SuiteResult> run_suites(const io::RunConfig& cfg, int64_t trials, Precision prec,
                                    bool corrupt_codebook_bias) {
    if (trials < 1) throw std::invalid_argument("verify: trials must be >= 1");
    std::vector<SuiteResult> out;
    const uint64_t seed = cfg.seed;
    if (prec == Precision::Single) {
        out.push_back(suite_codebook_invariants<float>(cfg, corrupt_codebook_bias));
        out.push_back(suite_format_properties<float>(seed + 1, trials));
        out.push_back(suite_oracle_equivalence<float>(seed + 2, std::max<int64_t>(1, trials / 10), 1e-5));
        out.push_back(suite_index_agreement(seed + 3, std::max<int64_t>(1, trials / 10)));
        out.push_back(suite_complexity_slope<float>(cfg));
    } else {
        out.push_back(suite_codebook_invariants<double>(cfg, corrupt_codebook_bias));
        out.push_back(suite_format_properties<double>(seed + 1, trials));
        out.push_back(suite_oracle_equivalence<double>(seed + 2, std::max<int64_t>(1, trials / 10), 1e-10));
        out.push_back(suite_index_agreement(seed + 3, std::max<int64_t>(1, trials / 10)));
        out.push_back(suite_complexity_slope<double>(cfg));
    }
    return out;
}

} // namespace vqt::verify
