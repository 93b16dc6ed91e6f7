#include "vqt/cli.hpp"

#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "vqt/io.hpp"
#include "vqt/verify.hpp"

namespace vqt::cli {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerifyFailed = 2;
constexpr int kExitIo = 3;

struct GenArgs {
    uint64_t seed = 1;
    int64_t n = 256;
    int64_t num_edits = 100;
    std::string edit_mix = "0.6,0.2,0.2";
    int64_t vocab = 5000;
    std::string out;
};

int cmd_gen_workload(const GenArgs& args) {
    std::vector<double> mix;
    {
        std::istringstream is(args.edit_mix);
        std::string part;
        while (std::getline(is, part, ',')) mix.push_back(std::stod(part));
    }
    if (mix.size() != 3 || std::abs(mix[0] + mix[1] + mix[2] - 1.0) > 1e-9) {
        std::cerr << "gen-workload: edit-mix must be three fractions summing to 1\n";
        return kExitUsage;
    }
    if (args.n < 1 || args.num_edits < 0 || args.vocab < 2) {
        std::cerr << "gen-workload: bad n/num-edits/vocab\n";
        return kExitUsage;
    }

    std::mt19937_64 rng(args.seed);
    std::uniform_int_distribution<int32_t> tok(1, static_cast<int32_t>(args.vocab - 1));
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    io::RevisionStream stream;
    stream.seed = args.seed;
    stream.source = "synthetic";
    io::StreamRecord base;
    base.kind = io::StreamRecord::Kind::Revision;
    base.tokens.resize(static_cast<size_t>(args.n));
    for (auto& t : base.tokens) t = tok(rng);
    stream.records.push_back(std::move(base));

    int64_t len = args.n;
    for (int64_t e = 0; e < args.num_edits; ++e) {
        double c = coin(rng);
        io::StreamRecord rec;
        if (c < mix[0] || (len <= 1 && c >= mix[0] + mix[1])) {
            rec.kind = io::StreamRecord::Kind::Replace;
            rec.slot = static_cast<int64_t>(rng() % static_cast<uint64_t>(len));
            rec.token = tok(rng);
        } else if (c < mix[0] + mix[1]) {
            rec.kind = io::StreamRecord::Kind::Insert;
            rec.slot = static_cast<int64_t>(rng() % static_cast<uint64_t>(len + 1));
            rec.token = tok(rng);
            ++len;
        } else {
            rec.kind = io::StreamRecord::Kind::Delete;
            rec.slot = static_cast<int64_t>(rng() % static_cast<uint64_t>(len));
            --len;
        }
        stream.records.push_back(rec);
    }
    io::write_stream(args.out, stream);
    return kExitOk;
}

const char* record_kind_name(io::StreamRecord::Kind k) {
    switch (k) {
        case io::StreamRecord::Kind::Replace: return "replace";
        case io::StreamRecord::Kind::Insert: return "insert";
        case io::StreamRecord::Kind::Delete: return "delete";
        default: return "revision";
    }
}

template <typename T>
io::Table bench_online_rows(const io::RunConfig& run, const io::RevisionStream& stream, int64_t batch) {
    io::Table table;
    table.columns = {"edit_index",  "edit_type", "slot",         "fraction_modified",
                     "dense_flops", "incremental_flops", "ratio", "reindex_flag",
                     "max_margin_warning"};

    auto params = ModelParams<T>::init_seeded(run.model, run.seed);
    const auto& first = stream.records.front();
    EditSession<T> session(Document::make(first.tokens, run.model), params, run.engine);

    std::vector<EditOp> pending;
    int64_t edit_index = 0;
    int64_t first_slot = 0;
    auto flush = [&](const char* type_name) {
        if (pending.empty()) return;
        auto result = session.apply_edits(pending);
        std::vector<std::string> row;
        row.push_back(std::to_string(edit_index));
        row.push_back(pending.size() == 1 ? type_name : result.report.edit_descriptor);
        row.push_back(std::to_string(first_slot));
        row.push_back(io::format_double(result.report.fraction_modified));
        row.push_back(std::to_string(result.report.dense_flops));
        row.push_back(std::to_string(result.report.incremental_flops));
        row.push_back(io::format_double(result.report.ratio));
        row.push_back(result.reindexed ? "true" : "false");
        row.push_back(result.min_margin < session.settings().margin_flag_threshold
                          ? io::format_double(result.min_margin)
                          : "");
        table.rows.push_back(std::move(row));
        ++edit_index;
        pending.clear();
    };

    const char* last_type = "replace";
    for (size_t i = 1; i < stream.records.size(); ++i) {
        const auto& rec = stream.records[i];
        if (rec.kind == io::StreamRecord::Kind::Revision)
            throw std::invalid_argument("bench-online: stream has more than one full revision");
        if (pending.empty()) first_slot = rec.slot;
        last_type = record_kind_name(rec.kind);
        pending.push_back(rec.as_edit());
        if (static_cast<int64_t>(pending.size()) >= batch) flush(last_type);
    }
    flush(last_type);
    return table;
}

template <typename T>
io::Table bench_offline_rows(const io::RunConfig& run, const io::RevisionStream& stream) {
    io::Table table;
    table.columns = {"pair_index", "n_a", "n_b", "lcs", "fraction_modified", "dense_flops",
                     "incremental_flops", "ratio"};
    auto params = ModelParams<T>::init_seeded(run.model, run.seed);

    std::vector<int32_t> current = stream.records.front().tokens;
    int64_t pair_index = 0;
    for (size_t i = 1; i < stream.records.size(); ++i) {
        const auto& rec = stream.records[i];
        std::vector<int32_t> next = current;
        switch (rec.kind) {
            case io::StreamRecord::Kind::Revision: next = rec.tokens; break;
            case io::StreamRecord::Kind::Replace:
                next.at(static_cast<size_t>(rec.slot)) = rec.token;
                break;
            case io::StreamRecord::Kind::Insert:
                next.insert(next.begin() + rec.slot, rec.token);
                break;
            case io::StreamRecord::Kind::Delete:
                next.erase(next.begin() + rec.slot);
                break;
        }
        auto out = process_offline<T>(current, next, params, run.engine);
        std::vector<std::string> row;
        row.push_back(std::to_string(pair_index));
        row.push_back(std::to_string(current.size()));
        row.push_back(std::to_string(next.size()));
        row.push_back(std::to_string(out.lcs));
        row.push_back(io::format_double(out.report.fraction_modified));
        row.push_back(std::to_string(out.report.dense_flops));
        row.push_back(std::to_string(out.report.incremental_flops));
        row.push_back(io::format_double(out.report.ratio));
        table.rows.push_back(std::move(row));
        ++pair_index;
        current = std::move(next);
    }
    return table;
}

int cmd_verify(const std::string& config_path, int64_t trials, const std::string& precision,
               bool corrupt_bias) {
    if (trials < 1) {
        std::cerr << "verify: trials must be >= 1\n";
        return kExitUsage;
    }
    Precision prec;
    if (precision == "single") prec = Precision::Single;
    else if (precision == "double") prec = Precision::Double;
    else {
        std::cerr << "verify: precision must be 'single' or 'double'\n";
        return kExitUsage;
    }
    io::RunConfig run = io::parse_config_file(config_path);
    auto results = verify::run_suites(run, trials, prec, corrupt_bias);
    bool ok = true;
    for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
        if (!r.detail.empty()) std::cout << " — " << r.detail;
        std::cout << "\n";
        ok = ok && r.passed;
    }
    std::cout << (ok ? "verification passed" : "verification FAILED") << "\n";
    return ok ? kExitOk : kExitVerifyFailed;
}

} // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"vqt — incremental inference engine for vector-quantized transformers"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* sc_gen = app.add_subcommand("gen-workload", "Generate a synthetic revision/edit stream (JSONL)");
    sc_gen->add_option("--seed", gen.seed, "RNG seed");
    sc_gen->add_option("--n", gen.n, "Base revision length (tokens)");
    sc_gen->add_option("--num-edits", gen.num_edits, "Number of atomic edits");
    sc_gen->add_option("--edit-mix", gen.edit_mix, "replace,insert,delete fractions (sum to 1)");
    sc_gen->add_option("--vocab", gen.vocab, "Vocabulary size for sampled tokens");
    sc_gen->add_option("--out", gen.out, "Output JSONL path")->required();

    std::string stream_path, config_path, out_csv;
    bool json_mirror = false;
    int64_t batch = 1;
    auto* sc_on = app.add_subcommand("bench-online", "Replay an edit stream through an edit session");
    sc_on->add_option("--stream", stream_path, "Input JSONL stream")->required();
    sc_on->add_option("--config", config_path, "Model/engine config file")->required();
    sc_on->add_option("--out", out_csv, "Output CSV path")->required();
    sc_on->add_option("--batch", batch, "Apply this many edits as one delta set");
    sc_on->add_flag("--json", json_mirror, "Also write a JSON mirror next to the CSV");

    std::string pairs_path, off_config, off_csv;
    bool off_json = false;
    auto* sc_off = app.add_subcommand("bench-offline", "Process consecutive revision pairs as batches of two");
    sc_off->add_option("--pairs", pairs_path, "Input JSONL stream of revisions")->required();
    sc_off->add_option("--config", off_config, "Model/engine config file")->required();
    sc_off->add_option("--out", off_csv, "Output CSV path")->required();
    sc_off->add_flag("--json", off_json, "Also write a JSON mirror next to the CSV");

    std::string ver_config, ver_precision = "double";
    int64_t trials = 100;
    bool corrupt_bias = false;
    auto* sc_ver = app.add_subcommand("verify", "Run the invariant and oracle suites");
    sc_ver->add_option("--config", ver_config, "Model/engine config file")->required();
    sc_ver->add_option("--trials", trials, "Randomized trial count");
    sc_ver->add_option("--precision", ver_precision, "single or double");
    sc_ver->add_flag("--corrupt-codebook-bias", corrupt_bias,
                     "Inject a codebook-bias fault before checking (debugging aid)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (sc_gen->parsed()) return cmd_gen_workload(gen);
        if (sc_on->parsed()) {
            if (batch < 1) {
                std::cerr << "bench-online: --batch must be >= 1\n";
                return kExitUsage;
            }
            io::RunConfig run = io::parse_config_file(config_path);
            io::RevisionStream stream = io::read_stream(stream_path);
            io::Table table = run.model.precision == Precision::Single
                                  ? bench_online_rows<float>(run, stream, batch)
                                  : bench_online_rows<double>(run, stream, batch);
            io::write_csv(out_csv, table);
            if (json_mirror) io::write_json_mirror(out_csv + ".json", table);
            return kExitOk;
        }
        if (sc_off->parsed()) {
            io::RunConfig run = io::parse_config_file(off_config);
            io::RevisionStream stream = io::read_stream(pairs_path);
            io::Table table = run.model.precision == Precision::Single
                                  ? bench_offline_rows<float>(run, stream)
                                  : bench_offline_rows<double>(run, stream);
            io::write_csv(off_csv, table);
            if (off_json) io::write_json_mirror(off_csv + ".json", table);
            return kExitOk;
        }
        if (sc_ver->parsed()) return cmd_verify(ver_config, trials, ver_precision, corrupt_bias);
    } catch (const io::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerifyFailed;
    }
    return kExitUsage;
}

} // namespace vqt::cli
