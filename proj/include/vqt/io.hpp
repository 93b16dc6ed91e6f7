#pragma once

#include <string>
#include <vector>

#include "vqt/engine.hpp"
#include "vqt/model.hpp"

namespace vqt::io {

/// Thrown for file-system problems (maps to exit code 3 in the CLI).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key = value config file mirroring ModelConfig plus seed and engine
/// thresholds. '#' starts a comment; unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    uint64_t seed = 1;
    EngineSettings engine;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
std::string config_to_text(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Revision streams: JSONL, one record per line. A full revision is
// {"type":"revision","tokens":[...]}; atomic edits are
// {"type":"replace"|"insert"|"delete","slot":i,"token":t}. The first record
// must be a revision.
// ---------------------------------------------------------------------------

struct StreamRecord {
    enum class Kind { Revision, Replace, Insert, Delete };
    Kind kind = Kind::Revision;
    std::vector<int32_t> tokens;
    int64_t slot = 0;
    int32_t token = 0;

    EditOp as_edit() const {
        switch (kind) {
            case Kind::Replace: return EditOp::replace(slot, token);
            case Kind::Insert: return EditOp::insert(slot, token);
            case Kind::Delete: return EditOp::erase(slot);
            default: throw std::logic_error("as_edit on a revision record");
        }
    }
};

struct RevisionStream {
    std::vector<StreamRecord> records;
    uint64_t seed = 0;
    std::string source;
};

RevisionStream read_stream(const std::string& path);
void write_stream(const std::string& path, const RevisionStream& stream);

// ---------------------------------------------------------------------------
// Report output: CSV with fixed columns, optional JSON mirror.
// ---------------------------------------------------------------------------

/// Deterministic shortest-roundtrip formatting so repeated runs are
/// byte-identical.
std::string format_double(double v);

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
};

void write_csv(const std::string& path, const Table& table);
void write_json_mirror(const std::string& path, const Table& table);
Table read_csv(const std::string& path);

} // namespace vqt::io
