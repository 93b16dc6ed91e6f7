#include "vqt/io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace vqt::io {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);

        auto as_int = [&]() -> int64_t {
            int64_t v = 0;
            auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || p != value.data() + value.size())
                throw std::invalid_argument("config key '" + key + "': expected integer, got '" + value + "'");
            return v;
        };
        auto as_double = [&]() {
            try {
                size_t used = 0;
                double v = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument("");
                return v;
            } catch (...) {
                throw std::invalid_argument("config key '" + key + "': expected number, got '" + value + "'");
            }
        };
        auto as_bool = [&]() {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw std::invalid_argument("config key '" + key + "': expected bool, got '" + value + "'");
        };

        if (key == "num_layers") cfg.model.num_layers = as_int();
        else if (key == "d_model") cfg.model.d_model = as_int();
        else if (key == "d_qk") cfg.model.d_qk = as_int();
        else if (key == "d_v") cfg.model.d_v = as_int();
        else if (key == "num_attn_heads") cfg.model.num_attn_heads = as_int();
        else if (key == "vq_heads") cfg.model.vq_heads = as_int();
        else if (key == "vq_entries_per_head") cfg.model.vq_entries_per_head = as_int();
        else if (key == "d_mlp") cfg.model.d_mlp = as_int();
        else if (key == "vocab_size") cfg.model.vocab_size = as_int();
        else if (key == "max_seq_len") cfg.model.max_seq_len = as_int();
        else if (key == "position_pool_factor") cfg.model.position_pool_factor = as_int();
        else if (key == "precision") {
            if (value == "single") cfg.model.precision = Precision::Single;
            else if (value == "double") cfg.model.precision = Precision::Double;
            else throw std::invalid_argument("config key 'precision': expected single or double");
        }
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(as_int());
        else if (key == "row_fallback_fraction") cfg.engine.row_fallback_fraction = as_double();
        else if (key == "margin_flag_threshold") cfg.engine.margin_flag_threshold = as_double();
        else if (key == "recheck_margin_rel") cfg.engine.recheck_margin_rel = as_double();
        else if (key == "cache_full_attention") cfg.engine.cache_full_attention = as_bool();
        else if (key == "compact_every") cfg.engine.compact_every = as_int();
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    cfg.model.validate();
    return cfg;
}

RunConfig parse_config_file(const std::string& path) { return parse_config_text(read_file(path)); }

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream os;
    os << "num_layers = " << cfg.model.num_layers << "\n"
       << "d_model = " << cfg.model.d_model << "\n"
       << "d_qk = " << cfg.model.d_qk << "\n"
       << "d_v = " << cfg.model.d_v << "\n"
       << "num_attn_heads = " << cfg.model.num_attn_heads << "\n"
       << "vq_heads = " << cfg.model.vq_heads << "\n"
       << "vq_entries_per_head = " << cfg.model.vq_entries_per_head << "\n"
       << "d_mlp = " << cfg.model.d_mlp << "\n"
       << "vocab_size = " << cfg.model.vocab_size << "\n"
       << "max_seq_len = " << cfg.model.max_seq_len << "\n"
       << "position_pool_factor = " << cfg.model.position_pool_factor << "\n"
       << "precision = " << (cfg.model.precision == Precision::Single ? "single" : "double") << "\n"
       << "seed = " << cfg.seed << "\n"
       << "row_fallback_fraction = " << format_double(cfg.engine.row_fallback_fraction) << "\n"
       << "margin_flag_threshold = " << format_double(cfg.engine.margin_flag_threshold) << "\n"
       << "recheck_margin_rel = " << format_double(cfg.engine.recheck_margin_rel) << "\n"
       << "cache_full_attention = " << (cfg.engine.cache_full_attention ? "true" : "false") << "\n"
       << "compact_every = " << cfg.engine.compact_every << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------

RevisionStream read_stream(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    RevisionStream stream;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument("stream line " + std::to_string(lineno) + ": " + e.what());
        }
        StreamRecord rec;
        const std::string type = j.at("type").get<std::string>();
        if (type == "revision") {
            rec.kind = StreamRecord::Kind::Revision;
            rec.tokens = j.at("tokens").get<std::vector<int32_t>>();
            if (j.contains("seed")) stream.seed = j["seed"].get<uint64_t>();
            if (j.contains("source")) stream.source = j["source"].get<std::string>();
        } else if (type == "replace" || type == "insert") {
            rec.kind = type == "replace" ? StreamRecord::Kind::Replace : StreamRecord::Kind::Insert;
            rec.slot = j.at("slot").get<int64_t>();
            rec.token = j.at("token").get<int32_t>();
        } else if (type == "delete") {
            rec.kind = StreamRecord::Kind::Delete;
            rec.slot = j.at("slot").get<int64_t>();
        } else {
            throw std::invalid_argument("stream line " + std::to_string(lineno) + ": unknown record type '" +
                                        type + "'");
        }
        stream.records.push_back(std::move(rec));
    }
    if (stream.records.empty() || stream.records.front().kind != StreamRecord::Kind::Revision)
        throw std::invalid_argument("stream: first record must be a full revision");
    return stream;
}

void write_stream(const std::string& path, const RevisionStream& stream) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    bool first = true;
    for (const auto& rec : stream.records) {
        json j;
        switch (rec.kind) {
            case StreamRecord::Kind::Revision:
                j["type"] = "revision";
                j["tokens"] = rec.tokens;
                if (first) {
                    j["seed"] = stream.seed;
                    j["source"] = stream.source;
                }
                break;
            case StreamRecord::Kind::Replace:
                j["type"] = "replace";
                j["slot"] = rec.slot;
                j["token"] = rec.token;
                break;
            case StreamRecord::Kind::Insert:
                j["type"] = "insert";
                j["slot"] = rec.slot;
                j["token"] = rec.token;
                break;
            case StreamRecord::Kind::Delete:
                j["type"] = "delete";
                j["slot"] = rec.slot;
                break;
        }
        out << j.dump() << "\n";
        first = false;
    }
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_csv(const std::string& path, const Table& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (size_t c = 0; c < table.columns.size(); ++c)
        out << table.columns[c] << (c + 1 < table.columns.size() ? "," : "\n");
    for (const auto& row : table.rows)
        for (size_t c = 0; c < row.size(); ++c) out << row[c] << (c + 1 < row.size() ? "," : "\n");
}

void write_json_mirror(const std::string& path, const Table& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    json rows = json::array();
    for (const auto& row : table.rows) {
        json obj = json::object();
        for (size_t c = 0; c < table.columns.size(); ++c) obj[table.columns[c]] = row[c];
        rows.push_back(obj);
    }
    out << rows.dump(2) << "\n";
}

Table read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    Table t;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                fields.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur.push_back(ch);
            }
        }
        fields.push_back(cur);
        if (header) {
            t.columns = std::move(fields);
            header = false;
        } else {
            t.rows.push_back(std::move(fields));
        }
    }
    return t;
}

} // namespace vqt::io
