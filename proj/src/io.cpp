#include "palign/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "palign/errors.hpp"

namespace palign {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::size_t kHeaderBytes = 16;

std::uint32_t read_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

float f32_from_le(const unsigned char* p) {
    const std::uint32_t bits = read_u32_le(p);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

void f32_to_le(float f, unsigned char* p) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    p[0] = static_cast<unsigned char>(bits & 0xff);
    p[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    p[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    p[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

std::string read_whole_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string json_duplicate_key_check(const std::string& text) {
    std::vector<std::set<std::string>> stack;
    auto cb = [&stack](int /*depth*/, nlohmann::json::parse_event_t event,
                       nlohmann::json& parsed) -> bool {
        switch (event) {
            case nlohmann::json::parse_event_t::object_start:
                stack.emplace_back();
                break;
            case nlohmann::json::parse_event_t::object_end:
                stack.pop_back();
                break;
            case nlohmann::json::parse_event_t::key: {
                const std::string key = parsed.get<std::string>();
                if (!stack.empty() && !stack.back().insert(key).second)
                    throw ValidationError("duplicate key \"" + key + "\"");
                break;
            }
            default:
                break;
        }
        return true;
    };
    try {
        auto parsed = nlohmann::json::parse(text, cb);
        (void)parsed;
    } catch (const ValidationError&) {
        throw;
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("JSON parse error: ") + e.what());
    }
    return text;
}

EmbeddingFile read_embeddings(const std::string& path) {
    const std::string raw = read_whole_file(path);
    if (raw.size() < kHeaderBytes)
        throw FormatError("embedding file " + path + ": truncated header (" +
                          std::to_string(raw.size()) + " bytes, need 16)");
    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    if (std::memcmp(bytes, kMagic, 4) != 0)
        throw FormatError("embedding file " + path + ": bad magic at byte 0 (expected \"EMB1\")");
    const std::uint32_t count = read_u32_le(bytes + 4);
    const std::uint32_t dim = read_u32_le(bytes + 8);
    const std::uint32_t reserved = read_u32_le(bytes + 12);
    if (reserved != 0)
        throw FormatError("embedding file " + path + ": reserved field at byte 12 must be zero");
    if (dim == 0)
        throw FormatError("embedding file " + path + ": dim at byte 8 must be positive");
    const std::size_t expected =
        kHeaderBytes + 4ull * static_cast<std::size_t>(count) * static_cast<std::size_t>(dim);
    if (raw.size() != expected)
        throw FormatError("embedding file " + path + ": body length " +
                          std::to_string(raw.size() - kHeaderBytes) + " bytes, header implies " +
                          std::to_string(expected - kHeaderBytes) + " (count=" +
                          std::to_string(count) + ", dim=" + std::to_string(dim) + ")");

    EmbeddingFile out;
    out.count = count;
    out.dim = dim;
    out.data = Mat<float>(count, dim);
    const unsigned char* p = bytes + kHeaderBytes;
    for (std::size_t i = 0; i < out.data.size(); ++i, p += 4) out.data.data()[i] = f32_from_le(p);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (!std::isfinite(static_cast<double>(out.data.data()[i])))
            throw FormatError("embedding file " + path + ": non-finite value at element " +
                              std::to_string(i) + " (byte " + std::to_string(kHeaderBytes + 4 * i) +
                              ")");
    return out;
}

void write_embeddings(const std::string& path, const Mat<float>& matrix) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out.write(kMagic, 4);
    write_u32_le(out, static_cast<std::uint32_t>(matrix.rows()));
    write_u32_le(out, static_cast<std::uint32_t>(matrix.cols()));
    write_u32_le(out, 0);
    std::vector<unsigned char> buf(matrix.size() * 4);
    for (std::size_t i = 0; i < matrix.size(); ++i) f32_to_le(matrix.data()[i], buf.data() + 4 * i);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("short write to " + path);
}

void write_embeddings(const std::string& path, const MatD& matrix) {
    write_embeddings(path, matrix.cast<float>());
}

std::vector<TripletRecord> read_manifest(const std::string& path,
                                         const CategoryRegistry& registry,
                                         std::optional<std::size_t> embedding_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open manifest: " + path);

    std::vector<TripletRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto pos_err = [&](const std::string& msg) {
            return FormatError("manifest " + path + ":" + std::to_string(line_no) + ": " + msg);
        };
        // Skip blank lines; JSONL producers often end with one.
        bool blank = true;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
        if (blank) continue;

        nlohmann::json obj;
        try {
            json_duplicate_key_check(line);
            obj = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw pos_err(e.what());
        }
        if (!obj.is_object()) throw pos_err("expected a JSON object");
        if (!obj.contains("id") || !obj["id"].is_string())
            throw pos_err("missing string field \"id\"");
        if (!obj.contains("embedding_index") || !obj["embedding_index"].is_number_integer())
            throw pos_err("missing integer field \"embedding_index\"");
        const auto idx_raw = obj["embedding_index"].get<long long>();
        if (idx_raw < 0 ||
            (embedding_count && static_cast<std::size_t>(idx_raw) >= *embedding_count))
            throw pos_err("embedding_index " + std::to_string(idx_raw) + " out of range [0, " +
                          (embedding_count ? std::to_string(*embedding_count) : "?") + ")");

        std::vector<std::string> label_keys;
        if (obj.contains("label")) {
            if (obj.contains("labels")) throw pos_err("both \"label\" and \"labels\" present");
            if (!obj["label"].is_string()) throw pos_err("\"label\" must be a string");
            label_keys.push_back(obj["label"].get<std::string>());
        } else if (obj.contains("labels")) {
            if (!obj["labels"].is_array() || obj["labels"].empty())
                throw pos_err("\"labels\" must be a non-empty array");
            for (const auto& l : obj["labels"]) {
                if (!l.is_string()) throw pos_err("\"labels\" entries must be strings");
                label_keys.push_back(l.get<std::string>());
            }
        } else {
            throw pos_err("missing \"label\" or \"labels\"");
        }

        std::optional<std::string> text;
        if (obj.contains("text")) {
            if (!obj["text"].is_string()) throw pos_err("\"text\" must be a string");
            text = obj["text"].get<std::string>();
        }

        // Multi-label sources expand to one single-label record per label.
        for (const auto& key : label_keys) {
            const Category* cat = registry.resolve(key);
            if (!cat) throw pos_err("unknown label \"" + key + "\"");
            TripletRecord rec;
            rec.sample_id = obj["id"].get<std::string>();
            rec.image_feature_index = static_cast<std::size_t>(idx_raw);
            rec.label = cat->id;
            rec.raw_text = text;
            records.push_back(std::move(rec));
        }
    }
    return records;
}

std::string hex_encode(const VecD& values) {
    static const char* kHex = "0123456789abcdef";
    std::string out;
    out.reserve(values.size() * 16);
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int shift = 60; shift >= 0; shift -= 4) out.push_back(kHex[(bits >> shift) & 0xF]);
    }
    return out;
}

VecD hex_decode(const std::string& hex, std::size_t expected, const std::string& what) {
    if (hex.size() != expected * 16)
        throw FormatError("model file: " + what + " payload has " + std::to_string(hex.size()) +
                          " hex chars, expected " + std::to_string(expected * 16));
    VecD out(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        std::uint64_t bits = 0;
        for (std::size_t k = 0; k < 16; ++k) {
            const char c = hex[i * 16 + k];
            std::uint64_t nib;
            if (c >= '0' && c <= '9') nib = static_cast<std::uint64_t>(c - '0');
            else if (c >= 'a' && c <= 'f') nib = static_cast<std::uint64_t>(c - 'a' + 10);
            else if (c >= 'A' && c <= 'F') nib = static_cast<std::uint64_t>(c - 'A' + 10);
            else
                throw FormatError("model file: invalid hex character in " + what + " at offset " +
                                  std::to_string(i * 16 + k));
            bits = (bits << 4) | nib;
        }
        std::memcpy(&out[i], &bits, sizeof(double));
    }
    return out;
}

namespace {

nlohmann::json head_to_json(const ProjectionHead& head) {
    nlohmann::json j;
    j["rows"] = head.weights.rows();
    j["cols"] = head.weights.cols();
    j["weights_hex"] = hex_encode(head.weights.data());
    j["bias_hex"] = hex_encode(head.bias);
    return j;
}

ProjectionHead head_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("rows") || !j.contains("cols") ||
        !j.contains("weights_hex") || !j.contains("bias_hex"))
        throw FormatError("model file: malformed " + what + " head object");
    const auto rows = j["rows"].get<std::size_t>();
    const auto cols = j["cols"].get<std::size_t>();
    if (rows == 0 || cols == 0) throw FormatError("model file: " + what + " head has zero dims");
    ProjectionHead head;
    head.weights = MatD(rows, cols);
    head.weights.data() =
        hex_decode(j["weights_hex"].get<std::string>(), rows * cols, what + " weights");
    head.bias = hex_decode(j["bias_hex"].get<std::string>(), rows, what + " bias");
    return head;
}

}  // namespace

void save_model(const ModelState& model, const std::string& path) {
    model.validate();
    nlohmann::json j;
    j["format"] = "palign-model";
    j["version"] = 1;
    j["joint_dim"] = model.joint_dim();
    j["vision_dim"] = model.vision_dim();
    j["text_dim"] = model.text_dim();
    j["vision_head"] = head_to_json(model.vision_head);
    j["text_head"] = head_to_json(model.text_head);
    j["log_tau_hex"] = hex_encode({model.log_tau});
    j["log_tau"] = model.log_tau;  // informational; the hex field is authoritative
    j["featurizer_seed"] = model.featurizer_seed;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw FormatError("short write to " + path);
}

ModelState load_model(const std::string& path) {
    const std::string text = read_whole_file(path);
    nlohmann::json j;
    try {
        json_duplicate_key_check(text);
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw FormatError("model file " + path + ": " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != std::string("palign-model"))
        throw FormatError("model file " + path + ": missing palign-model format tag");
    ModelState m;
    m.vision_head = head_from_json(j.at("vision_head"), "vision");
    m.text_head = head_from_json(j.at("text_head"), "text");
    if (!j.contains("log_tau_hex"))
        throw FormatError("model file " + path + ": missing log_tau_hex");
    m.log_tau = hex_decode(j["log_tau_hex"].get<std::string>(), 1, "log_tau")[0];
    m.featurizer_seed = j.value("featurizer_seed", std::uint64_t{0});

    const auto expect = [&](const char* key, std::size_t actual) {
        if (j.contains(key) && j[key].get<std::size_t>() != actual)
            throw FormatError("model file " + path + ": " + key + " header says " +
                              std::to_string(j[key].get<std::size_t>()) + " but payload has " +
                              std::to_string(actual));
    };
    expect("joint_dim", m.joint_dim());
    expect("vision_dim", m.vision_dim());
    expect("text_dim", m.text_dim());
    try {
        m.validate();
    } catch (const ValidationError& e) {
        throw FormatError("model file " + path + ": " + e.what());
    }
    return m;
}

}  // namespace palign
