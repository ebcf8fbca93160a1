#include "infosteer/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "infosteer/error.hpp"

namespace infosteer {

namespace {

using json = nlohmann::json;

constexpr const char* kHeaderPrefix = "infosteer-checkpoint v1 manifest_bytes=";

template <typename T>
constexpr Precision precision_of() {
    return sizeof(T) == 4 ? Precision::f32 : Precision::f64;
}

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d", c.d},
                {"d_m", c.d_m},               {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len},
                {"ffn_variant", to_string(c.ffn_variant)}, {"tie_decoder", c.tie_decoder}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.d_m = j.at("d_m").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.ffn_variant = parse_ffn_variant(j.at("ffn_variant").get<std::string>());
    c.tie_decoder = j.at("tie_decoder").get<bool>();
    c.validate();
    return c;
}

struct Manifest {
    json doc;
    std::uint64_t data_start = 0;
};

template <typename U>
void append_le(std::string& out, std::span<const U> values) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * sizeof(U));
    std::memcpy(out.data() + start, values.data(), values.size() * sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::reverse(out.begin() + start + i * sizeof(U), out.begin() + start + (i + 1) * sizeof(U));
        }
    }
}

template <typename U>
U read_le(const char* p) {
    char buf[sizeof(U)];
    std::memcpy(buf, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(buf, buf + sizeof(U));
    }
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Manifest parse_manifest(const std::string& bytes, const std::filesystem::path& path) {
    const std::size_t eol = bytes.find('\n');
    const std::string prefix(kHeaderPrefix);
    if (eol == std::string::npos || bytes.compare(0, prefix.size(), prefix) != 0) {
        throw DataError(path.string() + ": not an infosteer checkpoint (bad header)");
    }
    std::size_t manifest_bytes = 0;
    try {
        manifest_bytes = std::stoull(bytes.substr(prefix.size(), eol - prefix.size()));
    } catch (const std::exception&) {
        throw DataError(path.string() + ": malformed manifest length");
    }
    if (eol + 1 + manifest_bytes > bytes.size()) {
        throw DataError(path.string() + ": truncated manifest");
    }
    Manifest m;
    try {
        m.doc = json::parse(bytes.substr(eol + 1, manifest_bytes));
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": malformed manifest: " + e.what());
    }
    if (m.doc.value("version", 0) != kCheckpointVersion) {
        throw DataError(path.string() + ": unsupported checkpoint version " + m.doc.value("version", json()).dump());
    }
    m.data_start = eol + 1 + manifest_bytes;
    return m;
}

CheckpointState state_from_json(const json& doc) {
    CheckpointState st;
    st.step = doc.at("step").get<std::uint64_t>();
    st.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& spec : doc.at("steering")) {
        std::map<std::string, std::string> fields;
        for (const auto& [k, v] : spec.items()) {
            fields[k] = v.get<std::string>();
        }
        st.steering.push_back(steering_from_fields(fields));
    }
    for (const auto& [k, v] : doc.at("metadata").items()) {
        st.metadata[k] = v.get<std::string>();
    }
    return st;
}

}  // namespace

bool checkpoint_exists(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / kCheckpointFile);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Transformer<T>& model, const CheckpointState& state,
                     const std::vector<NamedTensor<T>>& extra, bool overwrite) {
    namespace fs = std::filesystem;
    const fs::path file = dir / kCheckpointFile;
    if (fs::exists(file) && !overwrite) {
        throw IoError("checkpoint " + file.string() + " already exists (set overwrite to replace it)");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }

    json tensors = json::array();
    std::string blob;
    auto add_tensor = [&](const std::string& name, const Tensor<T>& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"count", t.numel()}});
        append_le<T>(blob, t.data());
    };
    for (const auto& p : model.named_parameters()) {
        add_tensor(p.name, p.tensor);
    }
    for (const auto& p : extra) {
        add_tensor(p.name, p.tensor);
    }
    json steering = json::array();
    for (const auto& spec : state.steering) {
        json fields = json::object();
        for (const auto& [k, v] : steering_to_fields(spec)) {
            fields[k] = v;
        }
        steering.push_back(fields);
    }
    json metadata = json::object();
    for (const auto& [k, v] : state.metadata) {
        metadata[k] = v;
    }
    const json doc{{"format", "infosteer-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"precision", to_string(precision_of<T>())},
                   {"byte_order", "little"},
                   {"config", config_to_json(model.config())},
                   {"step", state.step},
                   {"seed", state.seed},
                   {"steering", steering},
                   {"metadata", metadata},
                   {"tensors", tensors}};
    const std::string manifest = doc.dump(1) + "\n";

    const fs::path tmp = dir / (std::string(kCheckpointFile) + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out << kHeaderPrefix << manifest.size() << '\n' << manifest;
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        out.flush();
        if (!out) {
            throw IoError("failed writing " + tmp.string());
        }
    }
    fs::rename(tmp, file, ec);
    if (ec) {
        throw IoError("cannot move checkpoint into place at " + file.string() + ": " + ec.message());
    }
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    const std::filesystem::path file = dir / kCheckpointFile;
    const Manifest m = parse_manifest(read_file(file), file);
    CheckpointInfo info;
    try {
        info.config = config_from_json(m.doc.at("config"));
        info.precision = parse_precision(m.doc.at("precision").get<std::string>());
        info.state = state_from_json(m.doc);
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": malformed manifest: " + e.what());
    }
    return info;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    const std::filesystem::path file = dir / kCheckpointFile;
    const std::string bytes = read_file(file);
    const Manifest m = parse_manifest(bytes, file);
    try {
        const ModelConfig config = config_from_json(m.doc.at("config"));
        const Precision stored = parse_precision(m.doc.at("precision").get<std::string>());
        const std::size_t width = stored == Precision::f32 ? 4 : 8;
        LoadedCheckpoint<T> out{Transformer<T>(config, 0), state_from_json(m.doc), {}};

        std::map<std::string, Tensor<T>> params;
        for (const auto& p : out.model.named_parameters()) {
            params.emplace(p.name, p.tensor);
        }
        std::size_t restored = 0;
        for (const auto& entry : m.doc.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            const std::size_t offset = entry.at("offset").get<std::size_t>();
            const std::size_t count = entry.at("count").get<std::size_t>();
            if (shape_numel(shape) != count) {
                throw DataError(file.string() + ": tensor " + name + " count does not match its shape");
            }
            if (m.data_start + offset + count * width > bytes.size()) {
                throw DataError(file.string() + ": tensor " + name + " runs past the end of the file");
            }
            const char* src = bytes.data() + m.data_start + offset;
            std::vector<T> values(count);
            for (std::size_t i = 0; i < count; ++i) {
                values[i] = stored == Precision::f32 ? static_cast<T>(read_le<float>(src + i * 4))
                                                     : static_cast<T>(read_le<double>(src + i * 8));
            }
            auto it = params.find(name);
            if (it == params.end()) {
                out.extra.push_back({name, Tensor<T>(shape, std::move(values))});
                continue;
            }
            if (it->second.shape() != shape) {
                throw DataError(file.string() + ": tensor " + name + " has shape " + shape_to_string(shape) +
                                ", model expects " + shape_to_string(it->second.shape()));
            }
            std::copy(values.begin(), values.end(), it->second.mutable_data().begin());
            ++restored;
        }
        if (restored != params.size()) {
            throw DataError(file.string() + ": checkpoint is missing " + std::to_string(params.size() - restored) +
                            " parameter tensors");
        }
        return out;
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": malformed manifest: " + e.what());
    }
}

template void save_checkpoint<float>(const std::filesystem::path&, const Transformer<float>&, const CheckpointState&,
                                     const std::vector<NamedTensor<float>>&, bool);
template void save_checkpoint<double>(const std::filesystem::path&, const Transformer<double>&,
                                      const CheckpointState&, const std::vector<NamedTensor<double>>&, bool);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace infosteer
