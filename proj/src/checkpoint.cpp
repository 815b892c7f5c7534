#include "t2tbio/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "t2tbio/error.hpp"

namespace t2tbio {
namespace {

namespace fs = std::filesystem;

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename T>
void write_le(std::ofstream& f, std::span<const T> values) {
    static_assert(std::is_floating_point_v<T>);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<unsigned char> buf(values.size() * sizeof(T));
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<U>(values[i]);
        for (std::size_t b = 0; b < sizeof(T); ++b) buf[i * sizeof(T) + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void read_le(const std::string& bytes, std::size_t offset, std::span<T> out) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < out.size(); ++i) {
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) {
            bits |= static_cast<U>(static_cast<unsigned char>(bytes[offset + i * sizeof(T) + b])) << (8 * b);
        }
        out[i] = std::bit_cast<T>(bits);
    }
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot open " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

template <typename T>
nlohmann::ordered_json manifest_for(const ModelConfig& cfg, const ParamStore<T>& params) {
    nlohmann::ordered_json m;
    m["format"] = "t2tbio-checkpoint v1";
    m["dtype"] = dtype_name<T>();
    m["config"] = model_config_to_json(cfg);
    auto tensors = nlohmann::ordered_json::array();
    for (const auto& t : params.layout()) {
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"offset", t.offset * sizeof(T)},
                           {"nbytes", t.size * sizeof(T)}});
    }
    m["tensors"] = std::move(tensors);
    m["total_bytes"] = params.size() * sizeof(T);
    return m;
}

template <typename T>
ParamStore<T> params_from(const nlohmann::json& manifest, const std::string& blob, const ModelConfig& cfg) {
    if (manifest.at("dtype").get<std::string>() != dtype_name<T>()) {
        fail(ErrorKind::data, "checkpoint dtype mismatch: expected " + std::string(dtype_name<T>()));
    }
    ParamStore<T> p(cfg);
    const auto& tensors = manifest.at("tensors");
    if (!tensors.is_array() || tensors.size() != p.layout().size()) fail(ErrorKind::data, "checkpoint tensor list mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = p.layout()[i];
        if (tensors[i].at("name").get<std::string>() != t.name ||
            tensors[i].at("shape").get<std::vector<std::size_t>>() != t.shape ||
            tensors[i].at("offset").get<std::size_t>() != t.offset * sizeof(T)) {
            fail(ErrorKind::data, "checkpoint tensor " + t.name + " does not match config");
        }
    }
    if (blob.size() != p.size() * sizeof(T)) fail(ErrorKind::data, "weights.bin has wrong size");
    read_le<T>(blob, 0, p.values());
    if (!p.all_finite()) fail(ErrorKind::numeric, "checkpoint contains non-finite values");
    return p;
}

}  // namespace

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},
            {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads},
            {"d_ff", cfg.d_ff},
            {"n_encoder_layers", cfg.n_encoder_layers},
            {"n_decoder_layers", cfg.n_decoder_layers},
            {"rel_pos_buckets", cfg.rel_pos_buckets},
            {"rel_pos_max_distance", cfg.rel_pos_max_distance},
            {"max_seq_len", cfg.max_seq_len},
            {"dropout_rate", cfg.dropout_rate}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.n_encoder_layers = j.at("n_encoder_layers").get<std::size_t>();
        c.n_decoder_layers = j.at("n_decoder_layers").get<std::size_t>();
        c.rel_pos_buckets = j.at("rel_pos_buckets").get<std::size_t>();
        c.rel_pos_max_distance = j.at("rel_pos_max_distance").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.dropout_rate = j.at("dropout_rate").get<double>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, std::string("bad model config in checkpoint: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const fs::path& dir, const ModelConfig& cfg, const TrainState& state, const nlohmann::json& meta) {
    fs::create_directories(dir);
    auto manifest = manifest_for(cfg, state.params);
    manifest["optimizer"] = {{"name", "adam"},
                             {"beta1", AdamHyper{}.beta1},
                             {"beta2", AdamHyper{}.beta2},
                             {"eps", AdamHyper{}.eps},
                             {"step", state.opt.step}};
    manifest["step"] = state.step;
    manifest["meta"] = meta;
    {
        std::ofstream f(dir / "manifest.json", std::ios::binary);
        f << manifest.dump(2) << '\n';
        if (!f) fail(ErrorKind::data, "cannot write manifest in " + dir.string());
    }
    {
        std::ofstream f(dir / "weights.bin", std::ios::binary);
        write_le<float>(f, state.params.values());
        if (!f) fail(ErrorKind::data, "cannot write weights.bin");
    }
    {
        std::ofstream f(dir / "optimizer.bin", std::ios::binary);
        std::vector<float> m = state.opt.m, v = state.opt.v;
        m.resize(state.params.size(), 0.0f);
        v.resize(state.params.size(), 0.0f);
        write_le<float>(f, m);
        write_le<float>(f, v);
        if (!f) fail(ErrorKind::data, "cannot write optimizer.bin");
    }
    {
        std::ofstream f(dir / "rng_state", std::ios::binary);
        f << "xoshiro256**";
        for (auto w : state.rng.state()) f << ' ' << w;
        f << '\n';
    }
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    LoadedCheckpoint out;
    try {
        out.manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
        if (out.manifest.at("format").get<std::string>() != "t2tbio-checkpoint v1") {
            fail(ErrorKind::data, "unknown checkpoint format");
        }
        out.config = model_config_from_json(out.manifest.at("config"));
        out.state.params = params_from<float>(out.manifest, slurp(dir / "weights.bin"), out.config);
        out.state.step = out.manifest.value("step", std::size_t{0});
        out.state.opt.step = out.manifest.at("optimizer").value("step", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, std::string("bad checkpoint manifest: ") + e.what());
    }
    const std::size_t n = out.state.params.size();
    out.state.opt.m.assign(n, 0.0f);
    out.state.opt.v.assign(n, 0.0f);
    {
        const std::string blob = slurp(dir / "optimizer.bin");
        if (blob.size() != 2 * n * sizeof(float)) fail(ErrorKind::data, "optimizer.bin has wrong size");
        read_le<float>(blob, 0, std::span<float>(out.state.opt.m));
        read_le<float>(blob, n * sizeof(float), std::span<float>(out.state.opt.v));
        auto finite = [](const std::vector<float>& v) {
            return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
        };
        if (!finite(out.state.opt.m) || !finite(out.state.opt.v)) {
            fail(ErrorKind::numeric, "optimizer state contains non-finite values");
        }
    }
    {
        std::istringstream in(slurp(dir / "rng_state"));
        std::string name;
        Rng::State s{};
        in >> name >> s[0] >> s[1] >> s[2] >> s[3];
        if (!in || name != "xoshiro256**") fail(ErrorKind::data, "bad rng_state");
        out.state.rng = Rng::from_state(s);
    }
    return out;
}

template <typename T>
void save_params(const fs::path& dir, const ModelConfig& cfg, const ParamStore<T>& params) {
    fs::create_directories(dir);
    std::ofstream m(dir / "manifest.json", std::ios::binary);
    m << manifest_for(cfg, params).dump(2) << '\n';
    std::ofstream f(dir / "weights.bin", std::ios::binary);
    write_le<T>(f, params.values());
    if (!f || !m) fail(ErrorKind::data, "cannot write parameters to " + dir.string());
}

template <typename T>
ParamStore<T> load_params(const fs::path& dir, ModelConfig* cfg_out) {
    try {
        const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
        const ModelConfig cfg = model_config_from_json(manifest.at("config"));
        if (cfg_out) *cfg_out = cfg;
        return params_from<T>(manifest, slurp(dir / "weights.bin"), cfg);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, std::string("bad checkpoint manifest: ") + e.what());
    }
}

template void save_params<float>(const fs::path&, const ModelConfig&, const ParamStore<float>&);
template void save_params<double>(const fs::path&, const ModelConfig&, const ParamStore<double>&);
template ParamStore<float> load_params<float>(const fs::path&, ModelConfig*);
template ParamStore<double> load_params<double>(const fs::path&, ModelConfig*);

}  // namespace t2tbio
