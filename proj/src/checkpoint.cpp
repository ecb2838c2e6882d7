#include "rdk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian floats");

namespace rdk {

using nlohmann::json;

namespace {

struct NamedTensor {
    std::string name;
    std::vector<size_t> shape;
    const float* data;
    size_t count;
};

json model_config_json(const ModelConfig& cfg) {
    return json{{"layers", cfg.layers},   {"d_model", cfg.d_model}, {"heads", cfg.heads},
                {"d_ff", cfg.d_ff},       {"t_max", cfg.t_max},     {"vocab_size", cfg.vocab_size}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<size_t>();
    cfg.d_model = j.at("d_model").get<size_t>();
    cfg.heads = j.at("heads").get<size_t>();
    cfg.d_ff = j.at("d_ff").get<size_t>();
    cfg.t_max = j.at("t_max").get<size_t>();
    cfg.vocab_size = j.at("vocab_size").get<size_t>();
    return cfg;
}

void write_checkpoint(const std::string& path, const std::string& kind, const ModelConfig& cfg,
                      const json& extra, const std::vector<NamedTensor>& tensors) {
    json manifest = json::array();
    size_t offset = 0;
    uint64_t payload_hash = 0xcbf29ce484222325ull;
    for (const auto& t : tensors) {
        manifest.push_back(
            {{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"byte_offset", offset}});
        offset += t.count * sizeof(float);
        payload_hash = fnv1a64(t.data, t.count * sizeof(float), payload_hash);
    }
    json header{{"format_version", kCheckpointVersion},
                {"kind", kind},
                {"model_config", model_config_json(cfg)},
                {"extra", extra},
                {"tensors", manifest},
                {"content_hash", hash_hex(payload_hash)}};
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, 4);
    const uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& t : tensors) {
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.count * sizeof(float)));
    }
    if (!out) throw IoError("short write on checkpoint: " + path);
}

struct LoadedCheckpoint {
    std::string kind;
    ModelConfig config;
    json extra;
    std::map<std::string, std::pair<std::vector<size_t>, std::vector<float>>> tensors;
};

LoadedCheckpoint read_checkpoint(const std::string& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw ParseError(path + ": not an RDK1 checkpoint");
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (1ull << 30)) throw ParseError(path + ": bad header length");
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ParseError(path + ": truncated header");
    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw ParseError(path + ": invalid header JSON: " + e.what());
    }
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
        throw ValidationError(path + ": unsupported checkpoint format version " +
                              std::to_string(version));
    }
    LoadedCheckpoint loaded;
    loaded.kind = header.at("kind").get<std::string>();
    if (!expected_kind.empty() && loaded.kind != expected_kind) {
        throw ValidationError(path + ": checkpoint kind '" + loaded.kind + "' where '" +
                              expected_kind + "' expected");
    }
    loaded.config = model_config_from_json(header.at("model_config"));
    loaded.extra = header.value("extra", json::object());

    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const uint64_t payload_hash = fnv1a64(payload.data(), payload.size());
    if (hash_hex(payload_hash) != header.at("content_hash").get<std::string>()) {
        throw ValidationError(path + ": checkpoint payload hash mismatch (corrupt file)");
    }

    for (const auto& jt : header.at("tensors")) {
        const auto name = jt.at("name").get<std::string>();
        const auto shape = jt.at("shape").get<std::vector<size_t>>();
        const auto offset = jt.at("byte_offset").get<size_t>();
        if (jt.at("dtype").get<std::string>() != "f32") {
            throw ValidationError(path + ": unsupported dtype for tensor " + name);
        }
        size_t count = 1;
        for (size_t d : shape) count *= d;
        if (offset + count * sizeof(float) > payload.size()) {
            throw ValidationError(path + ": tensor " + name + " overruns payload");
        }
        std::vector<float> values(count);
        std::memcpy(values.data(), payload.data() + offset, count * sizeof(float));
        loaded.tensors[name] = {shape, std::move(values)};
    }
    return loaded;
}

Tensor<float> take_tensor(LoadedCheckpoint& loaded, const std::string& path,
                          const std::string& name, const std::vector<size_t>& expect_shape) {
    auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end()) {
        throw ValidationError(path + ": missing tensor " + name);
    }
    if (it->second.first != expect_shape) {
        throw ValidationError(path + ": tensor " + name + " has shape " +
                              shape_to_string(it->second.first) + ", expected " +
                              shape_to_string(expect_shape));
    }
    return Tensor<float>::from(it->second.first, std::move(it->second.second));
}

}  // namespace

std::string checkpoint_kind(const std::string& path) {
    return read_checkpoint(path, "").kind;
}

void save_backbone(const std::string& path, const BackboneWeights<float>& weights) {
    if (!weights.frozen) throw ValidationError("save_backbone: refusing to save unfrozen weights");
    std::vector<NamedTensor> tensors;
    auto push = [&](const std::string& name, const Tensor<float>& t) {
        tensors.push_back({name, t.shape(), t.data(), t.size()});
    };
    push("embedding", weights.embedding);
    for (size_t l = 0; l < weights.layers.size(); ++l) {
        const auto& layer = weights.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            push(prefix + slot_name(static_cast<Slot>(s)), layer.proj[s]);
        }
        push(prefix + "gain_attn", layer.gain_attn);
        push(prefix + "gain_ff", layer.gain_ff);
    }
    push("final_gain", weights.final_gain);
    json extra{{"frozen", true}, {"frozen_hash", hash_hex(weights.frozen_hash)}};
    write_checkpoint(path, "backbone", weights.config, extra, tensors);
}

BackboneWeights<float> load_backbone(const std::string& path) {
    auto loaded = read_checkpoint(path, "backbone");
    loaded.config.validate();
    BackboneWeights<float> w;
    w.config = loaded.config;
    w.embedding = take_tensor(loaded, path, "embedding",
                              {loaded.config.vocab_size, loaded.config.d_model});
    w.layers.resize(loaded.config.layers);
    for (size_t l = 0; l < loaded.config.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            auto [din, dout] = slot_dims(loaded.config, static_cast<Slot>(s));
            w.layers[l].proj[s] =
                take_tensor(loaded, path, prefix + slot_name(static_cast<Slot>(s)), {din, dout});
        }
        w.layers[l].gain_attn =
            take_tensor(loaded, path, prefix + "gain_attn", {1, loaded.config.d_model});
        w.layers[l].gain_ff =
            take_tensor(loaded, path, prefix + "gain_ff", {1, loaded.config.d_model});
    }
    w.final_gain = take_tensor(loaded, path, "final_gain", {1, loaded.config.d_model});
    w.freeze();
    const auto recorded = loaded.extra.value("frozen_hash", "");
    if (!recorded.empty() && recorded != hash_hex(w.frozen_hash)) {
        throw ValidationError(path + ": frozen hash in header does not match payload");
    }
    return w;
}

void save_adapter(const std::string& path, const LoraAdapter<float>& adapter, ExpertKind kind) {
    std::vector<NamedTensor> tensors;
    for (size_t l = 0; l < adapter.layers.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            const auto& sp = adapter.layers[l][s];
            tensors.push_back({prefix + slot_name(static_cast<Slot>(s)) + ".a", sp.a.shape(),
                               sp.a.data(), sp.a.size()});
            tensors.push_back({prefix + slot_name(static_cast<Slot>(s)) + ".b", sp.b.shape(),
                               sp.b.data(), sp.b.size()});
        }
    }
    json extra{{"rank", adapter.config.rank},
               {"scale", adapter.config.scale},
               {"expert", expert_name(kind)}};
    write_checkpoint(path, "adapter", adapter.model, extra, tensors);
}

std::pair<LoraAdapter<float>, ExpertKind> load_adapter(const std::string& path) {
    auto loaded = read_checkpoint(path, "adapter");
    loaded.config.validate();
    LoraAdapter<float> adapter;
    adapter.model = loaded.config;
    adapter.config.rank = loaded.extra.at("rank").get<size_t>();
    adapter.config.scale = loaded.extra.at("scale").get<float>();
    adapter.layers.resize(loaded.config.layers);
    for (size_t l = 0; l < loaded.config.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            auto [din, dout] = slot_dims(loaded.config, static_cast<Slot>(s));
            adapter.layers[l][s].a = take_tensor(
                loaded, path, prefix + slot_name(static_cast<Slot>(s)) + ".a",
                {din, adapter.config.rank});
            adapter.layers[l][s].b = take_tensor(
                loaded, path, prefix + slot_name(static_cast<Slot>(s)) + ".b",
                {adapter.config.rank, dout});
        }
    }
    return {std::move(adapter), expert_from_name(loaded.extra.at("expert").get<std::string>())};
}

void save_router(const std::string& path, const RouterParams<float>& router) {
    std::vector<NamedTensor> tensors;
    for (size_t l = 0; l < router.weight.size(); ++l) {
        tensors.push_back({"layer" + std::to_string(l) + ".weight", router.weight[l].shape(),
                           router.weight[l].data(), router.weight[l].size()});
        tensors.push_back({"layer" + std::to_string(l) + ".bias", router.bias[l].shape(),
                           router.bias[l].data(), router.bias[l].size()});
    }
    write_checkpoint(path, "router", router.model, json{{"experts", kNumExperts}}, tensors);
}

RouterParams<float> load_router(const std::string& path) {
    auto loaded = read_checkpoint(path, "router");
    loaded.config.validate();
    RouterParams<float> router;
    router.model = loaded.config;
    for (size_t l = 0; l < loaded.config.layers; ++l) {
        router.weight.push_back(take_tensor(loaded, path, "layer" + std::to_string(l) + ".weight",
                                            {loaded.config.d_model, kNumExperts}));
        router.bias.push_back(take_tensor(loaded, path, "layer" + std::to_string(l) + ".bias",
                                          {1, kNumExperts}));
    }
    return router;
}

void save_static(const std::string& path, const StaticCoeffs<float>& coeffs) {
    std::vector<NamedTensor> tensors;
    for (size_t l = 0; l < coeffs.gamma.size(); ++l) {
        tensors.push_back({"layer" + std::to_string(l) + ".gamma", coeffs.gamma[l].shape(),
                           coeffs.gamma[l].data(), coeffs.gamma[l].size()});
    }
    write_checkpoint(path, "static", coeffs.model, json{{"experts", kNumExperts}}, tensors);
}

StaticCoeffs<float> load_static(const std::string& path) {
    auto loaded = read_checkpoint(path, "static");
    loaded.config.validate();
    StaticCoeffs<float> coeffs;
    coeffs.model = loaded.config;
    for (size_t l = 0; l < loaded.config.layers; ++l) {
        coeffs.gamma.push_back(take_tensor(loaded, path, "layer" + std::to_string(l) + ".gamma",
                                           {1, kNumExperts}));
    }
    return coeffs;
}

void save_merged(const std::string& path, const MergedDelta<float>& merged,
                 const std::string& strategy, double density) {
    std::vector<NamedTensor> tensors;
    for (size_t l = 0; l < merged.layers.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            const auto& t = merged.layers[l][s];
            tensors.push_back(
                {prefix + slot_name(static_cast<Slot>(s)) + ".delta", t.shape(), t.data(), t.size()});
        }
    }
    json extra{{"strategy", strategy}, {"density", density}};
    write_checkpoint(path, "ties-merged", merged.model, extra, tensors);
}

MergedDelta<float> load_merged(const std::string& path) {
    auto loaded = read_checkpoint(path, "ties-merged");
    loaded.config.validate();
    MergedDelta<float> merged;
    merged.model = loaded.config;
    merged.layers.resize(loaded.config.layers);
    for (size_t l = 0; l < loaded.config.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (size_t s = 0; s < kNumSlots; ++s) {
            auto [din, dout] = slot_dims(loaded.config, static_cast<Slot>(s));
            merged.layers[l][s] = take_tensor(
                loaded, path, prefix + slot_name(static_cast<Slot>(s)) + ".delta", {din, dout});
        }
    }
    return merged;
}

// ---------------------------------------------------------------- manifests

std::string file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot hash file: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return hash_hex(h);
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
    json j{{"subcommand", manifest.subcommand},
           {"argv", manifest.argv},
           {"config", manifest.config_json.empty() ? json::object()
                                                   : json::parse(manifest.config_json)},
           {"seed", manifest.seed},
           {"derived_seeds", manifest.derived_seeds},
           {"input_hashes", manifest.input_hashes},
           {"artifact_hashes", manifest.artifact_hashes},
           {"format_version", 1}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace rdk
