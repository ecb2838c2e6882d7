#pragma once

// Bit-exact parameter container: magic "RDK1", a little-endian u64 header
// length, a JSON header (format version, kind, model config, tensor manifest,
// payload hash), then raw little-endian float32 tensors in manifest order.
// Loads verify magic, version, payload hash, and kind before any shape is
// trusted.

#include <map>
#include <string>
#include <vector>

#include "rdk/decode.hpp"

namespace rdk {

inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'K', '1'};
inline constexpr int kCheckpointVersion = 1;

// peek at the kind field without materializing tensors
std::string checkpoint_kind(const std::string& path);

void save_backbone(const std::string& path, const BackboneWeights<float>& weights);
BackboneWeights<float> load_backbone(const std::string& path);

void save_adapter(const std::string& path, const LoraAdapter<float>& adapter, ExpertKind kind);
std::pair<LoraAdapter<float>, ExpertKind> load_adapter(const std::string& path);

void save_router(const std::string& path, const RouterParams<float>& router);
RouterParams<float> load_router(const std::string& path);

void save_static(const std::string& path, const StaticCoeffs<float>& coeffs);
StaticCoeffs<float> load_static(const std::string& path);

// strategy records how the delta was produced ("ties" with its density, or
// "average")
void save_merged(const std::string& path, const MergedDelta<float>& merged,
                 const std::string& strategy, double density);
MergedDelta<float> load_merged(const std::string& path);

// ---------------------------------------------------------------- manifests

// Everything needed to re-execute a subcommand bit-identically. No wall-clock
// fields: re-running a manifest reproduces the file byte for byte.
struct RunManifest {
    std::string subcommand;
    std::vector<std::string> argv;
    std::string config_json;  // resolved config snapshot
    uint64_t seed = 0;
    std::map<std::string, std::string> derived_seeds;
    std::map<std::string, std::string> input_hashes;     // path -> content hash
    std::map<std::string, std::string> artifact_hashes;  // path -> content hash
};

std::string file_content_hash(const std::string& path);
void write_manifest(const std::string& path, const RunManifest& manifest);

}  // namespace rdk
