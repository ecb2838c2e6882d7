#pragma once

// Autoregressive generation, tolerant bundle parsing, canonical normalization,
// and the majority-voting test-time-scaling loop. Decoding is deterministic:
// greedy at temperature 0 (argmax ties to the lowest token id), seeded
// temperature sampling otherwise, with candidate i of a TTS run drawing from
// seed + i.

#include <optional>
#include <string>
#include <vector>

#include "rdk/fusion.hpp"

namespace rdk {

struct DecodeConfig {
    float temperature = 0.0f;      // single-decode default: greedy
    float tts_temperature = 0.7f;  // sampling temperature for N > 1
    size_t n_samples = 8;
    size_t max_length = 96;  // generation cap, in tokens
    uint64_t seed = 1;

    void validate() const {
        if (temperature < 0.0f || tts_temperature < 0.0f) {
            throw ConfigError("decode: temperature must be >= 0");
        }
        if (n_samples < 1) throw ConfigError("decode: need at least one sample");
        if (max_length < 1) throw ConfigError("decode: max_length must be >= 1");
    }
};

struct Candidate {
    std::vector<int> tokens;  // generated suffix; ends with EOS unless truncated
    double log_prob = 0.0;    // accumulated under the sampling distribution
    size_t sample_index = 0;
    bool truncated = false;
};

struct NormalizedBundleSet {
    std::vector<std::vector<int>> bundles;  // items ascending, bundles lexicographic, deduped

    bool operator==(const NormalizedBundleSet&) const = default;
    std::string key() const;
};

// What generation runs against: the frozen backbone plus either one adapter
// (knowledge-variant input) or a fusion spec (raw input). Both null decodes
// the bare backbone on raw input.
struct ModelBundle {
    const BackboneWeights<float>* backbone = nullptr;
    const LoraAdapter<float>* single = nullptr;
    const FusionSpec<float>* fusion = nullptr;
    InputVariant variant = InputVariant::raw;
    const KnowledgeStore* knowledge = nullptr;

    void validate() const;
    std::vector<int> prompt_for(const Session& session, const Vocab& vocab) const;
};

// Greedy pick: highest logit, ties to the lowest token id.
size_t greedy_argmax(const std::vector<float>& logits);

// One decode from an explicit prompt. temperature == 0 is greedy and ignores
// the seed; its log_prob is 0 (the sampling distribution is degenerate).
Candidate decode(const std::vector<int>& prompt, const ModelBundle& model, float temperature,
                 uint64_t seed, size_t max_length);

struct ParseReport {
    size_t dropped_items = 0;    // item tokens outside the session's item set
    size_t dropped_bundles = 0;  // blocks left with < 2 items, or unterminated
};

// Tolerant scan for B_OPEN ... B_CLOSE blocks; never fails on malformed model
// output.
std::vector<std::vector<int>> parse_bundles(const std::vector<int>& tokens, const Session& session,
                                            const Vocab& vocab, ParseReport* report = nullptr);

// Sort items ascending, drop duplicate items and bundles, drop bundles that
// fall under two items, sort bundles lexicographically. Idempotent.
NormalizedBundleSet normalize(std::vector<std::vector<int>> bundles);

struct VoteEntry {
    NormalizedBundleSet set;
    double log_prob = 0.0;
    size_t sample_index = 0;
};

// Modal normalized set; ties break by (1) higher mean candidate log
// probability, then (2) lower sample index.
NormalizedBundleSet majority_vote(const std::vector<VoteEntry>& entries,
                                  size_t* winner_count = nullptr);

struct TtsReport {
    size_t n_candidates = 0;
    size_t vote_count = 0;
    bool any_truncated = false;
    std::vector<std::pair<std::string, size_t>> key_counts;  // sorted by key
};

// N = 1: single greedy decode at temperature 0 (the no-TTS arm). N > 1: N
// sampled decodes at the TTS temperature, candidate i seeded with seed + i,
// reduced by majority vote.
NormalizedBundleSet tts_generate(const Session& session, const ModelBundle& model,
                                 const Vocab& vocab, const DecodeConfig& config,
                                 TtsReport* report = nullptr);

// ---------------------------------------------------------------- file I/O

struct PredictionRecord {
    int session_id = 0;
    NormalizedBundleSet bundles;
    size_t n_candidates = 0;
    size_t vote_count = 0;
    bool truncated = false;
};

void write_predictions_jsonl(const std::string& path, const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions_jsonl(const std::string& path);

}  // namespace rdk
