#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rdk/common.hpp"

namespace rdk {

struct Item {
    int id = 0;
    std::vector<std::string> title;
    int category = 0;
};

struct Session {
    int session_id = 0;
    long ts = 0;
    std::vector<Item> items;                  // serialization order (shuffled at generation)
    std::vector<std::vector<int>> bundles;    // each ascending, size >= 2, disjoint
    std::vector<int> intents;                 // ascending
};

struct Intent {
    int id = 0;
    std::vector<int> categories;  // 1 or 2 categories
    std::vector<int> pool;        // compatible item ids, ascending
};

struct WorldConfig {
    size_t n_items = 160;
    size_t n_categories = 8;
    size_t n_intents = 40;
    size_t n_rules = 6;  // min-size + intent-alignment + one per compatible category pair
    size_t n_sessions = 1150;
    // bundles per session: weights for counts 1..3
    std::vector<double> bundles_per_session_weights = {0.55, 0.35, 0.10};
    // bundle size: weights for sizes 2..5, mean 3.5
    std::vector<double> bundle_size_weights = {0.15, 0.30, 0.45, 0.10};
    double distractor_rate = 0.25;
    size_t p_max = 6;  // cap on bundle-order permutations per session
    size_t vocab_ceiling = 4096;
    uint64_t seed = 1;

    size_t max_bundle_size() const { return 2 + bundle_size_weights.size() - 1; }
    void validate() const;
};

struct World {
    WorldConfig config;
    std::vector<Item> items;
    std::vector<Intent> intents;
    std::vector<std::pair<int, int>> compatible_pairs;  // distinct category pairs spanned by pools

    const Intent& intent(int id) const { return intents.at(static_cast<size_t>(id)); }
};

enum class KnowledgeKind { high_level, fine_grained };

struct KnowledgeRecord {
    KnowledgeKind kind = KnowledgeKind::high_level;
    int session_id = -1;  // -1 = global scope (high-level)
    std::vector<std::string> payload;
};

// Indexed view over knowledge records: global rule tokens plus per-session
// fine-grained payloads.
struct KnowledgeStore {
    std::vector<std::string> rules;  // concatenated high-level payloads, record order
    std::unordered_map<int, std::vector<std::string>> fine;

    static KnowledgeStore from_records(const std::vector<KnowledgeRecord>& records);
    const std::vector<std::string>& fine_for(int session_id) const;
};

struct SplitSessions {
    std::vector<Session> train, val, test;
};

World generate_world(const WorldConfig& config, uint64_t seed);
std::vector<Session> generate_sessions(const World& world, const WorldConfig& config, uint64_t seed);

// Chronological 7:1:2 split (floor on boundaries, remainder to test).
SplitSessions split_chronological(std::vector<Session> sessions);

std::vector<KnowledgeRecord> oracle_distill_high_level(const World& world);
KnowledgeRecord oracle_distill_fine_grained(const Session& session);
std::vector<KnowledgeRecord> oracle_distill_all(const World& world, const std::vector<Session>& sessions);

// The planted signal: recover the bundle partition of a session from its
// intent ids alone (used by tests and by the informativeness check).
std::vector<std::vector<int>> recover_bundles_from_intents(const World& world, const Session& session);

// ---------------------------------------------------------------- file I/O

void write_sessions_jsonl(const std::string& path, const std::vector<Session>& sessions);
std::vector<Session> read_sessions_jsonl(const std::string& path);

void write_knowledge_jsonl(const std::string& path, const std::vector<KnowledgeRecord>& records);
// Validates schema and payload tokens; unknown payload tokens are mapped
// through a small alias table (lowercase/space forms) or rejected with the
// offending line number. Empty files yield an empty store plus a warning flag.
struct KnowledgeLoadResult {
    std::vector<KnowledgeRecord> records;
    bool empty_warning = false;
};
KnowledgeLoadResult load_knowledge_jsonl(const std::string& path);

void write_world_json(const std::string& path, const World& world);
World read_world_json(const std::string& path);

// Fill-in prompt templates for driving a real teacher LLM outside this
// artifact (high-level self-reflection; fine-grained chain-of-thought).
void emit_prompt_templates(const std::string& out_dir);

}  // namespace rdk
