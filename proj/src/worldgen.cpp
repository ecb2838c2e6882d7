#include "rdk/worldgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace rdk {

using nlohmann::json;

void WorldConfig::validate() const {
    if (n_items == 0 || n_categories == 0 || n_intents == 0 || n_sessions == 0) {
        throw ConfigError("world config: counts must be positive");
    }
    if (n_categories % 2 != 0) throw ConfigError("world config: n_categories must be even");
    if (n_items % n_categories != 0) {
        throw ConfigError("world config: n_items must be divisible by n_categories");
    }
    if (n_intents < 4 * (n_categories / 2) + n_categories) {
        throw ConfigError("world config: need at least 4 crossed intents per category pair plus one "
                          "plain intent per category");
    }
    const size_t pairs = n_categories / 2;
    if (n_rules != 2 + pairs) {
        throw ConfigError("world config: n_rules must equal 2 + " + std::to_string(pairs) +
                          " compatible category pairs, got " + std::to_string(n_rules));
    }
    if (bundles_per_session_weights.empty() || bundles_per_session_weights.size() > 3) {
        throw ConfigError("world config: bundles-per-session weights cover counts 1..3");
    }
    if (bundle_size_weights.empty()) throw ConfigError("world config: bundle size weights empty");
    if (distractor_rate < 0.0 || distractor_rate > 1.0) {
        throw ConfigError("world config: distractor rate outside [0,1]");
    }
    if (p_max == 0) throw ConfigError("world config: p_max must be >= 1");
    const size_t per_cat = n_items / n_categories;
    if (per_cat < 2 * 5) {
        throw ConfigError("world config: need >= 10 items per category for crossed intent groups");
    }
}

namespace {

constexpr size_t kCrossGroupSize = 5;   // items per crossed half-pool
constexpr size_t kPlainPoolSize = 9;    // plain intent pool window

std::vector<int> sorted_copy(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

World generate_world(const WorldConfig& config, uint64_t seed) {
    config.validate();
    World world;
    world.config = config;
    Rng rng(derive_seed(seed, "world"));

    const size_t per_cat = config.n_items / config.n_categories;
    world.items.reserve(config.n_items);
    for (size_t i = 0; i < config.n_items; ++i) {
        Item it;
        it.id = static_cast<int>(i);
        it.category = static_cast<int>(i / per_cat);
        it.title = {"c" + std::to_string(it.category), "i" + std::to_string(i)};
        world.items.push_back(std::move(it));
    }

    const size_t n_fam = config.n_categories / 2;
    for (size_t f = 0; f < n_fam; ++f) {
        world.compatible_pairs.emplace_back(static_cast<int>(2 * f), static_cast<int>(2 * f + 1));
    }

    // Crossed intents: per category pair (c1, c2), disjoint groups A,B from c1
    // and X,Y from c2 combine into pools A|X, B|Y, A|Y, B|X. A session whose
    // items mix two parallel pools admits a second world-consistent partition,
    // which is the ambiguity the fine-grained knowledge resolves.
    int next_intent = 0;
    for (size_t f = 0; f < n_fam; ++f) {
        const int c1 = static_cast<int>(2 * f), c2 = static_cast<int>(2 * f + 1);
        std::vector<int> left, right;
        for (size_t i = 0; i < per_cat; ++i) {
            left.push_back(static_cast<int>(c1 * static_cast<int>(per_cat) + static_cast<int>(i)));
            right.push_back(static_cast<int>(c2 * static_cast<int>(per_cat) + static_cast<int>(i)));
        }
        auto pick2 = [&](std::vector<int>& src) {
            auto chosen = rng.sample_without_replacement(src, 2 * kCrossGroupSize);
            std::vector<int> a(chosen.begin(), chosen.begin() + kCrossGroupSize);
            std::vector<int> b(chosen.begin() + kCrossGroupSize, chosen.end());
            return std::pair{sorted_copy(a), sorted_copy(b)};
        };
        auto [ga, gb] = pick2(left);
        auto [gx, gy] = pick2(right);
        auto make_pool = [](const std::vector<int>& u, const std::vector<int>& v) {
            std::vector<int> p = u;
            p.insert(p.end(), v.begin(), v.end());
            std::sort(p.begin(), p.end());
            return p;
        };
        const std::vector<std::vector<int>> pools = {make_pool(ga, gx), make_pool(gb, gy),
                                                     make_pool(ga, gy), make_pool(gb, gx)};
        for (const auto& pool : pools) {
            Intent intent;
            intent.id = next_intent++;
            intent.categories = {c1, c2};
            intent.pool = pool;
            world.intents.push_back(std::move(intent));
        }
    }

    // Plain single-category intents: cyclic windows over the category's items
    // so that every item lands in at least one pool.
    const size_t n_plain = config.n_intents - static_cast<size_t>(next_intent);
    const size_t per_cat_plain = (n_plain + config.n_categories - 1) / config.n_categories;
    for (size_t j = 0; j < n_plain; ++j) {
        const int c = static_cast<int>(j % config.n_categories);
        const size_t slot = j / config.n_categories;
        const size_t stride = std::max<size_t>(1, per_cat / std::max<size_t>(1, per_cat_plain));
        const size_t start = (slot * stride) % per_cat;
        Intent intent;
        intent.id = next_intent++;
        intent.categories = {c};
        for (size_t t = 0; t < kPlainPoolSize; ++t) {
            intent.pool.push_back(static_cast<int>(c * static_cast<int>(per_cat) +
                                                   static_cast<int>((start + t) % per_cat)));
        }
        std::sort(intent.pool.begin(), intent.pool.end());
        intent.pool.erase(std::unique(intent.pool.begin(), intent.pool.end()), intent.pool.end());
        world.intents.push_back(std::move(intent));
    }

    // Coverage fix-up: any item not yet in a pool joins the first plain intent
    // of its category.
    std::vector<char> covered(config.n_items, 0);
    for (const auto& intent : world.intents)
        for (int v : intent.pool) covered[static_cast<size_t>(v)] = 1;
    for (size_t i = 0; i < config.n_items; ++i) {
        if (covered[i]) continue;
        const int c = world.items[i].category;
        for (auto& intent : world.intents) {
            if (intent.categories.size() == 1 && intent.categories[0] == c) {
                intent.pool.push_back(static_cast<int>(i));
                std::sort(intent.pool.begin(), intent.pool.end());
                break;
            }
        }
    }

    for (const auto& intent : world.intents) {
        if (intent.pool.size() < config.max_bundle_size()) {
            throw ConfigError("intent " + std::to_string(intent.id) + " pool of " +
                              std::to_string(intent.pool.size()) + " items is smaller than the max "
                              "bundle size " + std::to_string(config.max_bundle_size()));
        }
    }
    return world;
}

namespace {

bool pools_disjoint(const World& world, const std::vector<int>& intents) {
    for (size_t a = 0; a + 1 < intents.size(); ++a) {
        for (size_t b = a + 1; b < intents.size(); ++b) {
            const auto& pa = world.intent(intents[a]).pool;
            const auto& pb = world.intent(intents[b]).pool;
            std::vector<int> tmp;
            std::set_intersection(pa.begin(), pa.end(), pb.begin(), pb.end(), std::back_inserter(tmp));
            if (!tmp.empty()) return false;
        }
    }
    return true;
}

}  // namespace

std::vector<Session> generate_sessions(const World& world, const WorldConfig& config, uint64_t seed) {
    Rng rng(derive_seed(seed, "sessions"));
    std::vector<Session> sessions;
    sessions.reserve(config.n_sessions);

    for (size_t si = 0; si < config.n_sessions; ++si) {
        size_t n_b = 1 + rng.weighted_index(config.bundles_per_session_weights);

        // active intents with pairwise-disjoint pools; fall back to a single
        // intent if rejection keeps failing
        std::vector<int> active;
        for (int attempt = 0; attempt < 200; ++attempt) {
            std::vector<int> all(world.intents.size());
            for (size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
            active = rng.sample_without_replacement(all, n_b);
            std::sort(active.begin(), active.end());
            if (pools_disjoint(world, active)) break;
            active.clear();
        }
        if (active.empty()) {
            active = {static_cast<int>(rng.uniform_index(world.intents.size()))};
            n_b = 1;
        }

        Session s;
        s.session_id = static_cast<int>(si);
        s.ts = static_cast<long>(si);
        s.intents = active;

        std::set<int> in_active_pool;
        for (int k : active)
            for (int v : world.intent(k).pool) in_active_pool.insert(v);

        size_t bundled_total = 0;
        for (int k : active) {
            const auto& pool = world.intent(k).pool;
            size_t m = 2 + rng.weighted_index(config.bundle_size_weights);
            m = std::min(m, pool.size());
            auto bundle = sorted_copy(rng.sample_without_replacement(pool, m));
            bundled_total += bundle.size();
            s.bundles.push_back(std::move(bundle));
        }

        // distractors avoid every active pool so that intents alone pin down
        // the partition
        const size_t n_d = static_cast<size_t>(std::llround(config.distractor_rate *
                                                            static_cast<double>(bundled_total)));
        std::vector<int> candidates;
        for (const auto& item : world.items) {
            if (!in_active_pool.count(item.id)) candidates.push_back(item.id);
        }
        std::vector<int> distractors;
        if (n_d > 0 && !candidates.empty()) {
            distractors = rng.sample_without_replacement(candidates, std::min(n_d, candidates.size()));
        }

        std::vector<int> member_ids;
        for (const auto& b : s.bundles) member_ids.insert(member_ids.end(), b.begin(), b.end());
        member_ids.insert(member_ids.end(), distractors.begin(), distractors.end());
        rng.shuffle(member_ids);
        for (int id : member_ids) s.items.push_back(world.items[static_cast<size_t>(id)]);

        // recoverability: session items restricted to an active pool must be
        // exactly that intent's bundle
        const auto recovered = recover_bundles_from_intents(world, s);
        std::vector<std::vector<int>> truth = s.bundles;
        std::sort(truth.begin(), truth.end());
        if (recovered != truth) {
            throw ValidationError("session generator violated intent recoverability at session " +
                                  std::to_string(si));
        }
        sessions.push_back(std::move(s));
    }
    return sessions;
}

std::vector<std::vector<int>> recover_bundles_from_intents(const World& world, const Session& session) {
    std::set<int> present;
    for (const auto& item : session.items) present.insert(item.id);
    std::vector<std::vector<int>> out;
    for (int k : session.intents) {
        std::vector<int> b;
        for (int v : world.intent(k).pool) {
            if (present.count(v)) b.push_back(v);
        }
        std::sort(b.begin(), b.end());
        out.push_back(std::move(b));
    }
    std::sort(out.begin(), out.end());
    return out;
}

SplitSessions split_chronological(std::vector<Session> sessions) {
    if (sessions.size() < 10) {
        throw ValidationError("chronological split requires at least 10 sessions, got " +
                              std::to_string(sessions.size()));
    }
    std::stable_sort(sessions.begin(), sessions.end(),
                     [](const Session& a, const Session& b) { return a.ts < b.ts; });
    const size_t n = sessions.size();
    const size_t n_train = n * 7 / 10;
    const size_t n_val = n / 10;
    SplitSessions split;
    split.train.assign(sessions.begin(), sessions.begin() + static_cast<long>(n_train));
    split.val.assign(sessions.begin() + static_cast<long>(n_train),
                     sessions.begin() + static_cast<long>(n_train + n_val));
    split.test.assign(sessions.begin() + static_cast<long>(n_train + n_val), sessions.end());
    return split;
}

std::vector<KnowledgeRecord> oracle_distill_high_level(const World& world) {
    std::vector<KnowledgeRecord> records;
    size_t rule = 0;
    auto push = [&](size_t idx) {
        KnowledgeRecord r;
        r.kind = KnowledgeKind::high_level;
        r.session_id = -1;
        r.payload = {"RULE_" + std::to_string(idx)};
        records.push_back(std::move(r));
    };
    push(rule++);  // RULE_0: every bundle has at least two items
    push(rule++);  // RULE_1: bundle items align with one user intent
    for (size_t p = 0; p < world.compatible_pairs.size(); ++p) push(rule++);
    return records;
}

KnowledgeRecord oracle_distill_fine_grained(const Session& session) {
    KnowledgeRecord r;
    r.kind = KnowledgeKind::fine_grained;
    r.session_id = session.session_id;
    auto intents = session.intents;
    std::sort(intents.begin(), intents.end());
    for (int k : intents) r.payload.push_back("INTENT_" + std::to_string(k));
    return r;
}

std::vector<KnowledgeRecord> oracle_distill_all(const World& world,
                                                const std::vector<Session>& sessions) {
    auto records = oracle_distill_high_level(world);
    for (const auto& s : sessions) records.push_back(oracle_distill_fine_grained(s));
    return records;
}

KnowledgeStore KnowledgeStore::from_records(const std::vector<KnowledgeRecord>& records) {
    KnowledgeStore store;
    for (const auto& r : records) {
        if (r.kind == KnowledgeKind::high_level) {
            store.rules.insert(store.rules.end(), r.payload.begin(), r.payload.end());
        } else {
            auto& dst = store.fine[r.session_id];
            dst.insert(dst.end(), r.payload.begin(), r.payload.end());
        }
    }
    return store;
}

const std::vector<std::string>& KnowledgeStore::fine_for(int session_id) const {
    auto it = fine.find(session_id);
    if (it == fine.end()) {
        throw ValidationError("missing fine-grained knowledge for session " +
                              std::to_string(session_id));
    }
    return it->second;
}

// ---------------------------------------------------------------- file I/O

namespace {

json session_to_json(const Session& s) {
    json items = json::array();
    for (const auto& it : s.items) {
        items.push_back({{"id", it.id}, {"title", it.title}, {"category", it.category}});
    }
    return json{{"session_id", s.session_id},
                {"ts", s.ts},
                {"items", items},
                {"bundles", s.bundles},
                {"intents", s.intents}};
}

Session session_from_json(const json& j) {
    Session s;
    s.session_id = j.at("session_id").get<int>();
    s.ts = j.at("ts").get<long>();
    for (const auto& ji : j.at("items")) {
        Item it;
        it.id = ji.at("id").get<int>();
        it.title = ji.at("title").get<std::vector<std::string>>();
        it.category = ji.at("category").get<int>();
        s.items.push_back(std::move(it));
    }
    s.bundles = j.at("bundles").get<std::vector<std::vector<int>>>();
    s.intents = j.at("intents").get<std::vector<int>>();
    return s;
}

}  // namespace

void write_sessions_jsonl(const std::string& path, const std::vector<Session>& sessions) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write sessions file: " + path);
    for (const auto& s : sessions) out << session_to_json(s).dump() << "\n";
}

std::vector<Session> read_sessions_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read sessions file: " + path);
    std::vector<Session> sessions;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            sessions.push_back(session_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return sessions;
}

void write_knowledge_jsonl(const std::string& path, const std::vector<KnowledgeRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write knowledge file: " + path);
    for (const auto& r : records) {
        json j{{"kind", r.kind == KnowledgeKind::high_level ? "high-level" : "fine-grained"},
               {"payload", r.payload}};
        if (r.kind == KnowledgeKind::fine_grained) {
            j["session_id"] = r.session_id;
        } else {
            j["session_id"] = nullptr;
        }
        out << j.dump() << "\n";
    }
}

namespace {

// Alias table for externally distilled payload tokens.
std::optional<std::string> canonical_knowledge_token(std::string tok) {
    for (auto& c : tok) {
        if (c == ' ' || c == '-') c = '_';
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    auto valid_suffix = [](const std::string& s, size_t at) {
        if (at >= s.size()) return false;
        for (size_t i = at; i < s.size(); ++i)
            if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
        return true;
    };
    if (tok.rfind("RULE_", 0) == 0 && valid_suffix(tok, 5)) return tok;
    if (tok.rfind("INTENT_", 0) == 0 && valid_suffix(tok, 7)) return tok;
    return std::nullopt;
}

}  // namespace

KnowledgeLoadResult load_knowledge_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read knowledge file: " + path);
    KnowledgeLoadResult result;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
        KnowledgeRecord r;
        const std::string kind = j.value("kind", "");
        if (kind == "high-level") {
            r.kind = KnowledgeKind::high_level;
        } else if (kind == "fine-grained") {
            r.kind = KnowledgeKind::fine_grained;
        } else {
            throw ParseError(where + ": unknown knowledge kind '" + kind + "'");
        }
        const bool has_session = j.contains("session_id") && !j.at("session_id").is_null();
        if (r.kind == KnowledgeKind::high_level && has_session) {
            throw ParseError(where + ": high-level knowledge must be global (no session_id)");
        }
        if (r.kind == KnowledgeKind::fine_grained) {
            if (!has_session) throw ParseError(where + ": fine-grained knowledge requires session_id");
            r.session_id = j.at("session_id").get<int>();
        }
        if (!j.contains("payload") || !j.at("payload").is_array()) {
            throw ParseError(where + ": payload must be an array of tokens");
        }
        for (const auto& jt : j.at("payload")) {
            auto canon = canonical_knowledge_token(jt.get<std::string>());
            if (!canon) {
                throw ParseError(where + ": unrecognized knowledge token '" +
                                 jt.get<std::string>() + "'");
            }
            r.payload.push_back(*canon);
        }
        result.records.push_back(std::move(r));
    }
    result.empty_warning = result.records.empty();
    return result;
}

void write_world_json(const std::string& path, const World& world) {
    json intents = json::array();
    for (const auto& intent : world.intents) {
        intents.push_back({{"id", intent.id}, {"categories", intent.categories}, {"pool", intent.pool}});
    }
    json items = json::array();
    for (const auto& it : world.items) {
        items.push_back({{"id", it.id}, {"title", it.title}, {"category", it.category}});
    }
    json pairs = json::array();
    for (const auto& [a, b] : world.compatible_pairs) pairs.push_back({a, b});
    const auto& c = world.config;
    json j{{"config",
            {{"n_items", c.n_items},
             {"n_categories", c.n_categories},
             {"n_intents", c.n_intents},
             {"n_rules", c.n_rules},
             {"n_sessions", c.n_sessions},
             {"bundles_per_session_weights", c.bundles_per_session_weights},
             {"bundle_size_weights", c.bundle_size_weights},
             {"distractor_rate", c.distractor_rate},
             {"p_max", c.p_max},
             {"vocab_ceiling", c.vocab_ceiling},
             {"seed", c.seed}}},
           {"items", items},
           {"intents", intents},
           {"compatible_pairs", pairs}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write world file: " + path);
    out << j.dump(2) << "\n";
}

World read_world_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read world file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("invalid world JSON in " + path + ": " + e.what());
    }
    World w;
    const auto& jc = j.at("config");
    w.config.n_items = jc.at("n_items").get<size_t>();
    w.config.n_categories = jc.at("n_categories").get<size_t>();
    w.config.n_intents = jc.at("n_intents").get<size_t>();
    w.config.n_rules = jc.at("n_rules").get<size_t>();
    w.config.n_sessions = jc.at("n_sessions").get<size_t>();
    w.config.bundles_per_session_weights = jc.at("bundles_per_session_weights").get<std::vector<double>>();
    w.config.bundle_size_weights = jc.at("bundle_size_weights").get<std::vector<double>>();
    w.config.distractor_rate = jc.at("distractor_rate").get<double>();
    w.config.p_max = jc.at("p_max").get<size_t>();
    w.config.vocab_ceiling = jc.at("vocab_ceiling").get<size_t>();
    w.config.seed = jc.at("seed").get<uint64_t>();
    for (const auto& ji : j.at("items")) {
        Item it;
        it.id = ji.at("id").get<int>();
        it.title = ji.at("title").get<std::vector<std::string>>();
        it.category = ji.at("category").get<int>();
        w.items.push_back(std::move(it));
    }
    for (const auto& jk : j.at("intents")) {
        Intent intent;
        intent.id = jk.at("id").get<int>();
        intent.categories = jk.at("categories").get<std::vector<int>>();
        intent.pool = jk.at("pool").get<std::vector<int>>();
        w.intents.push_back(std::move(intent));
    }
    for (const auto& jp : j.at("compatible_pairs")) {
        w.compatible_pairs.emplace_back(jp.at(0).get<int>(), jp.at(1).get<int>());
    }
    return w;
}

void emit_prompt_templates(const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    const std::string reflection_path = out_dir + "/high_level_reflection_prompt.txt";
    const std::string cot_path = out_dir + "/fine_grained_cot_prompt.txt";

    std::ofstream reflection(reflection_path, std::ios::binary);
    if (!reflection) throw IoError("cannot write template: " + reflection_path);
    reflection <<
        "You are assisting with product bundle generation.\n"
        "\n"
        "Step 1. Given the session items below, propose candidate bundles.\n"
        "Step 2. Compare your candidates against the ground-truth bundles, identify\n"
        "        the errors you made, and explain their underlying causes.\n"
        "Step 3. Summarize explicit, generalizable bundling rules that would prevent\n"
        "        those errors (for example: every bundle should contain at least two\n"
        "        items; items in a bundle must align with one user intent; avoid\n"
        "        combining unrelated categories).\n"
        "\n"
        "Session items:\n"
        "{SESSION_ITEMS}\n"
        "\n"
        "Ground-truth bundles:\n"
        "{GROUND_TRUTH}\n"
        "\n"
        "Answer with one rule per line.\n";

    std::ofstream cot(cot_path, std::ios::binary);
    if (!cot) throw IoError("cannot write template: " + cot_path);
    cot <<
        "You are assisting with product bundle generation.\n"
        "\n"
        "For the single session below, reason step by step about which items belong\n"
        "together and why, using their titles, categories, and the evident user\n"
        "intents. Then state the session-specific rationale that ties each group of\n"
        "items to one intent.\n"
        "\n"
        "Session items:\n"
        "{SESSION_ITEMS}\n"
        "\n"
        "Ground-truth bundles (for reference while distilling):\n"
        "{GROUND_TRUTH}\n"
        "\n"
        "Answer with one short rationale per bundle.\n";
}

}  // namespace rdk
