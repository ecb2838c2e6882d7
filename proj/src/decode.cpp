#include "rdk/decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include <json.hpp>

namespace rdk {

using nlohmann::json;

std::string NormalizedBundleSet::key() const {
    std::string out;
    for (size_t b = 0; b < bundles.size(); ++b) {
        if (b) out += "|";
        for (size_t i = 0; i < bundles[b].size(); ++i) {
            if (i) out += ",";
            out += std::to_string(bundles[b][i]);
        }
    }
    return out;
}

void ModelBundle::validate() const {
    if (!backbone) throw ValidationError("model bundle: backbone missing");
    if (single && fusion) {
        throw ValidationError("model bundle: choose one of single adapter or fusion");
    }
    if (fusion && variant != InputVariant::raw) {
        throw ValidationError("model bundle: fused generation consumes raw inputs only");
    }
    if (variant != InputVariant::raw && knowledge == nullptr) {
        throw ValidationError("model bundle: knowledge store required for this input variant");
    }
}

std::vector<int> ModelBundle::prompt_for(const Session& session, const Vocab& vocab) const {
    return serialize_session(session, variant, vocab,
                             variant == InputVariant::raw ? nullptr : knowledge)
        .tokens;
}

size_t greedy_argmax(const std::vector<float>& logits) {
    if (logits.empty()) throw DimensionError("greedy_argmax: empty logits");
    size_t best = 0;
    for (size_t j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[best]) best = j;  // ties keep the lowest id
    }
    return best;
}

namespace {

// softmax(logits / temperature) in double, returning the chosen index and its
// log probability
std::pair<size_t, double> sample_pick(const std::vector<float>& logits, float temperature,
                                      Rng& rng) {
    const size_t v = logits.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (float x : logits) mx = std::max(mx, static_cast<double>(x) / temperature);
    std::vector<double> p(v);
    double z = 0.0;
    for (size_t j = 0; j < v; ++j) {
        p[j] = std::exp(static_cast<double>(logits[j]) / temperature - mx);
        z += p[j];
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    size_t pick = v - 1;
    for (size_t j = 0; j < v; ++j) {
        acc += p[j];
        if (u < acc) {
            pick = j;
            break;
        }
    }
    return {pick, std::log(p[pick] / z)};
}

}  // namespace

Candidate decode(const std::vector<int>& prompt, const ModelBundle& model, float temperature,
                 uint64_t seed, size_t max_length) {
    model.validate();
    if (temperature < 0.0f) throw ConfigError("decode: temperature must be >= 0");

    std::unique_ptr<RowAdapter> adapter;
    if (model.single) {
        adapter = std::make_unique<SingleRowAdapter>(*model.single);
    } else if (model.fusion) {
        adapter = std::make_unique<FusedRowAdapter>(*model.backbone, *model.fusion);
    }
    IncrementalModel inc(*model.backbone, adapter.get());

    Candidate cand;
    Rng rng(seed);
    auto logits = inc.prefill(prompt);
    for (size_t step = 0; step < max_length; ++step) {
        int token;
        if (temperature == 0.0f) {
            token = static_cast<int>(greedy_argmax(logits));
        } else {
            auto [pick, lp] = sample_pick(logits, temperature, rng);
            token = static_cast<int>(pick);
            cand.log_prob += lp;
        }
        cand.tokens.push_back(token);
        if (token == kEos) return cand;
        if (inc.position() >= model.backbone->config.t_max) break;
        logits = inc.step(token);
    }
    cand.truncated = true;
    return cand;
}

std::vector<std::vector<int>> parse_bundles(const std::vector<int>& tokens, const Session& session,
                                            const Vocab& vocab, ParseReport* report) {
    std::set<int> in_session;
    for (const auto& item : session.items) in_session.insert(item.id);

    ParseReport rep;
    std::vector<std::vector<int>> bundles;
    std::vector<int> current;
    bool open = false;
    for (int tok : tokens) {
        if (tok == kEos) break;
        if (tok == kBundleOpen) {
            if (open) rep.dropped_bundles += 1;  // unterminated block discarded
            current.clear();
            open = true;
            continue;
        }
        if (tok == kBundleClose) {
            if (!open) continue;  // stray close ignored
            std::set<int> uniq(current.begin(), current.end());
            if (uniq.size() >= 2) {
                bundles.emplace_back(uniq.begin(), uniq.end());
            } else {
                rep.dropped_bundles += 1;
            }
            current.clear();
            open = false;
            continue;
        }
        if (!open) continue;  // stray tokens outside blocks
        const int item = vocab.item_index(tok);
        if (item < 0) continue;  // stray non-item token inside a block
        if (!in_session.count(item)) {
            rep.dropped_items += 1;  // model named an item outside the session
            continue;
        }
        current.push_back(item);
    }
    if (open) rep.dropped_bundles += 1;  // unmatched B_OPEN at end of sequence
    if (report) *report = rep;
    return bundles;
}

NormalizedBundleSet normalize(std::vector<std::vector<int>> bundles) {
    NormalizedBundleSet out;
    for (auto& b : bundles) {
        std::sort(b.begin(), b.end());
        b.erase(std::unique(b.begin(), b.end()), b.end());
        if (b.size() >= 2) out.bundles.push_back(std::move(b));
    }
    std::sort(out.bundles.begin(), out.bundles.end());
    out.bundles.erase(std::unique(out.bundles.begin(), out.bundles.end()), out.bundles.end());
    return out;
}

NormalizedBundleSet majority_vote(const std::vector<VoteEntry>& entries, size_t* winner_count) {
    if (entries.empty()) throw ValidationError("majority_vote: no candidates");

    struct Tally {
        size_t count = 0;
        double log_prob_sum = 0.0;
        size_t min_index = std::numeric_limits<size_t>::max();
        const NormalizedBundleSet* set = nullptr;
    };
    std::map<std::string, Tally> tallies;
    for (const auto& e : entries) {
        auto& t = tallies[e.set.key()];
        t.count += 1;
        t.log_prob_sum += e.log_prob;
        t.min_index = std::min(t.min_index, e.sample_index);
        t.set = &e.set;
    }

    const Tally* best = nullptr;
    for (const auto& [key, t] : tallies) {
        (void)key;
        if (!best) {
            best = &t;
            continue;
        }
        const double t_mean = t.log_prob_sum / static_cast<double>(t.count);
        const double b_mean = best->log_prob_sum / static_cast<double>(best->count);
        if (t.count > best->count ||
            (t.count == best->count &&
             (t_mean > b_mean || (t_mean == b_mean && t.min_index < best->min_index)))) {
            best = &t;
        }
    }
    if (winner_count) *winner_count = best->count;
    return *best->set;
}

NormalizedBundleSet tts_generate(const Session& session, const ModelBundle& model,
                                 const Vocab& vocab, const DecodeConfig& config,
                                 TtsReport* report) {
    config.validate();
    model.validate();
    const auto prompt = model.prompt_for(session, vocab);

    std::vector<VoteEntry> entries;
    TtsReport rep;
    rep.n_candidates = config.n_samples;
    for (size_t i = 0; i < config.n_samples; ++i) {
        const float temp = config.n_samples == 1 ? 0.0f : config.tts_temperature;
        auto cand = decode(prompt, model, temp, config.seed + i, config.max_length);
        rep.any_truncated = rep.any_truncated || cand.truncated;
        VoteEntry e;
        e.set = normalize(parse_bundles(cand.tokens, session, vocab));
        e.log_prob = cand.log_prob;
        e.sample_index = i;
        entries.push_back(std::move(e));
    }

    size_t winner_count = 0;
    auto winner = majority_vote(entries, &winner_count);
    rep.vote_count = winner_count;

    std::map<std::string, size_t> counts;
    for (const auto& e : entries) counts[e.set.key()] += 1;
    rep.key_counts.assign(counts.begin(), counts.end());
    if (report) *report = rep;
    return winner;
}

void write_predictions_jsonl(const std::string& path,
                             const std::vector<PredictionRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write predictions file: " + path);
    for (const auto& r : records) {
        json j{{"session_id", r.session_id},
               {"bundles", r.bundles.bundles},
               {"n_candidates", r.n_candidates},
               {"vote_count", r.vote_count},
               {"truncated", r.truncated}};
        out << j.dump() << "\n";
    }
}

std::vector<PredictionRecord> read_predictions_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read predictions file: " + path);
    std::vector<PredictionRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = json::parse(line);
            PredictionRecord r;
            r.session_id = j.at("session_id").get<int>();
            r.bundles.bundles = j.at("bundles").get<std::vector<std::vector<int>>>();
            r.n_candidates = j.at("n_candidates").get<size_t>();
            r.vote_count = j.at("vote_count").get<size_t>();
            r.truncated = j.at("truncated").get<bool>();
            records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace rdk
