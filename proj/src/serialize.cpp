#include "rdk/serialize.hpp"

#include <algorithm>
#include <numeric>

namespace rdk {

const char* variant_name(InputVariant v) {
    switch (v) {
        case InputVariant::raw: return "raw";
        case InputVariant::high: return "high";
        case InputVariant::fine: return "fine";
        case InputVariant::merged: return "merged";
    }
    return "?";
}

InputVariant variant_from_name(const std::string& name) {
    if (name == "raw") return InputVariant::raw;
    if (name == "high") return InputVariant::high;
    if (name == "fine") return InputVariant::fine;
    if (name == "merged") return InputVariant::merged;
    throw ValidationError("unknown input variant: " + name);
}

SerializedInput serialize_session(const Session& session, InputVariant variant, const Vocab& vocab,
                                  const KnowledgeStore* knowledge) {
    const bool needs_knowledge = variant != InputVariant::raw;
    if (needs_knowledge && knowledge == nullptr) {
        throw ValidationError(std::string("variant '") + variant_name(variant) +
                              "' requires a knowledge store");
    }
    if (!needs_knowledge && knowledge != nullptr) {
        throw ValidationError("raw variant takes no knowledge");
    }

    SerializedInput out;
    out.variant = variant;
    out.tokens.push_back(kBos);

    auto push_rules = [&] {
        if (knowledge->rules.empty()) {
            throw ValidationError("knowledge store has no high-level rules");
        }
        out.tokens.push_back(kHighMarker);
        for (const auto& tok : knowledge->rules) out.tokens.push_back(vocab.id(tok));
    };
    auto push_intents = [&] {
        out.tokens.push_back(kFineMarker);
        for (const auto& tok : knowledge->fine_for(session.session_id)) {
            out.tokens.push_back(vocab.id(tok));
        }
    };
    switch (variant) {
        case InputVariant::raw: break;
        case InputVariant::high:
            push_rules();
            out.tokens.push_back(kSep);
            break;
        case InputVariant::fine:
            push_intents();
            out.tokens.push_back(kSep);
            break;
        case InputVariant::merged:
            push_rules();
            push_intents();
            out.tokens.push_back(kSep);
            break;
    }
    for (const auto& item : session.items) {
        out.tokens.push_back(vocab.item_id(static_cast<size_t>(item.id)));
        out.tokens.push_back(vocab.category_id(static_cast<size_t>(item.category)));
    }
    out.tokens.push_back(kSep);
    out.prompt_length = out.tokens.size();
    return out;
}

size_t target_permutation_count(size_t n_bundles, size_t p_max) {
    size_t fact = 1;
    for (size_t i = 2; i <= n_bundles; ++i) {
        fact *= i;
        if (fact >= p_max) return p_max;
    }
    return std::min(fact, p_max);
}

TargetSequence serialize_bundles(const std::vector<std::vector<int>>& bundles,
                                 size_t permutation_index, const Vocab& vocab, size_t p_max) {
    for (const auto& b : bundles) {
        if (b.size() < 2) {
            throw ValidationError("a bundle is a subset of at least two items; got size " +
                                  std::to_string(b.size()));
        }
    }
    const size_t count = target_permutation_count(bundles.size(), p_max);
    if (permutation_index >= count) {
        throw DimensionError("permutation index " + std::to_string(permutation_index) +
                             " out of range, session admits " + std::to_string(count));
    }
    std::vector<size_t> order(bundles.size());
    std::iota(order.begin(), order.end(), 0);
    for (size_t p = 0; p < permutation_index; ++p) std::next_permutation(order.begin(), order.end());

    TargetSequence out;
    out.permutation_index = permutation_index;
    for (size_t pos : order) {
        out.tokens.push_back(kBundleOpen);
        auto items = bundles[pos];
        std::sort(items.begin(), items.end());
        for (int id : items) out.tokens.push_back(vocab.item_id(static_cast<size_t>(id)));
        out.tokens.push_back(kBundleClose);
    }
    out.tokens.push_back(kEos);
    return out;
}

std::vector<TargetSequence> all_targets(const Session& session, const Vocab& vocab, size_t p_max) {
    const size_t count = target_permutation_count(session.bundles.size(), p_max);
    std::vector<TargetSequence> out;
    out.reserve(count);
    for (size_t p = 0; p < count; ++p) out.push_back(serialize_bundles(session.bundles, p, vocab, p_max));
    return out;
}

}  // namespace rdk
