#pragma once

#include <vector>

#include "rdk/vocab.hpp"
#include "rdk/worldgen.hpp"

namespace rdk {

enum class InputVariant { raw, high, fine, merged };

const char* variant_name(InputVariant v);
InputVariant variant_from_name(const std::string& name);

struct SerializedInput {
    std::vector<int> tokens;   // tokens[0] == BOS
    size_t prompt_length = 0;  // pooling / loss boundary; inputs are all prompt
    InputVariant variant = InputVariant::raw;
};

struct TargetSequence {
    std::vector<int> tokens;  // bundle blocks, terminated by EOS
    size_t permutation_index = 0;
};

// raw:    BOS, (ITEM, CAT)*, SEP
// high:   BOS, KH, rules..., SEP, (ITEM, CAT)*, SEP
// fine:   BOS, KF, intents..., SEP, (ITEM, CAT)*, SEP
// merged: BOS, KH, rules..., KF, intents..., SEP, (ITEM, CAT)*, SEP
// Knowledge must be present exactly when the variant needs it.
SerializedInput serialize_session(const Session& session, InputVariant variant, const Vocab& vocab,
                                  const KnowledgeStore* knowledge);

// Number of distinct bundle-order permutations used for training targets.
size_t target_permutation_count(size_t n_bundles, size_t p_max);

// Bundle blocks in the order given by the permutation_index-th lexicographic
// permutation of bundle positions; items ascending within each block.
TargetSequence serialize_bundles(const std::vector<std::vector<int>>& bundles,
                                 size_t permutation_index, const Vocab& vocab, size_t p_max);

// All permuted targets for a session, indices 0..count-1.
std::vector<TargetSequence> all_targets(const Session& session, const Vocab& vocab, size_t p_max);

}  // namespace rdk
