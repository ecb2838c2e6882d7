#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "rdk/common.hpp"

namespace rdk {

// Reserved token ids shared by every vocabulary.
enum ReservedToken : int {
    kPad = 0,
    kBos = 1,
    kEos = 2,
    kSep = 3,
    kBundleOpen = 4,
    kBundleClose = 5,
    kHighMarker = 6,   // KH
    kFineMarker = 7,   // KF
    kNumReserved = 8,
};

// Dense symbolic vocabulary: reserved ids, then CAT_<c>, INTENT_<k>, RULE_<j>,
// ITEM_<i> blocks in ascending index order. A pure function of the counts, so
// identical world configurations always produce identical vocabularies.
class Vocab {
public:
    static Vocab build(size_t n_categories, size_t n_intents, size_t n_rules, size_t n_items,
                       size_t ceiling = 0);

    int id(const std::string& token) const;
    const std::string& token(int id) const;
    size_t size() const { return tokens_.size(); }

    int category_id(size_t c) const;
    int intent_id(size_t k) const;
    int rule_id(size_t j) const;
    int item_id(size_t i) const;

    bool is_item(int id) const;
    // item index for an ITEM token id, -1 otherwise
    int item_index(int id) const;

    size_t n_categories() const { return n_categories_; }
    size_t n_intents() const { return n_intents_; }
    size_t n_rules() const { return n_rules_; }
    size_t n_items() const { return n_items_; }

    std::string to_json() const;
    void write_file(const std::string& path) const;
    static Vocab read_file(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    size_t n_categories_ = 0, n_intents_ = 0, n_rules_ = 0, n_items_ = 0;
};

}  // namespace rdk
