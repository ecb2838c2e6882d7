#include "rdk/vocab.hpp"

#include <fstream>

#include <json.hpp>

namespace rdk {

Vocab Vocab::build(size_t n_categories, size_t n_intents, size_t n_rules, size_t n_items,
                   size_t ceiling) {
    Vocab v;
    v.n_categories_ = n_categories;
    v.n_intents_ = n_intents;
    v.n_rules_ = n_rules;
    v.n_items_ = n_items;
    const size_t total = kNumReserved + n_categories + n_intents + n_rules + n_items;
    if (ceiling > 0 && total > ceiling) {
        throw ConfigError("vocabulary of " + std::to_string(total) + " tokens exceeds ceiling " +
                          std::to_string(ceiling));
    }
    v.tokens_.reserve(total);
    v.tokens_ = {"PAD", "BOS", "EOS", "SEP", "B_OPEN", "B_CLOSE", "KH", "KF"};
    for (size_t c = 0; c < n_categories; ++c) v.tokens_.push_back("CAT_" + std::to_string(c));
    for (size_t k = 0; k < n_intents; ++k) v.tokens_.push_back("INTENT_" + std::to_string(k));
    for (size_t j = 0; j < n_rules; ++j) v.tokens_.push_back("RULE_" + std::to_string(j));
    for (size_t i = 0; i < n_items; ++i) v.tokens_.push_back("ITEM_" + std::to_string(i));
    for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw ValidationError("unknown vocabulary token: " + token);
    return it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
        throw ValidationError("token id out of range: " + std::to_string(id));
    }
    return tokens_[static_cast<size_t>(id)];
}

int Vocab::category_id(size_t c) const {
    if (c >= n_categories_) throw ValidationError("category index out of range: " + std::to_string(c));
    return static_cast<int>(kNumReserved + c);
}

int Vocab::intent_id(size_t k) const {
    if (k >= n_intents_) throw ValidationError("intent index out of range: " + std::to_string(k));
    return static_cast<int>(kNumReserved + n_categories_ + k);
}

int Vocab::rule_id(size_t j) const {
    if (j >= n_rules_) throw ValidationError("rule index out of range: " + std::to_string(j));
    return static_cast<int>(kNumReserved + n_categories_ + n_intents_ + j);
}

int Vocab::item_id(size_t i) const {
    if (i >= n_items_) throw ValidationError("item index out of range: " + std::to_string(i));
    return static_cast<int>(kNumReserved + n_categories_ + n_intents_ + n_rules_ + i);
}

bool Vocab::is_item(int id) const { return item_index(id) >= 0; }

int Vocab::item_index(int id) const {
    const int base = static_cast<int>(kNumReserved + n_categories_ + n_intents_ + n_rules_);
    if (id < base || id >= base + static_cast<int>(n_items_)) return -1;
    return id - base;
}

std::string Vocab::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = static_cast<int>(i);
    return j.dump(2);
}

void Vocab::write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    out << to_json() << "\n";
}

Vocab Vocab::read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("invalid vocabulary JSON in " + path + ": " + e.what());
    }
    // Counts are recovered from the token names; ids must be dense.
    size_t nc = 0, nk = 0, nr = 0, ni = 0;
    for (auto& [tok, id] : j.items()) {
        (void)id;
        if (tok.rfind("CAT_", 0) == 0) ++nc;
        else if (tok.rfind("INTENT_", 0) == 0) ++nk;
        else if (tok.rfind("RULE_", 0) == 0) ++nr;
        else if (tok.rfind("ITEM_", 0) == 0) ++ni;
    }
    Vocab v = build(nc, nk, nr, ni);
    if (v.size() != j.size()) throw ParseError("vocabulary file " + path + " has non-dense ids");
    for (auto& [tok, id] : j.items()) {
        if (v.id(tok) != id.get<int>()) {
            throw ParseError("vocabulary file " + path + " disagrees with canonical assignment at " + tok);
        }
    }
    return v;
}

}  // namespace rdk
