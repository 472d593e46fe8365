#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ptran/common.hpp"

namespace ptran {

// Token <-> id bijection with reserved ids for <unk>, <mask>, <pad>.
class Vocab {
public:
    static constexpr int64_t kUnk = 0;
    static constexpr int64_t kMask = 1;
    static constexpr int64_t kPad = 2;

    Vocab() {
        add("<unk>");
        add("<mask>");
        add("<pad>");
    }

    int64_t add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        int64_t id = int64_t(id_to_token_.size());
        token_to_id_.emplace(token, id);
        id_to_token_.push_back(token);
        return id;
    }

    // Lookup with <unk> fallback.
    int64_t id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

    const std::string& token_of(int64_t id) const {
        if (id < 0 || id >= int64_t(id_to_token_.size())) throw IndexError("vocab id out of range");
        return id_to_token_[size_t(id)];
    }

    int64_t size() const { return int64_t(id_to_token_.size()); }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

private:
    std::unordered_map<std::string, int64_t> token_to_id_;
    std::vector<std::string> id_to_token_;
};

}  // namespace ptran
