#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "unims/errors.hpp"

namespace unims {

// Reserved vocabulary ids, fixed forever.
enum ReservedId : int {
    kPadId = 0,
    kBosId = 1,
    kEosId = 2,
    kClsId = 3,
    kSepId = 4,
    kUnkId = 5,
};
constexpr int kNumReserved = 6;

inline const char* reserved_token(int id) {
    static const char* names[kNumReserved] = {"<pad>", "<bos>", "<eos>", "<cls>", "<sep>", "<unk>"};
    return names[id];
}

// Lowercase, split on whitespace, detach punctuation as single-char tokens.
// '-' stays attached so score-like tokens ("2-1") survive in one piece.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c) && c != '-') {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

class Vocabulary {
public:
    Vocabulary() {
        for (int i = 0; i < kNumReserved; ++i) {
            id_to_token_.push_back(reserved_token(i));
            token_to_id_[reserved_token(i)] = i;
        }
    }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_[token] = id;
        return id;
    }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw LookupError("vocabulary: id " + std::to_string(id) + " out of range");
        return id_to_token_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(id(t));
        return ids;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> tokens;
        tokens.reserve(ids.size());
        for (int i : ids) tokens.push_back(token(i));
        return tokens;
    }

    // Non-reserved tokens in id order (the serialized form).
    std::vector<std::string> entries() const {
        return std::vector<std::string>(id_to_token_.begin() + kNumReserved, id_to_token_.end());
    }

    static Vocabulary from_entries(const std::vector<std::string>& entries) {
        Vocabulary v;
        for (const auto& t : entries) v.add(t);
        return v;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// Most-frequent tokens first, ties broken lexicographically, capped at
// max_size non-reserved entries.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& token_streams,
                              int min_count = 1, int max_size = 50000) {
    if (token_streams.empty()) throw InputError("build_vocab: empty corpus");
    std::map<std::string, long long> counts;
    for (const auto& stream : token_streams)
        for (const auto& t : stream) ++counts[t];
    std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [token, count] : ranked) {
        if (count < min_count) continue;
        if (v.size() - kNumReserved >= max_size) break;
        v.add(token);
    }
    return v;
}

}  // namespace unims
