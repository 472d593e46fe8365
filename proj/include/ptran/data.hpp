#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ptran/rng.hpp"
#include "ptran/tasks.hpp"
#include "ptran/vocab.hpp"

namespace ptran {

// Tag/label inventory: insertion-ordered string <-> id map without
// reserved entries.
class TagSet {
public:
    int64_t add(const std::string& tag) {
        auto it = ids_.find(tag);
        if (it != ids_.end()) return it->second;
        int64_t id = int64_t(tags_.size());
        ids_.emplace(tag, id);
        tags_.push_back(tag);
        return id;
    }
    int64_t id_of(const std::string& tag) const {
        auto it = ids_.find(tag);
        if (it == ids_.end()) throw FormatError("unknown tag: " + tag);
        return it->second;
    }
    bool contains(const std::string& tag) const { return ids_.count(tag) > 0; }
    const std::string& tag_of(int64_t id) const {
        if (id < 0 || id >= int64_t(tags_.size())) throw IndexError("tag id out of range");
        return tags_[size_t(id)];
    }
    int64_t size() const { return int64_t(tags_.size()); }
    const std::vector<std::string>& tags() const { return tags_; }

private:
    std::unordered_map<std::string, int64_t> ids_;
    std::vector<std::string> tags_;
};

struct Corpus {
    std::vector<std::vector<std::string>> sentences;
    std::vector<std::vector<std::string>> tags;  // tagging/ner, aligned 1:1
    std::vector<int64_t> labels;                 // classification, per sentence
    // cogs: parent offset class per word, plus four tag columns per word
    std::vector<std::vector<int64_t>> cogs_parent;
    std::vector<std::array<std::vector<std::string>, 4>> cogs_tags;

    size_t size() const { return sentences.size(); }
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

[[noreturn]] inline void data_error(const std::string& path, int64_t lineno,
                                    const std::string& what) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": " + what);
}

inline std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return in;
}

}  // namespace detail

// One sentence per line, ASCII-whitespace tokenized; blank lines skipped.
inline Corpus load_text_corpus(const std::string& path) {
    std::ifstream in = detail::open_or_throw(path);
    Corpus c;
    std::string line;
    while (std::getline(in, line)) {
        auto toks = detail::split_ws(line);
        if (!toks.empty()) c.sentences.push_back(std::move(toks));
    }
    return c;
}

// Column format with blank-line sentence breaks; '#' comment lines skipped.
inline Corpus load_conll_columns(const std::string& path, int token_col, int tag_col) {
    std::ifstream in = detail::open_or_throw(path);
    Corpus c;
    std::vector<std::string> words, tags;
    std::string line;
    int64_t lineno = 0;
    auto flush = [&] {
        if (!words.empty()) {
            c.sentences.push_back(std::move(words));
            c.tags.push_back(std::move(tags));
            words.clear();
            tags.clear();
        }
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) { flush(); continue; }
        if (line[0] == '#') continue;
        auto cols = detail::split_ws(line);
        if (int64_t(cols.size()) <= std::max(token_col, tag_col))
            detail::data_error(path, lineno, "row has " + std::to_string(cols.size()) +
                                                 " columns, need token column " +
                                                 std::to_string(token_col) + " and tag column " +
                                                 std::to_string(tag_col));
        words.push_back(cols[size_t(token_col)]);
        tags.push_back(cols[size_t(tag_col)]);
    }
    flush();
    return c;
}

// "label<TAB>sentence" lines.
inline Corpus load_label_tsv(const std::string& path) {
    std::ifstream in = detail::open_or_throw(path);
    Corpus c;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) detail::data_error(path, lineno, "missing tab separator");
        int64_t label = 0;
        try {
            label = std::stoll(line.substr(0, tab));
        } catch (const std::exception&) {
            detail::data_error(path, lineno, "label is not an integer");
        }
        auto toks = detail::split_ws(line.substr(tab + 1));
        if (toks.empty()) detail::data_error(path, lineno, "empty sentence");
        c.sentences.push_back(std::move(toks));
        c.labels.push_back(label);
    }
    return c;
}

// One word per row, 6 columns (word, parent index, four tags), blank-line
// sentence breaks. The parent column is converted to relative-offset
// classes (-1 sentinel -> "self").
inline Corpus load_cogs_tsv(const std::string& path) {
    std::ifstream in = detail::open_or_throw(path);
    Corpus c;
    std::vector<std::string> words;
    std::vector<int64_t> parents;
    std::array<std::vector<std::string>, 4> tags;
    std::string line;
    int64_t lineno = 0, sent_start = 1;
    auto flush = [&] {
        if (words.empty()) return;
        const int64_t n = int64_t(words.size());
        std::vector<int64_t> cls((size_t)n);
        for (int64_t i = 0; i < n; ++i) {
            try {
                cls[size_t(i)] = cogs_offset_class(parents[size_t(i)], i, n);
            } catch (const FormatError& e) {
                detail::data_error(path, sent_start, std::string(e.what()) + " (word " +
                                                         std::to_string(i) + ")");
            }
        }
        c.sentences.push_back(std::move(words));
        c.cogs_parent.push_back(std::move(cls));
        c.cogs_tags.push_back(std::move(tags));
        words.clear();
        parents.clear();
        for (auto& t : tags) t.clear();
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) { flush(); sent_start = lineno + 1; continue; }
        auto cols = detail::split_ws(line);
        if (cols.size() != 6)
            detail::data_error(path, lineno, "expected 6 columns, got " +
                                                 std::to_string(cols.size()));
        words.push_back(cols[0]);
        try {
            parents.push_back(std::stoll(cols[1]));
        } catch (const std::exception&) {
            detail::data_error(path, lineno, "parent column is not an integer");
        }
        for (int t = 0; t < 4; ++t) tags[size_t(t)].push_back(cols[size_t(t) + 2]);
    }
    flush();
    return c;
}

// Deterministic: frequency descending, ties broken lexicographically;
// tokens below min_freq fall back to <unk>.
inline Vocab build_vocab(const Corpus& corpus, int64_t min_freq = 1) {
    require(!corpus.sentences.empty(), "build_vocab: empty corpus");
    std::map<std::string, int64_t> freq;
    for (const auto& sent : corpus.sentences)
        for (const auto& tok : sent) ++freq[tok];
    std::vector<std::pair<std::string, int64_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    for (const auto& [tok, n] : items)
        if (n >= min_freq) v.add(tok);
    return v;
}

inline std::vector<int64_t> encode(const Vocab& v, const std::vector<std::string>& toks) {
    std::vector<int64_t> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(v.id_of(t));
    return ids;
}

// Epoch batching: seeded shuffle of sentence indices, fixed-size groups.
inline std::vector<std::vector<size_t>> make_batches(size_t n_items, int64_t batch_size, Rng& rng,
                                                     bool shuffle = true) {
    require(batch_size >= 1, "batch_size must be >= 1");
    std::vector<size_t> order(n_items);
    for (size_t i = 0; i < n_items; ++i) order[i] = i;
    if (shuffle) rng.shuffle(order);
    std::vector<std::vector<size_t>> batches;
    for (size_t at = 0; at < n_items; at += size_t(batch_size))
        batches.emplace_back(order.begin() + int64_t(at),
                             order.begin() + int64_t(std::min(n_items, at + size_t(batch_size))));
    return batches;
}

// Rows padded with <pad> to a common width; true lengths kept alongside.
struct PaddedBatch {
    std::vector<std::vector<int64_t>> rows;
    std::vector<int64_t> lengths;
    int64_t width = 0;
};

inline PaddedBatch pad_batch(const std::vector<std::vector<int64_t>>& sentences) {
    PaddedBatch b;
    for (const auto& s : sentences) b.width = std::max(b.width, int64_t(s.size()));
    for (const auto& s : sentences) {
        require(!s.empty(), "pad_batch: empty sentence");
        b.lengths.push_back(int64_t(s.size()));
        std::vector<int64_t> row = s;
        row.resize(size_t(b.width), Vocab::kPad);
        b.rows.push_back(std::move(row));
    }
    return b;
}

}  // namespace ptran
