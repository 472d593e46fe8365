#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ptran/config.hpp"
#include "ptran/rng.hpp"
#include "ptran/tape.hpp"
#include "ptran/vocab.hpp"

namespace ptran {

// COGS parent offsets are encoded as classes over [-kCogsMaxOffset,
// +kCogsMaxOffset] plus a trailing "self" class; out-of-range gold parents
// are a data error, not a clip.
inline constexpr int64_t kCogsMaxOffset = 30;
inline constexpr int64_t kCogsOffsetClasses = 2 * kCogsMaxOffset + 2;  // offsets + self
inline constexpr int64_t kCogsSelfClass = kCogsOffsetClasses - 1;

inline int64_t cogs_offset_class(int64_t parent, int64_t i, int64_t n) {
    if (parent < 0 || parent == i) return kCogsSelfClass;
    if (parent >= n) throw FormatError("cogs parent index out of sentence range");
    const int64_t off = parent - i;
    if (off < -kCogsMaxOffset || off > kCogsMaxOffset)
        throw FormatError("cogs parent offset " + std::to_string(off) + " outside [-" +
                          std::to_string(kCogsMaxOffset) + ", +" + std::to_string(kCogsMaxOffset) +
                          "]");
    return off + kCogsMaxOffset;
}

// Projections from the representation width to each target inventory.
// mlm: one d x |V|; tagging/ner: one d x n_tags; classification: one
// d_root x n_classes; cogs: five d x n_classes[t] heads (parent offsets
// first, then the four tag inventories).
template <class Real>
struct TaskHead {
    std::string kind;
    std::vector<std::string> names;
    std::vector<Tensor<Real>> P;
    std::vector<Tensor<Real>> g;

    void zero_grads() {
        for (auto& t : g) t = Tensor<Real>(t.shape);
    }
};

template <class Real>
TaskHead<Real> make_task_head(const std::string& kind, const ModelConfig& cfg,
                              const std::vector<int64_t>& out_sizes, Rng& rng) {
    TaskHead<Real> head;
    head.kind = kind;
    const int64_t in = (kind == "classification") ? cfg.d_root : cfg.d;
    size_t expected = (kind == "cogs") ? 5 : 1;
    require(out_sizes.size() == expected, "make_task_head: wrong number of target inventories");
    for (size_t t = 0; t < out_sizes.size(); ++t) {
        require(out_sizes[t] >= 2, "make_task_head: target inventory needs >= 2 classes");
        head.names.push_back("head.P" + std::to_string(t));
        head.P.push_back(Tensor<Real>::randn({in, out_sizes[t]}, rng, Real(0.02)));
        head.g.push_back(Tensor<Real>({in, out_sizes[t]}));
    }
    return head;
}

// ---------------------------------------------------------------------------
// MLM masking
// ---------------------------------------------------------------------------

struct MaskedSentence {
    std::vector<int64_t> input;    // ids with masked positions replaced by <mask>
    std::vector<int64_t> original; // gold ids
    std::vector<bool> masked;
    int64_t n_masked = 0;
};

// Independently replaces each non-<unk>, non-<pad> token by <mask> with
// probability `rate`.
inline MaskedSentence apply_mlm_mask(const std::vector<int64_t>& ids, double rate, Rng& rng) {
    require(rate >= 0.0 && rate <= 1.0, "mask rate must lie in [0,1]");
    MaskedSentence out;
    out.original = ids;
    out.input = ids;
    out.masked.assign(ids.size(), false);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == Vocab::kUnk || ids[i] == Vocab::kPad) continue;
        if (rng.uniform() < rate) {
            out.input[i] = Vocab::kMask;
            out.masked[i] = true;
            ++out.n_masked;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-sentence loss graphs
// ---------------------------------------------------------------------------

// Cross-entropy over the vocabulary at masked positions only. Returns the
// loss node (mean NLL per masked token) or nullopt when the sentence has
// no masked position (skip signal).
template <class Real>
std::optional<typename Tape<Real>::Id> mlm_loss_graph(Tape<Real>& tape,
                                                      typename Tape<Real>::Id reps,
                                                      typename Tape<Real>::Id proj,
                                                      const MaskedSentence& ms) {
    if (ms.n_masked == 0) return std::nullopt;
    typename Tape<Real>::Id logits = tape.matmul(reps, proj);
    std::vector<Real> w(ms.original.size(), Real(0));
    for (size_t i = 0; i < ms.masked.size(); ++i)
        if (ms.masked[i]) w[i] = Real(1);
    return tape.cross_entropy_rows(logits, ms.original, std::move(w));
}

// Per-token cross-entropy over the tag inventory; also reports argmax hits
// for the accuracy count.
template <class Real>
typename Tape<Real>::Id tagging_loss_graph(Tape<Real>& tape, typename Tape<Real>::Id reps,
                                           typename Tape<Real>::Id proj,
                                           const std::vector<int64_t>& gold, int64_t* correct) {
    typename Tape<Real>::Id logits = tape.matmul(reps, proj);
    if (correct) {
        const Tensor<Real>& v = tape.value(logits);
        for (int64_t i = 0; i < v.dim(0); ++i) {
            int64_t best = 0;
            for (int64_t a = 1; a < v.dim(1); ++a)
                if (v(i, a) > v(i, best)) best = a;
            if (best == gold[size_t(i)]) ++*correct;
        }
    }
    return tape.cross_entropy_rows(logits, gold, std::vector<Real>(gold.size(), Real(1)));
}

// Root-node classification.
template <class Real>
typename Tape<Real>::Id classification_loss_graph(Tape<Real>& tape,
                                                  typename Tape<Real>::Id root_rep,
                                                  typename Tape<Real>::Id proj, int64_t gold,
                                                  int64_t* correct) {
    if (root_rep < 0) throw ContractError("classification requires the root node (use_root)");
    typename Tape<Real>::Id logits = tape.matmul(root_rep, proj);
    if (correct) {
        const Tensor<Real>& v = tape.value(logits);
        int64_t best = 0;
        for (int64_t a = 1; a < v.dim(1); ++a)
            if (v(0, a) > v(0, best)) best = a;
        if (best == gold) ++*correct;
    }
    return tape.cross_entropy_rows(logits, {gold}, {Real(1)});
}

// Sum of five per-word cross-entropies; `sentence_correct` is set iff every
// tag of every word is the argmax.
template <class Real>
typename Tape<Real>::Id cogs_loss_graph(Tape<Real>& tape, typename Tape<Real>::Id reps,
                                        const std::vector<typename Tape<Real>::Id>& projs,
                                        const std::vector<std::vector<int64_t>>& gold_rows,
                                        bool* sentence_correct) {
    require(projs.size() == 5 && gold_rows.size() == 5, "cogs expects five tag heads");
    typename Tape<Real>::Id total = -1;
    bool all_right = true;
    for (size_t t = 0; t < 5; ++t) {
        typename Tape<Real>::Id logits = tape.matmul(reps, projs[t]);
        const Tensor<Real>& v = tape.value(logits);
        for (int64_t i = 0; i < v.dim(0); ++i) {
            int64_t best = 0;
            for (int64_t a = 1; a < v.dim(1); ++a)
                if (v(i, a) > v(i, best)) best = a;
            if (best != gold_rows[t][size_t(i)]) all_right = false;
        }
        typename Tape<Real>::Id l = tape.cross_entropy_rows(
            logits, gold_rows[t], std::vector<Real>(gold_rows[t].size(), Real(1)));
        total = (total < 0) ? l : tape.add(total, l);
    }
    if (sentence_correct) *sentence_correct = all_right;
    return total;
}

// ---------------------------------------------------------------------------
// BIOES span F1
// ---------------------------------------------------------------------------

struct Span {
    int64_t start, end;  // inclusive token indices
    std::string type;
    bool operator==(const Span& o) const = default;
};

// Decodes well-formed spans only: S-X alone, or B-X I-X* E-X with one
// type throughout. Any invalid transition drops the partial span.
inline std::vector<Span> decode_bioes(const std::vector<std::string>& tags) {
    std::vector<Span> spans;
    int64_t start = -1;
    std::string type;
    auto split = [](const std::string& tag) -> std::pair<char, std::string> {
        if (tag == "O") return {'O', ""};
        if (tag.size() < 3 || tag[1] != '-' ||
            (tag[0] != 'B' && tag[0] != 'I' && tag[0] != 'E' && tag[0] != 'S'))
            throw FormatError("unknown BIOES tag: " + tag);
        return {tag[0], tag.substr(2)};
    };
    for (int64_t i = 0; i < int64_t(tags.size()); ++i) {
        auto [op, ty] = split(tags[size_t(i)]);
        switch (op) {
            case 'B':
                start = i;
                type = ty;
                break;
            case 'I':
                if (start < 0 || ty != type) { start = -1; }
                break;
            case 'E':
                if (start >= 0 && ty == type) spans.push_back({start, i, ty});
                start = -1;
                break;
            case 'S':
                spans.push_back({i, i, ty});
                start = -1;
                break;
            default:  // O
                start = -1;
                break;
        }
    }
    return spans;
}

struct F1Counts {
    int64_t matched = 0, predicted = 0, gold = 0;

    void add(const std::vector<std::string>& pred, const std::vector<std::string>& gold_tags) {
        if (pred.size() != gold_tags.size())
            throw DimensionError("bioes: predicted/gold length mismatch");
        std::vector<Span> p = decode_bioes(pred), g = decode_bioes(gold_tags);
        predicted += int64_t(p.size());
        gold += int64_t(g.size());
        std::vector<bool> used(g.size(), false);
        for (const Span& s : p)
            for (size_t j = 0; j < g.size(); ++j)
                if (!used[j] && g[j] == s) {
                    used[j] = true;
                    ++matched;
                    break;
                }
    }
    double precision() const { return predicted == 0 ? 0.0 : double(matched) / double(predicted); }
    double recall() const { return gold == 0 ? 0.0 : double(matched) / double(gold); }
    double f1() const {
        const double p = precision(), r = recall();
        return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
    }
};

}  // namespace ptran
