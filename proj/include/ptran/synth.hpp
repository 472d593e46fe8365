#pragma once

#include "ptran/data.hpp"

namespace ptran::synth {

// Topic-cluster language: each sentence draws one of 10 topics and then
// samples every word uniformly from that topic's 6-word cluster. A unigram
// model sees ~uniform(60); a contextual model can pin the topic from the
// unmasked words, so masked perplexity approaches 6.
inline Corpus topic_mlm_corpus(size_t n_sentences, Rng& rng, int64_t min_len = 8,
                               int64_t max_len = 12) {
    constexpr int kTopics = 10, kPerTopic = 6;
    Corpus c;
    for (size_t s = 0; s < n_sentences; ++s) {
        const int topic = int(rng.below(kTopics));
        const int64_t len = min_len + int64_t(rng.below(uint64_t(max_len - min_len + 1)));
        std::vector<std::string> sent;
        for (int64_t i = 0; i < len; ++i)
            sent.push_back("t" + std::to_string(topic) + "w" +
                           std::to_string(rng.below(kPerTopic)));
        c.sentences.push_back(std::move(sent));
    }
    return c;
}

// Tagging grammar where the tag of word i is the group of word i+1 (the
// last word is tagged by its own group), so tags are decidable only from
// +-1 context, never from the word alone.
inline Corpus context_tag_corpus(size_t n_sentences, Rng& rng, int64_t min_len = 6,
                                 int64_t max_len = 10) {
    constexpr int kGroups = 3, kPerGroup = 4;
    Corpus c;
    for (size_t s = 0; s < n_sentences; ++s) {
        const int64_t len = min_len + int64_t(rng.below(uint64_t(max_len - min_len + 1)));
        std::vector<int> groups((size_t)len);
        std::vector<std::string> sent((size_t)len), tags((size_t)len);
        for (int64_t i = 0; i < len; ++i) {
            groups[size_t(i)] = int(rng.below(kGroups));
            sent[size_t(i)] = "g" + std::to_string(groups[size_t(i)]) + "w" +
                              std::to_string(rng.below(kPerGroup));
        }
        for (int64_t i = 0; i < len; ++i) {
            const int g = (i + 1 < len) ? groups[size_t(i + 1)] : groups[size_t(i)];
            tags[size_t(i)] = "NEXT" + std::to_string(g);
        }
        c.sentences.push_back(std::move(sent));
        c.tags.push_back(std::move(tags));
    }
    return c;
}

// NER-style corpus with BIOES tags: filler words are O; a title token
// opens a 2-3 word PER span; a standalone place token is an S-LOC.
inline Corpus pattern_ner_corpus(size_t n_sentences, Rng& rng) {
    Corpus c;
    for (size_t s = 0; s < n_sentences; ++s) {
        std::vector<std::string> sent, tags;
        const int64_t chunks = 3 + int64_t(rng.below(3));
        for (int64_t k = 0; k < chunks; ++k) {
            const uint64_t kind = rng.below(4);
            if (kind == 0) {
                sent.push_back("title" + std::to_string(rng.below(2)));
                tags.push_back("B-PER");
                const uint64_t extra = rng.below(2);
                if (extra) {
                    sent.push_back("name" + std::to_string(rng.below(4)));
                    tags.push_back("I-PER");
                }
                sent.push_back("name" + std::to_string(rng.below(4)));
                tags.push_back("E-PER");
            } else if (kind == 1) {
                sent.push_back("place" + std::to_string(rng.below(3)));
                tags.push_back("S-LOC");
            } else {
                sent.push_back("filler" + std::to_string(rng.below(6)));
                tags.push_back("O");
            }
        }
        c.sentences.push_back(std::move(sent));
        c.tags.push_back(std::move(tags));
    }
    return c;
}

// Sentence classification solvable only by aggregation: the label is the
// parity of the number of "pivot" tokens (0-3 occurrences).
inline Corpus keyword_parity_corpus(size_t n_sentences, Rng& rng, int64_t len = 8) {
    Corpus c;
    for (size_t s = 0; s < n_sentences; ++s) {
        const int64_t n_pivot = int64_t(rng.below(4));
        std::vector<std::string> sent((size_t)len);
        for (int64_t i = 0; i < len; ++i)
            sent[size_t(i)] = "plain" + std::to_string(rng.below(8));
        // place pivots at distinct positions
        std::vector<size_t> pos((size_t)len);
        for (int64_t i = 0; i < len; ++i) pos[size_t(i)] = size_t(i);
        rng.shuffle(pos);
        for (int64_t k = 0; k < n_pivot; ++k) sent[pos[size_t(k)]] = "pivot";
        c.sentences.push_back(std::move(sent));
        c.labels.push_back(n_pivot % 2);
    }
    return c;
}

// Tiny COGS-like template corpus: "DET NOUN VERB DET NOUN". Five word-level
// targets: parent offset, role, category, determiner flag, verb name.
inline Corpus cogs_template_corpus(size_t n_sentences, Rng& rng) {
    static const std::vector<std::string> nouns = {"dog", "cat", "boy", "girl"};
    static const std::vector<std::string> verbs = {"saw", "liked", "found"};
    Corpus c;
    for (size_t s = 0; s < n_sentences; ++s) {
        const std::string n1 = nouns[rng.below(nouns.size())];
        const std::string n2 = nouns[rng.below(nouns.size())];
        const std::string vb = verbs[rng.below(verbs.size())];
        c.sentences.push_back({"the", n1, vb, "the", n2});
        // parents: det->noun, subject/object->verb, verb->self
        std::vector<int64_t> parents = {1, 2, -1, 4, 2};
        std::vector<int64_t> cls;
        for (int64_t i = 0; i < 5; ++i)
            cls.push_back(cogs_offset_class(parents[size_t(i)], i, 5));
        c.cogs_parent.push_back(std::move(cls));
        std::array<std::vector<std::string>, 4> t;
        t[0] = {"det", "agent", "pred", "det", "theme"};          // role
        t[1] = {"DET", "NOUN", "VERB", "DET", "NOUN"};            // category
        t[2] = {"the", "none", "none", "the", "none"};            // determiner
        t[3] = {"none", "none", vb, "none", "none"};              // verb name
        c.cogs_tags.push_back(std::move(t));
    }
    return c;
}

// Unigram-baseline masked perplexity: exp of the mean NLL a frequency
// unigram model (Laplace +1 over the vocabulary) assigns to held-out
// tokens. Independent oracle for the MLM acceptance bar.
inline double unigram_perplexity(const Corpus& train, const Corpus& valid, const Vocab& vocab) {
    std::vector<double> count((size_t)vocab.size(), 1.0);
    double total = double(vocab.size());
    for (const auto& sent : train.sentences)
        for (const auto& tok : sent) {
            count[size_t(vocab.id_of(tok))] += 1.0;
            total += 1.0;
        }
    double nll = 0.0;
    int64_t n = 0;
    for (const auto& sent : valid.sentences)
        for (const auto& tok : sent) {
            nll += -std::log(count[size_t(vocab.id_of(tok))] / total);
            ++n;
        }
    require(n > 0, "unigram_perplexity: empty validation corpus");
    return std::exp(nll / double(n));
}

}  // namespace ptran::synth
