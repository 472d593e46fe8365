#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "ptran/data.hpp"
#include "ptran/synth.hpp"

using namespace ptran;

namespace {

struct TmpFile {
    std::string path;
    explicit TmpFile(const std::string& content) {
        static int counter = 0;
        path = "ptran_test_fixture_" + std::to_string(counter++) + ".txt";
        std::ofstream out(path);
        out << content;
    }
    ~TmpFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("load_text_corpus") {
    TmpFile f("the cat\n\nsat\n");
    Corpus c = load_text_corpus(f.path);
    REQUIRE(c.size() == 2);
    CHECK(c.sentences[0] == std::vector<std::string>({"the", "cat"}));
    CHECK(c.sentences[1] == std::vector<std::string>({"sat"}));

    // token count matches an independent count
    int64_t total = 0;
    for (const auto& s : c.sentences) total += int64_t(s.size());
    CHECK(total == 3);

    // <mask> in raw text is accepted as a literal token
    TmpFile g("a <mask> b\n");
    Corpus cm = load_text_corpus(g.path);
    CHECK(cm.sentences[0][1] == "<mask>");

    CHECK_THROWS_AS((void)load_text_corpus("no_such_file_anywhere.txt"), IoError);
}

TEST_CASE("load_conll_columns") {
    TmpFile f(
        "# a comment\n"
        "The\tDT\tx\n"
        "dog\tNN\ty\n"
        "\n"
        "Runs\tVBZ\tz\n");
    Corpus c = load_conll_columns(f.path, 0, 1);
    REQUIRE(c.size() == 2);
    CHECK(c.sentences[0] == std::vector<std::string>({"The", "dog"}));
    CHECK(c.tags[0] == std::vector<std::string>({"DT", "NN"}));
    CHECK(c.tags[1] == std::vector<std::string>({"VBZ"}));
    for (size_t i = 0; i < c.size(); ++i) CHECK(c.sentences[i].size() == c.tags[i].size());

    // alternate column selection
    Corpus c2 = load_conll_columns(f.path, 0, 2);
    CHECK(c2.tags[0] == std::vector<std::string>({"x", "y"}));

    // ragged row: error names the line
    TmpFile bad("ok\tA\nbroken\n");
    try {
        (void)load_conll_columns(bad.path, 0, 1);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
}

TEST_CASE("load_label_tsv") {
    TmpFile f("1\tgood movie\n0\tbad one\n");
    Corpus c = load_label_tsv(f.path);
    REQUIRE(c.size() == 2);
    CHECK(c.labels == std::vector<int64_t>({1, 0}));
    CHECK(c.sentences[1] == std::vector<std::string>({"bad", "one"}));

    TmpFile missing("no tab here\n");
    CHECK_THROWS_AS((void)load_label_tsv(missing.path), FormatError);
    TmpFile badlabel("x\tsentence\n");
    CHECK_THROWS_AS((void)load_label_tsv(badlabel.path), FormatError);
    TmpFile empty("1\t\n");
    CHECK_THROWS_AS((void)load_label_tsv(empty.path), FormatError);
}

TEST_CASE("load_cogs_tsv") {
    TmpFile f(
        "the\t1\tdet\tnone\tthe\tnone\n"
        "cat\t-1\tagent\tnoun\tnone\tnone\n"
        "\n"
        "run\t-1\tverb\tnone\tnone\trun\n");
    Corpus c = load_cogs_tsv(f.path);
    REQUIRE(c.size() == 2);
    // word 0's parent is word 1: offset +1
    CHECK(c.cogs_parent[0][0] == kCogsMaxOffset + 1);
    // -1 sentinel -> self class
    CHECK(c.cogs_parent[0][1] == kCogsSelfClass);
    CHECK(c.cogs_parent[1][0] == kCogsSelfClass);
    CHECK(c.cogs_tags[0][0] == std::vector<std::string>({"det", "agent"}));
    CHECK(c.cogs_tags[0][2] == std::vector<std::string>({"the", "none"}));

    TmpFile badparent("w\tx\ta\tb\tc\td\n");
    CHECK_THROWS_AS((void)load_cogs_tsv(badparent.path), FormatError);
    TmpFile badcols("w\t0\ta\tb\n");
    CHECK_THROWS_AS((void)load_cogs_tsv(badcols.path), FormatError);
    // parent index beyond the sentence is a data error
    TmpFile badrange("w\t5\ta\tb\tc\td\n");
    CHECK_THROWS_AS((void)load_cogs_tsv(badrange.path), FormatError);
}

TEST_CASE("build_vocab: threshold, determinism, OOV") {
    Corpus c;
    c.sentences = {{"a", "a", "b"}};
    Vocab v = build_vocab(c, 2);
    // reserved ids plus "a"; "b" fell below the threshold
    CHECK(int64_t(v.size()) == 4);
    CHECK(v.id_of("a") == 3);
    CHECK(v.id_of("b") == Vocab::kUnk);
    CHECK(v.id_of("<mask>") == Vocab::kMask);

    // determinism and ordering: frequency desc, then lexicographic
    Corpus c2;
    c2.sentences = {{"z", "z", "m", "m", "k"}};
    Vocab v1 = build_vocab(c2), v2 = build_vocab(c2);
    CHECK(v1.tokens() == v2.tokens());
    CHECK(v1.id_of("m") == 3);  // freq 2, before z lexicographically
    CHECK(v1.id_of("z") == 4);
    CHECK(v1.id_of("k") == 5);

    CHECK(encode(v1, {"z", "nope", "k"}) == std::vector<int64_t>({4, Vocab::kUnk, 5}));
}

TEST_CASE("make_batches: determinism, partition, conservation") {
    Rng a(60), b(60);
    auto ba = make_batches(10, 3, a);
    auto bb = make_batches(10, 3, b);
    CHECK(ba == bb);
    REQUIRE(ba.size() == 4);
    CHECK(ba[3].size() == 1);

    // every index appears exactly once
    std::vector<int> seen(10, 0);
    for (const auto& batch : ba)
        for (size_t i : batch) ++seen[i];
    for (int s : seen) CHECK(s == 1);

    // unshuffled order is the identity
    Rng c(61);
    auto plain = make_batches(5, 2, c, /*shuffle=*/false);
    CHECK(plain[0] == std::vector<size_t>({0, 1}));
    CHECK(plain[2] == std::vector<size_t>({4}));

    CHECK_THROWS_AS((void)make_batches(3, 0, c), ContractError);
}

TEST_CASE("pad_batch") {
    PaddedBatch b = pad_batch({{4, 5, 6}, {7}});
    CHECK(b.width == 3);
    CHECK(b.lengths == std::vector<int64_t>({3, 1}));
    CHECK(b.rows[1] == std::vector<int64_t>({7, Vocab::kPad, Vocab::kPad}));
    CHECK(b.rows[0] == std::vector<int64_t>({4, 5, 6}));
    CHECK_THROWS_AS((void)pad_batch({{1}, {}}), ContractError);
}

TEST_CASE("TagSet round trip") {
    TagSet t;
    CHECK(t.add("NN") == 0);
    CHECK(t.add("VB") == 1);
    CHECK(t.add("NN") == 0);  // idempotent
    CHECK(t.id_of("VB") == 1);
    CHECK(t.tag_of(0) == "NN");
    CHECK(t.size() == 2);
    CHECK_THROWS_AS((void)t.id_of("JJ"), FormatError);
    CHECK_THROWS_AS((void)t.tag_of(5), IndexError);
}

TEST_CASE("synthetic corpora are well-formed and deterministic") {
    using namespace ptran::synth;
    {
        Rng r1(70), r2(70);
        auto c = topic_mlm_corpus(50, r1);
        CHECK(c.size() == 50);
        for (const auto& s : c.sentences) {
            CHECK(s.size() >= 8);
            CHECK(s.size() <= 12);
        }
        auto c2 = topic_mlm_corpus(50, r2);
        CHECK(c.sentences == c2.sentences);
    }
    {
        Rng r(71);
        auto c = context_tag_corpus(40, r);
        REQUIRE(c.size() == 40);
        for (size_t i = 0; i < c.size(); ++i) {
            REQUIRE(c.sentences[i].size() == c.tags[i].size());
            // the tag of word t names the group of word t+1
            for (size_t t = 0; t + 1 < c.sentences[i].size(); ++t) {
                char next_group = c.sentences[i][t + 1][1];
                CHECK(c.tags[i][t] == std::string("NEXT") + next_group);
            }
        }
    }
    {
        Rng r(72);
        auto c = pattern_ner_corpus(30, r);
        for (size_t i = 0; i < c.size(); ++i) {
            REQUIRE(c.sentences[i].size() == c.tags[i].size());
            // all tag strings decode without error
            (void)decode_bioes(c.tags[i]);
        }
    }
    {
        Rng r(73);
        auto c = keyword_parity_corpus(60, r);
        REQUIRE(c.labels.size() == c.size());
        for (size_t i = 0; i < c.size(); ++i) {
            int64_t pivots = 0;
            for (const auto& w : c.sentences[i])
                if (w == "pivot") ++pivots;
            CHECK(c.labels[i] == pivots % 2);
        }
    }
    {
        Rng r(74);
        auto c = cogs_template_corpus(20, r);
        for (size_t i = 0; i < c.size(); ++i) {
            CHECK(c.sentences[i].size() == 5);
            CHECK(c.cogs_parent[i].size() == 5);
            for (const auto& col : c.cogs_tags[i]) CHECK(col.size() == 5);
        }
    }
}
