#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "deconf/metrics.hpp"
#include "deconf/synthworld.hpp"
#include "oracles.hpp"

using namespace deconf;
using ref::oracle_bleu;
using ref::oracle_cider;
using ref::ChairRow;
using ref::chair_fixture;
using ref::chair_fixture_lexicon;

namespace {

Tokens tk(const std::string& s) { return tokenize(s); }

std::vector<std::vector<Tokens>> single_refs(const std::vector<std::string>& refs) {
    std::vector<std::vector<Tokens>> out;
    for (const auto& r : refs) out.push_back({tk(r)});
    return out;
}

std::vector<Tokens> toks(const std::vector<std::string>& v) {
    std::vector<Tokens> out;
    for (const auto& s : v) out.push_back(tk(s));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// CIDEr-D

TEST(CiderD, IdenticalSingleReferencePairsScoreTen) {
    const std::vector<std::string> s{"a red apple sitting on the table", "there is a green dog running near a tree",
                                     "a white cup resting on the shelf"};
    const auto r = cider_d(toks(s), single_refs(s), IdfMode::Image);
    EXPECT_NEAR(r.score, 10.0, 1e-9);
    for (double v : r.per_image) EXPECT_NEAR(v, 10.0, 1e-9);
}

TEST(CiderD, SingleItemCorpusScoresTenAgainstTrainingTable) {
    const std::vector<std::string> train{"a red apple sitting on the table", "a brown chair standing on the floor",
                                         "a gray kite flying in the sky"};
    const auto table = CiderDf::build(single_refs(train));
    const Tokens c = tk("a red apple sitting on the table");
    EXPECT_NEAR(cider_d({c}, {{c}}, IdfMode::Corpus, &table).score, 10.0, 1e-9);
    // Image mode on a one-image corpus: every idf is zero.
    EXPECT_EQ(cider_d({c}, {{c}}, IdfMode::Image).score, 0.0);
}

TEST(CiderD, NoSharedUnigramIsZero) {
    const auto r = cider_d(toks({"x y z", "a b"}), single_refs({"a b c", "p q"}), IdfMode::Image);
    EXPECT_EQ(r.per_image[0], 0.0);
}

TEST(CiderD, HandWorkedTwoImages) {
    // Image 1 identical with only 1- and 2-grams: cosine 1 for two of four orders -> 5.
    // Image 2 shares the unigram "c" only: cosine 1/2 at n=1 -> 1.25.
    const auto r = cider_d(toks({"a b", "c e"}), single_refs({"a b", "c d"}), IdfMode::Image);
    EXPECT_NEAR(r.per_image[0], 5.0, 1e-12);
    EXPECT_NEAR(r.per_image[1], 1.25, 1e-12);
    EXPECT_NEAR(r.score, 3.125, 1e-12);
}

TEST(CiderD, SharedBigramToyMatchesOracle) {
    const auto c = toks({"a red apple on the table", "the dog near a tree"});
    const std::vector<std::vector<Tokens>> refs{{tk("a green apple on the shelf"), tk("there is a green apple")},
                                                {tk("a brown dog near a tree")}};
    EXPECT_NEAR(cider_d(c, refs, IdfMode::Image).score, oracle_cider(c, refs), 1e-12);
}

TEST(CiderD, SeededCorporaMatchOracleAndArePermutationInvariant) {
    const std::vector<std::string> words{"a", "red", "apple", "on", "the", "table", "dog", "near", "tree", "green"};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed, "test.cider");
        auto sent = [&] {
            Tokens t;
            const std::size_t n = 1 + rng.below(8);
            for (std::size_t i = 0; i < n; ++i) t.push_back(words[rng.below(words.size())]);
            return t;
        };
        const std::size_t n = 2 + rng.below(5);
        std::vector<Tokens> c;
        std::vector<std::vector<Tokens>> refs;
        for (std::size_t i = 0; i < n; ++i) {
            c.push_back(sent());
            refs.push_back({});
            for (std::size_t k = 0, nr = 1 + rng.below(3); k < nr; ++k) refs.back().push_back(sent());
        }
        const double s = cider_d(c, refs, IdfMode::Image).score;
        EXPECT_NEAR(s, oracle_cider(c, refs), 1e-12) << seed;
        EXPECT_GE(s, 0.0);
        std::reverse(c.begin(), c.end());
        std::reverse(refs.begin(), refs.end());
        EXPECT_NEAR(cider_d(c, refs, IdfMode::Image).score, s, 1e-12);
    }
}

TEST(CiderD, IdfModesDifferOnlyThroughDocumentFrequencies) {
    const auto c = toks({"a red apple on the table", "a dog near the tree"});
    const auto refs = single_refs({"a red apple on a table", "the dog near a tree"});
    // A training table built from exactly the evaluated references reproduces image mode.
    const auto table = CiderDf::build(refs);
    EXPECT_EQ(table.num_docs, 2.0);
    EXPECT_EQ(cider_d(c, refs, IdfMode::Corpus, &table).score, cider_d(c, refs, IdfMode::Image).score);
    const auto other = CiderDf::build(single_refs({"a red apple", "a cup", "the sky"}));
    EXPECT_NE(cider_d(c, refs, IdfMode::Corpus, &other).score, cider_d(c, refs, IdfMode::Image).score);
}

TEST(CiderD, Errors) {
    EXPECT_THROW(cider_d({tk("a")}, {{}}, IdfMode::Image), DataError);
    EXPECT_THROW(cider_d({tk("a")}, {{tk("a")}}, IdfMode::Corpus), DataError);
    EXPECT_THROW(idf_from_string("per-image"), DataError);
}

// ---------------------------------------------------------------------------
// BLEU-4

TEST(Bleu, IdenticalCorpusIsOne) {
    const auto c = toks({"a red apple on the table", "there is a dog near a tree"});
    std::vector<std::vector<Tokens>> refs;
    for (const auto& t : c) refs.push_back({t});
    EXPECT_NEAR(bleu4(c, refs).score, 1.0, 1e-15);
}

TEST(Bleu, NoFourGramOverlapIsZero) {
    EXPECT_EQ(bleu4(toks({"a b c d"}), single_refs({"a b c e"})).score, 0.0);
    EXPECT_GT(bleu4(toks({"a b c d"}), single_refs({"a b c e"}), true).score, 0.0);
}

TEST(Bleu, HandWorkedTwoPairs) {
    // p1 = 8/9, p2 = 6/7, p3 = 4/5, p4 = 2/3, lengths 9 vs 9.
    const auto c = toks({"a b c d", "a b c d e"});
    const auto refs = single_refs({"a b c e", "a b c d e"});
    const auto r = bleu4(c, refs);
    EXPECT_NEAR(r.score, std::pow(384.0 / 945.0, 0.25), 1e-15);
    EXPECT_NEAR(r.score, oracle_bleu(c, refs), 1e-12);
    EXPECT_EQ(r.brevity_penalty, 1.0);
}

TEST(Bleu, BrevityAndOracle) {
    const auto c = toks({"a red apple on the", "the dog near a tree"});
    const std::vector<std::vector<Tokens>> refs{{tk("a red apple on the table"), tk("a red apple")},
                                                {tk("there is the dog near a tree")}};
    const auto r = bleu4(c, refs);
    EXPECT_LT(r.brevity_penalty, 1.0);
    EXPECT_NEAR(r.score, oracle_bleu(c, refs), 1e-12);
}

TEST(Bleu, EmptyCandidatesWarn) {
    const auto r = bleu4({Tokens{}}, single_refs({"a b"}));
    EXPECT_EQ(r.score, 0.0);
    EXPECT_EQ(r.warnings.size(), 1u);
}

// ---------------------------------------------------------------------------
// CHAIR

TEST(Chair, Definitions) {
    const std::set<std::string> lex{"bed", "remote", "person", "dog"};
    EXPECT_EQ(chair(toks({"a person with a remote"}), {{"remote", "person"}}, lex).chairi, 0.0);
    const auto r = chair(toks({"a bed"}), {{"remote", "person"}}, lex);
    EXPECT_EQ(r.chairs, 1.0);
    EXPECT_EQ(r.chairi, 1.0);
}

TEST(Chair, TwentyCaptionFixture) {
    const std::set<std::string> lex = chair_fixture_lexicon();
    const std::vector<ChairRow> rows = chair_fixture();
    ASSERT_EQ(rows.size(), 20u);
    std::vector<Tokens> caps;
    std::vector<std::set<std::string>> objs;
    std::size_t mentions = 0, bad = 0, bad_caps = 0;
    for (const auto& r : rows) {
        caps.push_back(tk(r.caption));
        objs.push_back(r.objects);
        mentions += r.mentions;
        bad += r.hallucinated;
        bad_caps += r.hallucinated > 0;
        const auto one = chair({tk(r.caption)}, {r.objects}, lex);
        EXPECT_EQ(one.mentions, r.mentions) << r.caption;
        EXPECT_EQ(one.hallucinated_mentions, r.hallucinated) << r.caption;
    }
    const auto res = chair(caps, objs, lex);
    EXPECT_EQ(res.mentions, mentions);
    EXPECT_EQ(res.hallucinated_mentions, bad);
    EXPECT_EQ(res.hallucinated_captions, bad_caps);
    EXPECT_EQ(res.chairs, static_cast<double>(bad_caps) / 20.0);
    EXPECT_EQ(res.chairi, static_cast<double>(bad) / static_cast<double>(mentions));
    EXPECT_EQ(mentions, 37u);
    EXPECT_EQ(bad, 12u);
    EXPECT_EQ(bad_caps, 10u);
}

TEST(Chair, RatesBoundedAndGroundedCaptionNeverRaisesChairs) {
    const std::set<std::string> lex{"apple", "dog", "table", "grass"};
    Rng rng(1, "test.chair");
    const std::vector<std::string> pool{"apple", "dog", "table", "grass", "a", "on"};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Tokens> caps;
        std::vector<std::set<std::string>> objs;
        for (int i = 0; i < 5; ++i) {
            Tokens t;
            for (int k = 0; k < 4; ++k) t.push_back(pool[rng.below(pool.size())]);
            caps.push_back(t);
            objs.push_back({pool[rng.below(4)], pool[rng.below(4)]});
        }
        const auto before = chair(caps, objs, lex);
        EXPECT_GE(before.chairs, 0.0);
        EXPECT_LE(before.chairs, 1.0);
        EXPECT_GE(before.chairi, 0.0);
        EXPECT_LE(before.chairi, 1.0);
        caps.push_back(tk("a dog on grass"));
        objs.push_back({"dog", "grass"});
        EXPECT_LE(chair(caps, objs, lex).chairs, before.chairs);
    }
}

// ---------------------------------------------------------------------------
// Word accuracy

TEST(WordAccuracy, EqualCandidatesScoreOne) {
    const auto refs = std::vector<std::vector<Tokens>>{{tk("a red apple")}, {tk("a green dog running")}};
    const auto r = word_accuracy({tk("a red apple"), tk("a green dog running")}, refs,
                                 {{"attribute", {"red", "green"}}, {"identity", {"apple", "dog"}}, {"action", {"running"}}});
    for (const auto& [g, v] : r.group) EXPECT_EQ(v, 1.0) << g;
    EXPECT_EQ(r.group.size(), 3u);
}

TEST(WordAccuracy, AlwaysMajorityCaptionerIsHalf) {
    // Majority and minority attribute words not shared between concepts.
    std::vector<ConceptSpec> cs;
    std::set<std::string> attrs;
    const auto& nouns = default_nouns();
    for (std::size_t i = 0; i < 4; ++i) {
        cs.push_back({nouns[i], "maj" + std::to_string(i), "min" + std::to_string(i), "sitting", "standing", "table",
                      "grass"});
        attrs.insert({"maj" + std::to_string(i), "min" + std::to_string(i)});
    }
    WorldConfig cfg;
    cfg.concepts = cs;
    cfg.skew = 0.8;
    cfg.dim = 4;
    const auto ds = gen_world(cfg);
    std::vector<Tokens> cands;
    std::vector<std::vector<Tokens>> refs;
    for (const auto& s : ds.train) {
        const auto& c = *std::find_if(cs.begin(), cs.end(), [&](const ConceptSpec& x) { return x.noun == s.noun(); });
        cands.push_back(tk(caption_text(0, c.majority_attr, c.noun, s.actions[0], s.concepts[1])));
        refs.push_back(toks(s.captions));
    }
    const auto r = word_accuracy(cands, refs, {{"attribute", attrs}});
    EXPECT_NEAR(r.group.at("attribute"), 0.5, 1e-15);
    for (const auto& [w, acc] : r.per_word.at("attribute")) EXPECT_EQ(acc, w.rfind("maj", 0) == 0 ? 1.0 : 0.0);
}

TEST(WordAccuracy, ErrorsAndExclusions) {
    EXPECT_THROW(word_accuracy({tk("a")}, {{tk("a")}}, {}), DataError);
    const auto r = word_accuracy({tk("a red apple")}, {{tk("a red apple")}},
                                 {{"attribute", {"red", "blue"}}, {"action", {"flying"}}});
    EXPECT_EQ(r.group.count("action"), 0u);
    EXPECT_NE(std::find(r.excluded.begin(), r.excluded.end(), "action"), r.excluded.end());
    EXPECT_NE(std::find(r.excluded.begin(), r.excluded.end(), "attribute:blue"), r.excluded.end());
    EXPECT_EQ(r.group.at("attribute"), 1.0);
}

TEST(MetricReport, EvaluateAndJson) {
    EvalInputs in;
    in.candidates = toks({"a red apple sitting on the table", "a green dog running on the grass"});
    in.references = {{tk("a red apple sitting on the table")}, {tk("a green dog running on the grass")}};
    in.scene_objects = {{"apple", "table"}, {"dog", "grass"}};
    in.object_lexicon = {"apple", "table", "dog", "grass"};
    in.groups = {{"attribute", {"red", "green"}}};
    const auto r = evaluate(in, IdfMode::Image);
    EXPECT_NEAR(r.cider_d, 10.0, 1e-9);
    EXPECT_NEAR(r.bleu4, 1.0, 1e-15);
    EXPECT_EQ(r.chairi, 0.0);
    EXPECT_EQ(r.to_json().at("idf"), "image");
}
