#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deconf/synthworld.hpp"

using namespace deconf;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

WorldConfig big(double skew, std::uint64_t seed) {
    WorldConfig c;
    c.skew = skew;
    c.train = 10000;
    c.val = 0;
    c.test = 0;
    c.dim = 8;
    c.seed = seed;
    return c;
}

WorldConfig sized(std::size_t train, std::size_t val, std::size_t test, std::uint64_t seed = 0) {
    WorldConfig c;
    c.train = train;
    c.val = val;
    c.test = test;
    c.seed = seed;
    return c;
}

double majority_share(const std::vector<Scene>& scenes, const std::vector<ConceptSpec>& cs) {
    std::size_t maj = 0;
    for (const auto& s : scenes) {
        for (const auto& c : cs) {
            if (c.noun == s.noun() && s.attributes[0] == c.majority_attr) ++maj;
        }
    }
    return static_cast<double>(maj) / static_cast<double>(scenes.size());
}

}  // namespace

TEST(SynthWorld, DefaultSkewFrequency) {
    const auto ds = gen_world(big(kDefaultSkew, 1));
    const double sigma = std::sqrt(0.54 * 0.46 / 1e4);
    EXPECT_NEAR(majority_share(ds.train, ds.concepts), 0.54, 3 * sigma);
}

TEST(SynthWorld, BalancedAtHalf) {
    const auto ds = gen_world(big(0.5, 2));
    EXPECT_NEAR(majority_share(ds.train, ds.concepts), 0.5, 3 * std::sqrt(0.25 / 1e4));
}

TEST(SynthWorld, InvalidConfig) {
    WorldConfig c;
    c.skew = 0.4;
    EXPECT_THROW(gen_world(c), DataError);
    c.skew = 1.1;
    EXPECT_THROW(gen_world(c), DataError);
    c.skew = 0.8;
    c.regions = 0;
    EXPECT_THROW(gen_world(c), DataError);
    c.regions = 6;
    c.concepts = {default_concepts()[0], default_concepts()[0]};
    EXPECT_THROW(gen_world(c), DataError);
}

TEST(SynthWorld, SameSeedSameFiles) {
    WorldConfig c;
    c.train = 100;
    c.val = 10;
    c.test = 20;
    c.seed = 9;
    const auto base = std::filesystem::temp_directory_path() / "deconf_world_test";
    std::filesystem::remove_all(base);
    save_dataset((base / "a").string(), gen_world(c));
    save_dataset((base / "b").string(), gen_world(c));
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "vocab.tsv", "lexicon.tsv", "structures.tsv",
                          "concepts.json"}) {
        EXPECT_EQ(slurp(base / "a" / f), slurp(base / "b" / f)) << f;
    }
    c.seed = 10;
    save_dataset((base / "c").string(), gen_world(c));
    EXPECT_NE(slurp(base / "a" / "train.jsonl"), slurp(base / "c" / "train.jsonl"));

    const auto back = load_dataset((base / "a").string());
    const auto orig = gen_world(sized(100, 10, 20, 9));
    ASSERT_EQ(back.train.size(), 100u);
    EXPECT_EQ(back.train[3].features, orig.train[3].features);
    EXPECT_EQ(back.test[7].captions, orig.test[7].captions);
    EXPECT_EQ(back.vocab.words(), orig.vocab.words());
    EXPECT_EQ(back.concept_nouns(), orig.concept_nouns());
    std::filesystem::remove_all(base);
}

TEST(SynthWorld, ReferencesAreGrounded) {
    WorldConfig c;
    c.train = 300;
    c.test = 300;
    const auto ds = gen_world(c);
    const auto objects = ds.object_words();
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const auto& s : *split) {
            ASSERT_EQ(s.captions.size(), 2u);
            for (const auto& cap : s.captions) {
                const auto toks = tokenize(cap);
                EXPECT_LE(toks.size(), ds.vocab.max_len());
                for (const auto& w : toks) {
                    EXPECT_TRUE(ds.vocab.contains(w)) << w;
                    if (objects.count(w)) {
                        EXPECT_TRUE(std::find(s.concepts.begin(), s.concepts.end(), w) != s.concepts.end()) << cap;
                    }
                    if (ds.lexicon.at(w) == "adj") {
                        EXPECT_EQ(w, s.attributes[0]);
                    }
                    if (ds.lexicon.at(w) == "verb") {
                        EXPECT_EQ(w, s.actions[0]);
                    }
                }
            }
        }
    }
}

TEST(SynthWorld, CentroidClassifierSeparatesConcepts) {
    WorldConfig c;
    c.skew = 0.8;
    const auto ds = gen_world(c);
    std::map<std::string, std::vector<double>> centroid;
    std::map<std::string, std::size_t> count;
    for (const auto& s : ds.train) {
        auto& v = centroid[s.noun()];
        v.resize(c.dim, 0.0);
        for (std::size_t m = 0; m < 3; ++m)
            for (std::size_t j = 0; j < c.dim; ++j) v[j] += s.features[m][j];
        count[s.noun()] += 3;
    }
    for (auto& [n, v] : centroid)
        for (double& x : v) x /= static_cast<double>(count[n]);
    std::size_t right = 0, total = 0;
    for (const auto& s : ds.test) {
        for (std::size_t m = 0; m < 3; ++m) {
            std::string best;
            double bd = INFINITY;
            for (const auto& [n, v] : centroid) {
                double d = 0.0;
                for (std::size_t j = 0; j < c.dim; ++j) d += std::pow(s.features[m][j] - v[j], 2);
                if (d < bd) {
                    bd = d;
                    best = n;
                }
            }
            right += best == s.noun();
            ++total;
        }
    }
    EXPECT_GE(static_cast<double>(right) / static_cast<double>(total), 0.99);
}

TEST(SynthWorld, SplitsDisjointAndTestBalanced) {
    WorldConfig c;
    c.skew = 0.8;
    c.test = 4000;
    const auto ds = gen_world(c);
    std::set<std::string> ids;
    std::set<std::vector<double>> firsts;
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const auto& s : *split) {
            EXPECT_TRUE(ids.insert(s.id).second);
            EXPECT_TRUE(firsts.insert(s.features[0]).second);
            EXPECT_EQ(s.features.size(), c.regions);
            EXPECT_EQ(s.features[0].size(), c.dim);
        }
    }
    std::size_t minority = 0;
    for (const auto& s : ds.test) minority += s.minority;
    EXPECT_NEAR(static_cast<double>(minority) / 4000.0, 0.5, 3 * std::sqrt(0.25 / 4000));
    EXPECT_NEAR(majority_share(ds.train, ds.concepts), 0.8, 3 * std::sqrt(0.16 / 2000));
}

TEST(SkewReport, SingleConceptSingleAttribute) {
    WorldConfig c;
    c.concepts = {{"apple", "red", "red", "sitting", "sitting", "table", "table"}};
    c.skew = 0.7;
    c.train = 50;
    const auto rows = skew_report(gen_world(c).train);
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& r : rows) EXPECT_EQ(r.share, 1.0);
}

TEST(SkewReport, SkewedWorldAndSums) {
    const auto ds = gen_world(big(0.8, 3));
    const auto rows = skew_report(ds.train);
    std::map<std::pair<std::string, std::string>, double> sums;
    for (const auto& r : rows) sums[{r.concept_noun, r.group}] += r.share;
    for (const auto& [k, v] : sums) EXPECT_NEAR(v, 1.0, 1e-12);
    std::size_t maj = 0, total = 0;
    for (const auto& r : rows) {
        if (r.group != "attribute") continue;
        total += r.count;
        for (const auto& c : ds.concepts)
            if (c.noun == r.concept_noun && c.majority_attr == r.word) maj += r.count;
    }
    EXPECT_EQ(total, 10000u);
    EXPECT_NEAR(static_cast<double>(maj) / 1e4, 0.8, 3 * std::sqrt(0.16 / 1e4));
    EXPECT_TRUE(skew_report({}).empty());
}

TEST(SynthWorld, StructuresSurviveFiltering) {
    const auto ds = gen_world(sized(10, 0, 0));
    std::set<std::string> vocab(ds.vocab.words().begin(), ds.vocab.words().end());
    const auto kept = filter_structures(ds.structures, vocab, 2.5);
    EXPECT_EQ(kept.size(), 6u * ds.concepts.size());
}
