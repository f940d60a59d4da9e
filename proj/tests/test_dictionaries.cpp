#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "deconf/dictionaries.hpp"

using namespace deconf;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "deconf_dict_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

EmbeddingTable table(const std::vector<std::string>& words, std::size_t dim, std::vector<double> rows) {
    Vocab v(words);
    // Specials get zero vectors.
    std::vector<double> all(3 * dim, 0.0);
    all.insert(all.end(), rows.begin(), rows.end());
    return EmbeddingTable(v, Tensor::from({v.size(), dim}, std::move(all)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

TEST(Vocab, SpecialsAndRoundTrip) {
    Vocab v({"a", "red", "apple"});
    EXPECT_EQ(v.size(), 6u);
    EXPECT_EQ(v.id("<bos>"), Vocab::kBos);
    EXPECT_EQ(v.id("zebra"), Vocab::kUnk);
    EXPECT_EQ(v.decode(v.encode("a red apple")), "a red apple");
    EXPECT_EQ(v.decode({Vocab::kBos, v.id("a"), Vocab::kEos, v.id("red")}), "a");
    EXPECT_THROW(Vocab({"a", "a"}), DataError);
    EXPECT_THROW(Vocab({"two words"}), DataError);

    const auto path = scratch("vocab.tsv").string();
    save_vocab(path, v);
    EXPECT_EQ(load_vocab(path).words(), v.words());
}

// ---------------------------------------------------------------------------
// Visual dictionary

TEST(VisualDictionary, DistinctFeaturesBecomeAtoms) {
    Rng rng(3, "test.kmeans");
    std::vector<std::vector<double>> x;
    for (int i = 0; i < 7; ++i) x.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    const auto r = learn_visual_dictionary(x, 7, 11);
    EXPECT_EQ(r.objective_trace.back(), 0.0);
    std::vector<std::vector<double>> atoms;
    for (std::size_t k = 0; k < 7; ++k) atoms.push_back({r.dict.atoms.at(k, 0), r.dict.atoms.at(k, 1), r.dict.atoms.at(k, 2)});
    auto sorted_x = x;
    std::sort(atoms.begin(), atoms.end());
    std::sort(sorted_x.begin(), sorted_x.end());
    EXPECT_EQ(atoms, sorted_x);
}

TEST(VisualDictionary, TwoBlobs) {
    Rng rng(5, "test.blobs");
    std::vector<std::vector<double>> x;
    for (int i = 0; i < 10000; ++i) {
        const double cx = (i % 2) ? 10.0 : 0.0;
        x.push_back({cx + rng.normal(0, 0.01), rng.normal(0, 0.01)});
    }
    const auto r = learn_visual_dictionary(x, 2, 1);
    std::vector<double> cx{r.dict.atoms.at(0, 0), r.dict.atoms.at(1, 0)};
    std::sort(cx.begin(), cx.end());
    EXPECT_NEAR(cx[0], 0.0, 0.1);
    EXPECT_NEAR(cx[1], 10.0, 0.1);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(r.dict.atoms.at(k, 1), 0.0, 0.1);
}

TEST(VisualDictionary, DeterministicAndMonotone) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed, "test.kmeans.data");
        std::vector<std::vector<double>> x;
        for (int i = 0; i < 400; ++i) {
            std::vector<double> v(4);
            for (double& e : v) e = rng.normal(0, 1) + 3.0 * static_cast<double>(i % 5);
            x.push_back(v);
        }
        const auto a = learn_visual_dictionary(x, 8, seed, {32, 20, 500});
        const auto b = learn_visual_dictionary(x, 8, seed, {32, 20, 500});
        EXPECT_EQ(a.dict.atoms.values(), b.dict.atoms.values());
        EXPECT_TRUE(a.converged);
        for (std::size_t i = 1; i < a.objective_trace.size(); ++i) {
            EXPECT_LE(a.objective_trace[i], a.objective_trace[i - 1]) << "seed " << seed << " iter " << i;
        }
        // Fixed point: centers are the means of their clusters and no point prefers another center.
        const std::size_t k = 8, d = 4;
        std::vector<double> sums(k * d, 0.0);
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            ++sizes[a.assignment[i]];
            for (std::size_t j = 0; j < d; ++j) sums[a.assignment[i] * d + j] += x[i][j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (!sizes[c]) continue;
            for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(a.dict.atoms.at(c, j), sums[c * d + j] / sizes[c], 1e-12);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            double own = 0.0;
            for (std::size_t j = 0; j < d; ++j) own += std::pow(x[i][j] - a.dict.atoms.at(a.assignment[i], j), 2);
            for (std::size_t c = 0; c < k; ++c) {
                double other = 0.0;
                for (std::size_t j = 0; j < d; ++j) other += std::pow(x[i][j] - a.dict.atoms.at(c, j), 2);
                EXPECT_GE(other, own - 1e-12);
            }
        }
    }
}

TEST(VisualDictionary, Errors) {
    EXPECT_THROW(learn_visual_dictionary({{1.0}, {2.0}}, 3, 0), DataError);
    EXPECT_THROW(learn_visual_dictionary({{1.0}}, 0, 0), DataError);
}

TEST(VisualDictionary, DuplicateFeaturesStillFillK) {
    const auto r = learn_visual_dictionary({{1.0}, {1.0}, {1.0}, {2.0}}, 3, 0);
    EXPECT_EQ(r.dict.size(), 3u);
    EXPECT_EQ(r.objective_trace.back(), 0.0);
}

// ---------------------------------------------------------------------------
// Structures

TEST(StructureDictionary, HandMeans) {
    const auto emb = table({"a", "b", "c", "same"}, 2, {1, 0, 0, 1, -1, 0, 0.25, -4});
    const auto r = build_structure_dictionary({{"a", "b", "c", 3.0}, {"same", "same", "same", 3.0}}, emb);
    EXPECT_EQ(r.dict.labels, (std::vector<std::string>{"a|b|c", "same|same|same"}));
    EXPECT_EQ(r.dict.atoms.at(0, 0), 0.0);
    EXPECT_NEAR(r.dict.atoms.at(0, 1), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(r.dict.atoms.at(1, 0), 0.25);
    EXPECT_EQ(r.dict.atoms.at(1, 1), -4.0);
}

TEST(StructureDictionary, ExactThreeWordMeans) {
    Rng rng(8, "test.structures");
    std::vector<std::string> words;
    for (int i = 0; i < 10; ++i) words.push_back("w" + std::to_string(i));
    const auto emb = EmbeddingTable(Vocab(words), Tensor::uniform({13, 5}, rng, 2.0));
    std::vector<SemanticStructure> ss;
    for (int i = 0; i < 30; ++i) {
        ss.push_back({words[rng.below(10)], words[rng.below(10)], words[rng.below(10)], 3.0});
    }
    const auto r = build_structure_dictionary(ss, emb);
    for (std::size_t k = 0; k < r.dict.size(); ++k) {
        const auto parts = r.dict.labels[k];
        const auto p1 = parts.find('|'), p2 = parts.rfind('|');
        const auto a = emb.vector(parts.substr(0, p1)), b = emb.vector(parts.substr(p1 + 1, p2 - p1 - 1)),
                   c = emb.vector(parts.substr(p2 + 1));
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(r.dict.atoms.at(k, j), (a[j] + b[j] + c[j]) / 3.0, 1e-15);
    }
    EXPECT_EQ(r.dict.size() + r.rejected.size(), ss.size());
}

TEST(StructureDictionary, RejectionReportAndErrors) {
    const auto emb = table({"a", "b"}, 1, {1, 2});
    const auto r = build_structure_dictionary({{"a", "b", "zebra", 3.0}, {"a", "b", "a", 3.0}, {"a", "b", "a", 4.0}}, emb);
    EXPECT_EQ(r.dict.size(), 1u);
    ASSERT_EQ(r.rejected.size(), 2u);
    EXPECT_NE(r.rejected[0].find("zebra"), std::string::npos);
    EXPECT_NE(r.rejected[1].find("duplicate"), std::string::npos);
    EXPECT_THROW(build_structure_dictionary({}, emb), DataError);
    EXPECT_THROW(build_structure_dictionary({{"x", "y", "z", 3.0}}, emb), DataError);
}

TEST(FilterStructures, Examples) {
    const std::set<std::string> vocab{"apple", "on", "table"};
    EXPECT_TRUE(filter_structures({{"apple", "on", "table", 2.4}}, vocab, 2.5).empty());
    EXPECT_EQ(filter_structures({{"apple", "on", "table", 3.0}}, vocab, 2.5).size(), 1u);
    EXPECT_TRUE(filter_structures({{"apple", "in", "table", 3.0}}, vocab, 2.5).empty());
    EXPECT_EQ(filter_structures({{"apple", "on", "table", 2.5}}, vocab, 2.5).size(), 1u);
}

TEST(FilterStructures, SubsetOrderAndMonotone) {
    Rng rng(2, "test.filter");
    const std::vector<std::string> words{"a", "b", "c", "d", "e"};
    std::vector<SemanticStructure> ss;
    for (int i = 0; i < 200; ++i) {
        ss.push_back({words[rng.below(5)], words[rng.below(5)], words[rng.below(5)], rng.uniform(0, 5)});
    }
    const std::set<std::string> vocab{"a", "b", "c", "d"};
    std::size_t prev = ss.size() + 1;
    for (double t : {0.0, 1.0, 2.5, 4.0, 6.0}) {
        const auto out = filter_structures(ss, vocab, t);
        EXPECT_LE(out.size(), prev);
        prev = out.size();
        // Subsequence of the input.
        std::size_t j = 0;
        for (const auto& s : out) {
            while (j < ss.size() && !(ss[j] == s)) ++j;
            ASSERT_LT(j, ss.size());
            ++j;
        }
    }
    const auto wide = filter_structures(ss, {"a", "b", "c", "d", "e"}, 2.5);
    EXPECT_GE(wide.size(), filter_structures(ss, vocab, 2.5).size());
}

// ---------------------------------------------------------------------------
// Key words

TEST(KeywordDictionary, LexiconRule) {
    std::vector<std::vector<std::string>> corpus;
    for (int i = 0; i < 100; ++i) corpus.push_back({"the"});
    for (int i = 0; i < 25; ++i) corpus.push_back({"apple"});
    for (int i = 0; i < 5; ++i) corpus.push_back({"pear"});
    const Lexicon lex{{"the", "function"}, {"apple", "noun"}, {"pear", "noun"}};
    const auto emb = table({"the", "apple", "pear"}, 2, {1, 1, 2, 2, 3, 3});
    const auto d = build_keyword_dictionary(corpus, 20, lex, emb);
    EXPECT_EQ(d.labels, std::vector<std::string>{"apple"});
    EXPECT_EQ(d.atoms.values(), (std::vector<double>{2, 2}));
    EXPECT_EQ(d.kind, DictKind::Keyword);
    EXPECT_THROW(build_keyword_dictionary(corpus, kNoMinCount, lex, emb), DataError);
    EXPECT_THROW(build_keyword_dictionary({}, 0, lex, emb), DataError);
}

TEST(KeywordDictionary, ShrinkingMinCountNeverRemoves) {
    Rng rng(4, "test.keywords");
    std::vector<std::string> words;
    Lexicon lex;
    const char* tags[] = {"noun", "verb", "adj", "function"};
    for (int i = 0; i < 20; ++i) {
        words.push_back("w" + std::to_string(i));
        lex[words.back()] = tags[i % 4];
    }
    std::vector<std::vector<std::string>> corpus;
    for (int s = 0; s < 300; ++s) {
        std::vector<std::string> sent;
        for (int t = 0; t < 5; ++t) sent.push_back(words[std::min<std::size_t>(rng.below(20), rng.below(20))]);
        corpus.push_back(sent);
    }
    std::vector<std::string> prev;
    for (std::size_t mc : {200u, 100u, 50u, 20u, 5u, 0u}) {
        const auto cur = keyword_list(corpus, mc, lex);
        EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end())) << mc;
        prev = cur;
    }
}

// ---------------------------------------------------------------------------
// Files

TEST(TsvFiles, StructuresRoundTripAndErrors) {
    const auto path = scratch("structures.tsv").string();
    const std::vector<SemanticStructure> ss{{"apple", "on", "table", 3.25}, {"dog", "near", "grass", 2.0}};
    write_structures_tsv(path, ss);
    EXPECT_EQ(read_structures_tsv(path), ss);
    {
        std::ofstream out(path);
        out << "# comment\napple\ton\ttable\n";
    }
    EXPECT_THROW(read_structures_tsv(path), DataError);
    {
        std::ofstream out(path);
        out << "apple\ton\ttable\t-1\n";
    }
    EXPECT_THROW(read_structures_tsv(path), DataError);
    {
        std::ofstream out(path);
        out << "apple\ton\ttable\t2,5\n";
    }
    EXPECT_THROW(read_structures_tsv(path), DataError);
    EXPECT_THROW(read_structures_tsv(scratch("missing.tsv").string()), DataError);
}

TEST(TsvFiles, Lexicon) {
    const auto path = scratch("lexicon.tsv").string();
    const Lexicon lex{{"apple", "noun"}, {"red", "adj"}, {"the", "function"}, {"sitting", "verb"}};
    write_lexicon_tsv(path, lex);
    EXPECT_EQ(read_lexicon_tsv(path), lex);
    {
        std::ofstream out(path);
        out << "apple\tthing\n";
    }
    EXPECT_THROW(read_lexicon_tsv(path), DataError);
}

TEST(TsvFiles, ShippedSampleParses) {
    const auto ss = read_structures_tsv(std::string(DECONF_DATA_DIR) + "/structures_sample.tsv");
    EXPECT_GT(ss.size(), 10u);
    const auto lex = read_lexicon_tsv(std::string(DECONF_DATA_DIR) + "/lexicon_sample.tsv");
    std::set<std::string> vocab;
    for (const auto& [w, t] : lex) vocab.insert(w);
    const auto kept = filter_structures(ss, vocab, 2.5);
    EXPECT_GT(kept.size(), 0u);
    EXPECT_LT(kept.size(), ss.size());
}
