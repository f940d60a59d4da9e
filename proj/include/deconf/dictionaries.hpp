#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deconf/deconf_modules.hpp"
#include "deconf/errors.hpp"
#include "deconf/rng.hpp"
#include "deconf/vocab.hpp"

namespace deconf {

// ---------------------------------------------------------------------------
// X: visual dictionary by k-means.

struct KMeansOptions {
    std::size_t batch_size = 256;
    std::size_t minibatch_iterations = 100;
    std::size_t max_lloyd_iterations = 500;
};

struct VisualDictionaryResult {
    ExptDictionary dict;
    std::vector<std::size_t> assignment;
    std::vector<double> objective_trace;  // Lloyd phase, starting from the mini-batch centers
    bool converged = false;
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const double* c) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - c[j];
        s += d * d;
    }
    return s;
}

// Ties go to the lowest center id.
inline std::size_t nearest(const std::vector<double>& x, const std::vector<double>& centers, std::size_t k,
                           double* dist = nullptr) {
    const std::size_t d = x.size();
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        const double v = sq_dist(x, centers.data() + c * d);
        if (v < bd) {
            bd = v;
            best = c;
        }
    }
    if (dist) *dist = bd;
    return best;
}

inline std::vector<double> kmeanspp(const std::vector<std::vector<double>>& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.size(), d = x[0].size();
    std::vector<double> centers;
    centers.reserve(k * d);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.below(n);
    for (std::size_t c = 0; c < k; ++c) {
        centers.insert(centers.end(), x[pick].begin(), x[pick].end());
        if (c + 1 == k) break;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(x[i], centers.data() + c * d));
            total += d2[i];
        }
        pick = total > 0.0 ? rng.categorical(d2) : rng.below(n);
    }
    return centers;
}

}  // namespace detail

inline double kmeans_objective(const std::vector<std::vector<double>>& x, const std::vector<double>& centers,
                               const std::vector<std::size_t>& assignment) {
    const std::size_t d = x[0].size();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += detail::sq_dist(x[i], centers.data() + assignment[i] * d);
    return s;
}

/**
 * k-means++ seeding, mini-batch updates with per-center 1/count step sizes,
 * then Lloyd iterations until the assignment stops changing.
 */
inline VisualDictionaryResult learn_visual_dictionary(const std::vector<std::vector<double>>& features, std::size_t k,
                                                      std::uint64_t seed, const KMeansOptions& opt = {}) {
    if (k == 0) throw DataError("dictionary size K must be at least 1");
    if (features.size() < k) {
        throw DataError("need at least K=" + std::to_string(k) + " features, got " + std::to_string(features.size()));
    }
    const std::size_t n = features.size(), d = features[0].size();
    for (const auto& f : features) {
        if (f.size() != d) throw ShapeError("features have mixed dimensions");
        for (double v : f) {
            if (!std::isfinite(v)) throw DataError("feature is not finite");
        }
    }
    Rng rng(seed, "dict.kmeans");
    std::vector<double> centers = detail::kmeanspp(features, k, rng);

    std::vector<std::size_t> counts(k, 0);
    const std::size_t batch = std::min(n, opt.batch_size);
    std::vector<std::size_t> chosen(batch), nearest(batch);
    for (std::size_t it = 0; it < opt.minibatch_iterations; ++it) {
        for (auto& c : chosen) c = rng.below(n);
        for (std::size_t b = 0; b < batch; ++b) nearest[b] = detail::nearest(features[chosen[b]], centers, k);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t c = nearest[b];
            const double eta = 1.0 / static_cast<double>(++counts[c]);
            double* cc = centers.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) cc[j] += eta * (features[chosen[b]][j] - cc[j]);
        }
    }

    VisualDictionaryResult r;
    r.assignment.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) r.assignment[i] = detail::nearest(features[i], centers, k);
    r.objective_trace.push_back(kmeans_objective(features, centers, r.assignment));
    for (std::size_t it = 0; it < opt.max_lloyd_iterations; ++it) {
        std::vector<double> sums(k * d, 0.0);
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++sizes[r.assignment[i]];
            for (std::size_t j = 0; j < d; ++j) sums[r.assignment[i] * d + j] += features[i][j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] == 0) continue;  // empty cluster keeps its center
            for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = sums[c * d + j] / static_cast<double>(sizes[c]);
        }
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Keep the current center on ties so the objective cannot go up.
            double cur = detail::sq_dist(features[i], centers.data() + r.assignment[i] * d), best = 0.0;
            const std::size_t c = detail::nearest(features[i], centers, k, &best);
            if (best < cur && c != r.assignment[i]) {
                r.assignment[i] = c;
                changed = true;
            }
        }
        r.objective_trace.push_back(kmeans_objective(features, centers, r.assignment));
        if (!changed) {
            r.converged = true;
            break;
        }
    }

    std::vector<std::string> labels;
    for (std::size_t c = 0; c < k; ++c) labels.push_back("x" + std::to_string(c));
    r.dict = ExptDictionary{DictKind::Visual, std::move(labels), Tensor::from({k, d}, std::move(centers))};
    r.dict.validate();
    return r;
}

// ---------------------------------------------------------------------------
// Z: semantic structures.

struct SemanticStructure {
    std::string subject, relation, object;
    double weight = 0.0;

    std::string label() const { return subject + "|" + relation + "|" + object; }
    bool operator==(const SemanticStructure&) const = default;
};

inline std::vector<SemanticStructure> filter_structures(const std::vector<SemanticStructure>& in,
                                                        const std::set<std::string>& vocab, double min_weight) {
    std::vector<SemanticStructure> out;
    for (const auto& s : in) {
        if (s.weight < min_weight) continue;
        if (!vocab.count(s.subject) || !vocab.count(s.relation) || !vocab.count(s.object)) continue;
        out.push_back(s);
    }
    return out;
}

struct StructureDictionaryResult {
    ExptDictionary dict;
    std::vector<std::string> rejected;  // "<label>: <reason>"
};

inline StructureDictionaryResult build_structure_dictionary(const std::vector<SemanticStructure>& structures,
                                                            const EmbeddingTable& emb) {
    if (structures.empty()) throw DataError("no semantic structures to build a dictionary from");
    StructureDictionaryResult r;
    std::vector<std::string> labels;
    std::vector<double> rows;
    std::set<std::string> seen;
    for (const auto& s : structures) {
        std::string missing;
        for (const auto* w : {&s.subject, &s.relation, &s.object}) {
            if (!emb.has(*w)) missing += (missing.empty() ? "" : ",") + *w;
        }
        if (!missing.empty()) {
            r.rejected.push_back(s.label() + ": out of vocabulary (" + missing + ")");
            continue;
        }
        if (!seen.insert(s.label()).second) {
            r.rejected.push_back(s.label() + ": duplicate");
            continue;
        }
        const auto a = emb.vector(s.subject), b = emb.vector(s.relation), c = emb.vector(s.object);
        for (std::size_t j = 0; j < a.size(); ++j) rows.push_back((a[j] + b[j] + c[j]) / 3.0);
        labels.push_back(s.label());
    }
    if (labels.empty()) throw DataError("every semantic structure was rejected");
    r.dict = ExptDictionary{DictKind::Structure, labels, Tensor::from({labels.size(), emb.dim()}, std::move(rows))};
    r.dict.validate();
    return r;
}

// ---------------------------------------------------------------------------
// S: corpus key words.

using Lexicon = std::map<std::string, std::string>;  // word -> noun | verb | adj | function

inline bool is_content_tag(const std::string& tag) { return tag == "noun" || tag == "verb" || tag == "adj"; }

inline constexpr std::size_t kNoMinCount = std::numeric_limits<std::size_t>::max();

/// Content words counted more than min_count times, in alphabetical order.
inline std::vector<std::string> keyword_list(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count,
                                             const Lexicon& lexicon) {
    if (corpus.empty()) throw DataError("keyword corpus is empty");
    std::map<std::string, std::size_t> counts;
    for (const auto& sent : corpus)
        for (const auto& w : sent) ++counts[w];
    std::vector<std::string> out;
    for (const auto& [w, n] : counts) {
        auto it = lexicon.find(w);
        if (it != lexicon.end() && is_content_tag(it->second) && n > min_count) out.push_back(w);
    }
    return out;
}

inline ExptDictionary build_keyword_dictionary(const std::vector<std::vector<std::string>>& corpus,
                                               std::size_t min_count, const Lexicon& lexicon,
                                               const EmbeddingTable& emb) {
    std::vector<std::string> labels;
    std::vector<double> rows;
    for (const auto& w : keyword_list(corpus, min_count, lexicon)) {
        if (!emb.has(w)) continue;
        const auto v = emb.vector(w);
        rows.insert(rows.end(), v.begin(), v.end());
        labels.push_back(w);
    }
    if (labels.empty()) throw DataError("no key word occurs more than " + std::to_string(min_count) + " times");
    ExptDictionary d{DictKind::Keyword, labels, Tensor::from({labels.size(), emb.dim()}, std::move(rows))};
    d.validate();
    return d;
}

/// Embeddings of the given words, e.g. the concept nouns for the UD-BD baseline.
inline ExptDictionary build_word_dictionary(const std::vector<std::string>& words, const EmbeddingTable& emb,
                                            DictKind kind = DictKind::Concept) {
    if (words.empty()) throw DataError("empty word list");
    std::vector<double> rows;
    for (const auto& w : words) {
        const auto v = emb.vector(w);
        rows.insert(rows.end(), v.begin(), v.end());
    }
    ExptDictionary d{kind, words, Tensor::from({words.size(), emb.dim()}, std::move(rows))};
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// TSV files.

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
    std::istringstream in(s);
    in.imbue(std::locale::classic());
    double v = 0.0;
    if (!(in >> v) || !(in >> std::ws).eof()) throw DataError(where + ": bad number '" + s + "'");
    return v;
}

}  // namespace detail

/// subject<TAB>relation<TAB>object<TAB>weight; blank lines and '#' comments skipped.
inline std::vector<SemanticStructure> read_structures_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::vector<SemanticStructure> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::string where = path + ":" + std::to_string(lineno);
        const auto f = detail::split_tabs(line);
        if (f.size() != 4) throw DataError(where + ": expected 4 tab-separated columns, got " + std::to_string(f.size()));
        SemanticStructure s{f[0], f[1], f[2], detail::parse_double(f[3], where)};
        if (s.subject.empty() || s.relation.empty() || s.object.empty()) throw DataError(where + ": empty word");
        if (!(s.weight >= 0.0) || !std::isfinite(s.weight)) throw DataError(where + ": weight must be finite and >= 0");
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_structures_tsv(const std::string& path, const std::vector<SemanticStructure>& structures) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out.imbue(std::locale::classic());
    for (const auto& s : structures) out << s.subject << '\t' << s.relation << '\t' << s.object << '\t' << s.weight << '\n';
}

inline Lexicon read_lexicon_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    Lexicon lex;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::string where = path + ":" + std::to_string(lineno);
        const auto f = detail::split_tabs(line);
        if (f.size() != 2) throw DataError(where + ": expected word<TAB>tag");
        if (!is_content_tag(f[1]) && f[1] != "function") throw DataError(where + ": unknown tag '" + f[1] + "'");
        if (!lex.emplace(f[0], f[1]).second) throw DataError(where + ": duplicate word '" + f[0] + "'");
    }
    return lex;
}

inline void write_lexicon_tsv(const std::string& path, const Lexicon& lex) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (const auto& [w, t] : lex) out << w << '\t' << t << '\n';
}

}  // namespace deconf
