#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/errors.hpp"
#include "deconf/vocab.hpp"

namespace deconf {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::string, double>;

/// n-gram counts for n = 1..max_n; index n-1.
inline std::vector<NgramCounts> ngram_counts(const Tokens& t, std::size_t max_n = 4) {
    std::vector<NgramCounts> out(max_n);
    for (std::size_t n = 1; n <= max_n; ++n) {
        for (std::size_t i = 0; i + n <= t.size(); ++i) {
            std::string key = t[i];
            for (std::size_t k = 1; k < n; ++k) key += " " + t[i + k];
            out[n - 1][key] += 1.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CIDEr-D

enum class IdfMode { Image, Corpus };

inline const char* to_string(IdfMode m) { return m == IdfMode::Image ? "image" : "corpus"; }

inline IdfMode idf_from_string(const std::string& s) {
    if (s == "image") return IdfMode::Image;
    if (s == "corpus") return IdfMode::Corpus;
    throw DataError("unknown idf mode '" + s + "' (expected image or corpus)");
}

/// Document frequencies: each document is one image's reference set.
struct CiderDf {
    double num_docs = 0.0;
    std::map<std::string, double> df;

    static CiderDf build(const std::vector<std::vector<Tokens>>& refs_per_image) {
        CiderDf t;
        for (const auto& refs : refs_per_image) {
            std::set<std::string> seen;
            for (const auto& r : refs)
                for (const auto& m : ngram_counts(r))
                    for (const auto& [g, c] : m) seen.insert(g);
            for (const auto& g : seen) t.df[g] += 1.0;
            t.num_docs += 1.0;
        }
        return t;
    }

    double log_df(const std::string& g) const {
        auto it = df.find(g);
        return std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
    }
};

struct CiderOptions {
    double sigma = 6.0;
    double scale = 10.0;
};

namespace detail {

struct CiderVec {
    std::vector<NgramCounts> vec;
    std::vector<double> norm;
    double length = 0.0;
};

inline CiderVec cider_vec(const Tokens& t, const CiderDf& table) {
    CiderVec v;
    v.vec = ngram_counts(t);
    v.norm.assign(4, 0.0);
    const double ref_len = std::log(std::max(1.0, table.num_docs));
    for (std::size_t n = 0; n < 4; ++n) {
        for (auto& [g, tf] : v.vec[n]) {
            tf *= ref_len - table.log_df(g);
            v.norm[n] += tf * tf;
        }
        v.norm[n] = std::sqrt(v.norm[n]);
    }
    v.length = static_cast<double>(t.size());
    return v;
}

inline double cider_sim(const CiderVec& h, const CiderVec& r, const CiderOptions& opt) {
    const double delta = h.length - r.length;
    double total = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, hv] : h.vec[n]) {
            auto it = r.vec[n].find(g);
            if (it != r.vec[n].end()) val += std::min(hv, it->second) * it->second;
        }
        if (h.norm[n] != 0.0 && r.norm[n] != 0.0) val /= h.norm[n] * r.norm[n];
        val *= std::exp(-(delta * delta) / (2.0 * opt.sigma * opt.sigma));
        total += val;
    }
    return total / 4.0;
}

}  // namespace detail

/// CIDEr-D of one candidate against its references under a fixed document-frequency table.
inline double cider_d_single(const Tokens& cand, const std::vector<Tokens>& refs, const CiderDf& table,
                             const CiderOptions& opt = {}) {
    if (refs.empty()) throw DataError("CIDEr-D needs at least one reference");
    const auto h = detail::cider_vec(cand, table);
    double s = 0.0;
    for (const auto& r : refs) s += detail::cider_sim(h, detail::cider_vec(r, table), opt);
    return s / static_cast<double>(refs.size()) * opt.scale;
}

struct CiderResult {
    double score = 0.0;
    std::vector<double> per_image;
};

/// Corpus CIDEr-D. Image mode builds the table from the evaluated references; corpus mode needs `training`.
inline CiderResult cider_d(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                           IdfMode mode, const CiderDf* training = nullptr, const CiderOptions& opt = {}) {
    if (candidates.size() != references.size()) throw DataError("candidate and reference counts differ");
    for (const auto& r : references) {
        if (r.empty()) throw DataError("CIDEr-D needs at least one reference per candidate");
    }
    CiderDf local;
    const CiderDf* table = training;
    if (mode == IdfMode::Image) {
        local = CiderDf::build(references);
        table = &local;
    } else if (!table) {
        throw DataError("corpus IDF mode needs a training document-frequency table");
    }
    CiderResult out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        out.per_image.push_back(cider_d_single(candidates[i], references[i], *table, opt));
        out.score += out.per_image.back();
    }
    if (!candidates.empty()) out.score /= static_cast<double>(candidates.size());
    return out;
}

// ---------------------------------------------------------------------------
// BLEU-4

struct BleuResult {
    double score = 0.0;
    double brevity_penalty = 0.0;
    std::vector<double> precisions;  // n = 1..4
    double candidate_length = 0.0, reference_length = 0.0;
    std::vector<std::string> warnings;
};

/// Corpus BLEU with uniform weights. `smooth` adds one to numerator and denominator for n >= 2.
inline BleuResult bleu4(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                        bool smooth = false) {
    if (candidates.size() != references.size()) throw DataError("candidate and reference counts differ");
    BleuResult r;
    std::vector<double> match(4, 0.0), total(4, 0.0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (references[i].empty()) throw DataError("BLEU needs at least one reference per candidate");
        const auto& c = candidates[i];
        const auto cc = ngram_counts(c);
        std::vector<NgramCounts> maxref(4);
        double best_len = 0.0, best_diff = INFINITY;
        for (const auto& ref : references[i]) {
            const auto rc = ngram_counts(ref);
            for (std::size_t n = 0; n < 4; ++n)
                for (const auto& [g, k] : rc[n]) maxref[n][g] = std::max(maxref[n][g], k);
            const double len = static_cast<double>(ref.size());
            const double diff = std::abs(len - static_cast<double>(c.size()));
            if (diff < best_diff || (diff == best_diff && len < best_len)) {
                best_diff = diff;
                best_len = len;
            }
        }
        r.candidate_length += static_cast<double>(c.size());
        r.reference_length += best_len;
        for (std::size_t n = 0; n < 4; ++n) {
            for (const auto& [g, k] : cc[n]) {
                auto it = maxref[n].find(g);
                match[n] += std::min(k, it == maxref[n].end() ? 0.0 : it->second);
                total[n] += k;
            }
        }
    }
    if (r.candidate_length == 0.0) {
        r.warnings.push_back("all candidates are empty; BLEU is 0");
        r.precisions.assign(4, 0.0);
        return r;
    }
    double logsum = 0.0;
    bool zero = false;
    for (std::size_t n = 0; n < 4; ++n) {
        double m = match[n], t = total[n];
        if (smooth && n > 0) {
            m += 1.0;
            t += 1.0;
        }
        const double p = t > 0.0 ? m / t : 0.0;
        r.precisions.push_back(p);
        if (p == 0.0) {
            zero = true;
        } else {
            logsum += std::log(p) / 4.0;
        }
    }
    r.brevity_penalty = r.candidate_length > r.reference_length
                            ? 1.0
                            : std::exp(1.0 - r.reference_length / r.candidate_length);
    r.score = zero ? 0.0 : r.brevity_penalty * std::exp(logsum);
    return r;
}

// ---------------------------------------------------------------------------
// CHAIR

struct ChairResult {
    double chairs = 0.0, chairi = 0.0;
    std::size_t captions = 0, hallucinated_captions = 0;
    std::size_t mentions = 0, hallucinated_mentions = 0;
};

/// Unique object words per caption; an object is hallucinated when absent from the scene's object set.
inline ChairResult chair(const std::vector<Tokens>& captions, const std::vector<std::set<std::string>>& scene_objects,
                         const std::set<std::string>& object_lexicon) {
    if (captions.size() != scene_objects.size()) throw DataError("caption and scene counts differ");
    ChairResult r;
    for (std::size_t i = 0; i < captions.size(); ++i) {
        std::set<std::string> mentioned;
        for (const auto& w : captions[i]) {
            if (object_lexicon.count(w)) mentioned.insert(w);
        }
        std::size_t bad = 0;
        for (const auto& w : mentioned) bad += scene_objects[i].count(w) ? 0 : 1;
        r.mentions += mentioned.size();
        r.hallucinated_mentions += bad;
        r.hallucinated_captions += bad > 0 ? 1 : 0;
        ++r.captions;
    }
    if (r.captions) r.chairs = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
    if (r.mentions) r.chairi = static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions);
    return r;
}

// ---------------------------------------------------------------------------
// Grouped word accuracy

struct WordAccuracy {
    std::map<std::string, double> group;                             // group -> mean over words
    std::map<std::string, std::map<std::string, double>> per_word;   // group -> word -> accuracy
    std::map<std::string, std::map<std::string, std::size_t>> support;
    std::vector<std::string> excluded;                               // "group" or "group:word" with no occurrences
};

inline WordAccuracy word_accuracy(const std::vector<Tokens>& candidates,
                                  const std::vector<std::vector<Tokens>>& references,
                                  const std::map<std::string, std::set<std::string>>& groups) {
    if (groups.empty()) throw DataError("word accuracy needs a nonempty group lexicon");
    if (candidates.size() != references.size()) throw DataError("candidate and reference counts differ");
    for (const auto& [g, words] : groups) {
        if (words.empty()) throw DataError("word group '" + g + "' is empty");
    }
    WordAccuracy out;
    std::vector<std::set<std::string>> cand_words, ref_words;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        cand_words.emplace_back(candidates[i].begin(), candidates[i].end());
        std::set<std::string> rw;
        for (const auto& r : references[i]) rw.insert(r.begin(), r.end());
        ref_words.push_back(std::move(rw));
    }
    for (const auto& [g, words] : groups) {
        double sum = 0.0;
        std::size_t used = 0;
        for (const auto& w : words) {
            std::size_t n = 0, hit = 0;
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                if (!ref_words[i].count(w)) continue;
                ++n;
                hit += cand_words[i].count(w);
            }
            if (n == 0) {
                out.excluded.push_back(g + ":" + w);
                continue;
            }
            const double acc = static_cast<double>(hit) / static_cast<double>(n);
            out.per_word[g][w] = acc;
            out.support[g][w] = n;
            sum += acc;
            ++used;
        }
        if (used == 0) {
            out.excluded.push_back(g);
        } else {
            out.group[g] = sum / static_cast<double>(used);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
    double cider_d = 0.0, bleu4 = 0.0, chairs = 0.0, chairi = 0.0;
    std::map<std::string, double> accuracy;
    std::size_t captions = 0, object_mentions = 0;
    IdfMode idf = IdfMode::Image;

    double acc(const std::string& g) const {
        auto it = accuracy.find(g);
        return it == accuracy.end() ? std::nan("") : it->second;
    }

    nlohmann::json to_json() const {
        return {{"cider_d", cider_d}, {"bleu4", bleu4},       {"chairs", chairs},
                {"chairi", chairi},   {"accuracy", accuracy}, {"captions", captions},
                {"object_mentions", object_mentions}, {"idf", to_string(idf)}};
    }

    static MetricReport from_json(const nlohmann::json& j) {
        MetricReport r;
        try {
            r.cider_d = j.at("cider_d").get<double>();
            r.bleu4 = j.at("bleu4").get<double>();
            r.chairs = j.at("chairs").get<double>();
            r.chairi = j.at("chairi").get<double>();
            for (const auto& [k, v] : j.at("accuracy").items()) r.accuracy[k] = v.is_null() ? std::nan("") : v.get<double>();
            r.captions = j.at("captions").get<std::size_t>();
            r.object_mentions = j.at("object_mentions").get<std::size_t>();
            r.idf = idf_from_string(j.at("idf").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed metric report: ") + e.what());
        }
        return r;
    }
};

struct EvalInputs {
    std::vector<Tokens> candidates;
    std::vector<std::vector<Tokens>> references;
    std::vector<std::set<std::string>> scene_objects;
    std::set<std::string> object_lexicon;
    std::map<std::string, std::set<std::string>> groups;
};

inline MetricReport evaluate(const EvalInputs& in, IdfMode mode, const CiderDf* training = nullptr) {
    MetricReport r;
    r.idf = mode;
    r.cider_d = cider_d(in.candidates, in.references, mode, training).score;
    r.bleu4 = bleu4(in.candidates, in.references).score;
    const auto ch = chair(in.candidates, in.scene_objects, in.object_lexicon);
    r.chairs = ch.chairs;
    r.chairi = ch.chairi;
    r.captions = ch.captions;
    r.object_mentions = ch.mentions;
    r.accuracy = word_accuracy(in.candidates, in.references, in.groups).group;
    return r;
}

}  // namespace deconf
