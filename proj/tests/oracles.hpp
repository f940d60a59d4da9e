#pragma once

// Straight-line reference computations shared by the unit tests and the
// acceptance run. They use plain loops and none of the library's metric or
// inference code.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "deconf/metrics.hpp"
#include "deconf/scm.hpp"
#include "deconf/vocab.hpp"

namespace ref {

using deconf::Tokens;

// Straight-line CIDEr-D: n-grams as vectors of strings, linear scans, no maps.
struct Gram {
    std::vector<std::string> words;
    double count;
};

inline std::vector<Gram> grams(const Tokens& t, std::size_t n) {
    std::vector<Gram> out;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
        std::vector<std::string> g(t.begin() + i, t.begin() + i + n);
        bool found = false;
        for (auto& e : out) {
            if (e.words == g) {
                e.count += 1;
                found = true;
            }
        }
        if (!found) out.push_back({g, 1});
    }
    return out;
}

inline double oracle_cider(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& refs) {
    const double n_docs = static_cast<double>(refs.size());
    auto df = [&](const std::vector<std::string>& g) {
        double d = 0;
        for (const auto& rs : refs) {
            bool in = false;
            for (const auto& r : rs)
                for (const auto& e : grams(r, g.size())) in = in || e.words == g;
            d += in ? 1 : 0;
        }
        return d;
    };
    auto weight = [&](const std::vector<std::string>& g) { return std::log(n_docs) - std::log(std::max(1.0, df(g))); };
    double corpus = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double per_ref_sum = 0;
        for (const auto& r : refs[i]) {
            double per_n = 0;
            for (std::size_t n = 1; n <= 4; ++n) {
                const auto hg = grams(cands[i], n), rg = grams(r, n);
                double dotp = 0, nh = 0, nr = 0;
                for (const auto& h : hg) nh += std::pow(h.count * weight(h.words), 2);
                for (const auto& e : rg) nr += std::pow(e.count * weight(e.words), 2);
                for (const auto& h : hg)
                    for (const auto& e : rg)
                        if (h.words == e.words) {
                            const double hv = h.count * weight(h.words), rv = e.count * weight(e.words);
                            dotp += std::min(hv, rv) * rv;
                        }
                double v = (nh > 0 && nr > 0) ? dotp / (std::sqrt(nh) * std::sqrt(nr)) : dotp;
                const double delta = static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
                v *= std::exp(-delta * delta / 72.0);
                per_n += v / 4;
            }
            per_ref_sum += per_n;
        }
        corpus += 10 * per_ref_sum / static_cast<double>(refs[i].size());
    }
    return corpus / static_cast<double>(cands.size());
}

inline double oracle_bleu(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& refs) {
    double c_len = 0, r_len = 0;
    double num[4] = {0, 0, 0, 0}, den[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < cands.size(); ++i) {
        c_len += static_cast<double>(cands[i].size());
        double best = 1e9, best_len = 0;
        for (const auto& r : refs[i]) {
            const double d = std::abs(static_cast<double>(r.size()) - static_cast<double>(cands[i].size()));
            if (d < best || (d == best && static_cast<double>(r.size()) < best_len)) {
                best = d;
                best_len = static_cast<double>(r.size());
            }
        }
        r_len += best_len;
        for (std::size_t n = 1; n <= 4; ++n) {
            for (const auto& h : grams(cands[i], n)) {
                double mx = 0;
                for (const auto& r : refs[i])
                    for (const auto& e : grams(r, n))
                        if (e.words == h.words) mx = std::max(mx, e.count);
                num[n - 1] += std::min(h.count, mx);
                den[n - 1] += h.count;
            }
        }
    }
    double prod = 1;
    for (int n = 0; n < 4; ++n) prod *= num[n] / den[n];
    const double bp = c_len > r_len ? 1.0 : std::exp(1 - r_len / c_len);
    return bp * std::pow(prod, 0.25);
}

inline std::vector<Tokens> toks(const std::vector<std::string>& v) {
    std::vector<Tokens> out;
    for (const auto& s : v) out.push_back(deconf::tokenize(s));
    return out;
}

struct ChairRow {
    const char* caption;
    std::set<std::string> objects;
    std::size_t mentions, hallucinated;  // counted by hand
};

inline std::set<std::string> chair_fixture_lexicon() {
    return {"apple", "dog", "table", "grass", "shelf", "tree", "cup", "road"};
}

// Twenty captions: 37 object mentions, 12 hallucinated, in 10 captions.
inline std::vector<ChairRow> chair_fixture() {
    return {
        {"a red apple on the table", {"apple", "table"}, 2, 0},
        {"a red apple on the shelf", {"apple", "table"}, 2, 1},
        {"a dog on the grass", {"dog", "grass"}, 2, 0},
        {"a dog near a tree", {"dog", "grass"}, 2, 1},
        {"a cup on the road", {"apple", "table"}, 2, 2},
        {"there is a red", {"apple", "table"}, 0, 0},
        {"apple apple apple", {"apple"}, 1, 0},
        {"apple dog apple dog", {"apple"}, 2, 1},
        {"a green apple sitting on the table", {"apple", "table"}, 2, 0},
        {"a green apple sitting on the grass", {"apple", "table"}, 2, 1},
        {"a dog running on the road", {"dog", "road"}, 2, 0},
        {"a dog running on the road near a tree", {"dog", "road"}, 3, 1},
        {"a cup", {"cup", "shelf"}, 1, 0},
        {"a cup on a shelf near a table", {"cup", "shelf"}, 3, 1},
        {"the the the", {"cup"}, 0, 0},
        {"a tree", {"dog", "grass"}, 1, 1},
        {"grass grass", {"grass"}, 1, 0},
        {"an apple on a table and a cup", {"apple", "table"}, 3, 1},
        {"a dog and a cup and an apple", {"dog"}, 3, 2},
        {"table shelf road", {"table", "shelf", "road"}, 3, 0},
    };
}

// max |P(x,y|c) - P(x|c)P(y|c)| over all states with P(c) > 0.
inline double ci_gap(const deconf::JointTable& joint, const std::string& x, const std::string& y,
                     const std::vector<std::string>& cond) {
    std::vector<std::string> keep = cond;
    keep.push_back(x);
    keep.push_back(y);
    const deconf::JointTable m = joint.marginal(keep);
    const auto& vars = m.variables();
    const std::size_t xc = vars[cond.size()].cardinality, yc = vars[cond.size() + 1].cardinality;
    const std::size_t strata = m.size() / (xc * yc);
    double gap = 0.0;
    for (std::size_t s = 0; s < strata; ++s) {
        const double* p = m.probs().data() + s * xc * yc;
        double pc = 0.0;
        for (std::size_t k = 0; k < xc * yc; ++k) pc += p[k];
        if (pc <= 0.0) continue;
        for (std::size_t a = 0; a < xc; ++a) {
            double px = 0.0;
            for (std::size_t b = 0; b < yc; ++b) px += p[a * yc + b];
            for (std::size_t b = 0; b < yc; ++b) {
                double py = 0.0;
                for (std::size_t a2 = 0; a2 < xc; ++a2) py += p[a2 * yc + b];
                gap = std::max(gap, std::abs(p[a * yc + b] / pc - (px / pc) * (py / pc)));
            }
        }
    }
    return gap;
}

}  // namespace ref
