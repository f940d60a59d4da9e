#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/dictionaries.hpp"
#include "deconf/errors.hpp"
#include "deconf/rng.hpp"
#include "deconf/vocab.hpp"

namespace deconf {

inline constexpr double kDefaultSkew = 0.54;

struct ConceptSpec {
    std::string noun;
    std::string majority_attr, minority_attr;
    std::string majority_action, minority_action;
    std::string majority_context, minority_context;
};

struct WorldConfig {
    std::vector<ConceptSpec> concepts;  // empty: the default eight
    double skew = kDefaultSkew;
    std::optional<double> context_skew;  // unset: follows skew
    std::size_t train = 2000, val = 200, test = 400;
    std::size_t regions = 6;      // M: 3 object, 2 context, the rest background
    std::size_t dim = 64;
    double spread = 0.05;         // noise sd = spread * center norm
    double attr_strength = 0.25;  // per-component sd of attribute and action offsets
    double context_strength = 0.5;  // scale of the context center in context regions
    double test_minority_fraction = 0.5;
    std::uint64_t seed = 0;

    double ctx_skew() const { return context_skew.value_or(skew); }
};

inline const std::vector<std::string>& default_nouns() {
    static const std::vector<std::string> v{"apple", "dog", "car", "cup", "bird", "chair", "boat", "kite"};
    return v;
}
inline const std::vector<std::string>& default_colors() {
    static const std::vector<std::string> v{"red", "green", "yellow", "white", "black", "brown", "blue", "gray"};
    return v;
}
inline const std::vector<std::string>& default_actions() {
    static const std::vector<std::string> v{"sitting", "standing", "running", "flying",
                                            "lying",   "resting",  "floating", "hanging"};
    return v;
}
inline const std::vector<std::string>& default_contexts() {
    static const std::vector<std::string> v{"table", "grass", "road", "shelf", "tree", "floor", "water", "sky"};
    return v;
}
inline const std::vector<std::string>& function_words() {
    static const std::vector<std::string> v{"a", "the", "there", "is", "on", "near"};
    return v;
}

/// Concept i: color i over color i+1, action i over action i+1, context i over context i+3.
inline std::vector<ConceptSpec> default_concepts() {
    std::vector<ConceptSpec> out;
    const auto &n = default_nouns(), &c = default_colors(), &a = default_actions(), &x = default_contexts();
    for (std::size_t i = 0; i < n.size(); ++i) {
        out.push_back({n[i], c[i], c[(i + 1) % 8], a[i], a[(i + 1) % 8], x[i], x[(i + 3) % 8]});
    }
    return out;
}

struct Scene {
    std::string id;
    std::vector<std::vector<double>> features;  // M x dim
    std::vector<std::string> captions;
    std::vector<std::string> concepts;    // objects present: the concept noun, then the context noun
    std::vector<std::string> attributes;
    std::vector<std::string> actions;
    bool minority = false;                // the attribute is the concept's minority attribute

    const std::string& noun() const { return concepts.at(0); }
};

struct SynthDataset {
    std::vector<Scene> train, val, test;
    std::vector<ConceptSpec> concepts;
    Vocab vocab;
    Lexicon lexicon;
    std::vector<SemanticStructure> structures;

    std::vector<std::string> concept_nouns() const {
        std::vector<std::string> out;
        for (const auto& c : concepts) out.push_back(c.noun);
        return out;
    }

    /// Object words for CHAIR: concept nouns and context nouns.
    std::set<std::string> object_words() const {
        std::set<std::string> out;
        for (const auto& c : concepts) out.insert({c.noun, c.majority_context, c.minority_context});
        return out;
    }
};

namespace detail {

inline std::vector<std::string> world_words(const std::vector<ConceptSpec>& cs, Lexicon* lex) {
    std::vector<std::string> words;
    std::set<std::string> seen;
    auto add = [&](const std::string& w, const char* tag) {
        if (seen.insert(w).second) {
            words.push_back(w);
            if (lex) (*lex)[w] = tag;
        }
    };
    for (const auto& w : function_words()) add(w, "function");
    for (const auto& c : cs) add(c.noun, "noun");
    for (const auto& c : cs) {
        add(c.majority_attr, "adj");
        add(c.minority_attr, "adj");
    }
    for (const auto& c : cs) {
        add(c.majority_action, "verb");
        add(c.minority_action, "verb");
    }
    for (const auto& c : cs) {
        add(c.majority_context, "noun");
        add(c.minority_context, "noun");
    }
    return words;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t dim, double sd) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal(0.0, sd);
    return v;
}

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace detail

/// Knowledge triples about the world, including low-weight and out-of-vocabulary entries that filtering removes.
inline std::vector<SemanticStructure> world_structures(const std::vector<ConceptSpec>& cs) {
    std::vector<SemanticStructure> out;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        const auto& c = cs[i];
        out.push_back({c.noun, "on", c.majority_context, 4.0});
        out.push_back({c.noun, "near", c.minority_context, 3.0});
        out.push_back({c.noun, "is", c.majority_attr, 3.5});
        out.push_back({c.noun, "is", c.minority_attr, 2.6});
        out.push_back({c.noun, "is", c.majority_action, 3.2});
        out.push_back({c.noun, "is", c.minority_action, 2.5});
        out.push_back({c.noun, "near", cs[(i + 5) % cs.size()].majority_context, 1.5});
        out.push_back({c.noun, "is", "delicious", 3.0});
        out.push_back({c.noun, "at", "location", 2.9});
    }
    return out;
}

inline std::string caption_text(std::size_t tmpl, const std::string& attr, const std::string& noun,
                                 const std::string& action, const std::string& context) {
    if (tmpl == 0) return "a " + attr + " " + noun + " " + action + " on the " + context;
    return "there is a " + attr + " " + noun + " " + action + " near a " + context;
}

inline SynthDataset gen_world(const WorldConfig& cfg) {
    if (!(cfg.skew >= 0.5 && cfg.skew <= 1.0)) throw DataError("skew must lie in [0.5, 1]");
    if (!(cfg.ctx_skew() >= 0.5 && cfg.ctx_skew() <= 1.0)) throw DataError("context skew must lie in [0.5, 1]");
    if (cfg.regions < 1) throw DataError("regions per scene must be at least 1");
    if (cfg.dim < 1) throw DataError("feature dim must be at least 1");
    if (!(cfg.context_strength >= 0.0) || !(cfg.attr_strength >= 0.0)) throw DataError("feature strengths must be nonnegative");
    if (!(cfg.test_minority_fraction >= 0.0 && cfg.test_minority_fraction <= 1.0)) {
        throw DataError("test minority fraction must lie in [0, 1]");
    }
    SynthDataset ds;
    ds.concepts = cfg.concepts.empty() ? default_concepts() : cfg.concepts;
    {
        std::set<std::string> nouns;
        for (const auto& c : ds.concepts) {
            if (!nouns.insert(c.noun).second) throw DataError("duplicate concept '" + c.noun + "'");
        }
    }
    ds.vocab = Vocab(detail::world_words(ds.concepts, &ds.lexicon));
    ds.structures = world_structures(ds.concepts);

    // Cluster centers and offsets.
    Rng geo(cfg.seed, "world.geometry");
    std::map<std::string, std::vector<double>> center, offset;
    for (const auto& c : ds.concepts) center[c.noun] = detail::random_vector(geo, cfg.dim, 1.0);
    for (const auto& c : ds.concepts) {
        for (const auto* w : {&c.majority_context, &c.minority_context}) {
            if (!center.count(*w)) center[*w] = detail::random_vector(geo, cfg.dim, 1.0);
        }
    }
    for (const auto& c : ds.concepts) {
        for (const auto* w : {&c.majority_attr, &c.minority_attr, &c.majority_action, &c.minority_action}) {
            if (!offset.count(*w)) offset[*w] = detail::random_vector(geo, cfg.dim, cfg.attr_strength);
        }
    }
    double mean_norm = 0.0;
    for (const auto& c : ds.concepts) mean_norm += detail::norm(center[c.noun]) / static_cast<double>(ds.concepts.size());

    auto make_split = [&](const std::string& name, std::size_t n, bool balanced) {
        Rng rng(cfg.seed, "world.split." + name);
        std::vector<Scene> out;
        for (std::size_t s = 0; s < n; ++s) {
            const auto& c = ds.concepts[rng.below(ds.concepts.size())];
            const double p_attr = balanced ? 1.0 - cfg.test_minority_fraction : cfg.skew;
            const double p_ctx = balanced ? 1.0 - cfg.test_minority_fraction : cfg.ctx_skew();
            const bool attr_min = !rng.bernoulli(p_attr);
            const bool act_min = !rng.bernoulli(p_attr);
            const bool ctx_min = !rng.bernoulli(p_ctx);
            Scene sc;
            sc.id = name + "-" + std::to_string(s);
            const std::string& attr = attr_min ? c.minority_attr : c.majority_attr;
            const std::string& act = act_min ? c.minority_action : c.majority_action;
            const std::string& ctx = ctx_min ? c.minority_context : c.majority_context;
            sc.concepts = {c.noun, ctx};
            sc.attributes = {attr};
            sc.actions = {act};
            sc.minority = attr_min;
            for (std::size_t t = 0; t < 2; ++t) sc.captions.push_back(caption_text(t, attr, c.noun, act, ctx));

            const double sd_obj = cfg.spread * detail::norm(center[c.noun]);
            const double sd_ctx = cfg.spread * detail::norm(center[ctx]);
            const double cs = cfg.context_strength;
            for (std::size_t m = 0; m < cfg.regions; ++m) {
                std::vector<double> f(cfg.dim);
                for (std::size_t j = 0; j < cfg.dim; ++j) {
                    if (m < 3 || cfg.regions < 3) {
                        f[j] = center[c.noun][j] + offset[attr][j] + offset[act][j] + rng.normal(0.0, sd_obj);
                    } else if (m < 5) {
                        f[j] = cs * center[ctx][j] + rng.normal(0.0, sd_ctx);
                    } else {
                        f[j] = rng.normal(0.0, cfg.spread * mean_norm);
                    }
                }
                sc.features.push_back(std::move(f));
            }
            out.push_back(std::move(sc));
        }
        return out;
    };
    ds.train = make_split("train", cfg.train, false);
    ds.val = make_split("val", cfg.val, false);
    ds.test = make_split("test", cfg.test, true);
    return ds;
}

// ---------------------------------------------------------------------------
// Skew report: per concept and word group, each companion word's share.

struct SkewRow {
    std::string concept_noun, group, word;
    std::size_t count = 0;
    double share = 0.0;
};

inline std::vector<SkewRow> skew_report(const std::vector<Scene>& scenes) {
    std::map<std::string, std::map<std::string, std::map<std::string, std::size_t>>> counts;
    for (const auto& s : scenes) {
        for (const auto& a : s.attributes) ++counts[s.noun()]["attribute"][a];
        for (const auto& a : s.actions) ++counts[s.noun()]["action"][a];
        for (std::size_t i = 1; i < s.concepts.size(); ++i) ++counts[s.noun()]["context"][s.concepts[i]];
    }
    std::vector<SkewRow> out;
    for (const auto& [noun, groups] : counts) {
        for (const auto& [group, words] : groups) {
            std::size_t total = 0;
            for (const auto& [w, n] : words) total += n;
            for (const auto& [w, n] : words) {
                out.push_back({noun, group, w, n, static_cast<double>(n) / static_cast<double>(total)});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files.

inline nlohmann::json scene_to_json(const Scene& s) {
    return nlohmann::json{{"id", s.id},         {"features", s.features},     {"captions", s.captions},
                          {"concepts", s.concepts}, {"attributes", s.attributes}, {"actions", s.actions},
                          {"minority", s.minority}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.id = j.at("id").get<std::string>();
    s.features = j.at("features").get<std::vector<std::vector<double>>>();
    s.captions = j.at("captions").get<std::vector<std::string>>();
    s.concepts = j.at("concepts").get<std::vector<std::string>>();
    s.attributes = j.at("attributes").get<std::vector<std::string>>();
    s.actions = j.value("actions", std::vector<std::string>{});
    s.minority = j.at("minority").get<bool>();
    if (s.features.empty()) throw DataError("scene '" + s.id + "' has no features");
    for (const auto& f : s.features) {
        if (f.size() != s.features[0].size()) throw DataError("scene '" + s.id + "' has mixed feature dims");
    }
    if (s.captions.empty()) throw DataError("scene '" + s.id + "' has no captions");
    if (s.concepts.empty()) throw DataError("scene '" + s.id + "' has no concepts");
    return s;
}

inline void write_scenes_jsonl(const std::string& path, const std::vector<Scene>& scenes) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
}

inline std::vector<Scene> read_scenes_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::vector<Scene> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(scene_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline nlohmann::json concepts_to_json(const std::vector<ConceptSpec>& cs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cs) {
        arr.push_back({{"noun", c.noun},
                       {"attributes", {c.majority_attr, c.minority_attr}},
                       {"actions", {c.majority_action, c.minority_action}},
                       {"contexts", {c.majority_context, c.minority_context}}});
    }
    return arr;
}

inline std::vector<ConceptSpec> concepts_from_json(const nlohmann::json& arr) {
    std::vector<ConceptSpec> out;
    for (const auto& j : arr) {
        const auto a = j.at("attributes").get<std::vector<std::string>>();
        const auto b = j.at("actions").get<std::vector<std::string>>();
        const auto c = j.at("contexts").get<std::vector<std::string>>();
        if (a.size() != 2 || b.size() != 2 || c.size() != 2) throw DataError("concept entries need majority/minority pairs");
        out.push_back({j.at("noun").get<std::string>(), a[0], a[1], b[0], b[1], c[0], c[1]});
    }
    return out;
}

/// Writes train/val/test JSONL plus vocab.tsv, lexicon.tsv, structures.tsv and concepts.json into dir.
inline void save_dataset(const std::string& dir, const SynthDataset& ds) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path d(dir);
    write_scenes_jsonl((d / "train.jsonl").string(), ds.train);
    write_scenes_jsonl((d / "val.jsonl").string(), ds.val);
    write_scenes_jsonl((d / "test.jsonl").string(), ds.test);
    save_vocab((d / "vocab.tsv").string(), ds.vocab);
    write_lexicon_tsv((d / "lexicon.tsv").string(), ds.lexicon);
    write_structures_tsv((d / "structures.tsv").string(), ds.structures);
    std::ofstream out(d / "concepts.json");
    out << concepts_to_json(ds.concepts).dump(2) << '\n';
}

inline SynthDataset load_dataset(const std::string& dir) {
    const std::filesystem::path d(dir);
    SynthDataset ds;
    ds.train = read_scenes_jsonl((d / "train.jsonl").string());
    ds.val = std::filesystem::exists(d / "val.jsonl") ? read_scenes_jsonl((d / "val.jsonl").string()) : std::vector<Scene>{};
    ds.test = read_scenes_jsonl((d / "test.jsonl").string());
    ds.vocab = load_vocab((d / "vocab.tsv").string());
    ds.lexicon = read_lexicon_tsv((d / "lexicon.tsv").string());
    ds.structures = read_structures_tsv((d / "structures.tsv").string());
    try {
        ds.concepts = concepts_from_json(detail::read_json_file((d / "concepts.json").string()));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed concepts.json: " + std::string(e.what()));
    }
    return ds;
}

}  // namespace deconf
