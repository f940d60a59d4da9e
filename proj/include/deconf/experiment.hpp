#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/captioner.hpp"
#include "deconf/dictionaries.hpp"
#include "deconf/metrics.hpp"
#include "deconf/synthworld.hpp"

namespace deconf {

struct ExperimentConfig {
    WorldConfig world;
    ModelSpec model;                       // variant field is ignored; see `variants`
    std::vector<Variant> variants = all_variants();
    TrainConfig train;
    std::size_t visual_atoms = 64;         // K_X
    std::size_t keyword_min_count = 0;
    double structure_min_weight = 2.5;
    std::size_t beam = 1;
    std::uint64_t seed = 0;
    std::size_t replications = 1;          // seeds seed, seed+1, ...

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& section, const nlohmann::json& defaults) {
    if (!j.is_object()) throw DataError("config section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!defaults.contains(k)) throw DataError("unknown config key '" + section + "." + k + "'");
    }
}

}  // namespace detail

inline nlohmann::json world_to_json(const WorldConfig& w) {
    nlohmann::json j{{"skew", w.skew},
                     {"train", w.train},
                     {"val", w.val},
                     {"test", w.test},
                     {"regions", w.regions},
                     {"dim", w.dim},
                     {"spread", w.spread},
                     {"attr_strength", w.attr_strength},
                     {"context_strength", w.context_strength},
                     {"test_minority_fraction", w.test_minority_fraction},
                     {"seed", w.seed},
                     {"concepts", concepts_to_json(w.concepts)}};
    j["context_skew"] = w.context_skew ? nlohmann::json(*w.context_skew) : nlohmann::json(nullptr);
    return j;
}

inline WorldConfig world_from_json(const nlohmann::json& j) {
    WorldConfig w;
    detail::reject_unknown(j, "world", world_to_json(w));
    w.skew = j.value("skew", w.skew);
    w.train = j.value("train", w.train);
    w.val = j.value("val", w.val);
    w.test = j.value("test", w.test);
    w.regions = j.value("regions", w.regions);
    w.dim = j.value("dim", w.dim);
    w.spread = j.value("spread", w.spread);
    w.attr_strength = j.value("attr_strength", w.attr_strength);
    w.context_strength = j.value("context_strength", w.context_strength);
    w.test_minority_fraction = j.value("test_minority_fraction", w.test_minority_fraction);
    w.seed = j.value("seed", w.seed);
    if (j.contains("concepts")) w.concepts = concepts_from_json(j.at("concepts"));
    if (j.contains("context_skew") && !j.at("context_skew").is_null()) w.context_skew = j.at("context_skew").get<double>();
    return w;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
    return {{"xe_epochs", t.xe_epochs}, {"scst_epochs", t.scst_epochs}, {"batch_size", t.batch_size},
            {"lr", t.lr}, {"decay", t.decay}, {"decay_every", t.decay_every},
            {"expt_lr_multiplier", t.expt_lr_multiplier}, {"seed", t.seed}, {"idf", to_string(t.idf)}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig t;
    detail::reject_unknown(j, "train", train_to_json(t));
    t.xe_epochs = j.value("xe_epochs", t.xe_epochs);
    t.scst_epochs = j.value("scst_epochs", t.scst_epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.lr = j.value("lr", t.lr);
    t.decay = j.value("decay", t.decay);
    t.decay_every = j.value("decay_every", t.decay_every);
    t.expt_lr_multiplier = j.value("expt_lr_multiplier", t.expt_lr_multiplier);
    t.seed = j.value("seed", t.seed);
    t.idf = idf_from_string(j.value("idf", std::string(to_string(t.idf))));
    return t;
}

inline nlohmann::json ExperimentConfig::to_json() const {
    std::vector<std::string> vs;
    for (Variant v : variants) vs.push_back(to_string(v));
    return {{"world", world_to_json(world)},
            {"model", model.to_json()},
            {"variants", vs},
            {"train", train_to_json(train)},
            {"visual_atoms", visual_atoms},
            {"keyword_min_count", keyword_min_count},
            {"structure_min_weight", structure_min_weight},
            {"beam", beam},
            {"seed", seed},
            {"replications", replications}};
}

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("experiment config must be a JSON object");
    static const std::set<std::string> known{"world", "model", "variants", "train", "visual_atoms", "keyword_min_count",
                                             "structure_min_weight", "beam", "seed", "replications", "out"};
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) throw DataError("unknown config key '" + k + "'");
    }
    ExperimentConfig c;
    try {
        if (j.contains("world")) c.world = world_from_json(j.at("world"));
        if (j.contains("model")) {
            detail::reject_unknown(j.at("model"), "model", ModelSpec{}.to_json());
            c.model = ModelSpec::from_json(j.at("model"));
        }
        if (j.contains("variants")) {
            c.variants.clear();
            for (const auto& v : j.at("variants")) c.variants.push_back(variant_from_string(v.get<std::string>()));
        }
        if (j.contains("train")) c.train = train_from_json(j.at("train"));
        c.visual_atoms = j.value("visual_atoms", c.visual_atoms);
        c.keyword_min_count = j.value("keyword_min_count", c.keyword_min_count);
        c.structure_min_weight = j.value("structure_min_weight", c.structure_min_weight);
        c.beam = j.value("beam", c.beam);
        c.seed = j.value("seed", c.seed);
        c.replications = j.value("replications", c.replications);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad config value: ") + e.what());
    }
    if (c.variants.empty()) throw DataError("config lists no variants");
    if (c.replications == 0) throw DataError("replications must be at least 1");
    if (c.beam == 0) throw DataError("beam must be at least 1");
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation on a split

inline std::map<std::string, std::set<std::string>> word_groups(const SynthDataset& ds) {
    std::map<std::string, std::set<std::string>> g;
    for (const auto& c : ds.concepts) {
        g["identity"].insert(c.noun);
        g["attribute"].insert({c.majority_attr, c.minority_attr});
        g["action"].insert({c.majority_action, c.minority_action});
    }
    return g;
}

inline EvalInputs eval_inputs(const SynthDataset& ds, const std::vector<Scene>& scenes, std::vector<Tokens> candidates) {
    if (candidates.size() != scenes.size()) throw DataError("candidate count does not match scene count");
    EvalInputs in;
    in.candidates = std::move(candidates);
    for (const auto& s : scenes) {
        std::vector<Tokens> refs;
        for (const auto& c : s.captions) refs.push_back(tokenize(c));
        in.references.push_back(std::move(refs));
        in.scene_objects.emplace_back(s.concepts.begin(), s.concepts.end());
    }
    in.object_lexicon = ds.object_words();
    in.groups = word_groups(ds);
    return in;
}

inline std::vector<std::vector<Tokens>> reference_tokens(const std::vector<Scene>& scenes) {
    std::vector<std::vector<Tokens>> out;
    for (const auto& s : scenes) {
        std::vector<Tokens> refs;
        for (const auto& c : s.captions) refs.push_back(tokenize(c));
        out.push_back(std::move(refs));
    }
    return out;
}

inline MetricReport evaluate_model(const CaptionModel& m, const SynthDataset& ds, const std::vector<Scene>& scenes,
                                   IdfMode idf, std::size_t beam = 1) {
    const CiderDf table = CiderDf::build(reference_tokens(ds.train));
    return evaluate(eval_inputs(ds, scenes, caption_scenes(m, scenes, beam)), idf, &table);
}

// ---------------------------------------------------------------------------
// Dictionaries for one replication

struct DictionaryReport {
    std::vector<std::string> rejected_structures;
    std::size_t visual_atoms = 0;
    bool kmeans_converged = false;
};

inline std::vector<std::vector<double>> region_features(const std::vector<Scene>& scenes) {
    std::vector<std::vector<double>> out;
    for (const auto& s : scenes) out.insert(out.end(), s.features.begin(), s.features.end());
    return out;
}

/// Z, S and concept dictionaries from word embeddings; X by k-means over training regions.
inline ModelDictionaries build_dictionaries(const SynthDataset& ds, const EmbeddingTable& emb, std::size_t k_x,
                                            std::size_t keyword_min_count, double structure_min_weight,
                                            std::uint64_t seed, DictionaryReport* report = nullptr) {
    ModelDictionaries d;
    const std::set<std::string> vocab(ds.vocab.words().begin(), ds.vocab.words().end());
    const auto kept = filter_structures(ds.structures, vocab, structure_min_weight);
    if (kept.empty()) throw DataError("no semantic structure survives filtering");
    auto z = build_structure_dictionary(kept, emb);
    d.z = z.dict;
    std::vector<std::vector<std::string>> corpus;
    for (const auto& s : ds.train)
        for (const auto& c : s.captions) corpus.push_back(tokenize(c));
    d.s = build_keyword_dictionary(corpus, keyword_min_count, ds.lexicon, emb);
    d.c = build_word_dictionary(ds.concept_nouns(), emb, DictKind::Concept);
    const auto feats = region_features(ds.train);
    auto x = learn_visual_dictionary(feats, std::min(k_x, feats.size()), seed);
    d.x = x.dict;
    if (report) {
        report->rejected_structures = z.rejected;
        report->visual_atoms = x.dict.size();
        report->kmeans_converged = x.converged;
    }
    return d;
}

inline EmbeddingTable embedding_snapshot(const CaptionModel& m) {
    return EmbeddingTable(m.vocab, m.embed.detach());
}

// ---------------------------------------------------------------------------
// Full ablation run

struct ExperimentRow {
    Variant variant = Variant::UD;
    std::uint64_t seed = 0;
    MetricReport report;
};

inline const char* kReportHeader = "variant,cider_d,bleu4,chairs,chairi,acc_identity,acc_attr,acc_act,seed";

inline std::string fmt_num(double v) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string csv_row(const ExperimentRow& r) {
    return std::string(to_string(r.variant)) + "," + fmt_num(r.report.cider_d) + "," + fmt_num(r.report.bleu4) + "," +
           fmt_num(r.report.chairs) + "," + fmt_num(r.report.chairi) + "," + fmt_num(r.report.acc("identity")) + "," +
           fmt_num(r.report.acc("attribute")) + "," + fmt_num(r.report.acc("action")) + "," + std::to_string(r.seed);
}

/// Seed-derived sub-configs: the replication seed drives the world, the
/// dictionaries, model init and training order.
inline std::uint64_t replication_seed(const ExperimentConfig& c, std::size_t r) { return c.seed + r; }

struct ExperimentResult {
    std::vector<ExperimentRow> rows;
    std::vector<std::string> log_lines;  // JSONL
};

namespace detail {

inline void add_log(ExperimentResult& res, const LogRecord& rec, Variant v) {
    auto j = rec.to_json();
    j["variant"] = to_string(v);
    res.log_lines.push_back(j.dump());
}

inline std::string stage_error(const std::string& stage, const std::exception& e) {
    return "stage '" + stage + "' failed: " + e.what();
}

}  // namespace detail

/// Trains one variant (XE then SCST) and evaluates it on the test split.
inline ExperimentRow train_and_eval(const ExperimentConfig& cfg, const SynthDataset& ds, const ModelDictionaries& dicts,
                                    Variant v, std::uint64_t seed, ExperimentResult& res, CaptionModel* keep = nullptr,
                                    std::optional<EmbeddingTable>* xe_embeddings = nullptr) {
    ModelSpec spec = cfg.model;
    spec.variant = v;
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    CaptionModel m = make_model(spec, ds.vocab, ds.train.at(0).features.at(0).size(), dicts, seed);
    AdamState adam = tc.adam();
    for (const auto& r : train_xe(m, ds.train, tc, adam)) detail::add_log(res, r, v);
    if (xe_embeddings) xe_embeddings->emplace(embedding_snapshot(m));
    const RewardFn reward = cider_reward(ds.vocab, ds.train);
    for (const auto& r : train_scst(m, ds.train, tc, adam, reward, tc.xe_epochs)) detail::add_log(res, r, v);
    ExperimentRow row{v, seed, evaluate_model(m, ds, ds.test, tc.idf, cfg.beam)};
    if (keep) *keep = std::move(m);
    return row;
}

namespace detail {

/// Finished (seed, variant) stages under <dir>/seed<k>/<variant>/: row.json,
/// log.jsonl and, for UD, the post-XE embedding table.
class StageStore {
public:
    explicit StageStore(std::string dir) : dir_(std::move(dir)) {}

    bool enabled() const { return !dir_.empty(); }

    bool load(std::uint64_t seed, Variant v, ExperimentRow& row, std::vector<std::string>& logs,
              std::optional<EmbeddingTable>* emb, const Vocab& vocab) const {
        if (!enabled()) return false;
        const auto d = path(seed, v);
        if (!std::filesystem::exists(d / "done")) return false;
        const auto j = read_json_file((d / "row.json").string());
        row = ExperimentRow{v, seed, MetricReport::from_json(j.at("report"))};
        std::ifstream in(d / "log.jsonl");
        for (std::string line; std::getline(in, line);) logs.push_back(line);
        if (emb) {
            ParameterSet ps;
            Tensor t = Tensor::zeros({vocab.size(), j.at("embed_dim").get<std::size_t>()});
            ps.add("embed", t);
            load_checkpoint((d / "embedding").string(), ps);
            emb->emplace(vocab, ps.get("embed").detach());
        }
        return true;
    }

    void save(std::uint64_t seed, Variant v, const ExperimentRow& row, const std::vector<std::string>& logs,
              const std::optional<EmbeddingTable>* emb) const {
        if (!enabled()) return;
        const auto d = path(seed, v);
        std::filesystem::create_directories(d);
        nlohmann::json j{{"report", row.report.to_json()}};
        if (emb && *emb) {
            ParameterSet ps;
            ps.add("embed", (*emb)->table);
            save_checkpoint((d / "embedding").string(), ps);
            j["embed_dim"] = (*emb)->table.dim(1);
        }
        std::ofstream(d / "row.json") << j.dump() << "\n";
        std::ofstream out(d / "log.jsonl");
        for (const auto& l : logs) out << l << "\n";
        out.close();
        std::ofstream(d / "done") << "";
    }

private:
    std::filesystem::path path(std::uint64_t seed, Variant v) const {
        return std::filesystem::path(dir_) / ("seed" + std::to_string(seed)) / to_string(v);
    }

    std::string dir_;
};

template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const DataError& e) {
        throw DataError(stage_error(name, e));
    } catch (const ShapeError& e) {
        throw ShapeError(stage_error(name, e));
    } catch (const std::exception& e) {
        throw Error(stage_error(name, e));
    }
}

}  // namespace detail

/// Runs every replication. With a checkpoint directory, finished (seed,
/// variant) stages are stored there and reused on the next call.
inline ExperimentResult run_experiment_in_memory(const ExperimentConfig& cfg, const std::string& checkpoint_dir = "") {
    const detail::StageStore store(checkpoint_dir);
    ExperimentResult res;
    for (std::size_t r = 0; r < cfg.replications; ++r) {
        const std::uint64_t seed = replication_seed(cfg, r);
        const std::string tag = "seed " + std::to_string(seed);
        WorldConfig wc = cfg.world;
        wc.seed = seed;
        const SynthDataset ds = detail::stage(tag + ": gen-world", [&] { return gen_world(wc); });
        for (const auto& row : skew_report(ds.train)) {
            nlohmann::json j{{"kind", "skew"}, {"seed", seed}, {"concept", row.concept_noun}, {"group", row.group},
                             {"word", row.word}, {"count", row.count}, {"share", row.share}};
            res.log_lines.push_back(j.dump());
        }
        auto run_variant = [&](Variant v, const ModelDictionaries& dicts, std::optional<EmbeddingTable>* emb) {
            ExperimentResult part;
            ExperimentRow row;
            if (!store.load(seed, v, row, part.log_lines, emb, ds.vocab)) {
                row = detail::stage(tag + ": train " + to_string(v),
                                    [&] { return train_and_eval(cfg, ds, dicts, v, seed, part, nullptr, emb); });
                store.save(seed, v, row, part.log_lines, emb);
            }
            return std::make_pair(row, part.log_lines);
        };
        // The UD run doubles as the warm-up whose word embeddings seed Z, S and the concept dictionary.
        std::optional<EmbeddingTable> emb;
        const auto [ud, ud_logs] = run_variant(Variant::UD, {}, &emb);
        ModelDictionaries dicts;
        if (std::any_of(cfg.variants.begin(), cfg.variants.end(), [](Variant v) { return v != Variant::UD; })) {
            dicts = detail::stage(tag + ": learn-dict", [&] {
                return build_dictionaries(ds, *emb, cfg.visual_atoms, cfg.keyword_min_count, cfg.structure_min_weight, seed);
            });
        }
        for (Variant v : cfg.variants) {
            if (v == Variant::UD) {
                res.rows.push_back(ud);
                res.log_lines.insert(res.log_lines.end(), ud_logs.begin(), ud_logs.end());
                continue;
            }
            const auto [row, logs] = run_variant(v, dicts, nullptr);
            res.rows.push_back(row);
            res.log_lines.insert(res.log_lines.end(), logs.begin(), logs.end());
        }
    }
    return res;
}

inline void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    for (const auto& l : lines) out << l << "\n";
}

/// Writes <out>/report.csv, <out>/log.jsonl and <out>/config.json. Finished
/// stages are kept under <out>/checkpoints when `resume` is set.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, bool resume = false) {
    const std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);
    const std::string cfg_text = cfg.to_json().dump(2);
    const auto ck = out / "checkpoints";
    if (resume && std::filesystem::exists(out / "config.json")) {
        std::ifstream in(out / "config.json");
        std::stringstream ss;
        ss << in.rdbuf();
        if (ss.str() != cfg_text + "\n") throw DataError("cannot resume: config differs from " + (out / "config.json").string());
    }
    write_lines(out / "config.json", {cfg_text});
    const ExperimentResult res = run_experiment_in_memory(cfg, resume ? ck.string() : "");
    std::vector<std::string> csv{kReportHeader};
    for (const auto& r : res.rows) csv.push_back(csv_row(r));
    write_lines(out / "report.csv", csv);
    write_lines(out / "log.jsonl", res.log_lines);
    return res;
}

}  // namespace deconf
