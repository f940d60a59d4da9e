// deconf: world generation, dictionaries, training, evaluation, the causal
// calculator and the self-check, behind one binary.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 check failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/causal_graph.hpp"
#include "deconf/experiment.hpp"
#include "deconf/scm.hpp"
#include "deconf/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace deconf;
using nlohmann::json;

namespace {

constexpr int kOk = 0, kUsage = 1, kData = 2, kCheck = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config: file, then DECONF_SEED, then dotted --set overrides.

json parse_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return text;
    }
}

void set_dotted(json& root, const std::string& path, json value) {
    if (path.empty()) throw UsageError("empty config key");
    json* node = &root;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw UsageError("bad config key '" + path + "'");
        parts.push_back(part);
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        json& next = (*node)[parts[i]];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw UsageError("config key '" + path + "' descends into a non-object");
        node = &next;
    }
    (*node)[parts.back()] = std::move(value);
}

struct ConfigArgs {
    std::string file;
    std::vector<std::string> sets;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "experiment config (JSON)")->check(CLI::ExistingFile);
        app->add_option("--set", sets, "override a config key: dotted.path=value (value parsed as JSON if possible)");
    }

    json raw() const {
        json j = json::object();
        if (!file.empty()) j = detail::read_json_file(file);
        if (!j.is_object()) throw DataError("config '" + file + "' is not a JSON object");
        if (const char* s = std::getenv("DECONF_SEED"); s && *s) {
            try {
                std::size_t used = 0;
                const unsigned long long v = std::stoull(s, &used);
                if (used != std::string(s).size()) throw std::invalid_argument(s);
                j["seed"] = v;
            } catch (const std::exception&) {
                throw UsageError(std::string("DECONF_SEED is not an unsigned integer: '") + s + "'");
            }
        }
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
            set_dotted(j, kv.substr(0, eq), parse_value(kv.substr(eq + 1)));
        }
        return j;
    }

    ExperimentConfig load(const std::vector<std::pair<std::string, json>>& flags = {}) const {
        json j = raw();
        for (const auto& [k, v] : flags) set_dotted(j, k, v);
        return ExperimentConfig::from_json(j);
    }
};

// ---------------------------------------------------------------------------
// Data paths: a dataset directory, or one scene file whose directory holds
// the sidecar files.

struct Data {
    SynthDataset ds;
    std::optional<std::vector<Scene>> scenes;  // set when a single file was named
};

Data load_data(const std::string& path) {
    if (fs::is_directory(path)) return {load_dataset(path), std::nullopt};
    if (!fs::is_regular_file(path)) throw DataError("no such data path '" + path + "'");
    const fs::path dir = fs::absolute(path).parent_path();
    return {load_dataset(dir.string()), read_scenes_jsonl(path)};
}

ModelDictionaries load_dicts(const std::string& dir) {
    ModelDictionaries d;
    auto one = [&](const char* name) -> std::optional<ExptDictionary> {
        const fs::path stem = fs::path(dir) / name;
        if (!fs::exists(stem.string() + ".json")) return std::nullopt;
        return load_dictionary(stem.string());
    };
    d.z = one("z");
    d.s = one("s");
    d.x = one("x");
    d.c = one("c");
    return d;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
}

std::string jsonl(const std::vector<std::string>& lines) {
    std::string s;
    for (const auto& l : lines) s += l + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_world(const ConfigArgs& ca, const std::string& out) {
    const ExperimentConfig cfg = ca.load();
    WorldConfig wc = cfg.world;
    wc.seed = cfg.seed;
    const SynthDataset ds = gen_world(wc);
    save_dataset(out, ds);
    std::vector<std::string> skew;
    for (const auto& r : skew_report(ds.train)) {
        skew.push_back(json{{"concept", r.concept_noun}, {"group", r.group}, {"word", r.word}, {"count", r.count},
                            {"share", r.share}}.dump());
    }
    write_text(fs::path(out) / "skew.jsonl", jsonl(skew));
    json w = world_to_json(wc);
    write_text(fs::path(out) / "world.json", w.dump(2) + "\n");
    std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size() << " scenes to " << out << "\n";
    return kOk;
}

void train_warmup(const ExperimentConfig& cfg, const SynthDataset& ds, std::optional<EmbeddingTable>& emb,
                  const fs::path& out) {
    ExperimentResult res;
    CaptionModel m;
    train_and_eval(cfg, ds, {}, Variant::UD, cfg.seed, res, &m, &emb);
    save_model((out / "warmup").string(), m);
    write_text(out / "warmup" / "log.jsonl", jsonl(res.log_lines));
}

int cmd_learn_dict(const ConfigArgs& ca, const std::string& data, const std::string& model, const std::string& out) {
    const ExperimentConfig cfg = ca.load();
    const Data d = load_data(data);
    SynthDataset ds = d.ds;
    if (d.scenes) ds.train = *d.scenes;
    fs::create_directories(out);
    std::optional<EmbeddingTable> emb;
    if (model.empty()) {
        train_warmup(cfg, ds, emb, out);
    } else {
        const CaptionModel m = load_model(model);
        emb.emplace(embedding_snapshot(m));
    }
    DictionaryReport rep;
    const ModelDictionaries dicts =
        build_dictionaries(ds, *emb, cfg.visual_atoms, cfg.keyword_min_count, cfg.structure_min_weight, cfg.seed, &rep);
    save_dictionary((fs::path(out) / "z").string(), *dicts.z);
    save_dictionary((fs::path(out) / "s").string(), *dicts.s);
    save_dictionary((fs::path(out) / "x").string(), *dicts.x);
    save_dictionary((fs::path(out) / "c").string(), *dicts.c);
    const json j{{"z", dicts.z->size()}, {"s", dicts.s->size()}, {"x", dicts.x->size()}, {"c", dicts.c->size()},
                 {"rejected_structures", rep.rejected_structures}, {"kmeans_converged", rep.kmeans_converged}};
    write_text(fs::path(out) / "dict_report.json", j.dump(2) + "\n");
    std::cout << j.dump() << "\n";
    return kOk;
}

int cmd_train(const ConfigArgs& ca, const std::vector<std::pair<std::string, json>>& flags, const std::string& variant,
              const std::string& data, const std::string& dicts_dir, const std::string& out) {
    const ExperimentConfig cfg = ca.load(flags);
    ModelSpec spec = cfg.model;
    spec.variant = variant.empty() ? cfg.variants.at(0) : variant_from_string(variant);
    const Data d = load_data(data);
    const std::vector<Scene>& scenes = d.scenes ? *d.scenes : d.ds.train;
    if (scenes.empty()) throw DataError("no training scenes in '" + data + "'");
    ModelDictionaries dicts;
    if (spec.variant != Variant::UD) {
        if (dicts_dir.empty()) throw UsageError(std::string("--dicts is required for ") + to_string(spec.variant));
        dicts = load_dicts(dicts_dir);
    }
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    CaptionModel m = make_model(spec, d.ds.vocab, scenes.at(0).features.at(0).size(), dicts, cfg.seed);
    AdamState adam = tc.adam();
    std::vector<std::string> log;
    for (const auto& r : train_xe(m, scenes, tc, adam)) log.push_back(r.to_json().dump());
    for (const auto& r : train_scst(m, scenes, tc, adam, cider_reward(d.ds.vocab, scenes), tc.xe_epochs)) {
        log.push_back(r.to_json().dump());
    }
    fs::create_directories(out);
    save_model((fs::path(out) / "model").string(), m, &adam);
    write_text(fs::path(out) / "log.jsonl", jsonl(log));
    ExperimentConfig saved = cfg;
    saved.model = spec;
    saved.variants = {spec.variant};
    write_text(fs::path(out) / "config.json", saved.to_json().dump(2) + "\n");
    std::cout << "trained " << to_string(spec.variant) << " for " << adam.step << " steps, model in "
              << (fs::path(out) / "model").string() << "\n";
    return kOk;
}

std::vector<Tokens> read_candidates(const std::string& path, const std::vector<Scene>& scenes) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::map<std::string, std::string> by_id;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            by_id[j.at("id").get<std::string>()] = j.at("caption").get<std::string>();
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    std::vector<Tokens> out;
    for (const auto& s : scenes) {
        auto it = by_id.find(s.id);
        if (it == by_id.end()) throw DataError("no candidate for scene '" + s.id + "'");
        out.push_back(tokenize(it->second));
    }
    return out;
}

int cmd_eval(const std::string& candidates, const std::string& model, const std::string& data, const std::string& idf,
             std::size_t beam, const std::string& label, const std::string& out) {
    if (candidates.empty() == model.empty()) throw UsageError("eval needs exactly one of --candidates and --model");
    const Data d = load_data(data);
    const std::vector<Scene>& scenes = d.scenes ? *d.scenes : d.ds.test;
    std::vector<Tokens> cands;
    std::vector<std::string> cand_lines;
    std::string name = label;
    if (!model.empty()) {
        const CaptionModel m = load_model(model);
        cands = caption_scenes(m, scenes, beam);
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            cand_lines.push_back(json{{"id", scenes[i].id}, {"caption", join(cands[i])}}.dump());
        }
        if (name.empty()) name = to_string(m.spec.variant);
    } else {
        cands = read_candidates(candidates, scenes);
    }
    if (name.empty()) name = "candidates";
    const CiderDf table = CiderDf::build(reference_tokens(d.ds.train));
    const MetricReport rep = evaluate(eval_inputs(d.ds, scenes, cands), idf_from_string(idf), &table);
    const std::string row = csv_row(ExperimentRow{Variant::UD, 0, rep});
    const std::string csv = name + row.substr(row.find(','));
    std::cout << rep.to_json().dump() << "\n" << csv << "\n";
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(fs::path(out) / "report.json", rep.to_json().dump(2) + "\n");
        write_text(fs::path(out) / "report.csv", std::string(kReportHeader) + "\n" + csv + "\n");
        if (!cand_lines.empty()) write_text(fs::path(out) / "candidates.jsonl", jsonl(cand_lines));
    }
    return kOk;
}

json dist_json(const DiscreteDistribution& d) { return d.probs; }

int cmd_adjust(const std::string& scm_path, const std::string& x, const std::string& y, const std::string& method,
               const std::string& mediator, const std::string& confounder, const std::vector<std::string>& adjust_set,
               std::optional<std::size_t> x_state, const std::string& dic_form) {
    const Scm scm = load_scm(scm_path);
    if (!scm.dag().contains(x)) throw DataError("unknown variable '" + x + "'");
    if (!scm.dag().contains(y)) throw DataError("unknown variable '" + y + "'");
    const std::size_t card = scm.cardinality(scm.id(x));
    std::vector<std::size_t> states;
    if (x_state) {
        states = {*x_state};
    } else {
        for (std::size_t i = 0; i < card; ++i) states.push_back(i);
    }
    const DicForm form = dic_form == "published" ? DicForm::Published : DicForm::Stratified;
    json results = json::array();
    for (std::size_t s : states) {
        AdjustmentResult r;
        if (method == "backdoor") {
            r = backdoor_adjust(scm, x, s, y, std::set<std::string>(adjust_set.begin(), adjust_set.end()));
        } else if (method == "frontdoor") {
            if (mediator.empty()) throw UsageError("frontdoor needs --mediator");
            r = frontdoor_adjust(scm, x, s, y, mediator);
        } else {
            if (mediator.empty() || confounder.empty()) throw UsageError("dic needs --mediator and --observed-confounder");
            r = dic_adjust(scm, x, s, y, mediator, confounder, form);
        }
        json e{{"x_state", s}, {"distribution", dist_json(r.distribution)}, {"inputs_used", r.inputs_used}};
        if (enumerable(scm)) {
            const auto truth = do_distribution(scm, y, x, s);
            e["oracle"] = dist_json(truth);
            e["tv"] = total_variation(r.distribution, truth);
        }
        results.push_back(e);
    }
    json out{{"method", method}, {"x", x}, {"y", y}, {"results", results}};
    if (method == "dic") out["dic_form"] = dic_form;
    std::cout << out.dump(2) << "\n";
    return kOk;
}

int cmd_run(const ConfigArgs& ca, const std::vector<std::pair<std::string, json>>& flags, std::string out, bool resume) {
    const json raw = ca.raw();
    ExperimentConfig cfg = ca.load(flags);
    if (out.empty()) out = raw.value("out", std::string());
    if (out.empty()) throw UsageError("run needs --out or an \"out\" config key");
    const ExperimentResult res = run_experiment(cfg, out, resume);
    std::cout << kReportHeader << "\n";
    for (const auto& r : res.rows) std::cout << csv_row(r) << "\n";
    return kOk;
}

int cmd_selfcheck(double perturb) {
    SelfcheckOptions o;
    o.weight_perturbation = perturb;
    const SelfcheckReport rep = selfcheck(o);
    print_selfcheck(rep, std::cout);
    return rep.passed() ? kOk : kCheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deconfounded captioning toolkit"};
    app.require_subcommand(1);

    std::string out, data, model, dicts, variant, attention, embedding, candidates, idf = "image", label;
    std::string scm_path, x, y, method, mediator, confounder, dic_form = "stratified";
    std::vector<std::string> adjust_set;
    std::optional<std::size_t> x_state;
    std::size_t beam = 1;
    bool static_s = false, resume = false;
    double perturb = 0.0;

    ConfigArgs gen_cfg, dict_cfg, train_cfg, run_cfg;

    auto* gen = app.add_subcommand("gen-world", "generate a synthetic dataset");
    gen_cfg.attach(gen);
    gen->add_option("--out", out, "dataset directory")->required();

    auto* ld = app.add_subcommand("learn-dict", "build the Z, S, X and concept dictionaries");
    dict_cfg.attach(ld);
    ld->add_option("--data", data, "dataset directory or training JSONL")->required();
    ld->add_option("--model", model, "warm-up model directory for word embeddings (trained here when absent)");
    ld->add_option("--out", out, "dictionary directory")->required();

    auto* tr = app.add_subcommand("train", "train one captioner variant");
    train_cfg.attach(tr);
    tr->add_option("--variant", variant)->check(CLI::IsMember({"UD", "UD-BD", "UD-FD-Cor", "UD-FD", "DICv1"}));
    tr->add_option("--attention", attention)->check(CLI::IsMember({"topdown", "aoa"}));
    tr->add_option("--embedding", embedding)->check(CLI::IsMember({"linear", "lstm", "glu"}));
    tr->add_flag("--static-s", static_s, "use the keyword atom mean instead of the keyword stream");
    tr->add_option("--data", data, "dataset directory or training JSONL")->required();
    tr->add_option("--dicts", dicts, "dictionary directory from learn-dict");
    tr->add_option("--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "score captions");
    ev->add_option("--candidates", candidates, "JSONL of {\"id\", \"caption\"}");
    ev->add_option("--model", model, "caption the scenes with this model instead");
    ev->add_option("--data", data, "scene JSONL (sidecars in its directory) or dataset directory (test split)")->required();
    ev->add_option("--idf", idf)->check(CLI::IsMember({"image", "corpus"}));
    ev->add_option("--beam", beam)->check(CLI::PositiveNumber);
    ev->add_option("--label", label, "first CSV column");
    ev->add_option("--out", out, "write report.json and report.csv here");

    auto* ad = app.add_subcommand("adjust", "causal effect of x on y by adjustment");
    ad->add_option("--scm", scm_path)->required()->check(CLI::ExistingFile);
    ad->add_option("--x", x)->required();
    ad->add_option("--y", y)->required();
    ad->add_option("--method", method)->required()->check(CLI::IsMember({"backdoor", "frontdoor", "dic"}));
    ad->add_option("--mediator", mediator);
    ad->add_option("--observed-confounder", confounder);
    ad->add_option("--adjust-set", adjust_set)->delimiter(',');
    ad->add_option("--x-state", x_state, "only this treatment state (default: all)");
    ad->add_option("--dic-form", dic_form)->check(CLI::IsMember({"stratified", "published"}));

    auto* run = app.add_subcommand("run", "full ablation: world, dictionaries, all variants, report");
    run_cfg.attach(run);
    run->add_option("--out", out, "output directory (or config key \"out\")");
    run->add_flag("--static-s", static_s, "use the keyword atom mean instead of the keyword stream");
    run->add_flag("--resume", resume, "reuse finished stages from <out>/checkpoints");

    auto* sc = app.add_subcommand("selfcheck", "run the oracle suites");
    sc->add_option("--perturb-weight", perturb, "test hook: perturb backdoor stratum weights")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    std::vector<std::pair<std::string, json>> flags;
    if (!attention.empty()) flags.emplace_back("model.attention", attention);
    if (!embedding.empty()) flags.emplace_back("model.embedding", embedding);
    if (static_s) flags.emplace_back("model.static_s", true);

    try {
        if (*gen) return cmd_gen_world(gen_cfg, out);
        if (*ld) return cmd_learn_dict(dict_cfg, data, model, out);
        if (*tr) return cmd_train(train_cfg, flags, variant, data, dicts, out);
        if (*ev) return cmd_eval(candidates, model, data, idf, beam, label, out);
        if (*ad) return cmd_adjust(scm_path, x, y, method, mediator, confounder, adjust_set, x_state, dic_form);
        if (*run) return cmd_run(run_cfg, flags, out, resume);
        if (*sc) return cmd_selfcheck(perturb);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
