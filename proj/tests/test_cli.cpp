#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "deconf/scm.hpp"
#include "deconf/scm_generators.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "deconf_cli_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Result cli(const std::string& args, const fs::path& dir, const std::string& env = "") {
    const fs::path out = dir / "stdout.txt";
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" + DECONF_CLI_PATH + "' " + args + " > '" +
                            out.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

const char* kTinyConfig =
    R"({"world":{"dim":8,"train":40,"val":0,"test":20},"model":{"dim":8,"att_dim":8},)"
    R"("train":{"xe_epochs":1,"batch_size":16},"visual_atoms":8})";

fs::path write_config(const fs::path& dir, const std::string& text = kTinyConfig) {
    const fs::path p = dir / "cfg.json";
    std::ofstream(p) << text;
    return p;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, UsageErrors) {
    const auto d = scratch("usage");
    EXPECT_EQ(cli("", d).code, 1);
    EXPECT_EQ(cli("frobnicate", d).code, 1);
    EXPECT_EQ(cli("gen-world", d).code, 1);  // --out missing
    EXPECT_EQ(cli("gen-world --out w --set nokey", d).code, 1);
    EXPECT_EQ(cli("gen-world --out w", d, "DECONF_SEED=x1").code, 1);
    EXPECT_EQ(cli("train --variant DICv9 --data w --out m", d).code, 1);
    EXPECT_EQ(cli("--help", d).code, 0);
}

TEST(Cli, DataErrors) {
    const auto d = scratch("data");
    EXPECT_EQ(cli("train --data nowhere --out m", d).code, 2);
    EXPECT_EQ(cli("gen-world --out w --set world.bogus=1", d).code, 2);
    EXPECT_EQ(cli("gen-world --out w --set bogus=1", d).code, 2);
    EXPECT_EQ(cli("gen-world --out w --set world.skew=2", d).code, 2);
    std::ofstream(d / "bad.json") << "{not json";
    EXPECT_EQ(cli("run --config bad.json --out r", d).code, 2);
}

TEST(Cli, GenWorldIsReproducibleAndSeeded) {
    const auto d = scratch("gen");
    write_config(d);
    ASSERT_EQ(cli("gen-world --config cfg.json --out a", d).code, 0);
    ASSERT_EQ(cli("gen-world --config cfg.json --out b", d).code, 0);
    ASSERT_EQ(cli("gen-world --config cfg.json --out c", d, "DECONF_SEED=9").code, 0);
    ASSERT_EQ(cli("gen-world --config cfg.json --out e --set seed=9", d).code, 0);
    for (const char* f : {"train.jsonl", "test.jsonl", "vocab.tsv", "skew.jsonl", "world.json"}) {
        EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
        EXPECT_EQ(slurp(d / "c" / f), slurp(d / "e" / f)) << f;
    }
    EXPECT_NE(slurp(d / "a" / "train.jsonl"), slurp(d / "c" / "train.jsonl"));
    EXPECT_EQ(count_lines(slurp(d / "a" / "train.jsonl")), 40u);
    EXPECT_EQ(json::parse(slurp(d / "c" / "world.json")).at("seed"), 9);
}

TEST(Cli, RunWritesFiveRowsAndIsByteIdentical) {
    const auto d = scratch("run");
    write_config(d);
    const std::string zero = "--set train.xe_epochs=0";
    ASSERT_EQ(cli("run --config cfg.json " + zero + " --out r1", d).code, 0);
    ASSERT_EQ(cli("run --config cfg.json " + zero + " --out r2", d).code, 0);
    const std::string csv = slurp(d / "r1" / "report.csv");
    EXPECT_EQ(csv, slurp(d / "r2" / "report.csv"));
    EXPECT_EQ(slurp(d / "r1" / "log.jsonl"), slurp(d / "r2" / "log.jsonl"));
    EXPECT_EQ(count_lines(csv), 6u);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,cider_d,bleu4,chairs,chairi,acc_identity,acc_attr,acc_act,seed");
    for (const char* v : {"\nUD,", "\nUD-BD,", "\nUD-FD-Cor,", "\nUD-FD,", "\nDICv1,"}) {
        EXPECT_NE(csv.find(v), std::string::npos) << v;
    }
    const auto cfg = json::parse(slurp(d / "r1" / "config.json"));
    EXPECT_EQ(cfg.at("train").at("xe_epochs"), 0);
}

TEST(Cli, RunTrainsAndResumes) {
    const auto d = scratch("resume");
    write_config(d);
    ASSERT_EQ(cli("run --config cfg.json --set variants='[\"UD\",\"DICv1\"]' --out r --resume", d).code, 0);
    const std::string csv = slurp(d / "r" / "report.csv"), log = slurp(d / "r" / "log.jsonl");
    EXPECT_EQ(count_lines(csv), 3u);
    EXPECT_NE(log.find("\"phase\":\"xe\""), std::string::npos);
    EXPECT_NE(log.find("\"kind\":\"skew\""), std::string::npos);
    EXPECT_TRUE(fs::exists(d / "r" / "checkpoints" / "seed0" / "DICv1" / "done"));
    ASSERT_EQ(cli("run --config cfg.json --set variants='[\"UD\",\"DICv1\"]' --out r --resume", d).code, 0);
    EXPECT_EQ(slurp(d / "r" / "report.csv"), csv);
    EXPECT_EQ(slurp(d / "r" / "log.jsonl"), log);
    // A finished stage is reused, not retrained: a forged row shows up in the report.
    const fs::path row = d / "r" / "checkpoints" / "seed0" / "DICv1" / "row.json";
    auto j = json::parse(slurp(row));
    j["report"]["cider_d"] = 42.0;
    std::ofstream(row) << j.dump();
    ASSERT_EQ(cli("run --config cfg.json --set variants='[\"UD\",\"DICv1\"]' --out r --resume", d).code, 0);
    EXPECT_NE(slurp(d / "r" / "report.csv").find("\nDICv1,42,"), std::string::npos);
    // A different config refuses to resume.
    EXPECT_EQ(cli("run --config cfg.json --set seed=3 --out r --resume", d).code, 2);
}

TEST(Cli, PipelineLearnTrainEval) {
    const auto d = scratch("pipeline");
    write_config(d);
    ASSERT_EQ(cli("gen-world --config cfg.json --out w", d).code, 0);
    const auto ld = cli("learn-dict --config cfg.json --data w --out dict", d);
    ASSERT_EQ(ld.code, 0) << ld.out;
    for (const char* f : {"z.json", "z.bin", "s.json", "x.json", "c.json", "dict_report.json", "warmup/model.json"}) {
        EXPECT_TRUE(fs::exists(d / "dict" / f)) << f;
    }
    const auto tr = cli("train --config cfg.json --variant DICv1 --attention aoa --embedding glu --static-s --data w "
                        "--dicts dict --out m", d);
    ASSERT_EQ(tr.code, 0) << tr.out;
    const auto spec = json::parse(slurp(d / "m" / "config.json")).at("model");
    EXPECT_EQ(spec.at("variant"), "DICv1");
    EXPECT_EQ(spec.at("attention"), "aoa");
    EXPECT_EQ(spec.at("embedding"), "glu");
    EXPECT_EQ(spec.at("static_s"), true);
    EXPECT_EQ(count_lines(slurp(d / "m" / "log.jsonl")), 1u);

    EXPECT_EQ(cli("train --config cfg.json --variant UD-FD --data w --out m2", d).code, 1);  // no --dicts
    // A model trained with the warm-up dictionaries reloads and captions.
    const auto ev = cli("eval --model m/model --data w/test.jsonl --idf corpus --out ev", d);
    ASSERT_EQ(ev.code, 0) << ev.out;
    const auto report = json::parse(ev.out.substr(0, ev.out.find('\n')));
    EXPECT_EQ(report.at("captions"), 20);
    EXPECT_EQ(report.at("idf"), "corpus");
    EXPECT_EQ(ev.out.substr(ev.out.find('\n') + 1, 6), "DICv1,");
    EXPECT_EQ(count_lines(slurp(d / "ev" / "candidates.jsonl")), 20u);

    // The same candidates scored from file give the same report.
    const auto ev2 = cli("eval --candidates ev/candidates.jsonl --data w/test.jsonl --idf corpus --label DICv1", d);
    ASSERT_EQ(ev2.code, 0) << ev2.out;
    EXPECT_EQ(ev2.out, ev.out);
    EXPECT_EQ(cli("eval --data w --idf image", d).code, 1);
    std::ofstream(d / "short.jsonl") << R"({"id":"nope","caption":"a red apple"})" << "\n";
    EXPECT_EQ(cli("eval --candidates short.jsonl --data w --idf image", d).code, 2);
}

TEST(Cli, EvalPerfectCandidates) {
    const auto d = scratch("perfect");
    write_config(d);
    ASSERT_EQ(cli("gen-world --config cfg.json --out w", d).code, 0);
    std::ifstream in(d / "w" / "test.jsonl");
    std::ofstream cand(d / "cand.jsonl");
    for (std::string line; std::getline(in, line);) {
        const auto j = json::parse(line);
        cand << json{{"id", j.at("id")}, {"caption", j.at("captions").at(0)}}.dump() << "\n";
    }
    cand.close();
    const auto ev = cli("eval --candidates cand.jsonl --data w --idf image", d);
    ASSERT_EQ(ev.code, 0) << ev.out;
    const auto r = json::parse(ev.out.substr(0, ev.out.find('\n')));
    EXPECT_EQ(r.at("chairi"), 0.0);
    EXPECT_EQ(r.at("accuracy").at("identity"), 1.0);
    EXPECT_GT(r.at("cider_d").get<double>(), 1.0);
}

TEST(Cli, AdjustMatchesOracle) {
    const auto d = scratch("adjust");
    deconf::save_scm(deconf::confounded_scm(3), (d / "bd.json").string());
    deconf::save_scm(deconf::frontdoor_scm(4), (d / "fd.json").string());
    deconf::save_scm(deconf::dic_scm(5), (d / "dic.json").string());
    auto check = [&](const std::string& args, std::size_t states) {
        const auto r = cli("adjust " + args, d);
        ASSERT_EQ(r.code, 0) << r.out;
        const auto j = json::parse(r.out);
        ASSERT_EQ(j.at("results").size(), states);
        for (const auto& e : j.at("results")) {
            EXPECT_LE(e.at("tv").get<double>(), 1e-10) << args;
            double s = 0;
            for (double p : e.at("distribution")) s += p;
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    };
    const auto bd = deconf::confounded_scm(3);
    check("--scm bd.json --x I --y L --method backdoor --adjust-set D", bd.cardinality(bd.id("I")));
    check("--scm bd.json --x I --y L --method backdoor --adjust-set D --x-state 1", 1);
    const auto fd = deconf::frontdoor_scm(4);
    check("--scm fd.json --x I --y L --method frontdoor --mediator Z", fd.cardinality(fd.id("I")));
    const auto dic = deconf::dic_scm(5);
    check("--scm dic.json --x I --y L --method dic --mediator Z --observed-confounder S", dic.cardinality(dic.id("I")));

    const auto pub = cli("adjust --scm dic.json --x I --y L --method dic --mediator Z --observed-confounder S "
                         "--dic-form published", d);
    ASSERT_EQ(pub.code, 0);
    EXPECT_EQ(json::parse(pub.out).at("dic_form"), "published");

    EXPECT_EQ(cli("adjust --scm fd.json --x I --y L --method backdoor --adjust-set D", d).code, 2);  // D hidden
    EXPECT_EQ(cli("adjust --scm bd.json --x I --y L --method backdoor", d).code, 2);  // open backdoor path
    EXPECT_EQ(cli("adjust --scm bd.json --x Q --y L --method backdoor", d).code, 2);
    EXPECT_EQ(cli("adjust --scm fd.json --x I --y L --method frontdoor", d).code, 1);
    EXPECT_EQ(cli("adjust --scm bd.json --x I --y L --method magic", d).code, 1);
}

TEST(Cli, Selfcheck) {
    const auto d = scratch("selfcheck");
    const auto ok = cli("selfcheck", d);
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("selfcheck passed"), std::string::npos);
    for (const char* l : {"lambda=1 ", "lambda=0.5 ", "lambda=0.1 ", "lambda=0 "}) {
        EXPECT_NE(ok.out.find(l), std::string::npos) << l;
    }
    const auto bad = cli("selfcheck --perturb-weight 0.05", d);
    EXPECT_EQ(bad.code, 3);
    EXPECT_NE(bad.out.find("backdoor vs do-oracle     FAIL"), std::string::npos) << bad.out;
}
