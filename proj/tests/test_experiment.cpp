#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ivae/experiment.hpp"

using namespace ivae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct LabRun {
    int code = -1;
    std::string out, err;
    json summary() const { return json::parse(out); }
    json error() const { return json::parse(err); }
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(is, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

class Lab : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / (std::string("ivae_lab_") + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path write_config(const std::string& name, const json& j) {
        const fs::path p = dir_ / (name + ".json");
        std::ofstream(p) << j.dump(2);
        return p;
    }

    LabRun lab(const std::string& args) {
        const fs::path o = dir_ / "stdout.txt", e = dir_ / "stderr.txt";
        const std::string cmd = std::string(IVAE_LAB_BIN) + " " + args + " > " + o.string() + " 2> " + e.string();
        const int status = std::system(cmd.c_str());
        LabRun r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(o);
        r.err = slurp(e);
        return r;
    }

    LabRun lab(const std::string& command, const fs::path& cfg, const std::string& extra = "") {
        return lab(command + " --config " + cfg.string() + " --out " + (dir_ / "runs").string() + " " + extra);
    }

    static json small() {
        return {{"data", {{"M", 4}, {"L", 40}, {"n", 2}, {"d", 2}, {"mixing_layers", 2}}},
                {"model", {{"latent_dim", 2}, {"hidden_dim", 8}, {"num_layers", 2}}},
                {"train", {{"epochs", 2}, {"batch_size", 32}}},
                {"seed", 5}};
    }

    fs::path dir_;
};

}  // namespace

TEST_F(Lab, SchemaPrintsJson) {
    const LabRun r = lab("schema");
    EXPECT_EQ(r.code, 0);
    const json s = json::parse(r.out);
    EXPECT_TRUE(s.contains("properties"));
    EXPECT_TRUE(s.at("properties").contains("data"));
}

TEST_F(Lab, UsageErrorsExitWithOne) {
    const LabRun r = lab("frobnicate");
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.error().at("error"), "usage");
    EXPECT_EQ(lab("train").code, 1);  // --config is required
}

TEST_F(Lab, InvalidConfigsExitWithOne) {
    json bad = small();
    bad["data"]["bogus"] = 1;
    LabRun r = lab("generate", write_config("unknown", bad));
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.error().at("error"), "config");
    EXPECT_NE(r.error().at("message").get<std::string>().find("data.bogus"), std::string::npos);

    bad = small();
    bad["model"]["family"] = "cauchy";
    EXPECT_EQ(lab("train", write_config("enum", bad)).code, 1);

    bad = small();
    bad["data"]["d"] = 1;  // d < n
    EXPECT_EQ(lab("generate", write_config("dims", bad)).code, 1);

    bad = small();
    bad["schema_version"] = 99;
    EXPECT_EQ(lab("generate", write_config("version", bad)).code, 1);

    const fs::path garbage = dir_ / "garbage.json";
    std::ofstream(garbage) << "{ not json";
    EXPECT_EQ(lab("generate", garbage).code, 1);
    EXPECT_EQ(lab("generate", dir_ / "missing.json").code, 1);
}

TEST_F(Lab, CommandMismatchIsAConfigError) {
    json c = small();
    c["command"] = "train";
    EXPECT_EQ(lab("generate", write_config("c", c)).code, 1);
}

TEST_F(Lab, RuntimeFailuresExitWithTwo) {
    json c = small();
    c["train"]["lr"] = 1e6;  // diverges
    c["train"]["epochs"] = 20;
    const LabRun r = lab("train", write_config("diverge", c));
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.error().at("exit_code"), 2);
}

TEST_F(Lab, GenerateIsDeterministicAndSeedOverrideApplies) {
    const fs::path cfg = write_config("g", small());
    const LabRun a = lab("generate", cfg), b = lab("generate", cfg), c = lab("generate", cfg, "--seed 6");
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.summary().at("checksum"), b.summary().at("checksum"));
    EXPECT_NE(a.summary().at("checksum"), c.summary().at("checksum"));
    EXPECT_EQ(a.summary().at("N"), 160);
    const fs::path run_dir = a.summary().at("run_dir").get<std::string>();
    const Dataset ds = load_dataset(run_dir / "dataset");
    EXPECT_EQ(dataset_checksum(ds), a.summary().at("checksum"));
    EXPECT_EQ(lines(run_dir / "dataset.csv").size(), 161u);

    const auto log = lines(dir_ / "runs" / "runs.jsonl");
    ASSERT_EQ(log.size(), 3u);
    std::set<std::string> ids;
    for (const auto& l : log) ids.insert(json::parse(l).at("run_id").get<std::string>());
    EXPECT_EQ(ids.size(), 3u);
}

TEST_F(Lab, TrainWritesTraceAndResumes) {
    json c = small();
    const LabRun first = lab("train", write_config("t2", c));
    ASSERT_EQ(first.code, 0) << first.err;
    const fs::path run_dir = first.summary().at("run_dir").get<std::string>();
    EXPECT_EQ(lines(run_dir / "trace.csv").size(), 3u);  // header + one row per epoch
    EXPECT_FALSE(first.summary().at("resumed").get<bool>());
    EXPECT_TRUE(first.summary().at("uses_aux").get<bool>());

    // same config again: the checkpoint is complete, nothing is retrained
    const LabRun again = lab("train", write_config("t2", c));
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_TRUE(again.summary().at("resumed").get<bool>());
    EXPECT_EQ(again.summary().at("epochs"), 2);
    EXPECT_EQ(again.summary().at("final_train_elbo"), first.summary().at("final_train_elbo"));
    EXPECT_EQ(again.summary().at("mcc"), first.summary().at("mcc"));
}

TEST_F(Lab, BaselineRecordsThatItIgnoresAux) {
    json c = small();
    c["model"]["variant"] = {{"kind", "beta_vae"}, {"beta", 4.0}};
    const LabRun r = lab("train", write_config("vae", c));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_FALSE(r.summary().at("uses_aux").get<bool>());
    const json met = json::parse(slurp(fs::path(r.summary().at("run_dir").get<std::string>()) / "metrics.json"));
    EXPECT_FALSE(met.at("uses_aux").get<bool>());
    EXPECT_TRUE(met.at("variant").get<std::string>().find("beta") != std::string::npos);
}

TEST_F(Lab, EvalReportsAndChecksDimensions) {
    const LabRun tr = lab("train", write_config("t", small()));
    ASSERT_EQ(tr.code, 0) << tr.err;
    const fs::path run_dir = tr.summary().at("run_dir").get<std::string>();

    json e = small();
    e["checkpoint"] = (run_dir / "model").string();
    e["dataset"] = (run_dir / "dataset").string();
    e["eval"] = {{"correlation", "spearman"}};
    const LabRun ev = lab("eval", write_config("e", e));
    ASSERT_EQ(ev.code, 0) << ev.err;
    const fs::path eval_dir = ev.summary().at("run_dir").get<std::string>();
    const json report = json::parse(slurp(eval_dir / "report.json"));
    for (const char* k : {"mcc", "correlations", "permutation", "signs", "elbo", "variant", "alignment_r2"})
        EXPECT_TRUE(report.contains(k)) << k;
    EXPECT_EQ(report.at("correlation_kind"), "spearman");
    EXPECT_GE(report.at("mcc").get<double>(), 0.0);
    EXPECT_LE(report.at("mcc").get<double>(), 1.0);
    EXPECT_EQ(lines(eval_dir / "summary.csv").size(), 2u);

    // dataset with a different observation dimension
    json g = small();
    g["data"]["n"] = 2;
    g["data"]["d"] = 3;
    const LabRun gen = lab("generate", write_config("g3", g));
    ASSERT_EQ(gen.code, 0) << gen.err;
    e["dataset"] = (fs::path(gen.summary().at("run_dir").get<std::string>()) / "dataset").string();
    const LabRun mismatch = lab("eval", write_config("e3", e));
    EXPECT_EQ(mismatch.code, 1);
    EXPECT_NE(mismatch.error().at("message").get<std::string>().find("d=2"), std::string::npos);

    json missing = small();
    EXPECT_EQ(lab("eval", write_config("none", missing)).code, 1);
}

TEST_F(Lab, SweepProducesOneRowPerCell) {
    json c = small();
    c["sweep"] = {{"seeds", {1, 2}}, {"variants", {{{"kind", "ivae"}}, {{"kind", "vae"}}}}};
    const LabRun r = lab("sweep", write_config("s", c), "--parallel 2");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.summary().at("cells"), 4);
    const fs::path d = r.summary().at("run_dir").get<std::string>();
    const auto rows = lines(d / "results.csv");
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(rows[0].rfind("cell,M,n,seed,variant", 0), 0u);
    EXPECT_EQ(lines(d / "elbo_vs_mcc.csv").size(), 5u);
}

TEST_F(Lab, SweepOverDimensionsReportsAKnee) {
    json c = small();
    c["data"]["n"] = 2;
    c["data"]["d"] = 6;
    c["train"]["epochs"] = 1;
    c["sweep"] = {{"latent_dims", {1, 2, 3, 4}}};
    const LabRun r = lab("sweep", write_config("k", c));
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path d = r.summary().at("run_dir").get<std::string>();
    ASSERT_TRUE(fs::exists(d / "knee.json"));
    const json k = json::parse(slurp(d / "knee.json"));
    EXPECT_EQ(k.at("elbo_by_n").size(), 4u);
    EXPECT_TRUE(k.at("status") == "ok" || k.at("status") == "no_knee");
}

TEST_F(Lab, CausalAggregatesRepetitions) {
    json c = small();
    c["data"]["variant"] = "causal_sem";
    c["causal"] = {{"repetitions", 1}, {"hsic", {{"num_perms", 100}}}};
    const LabRun r = lab("causal", write_config("c", c));
    ASSERT_EQ(r.code, 0) << r.err;
    const json s = r.summary();
    EXPECT_EQ(s.at("repetitions"), 1);
    EXPECT_EQ(s.at("correct").get<int>() + s.at("wrong").get<int>() + s.at("none").get<int>(), 1);
    const auto dec = lines(fs::path(s.at("run_dir").get<std::string>()) / "decisions.jsonl");
    ASSERT_EQ(dec.size(), 1u);
    const json d = json::parse(dec[0]);
    EXPECT_TRUE(d.contains("verdict"));
    EXPECT_EQ(d.at("p_values").size(), 4u);

    c["causal"]["hsic"]["num_perms"] = 10;
    EXPECT_EQ(lab("causal", write_config("bad", c)).code, 1);
}

TEST_F(Lab, Demo2dWritesLatentTables) {
    json c = small();
    c["train"]["epochs"] = 1;
    const LabRun r = lab("demo-2d", write_config("d", c));
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path d = r.summary().at("run_dir").get<std::string>();
    for (const char* f : {"sources.csv", "observations.csv", "latents_ivae.csv", "latents_vae.csv", "summary.json"}) {
        ASSERT_TRUE(fs::exists(d / f)) << f;
    }
    EXPECT_EQ(lines(d / "latents_ivae.csv").size(), 161u);
    EXPECT_TRUE(r.summary().contains("ivae"));
    EXPECT_TRUE(r.summary().contains("vae"));

    json three = small();
    three["data"]["n"] = 3;
    three["data"]["d"] = 3;
    EXPECT_EQ(lab("demo-2d", write_config("d3", three)).code, 1);
}

TEST(Config, HashIgnoresPlacementButNotContent) {
    ExperimentConfig a;
    ExperimentConfig b = a;
    b.output_dir = "elsewhere";
    b.parallel = 4;
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.data.L = 7;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ParseRoundTrips) {
    json j = {{"data", {{"M", 6}, {"family", "laplace_scale"}}}, {"train", {{"epochs", 3}}}, {"seed", 9}};
    const ExperimentConfig c = parse_config(j);
    EXPECT_EQ(c.data.M, 6u);
    EXPECT_EQ(c.data.family, Family::laplace_scale);
    EXPECT_EQ(c.train.epochs, 3u);
    const ExperimentConfig back = parse_config(json(c));
    EXPECT_EQ(config_hash(c), config_hash(back));
    EXPECT_THROW(parse_config(json::array()), ConfigError);
    EXPECT_THROW(parse_config({{"train", {{"epochs", -1}}}}), ConfigError);
}
