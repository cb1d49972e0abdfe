#include "ciuap/errors.hpp"
#include "ciuap/pipeline.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace ciuap;
using pipeline::RunConfig;

namespace {

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig toy_config(const std::filesystem::path& root)
{
    auto cfg = RunConfig::load(std::filesystem::path(CIUAP_SOURCE_DIR) / "configs" / "toy.cfg");
    cfg.set("output_dir", (root / "runs").string());
    cfg.set("registry", (root / "registry").string());
    return cfg;
}

struct Process {
    int code = -1;
    std::string out;
    std::string err;
};

Process run_cli(const std::string& args, const std::filesystem::path& scratch)
{
    const auto out = scratch / "stdout.txt";
    const auto err = scratch / "stderr.txt";
    const std::string cmd = std::string("env -u CIUAP_REGISTRY '") + CIUAP_CLI_PATH + "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

io::Json metrics_from_stdout(const std::string& out)
{
    const auto brace = out.find('{');
    REQUIRE(brace != std::string::npos);
    return io::Json::parse(out.substr(brace));
}

std::string config_error(const std::string& text)
{
    try {
        RunConfig::parse(text, "run.cfg");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_SUITE("pipeline")
{
    TEST_CASE("config parsing")
    {
        const auto cfg = RunConfig::parse("# comment\n\nseed = 5\n  dataset=toy-2class-linear  # trailing\n"
                                          "impressions.augment = false\ntransfer.archs = a, b ,c\n");
        CHECK(cfg.get_int("seed") == 5);
        CHECK(cfg.get("dataset") == "toy-2class-linear");
        CHECK_FALSE(cfg.get_bool("impressions.augment"));
        CHECK(cfg.get_list("transfer.archs") == std::vector<std::string>{"a", "b", "c"});
        CHECK(cfg.get_real("generator.xi") == 10.0);
        CHECK(cfg.get("classifier.arch") == "cnn-3layer");
    }

    TEST_CASE("config diagnostics name the line")
    {
        CHECK(config_error("seed = 1\nnot a pair\n").find("run.cfg:2:") != std::string::npos);
        const auto unknown = config_error("\n\ntrain.lamda = 1\n");
        CHECK(unknown.find("run.cfg:3:") != std::string::npos);
        CHECK(unknown.find("train.lamda") != std::string::npos);
        const auto dup = config_error("seed = 1\nseed = 2\n");
        CHECK(dup.find("run.cfg:2:") != std::string::npos);
        CHECK(dup.find("line 1") != std::string::npos);
        CHECK(config_error("seed = abc\n").find("run.cfg:1:") != std::string::npos);
        CHECK_FALSE(config_error("impressions.augment = maybe\n").empty());
        CHECK_FALSE(config_error("generator.xi = 1x\n").empty());
        CHECK(config_error("seed = 3\n").empty());
        CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), ConfigError);
    }

    TEST_CASE("overrides, resolved text and hash")
    {
        RunConfig a;
        RunConfig b = RunConfig::parse(a.resolved_text());
        CHECK(a.hash() == b.hash());
        CHECK(a.hash().size() == 64);
        b.apply_override("train.lambda=0");
        CHECK(b.get_real("train.lambda") == 0.0);
        CHECK(a.hash() != b.hash());
        CHECK(RunConfig::parse(b.resolved_text()).hash() == b.hash());
        CHECK_THROWS_AS(b.apply_override("train.lambda"), ConfigError);
        CHECK_THROWS_AS(b.apply_override("nope=1"), ConfigError);
        CHECK_THROWS_AS(b.apply_override("seed=-x"), ConfigError);
        CHECK_THROWS_AS(a.get("nope"), ContractViolation);
    }

    TEST_CASE("shipped configs parse")
    {
        for (const char* name : {"toy.cfg", "gratings.cfg"}) {
            CHECK_NOTHROW(RunConfig::load(std::filesystem::path(CIUAP_SOURCE_DIR) / "configs" / name));
        }
    }

    TEST_CASE("typed views of the config")
    {
        RunConfig cfg;
        CHECK(cfg.stage_seed("a") == cfg.stage_seed("a"));
        CHECK(cfg.stage_seed("a") != cfg.stage_seed("b"));
        cfg.set("seed", "2");
        CHECK(cfg.root_seed() == 2);
        cfg.set("impressions.augment", "false");
        const auto ic = cfg.impression_config();
        CHECK(ic.rotation_min_degrees == 0.0);
        CHECK(ic.rotation_max_degrees == 0.0);
        cfg.set("train.epochs", "7");
        cfg.set("train.lambda", "0.5");
        const auto tc = cfg.train_config();
        CHECK(tc.epochs == 7);
        CHECK(tc.lambda == 0.5);
        CHECK(tc.seed == cfg.stage_seed("train-generator"));
        CHECK(cfg.impression_classes(10).size() == 10);
        cfg.set("impressions.classes", "1,3");
        CHECK(cfg.impression_classes(10) == std::vector<int>{1, 3});
        cfg.set("impressions.classes", "12");
        CHECK_THROWS_AS(cfg.impression_classes(10), ConfigError);
        cfg.set("train.batch_size", "0");
        CHECK_THROWS_AS(cfg.train_config(), ConfigError);
    }

    TEST_CASE("registry location can come from the environment")
    {
        RunConfig cfg;
        cfg.set("registry", "from-config");
        ::unsetenv("CIUAP_REGISTRY");
        CHECK(cfg.registry() == "from-config");
        ::setenv("CIUAP_REGISTRY", "/tmp/from-env", 1);
        CHECK(cfg.registry() == "/tmp/from-env");
        ::unsetenv("CIUAP_REGISTRY");
    }

    TEST_CASE("missing inputs are reported")
    {
        ::unsetenv("CIUAP_REGISTRY");
        test_support::TempDir dir("pipe-missing");
        auto cfg = toy_config(dir.path());
        CHECK_THROWS_AS(pipeline::run("no-such-stage", cfg), ConfigError);
        pipeline::run("train-classifier", cfg);
        CHECK_THROWS_AS(pipeline::run("train-generator", cfg), ConfigError);
        cfg.set("input.impressions", (dir.path() / "nowhere").string());
        CHECK_THROWS_AS(pipeline::run("train-generator", cfg), DependencyError);
        cfg.set("input.generator", (dir.path() / "nowhere").string());
        CHECK_THROWS_AS(pipeline::run("evaluate", cfg), DependencyError);
        CHECK_THROWS_AS(pipeline::verify_summary(dir.path() / "nowhere"), DependencyError);
        auto other = toy_config(dir.path());
        other.set("classifier.model_id", "absent-model");
        CHECK_THROWS_AS(pipeline::run("synth-impressions", other), DependencyError);
    }

    TEST_CASE("toy full pipeline beats noise and is reproducible")
    {
        ::unsetenv("CIUAP_REGISTRY");
        test_support::TempDir dir("pipe-full");
        const auto cfg = toy_config(dir.path());
        const auto first = pipeline::run("full-pipeline", cfg);
        const auto& ev = first.summary.at("metrics").at("evaluation");
        CHECK(ev.at("success_rate").get<double>() > ev.at("noise_baseline").get<double>());
        CHECK(std::filesystem::exists(first.run_dir / "config.resolved"));
        CHECK(read_file(first.run_dir / "config.resolved") == cfg.resolved_text());
        CHECK_NOTHROW(pipeline::verify_summary(first.run_dir));

        const auto second = pipeline::run("full-pipeline", cfg);
        CHECK(second.run_dir != first.run_dir);
        CHECK(second.summary.at("summary_sha256") == first.summary.at("summary_sha256"));
        CHECK(second.summary.at("config_sha256") == cfg.hash());

        // Altering any listed artifact is caught.
        {
            std::ofstream out(second.run_dir / "generator" / "losses.csv", std::ios::app);
            out << "tampered\n";
        }
        CHECK_THROWS_AS(pipeline::verify_summary(second.run_dir), DependencyError);
        CHECK_NOTHROW(pipeline::verify_summary(first.run_dir));
    }

    TEST_CASE("full pipeline equals the stages run one by one")
    {
        ::unsetenv("CIUAP_REGISTRY");
        test_support::TempDir dir("pipe-stages");
        auto cfg = toy_config(dir.path());
        cfg.set("train.epochs", "40");
        const auto full = pipeline::run("full-pipeline", cfg);

        pipeline::run("train-classifier", cfg);
        const auto imps = pipeline::run("synth-impressions", cfg);
        cfg.set("input.impressions", (imps.run_dir / "impressions").string());
        const auto gen = pipeline::run("train-generator", cfg);
        cfg.set("input.generator", (gen.run_dir / "generator").string());
        const auto ev = pipeline::run("evaluate", cfg);

        CHECK(read_file(gen.run_dir / "generator" / "generator.bin") ==
              read_file(full.run_dir / "generator" / "generator.bin"));
        CHECK(read_file(imps.run_dir / "impressions" / "manifest.csv") ==
              read_file(full.run_dir / "impressions" / "manifest.csv"));
        CHECK(ev.summary.at("metrics").at("evaluation") == full.summary.at("metrics").at("evaluation"));
        CHECK_NOTHROW(pipeline::verify_summary(ev.run_dir));

        cfg.set("eval.num_uaps", "4");
        const auto div = pipeline::run("diversity", cfg);
        CHECK(std::filesystem::exists(div.run_dir / "uaps" / "uap_3.pfm"));
        cfg.set("interp.steps", "3");
        const auto interp = pipeline::run("interpolate", cfg);
        CHECK(interp.summary.at("metrics").at("interpolation").at("endpoints_exact") == true);
    }

    TEST_CASE("command-line front end")
    {
        test_support::TempDir dir("pipe-cli");
        const std::string common = " -c '" + std::string(CIUAP_SOURCE_DIR) + "/configs/toy.cfg' -s output_dir='" +
                                   (dir.path() / "runs").string() + "' -s registry='" +
                                   (dir.path() / "registry").string() + "'";

        const auto printed = run_cli("evaluate --print-config -s seed=9", dir.path());
        CHECK(printed.code == 0);
        CHECK(printed.out.find("seed = 9") != std::string::npos);

        {
            std::ofstream bad(dir.path() / "bad.cfg");
            bad << "seed = 1\ndataset toy\n";
        }
        const auto bad = run_cli("evaluate -c '" + (dir.path() / "bad.cfg").string() + "'", dir.path());
        CHECK(bad.code == 2);
        CHECK(bad.err.find("bad.cfg:2:") != std::string::npos);
        CHECK(run_cli("evaluate -s nope=1", dir.path()).code == 2);
        CHECK(run_cli("no-such-subcommand", dir.path()).code == 2);

        CHECK(run_cli("train-classifier" + common, dir.path()).code == 0);
        const auto missing = run_cli("evaluate" + common + " -s input.generator=/nonexistent/gen", dir.path());
        CHECK(missing.code == 3);
        CHECK(missing.err.find("/nonexistent/gen") != std::string::npos);

        const auto zero = run_cli("evaluate" + common + " -s eval.zero_uap=true", dir.path());
        REQUIRE(zero.code == 0);
        CHECK(metrics_from_stdout(zero.out).at("evaluation").at("success_rate").get<double>() == 0.0);
    }
}
