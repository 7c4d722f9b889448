#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "chybrid_cli_test";

struct Result {
    int code;
    std::string out;
};

Result run(const std::string& args) {
    const fs::path log = kWork / "last_output.txt";
    const std::string cmd = "cd '" + kWork.string() + "' && '" CHYBRID_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Toy config plus a corpus on disk, shared by the tests below.
void prepare() {
    static bool done = false;
    if (done) return;
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(kWork / "toy.ini") << R"([corpus]
num_utterances = 6
num_dev_utterances = 3
min_length = 12
max_length = 30
feature_dim = 8
num_labels = 10
[frontend]
conv_filters = 4,8,8,4
[blocks]
model_dim = 16
heads = 2
ffn_dim = 32
num_blocks = 2
rel_pos_clamp = 8
[heads]
mlp_dim = 16
[optim]
epochs = 2
frame_budget = 60
[run]
corpus_path = train.cham
dev_corpus_path = dev.cham
record_wall_time = false
)";
    REQUIRE(run("gen-corpus --config toy.ini --out train.cham --dev-out dev.cham").code == 0);
    done = true;
}

}  // namespace

TEST_CASE("gen-corpus is reproducible and refuses to overwrite") {
    prepare();
    REQUIRE(run("gen-corpus --config toy.ini --out a.cham").code == 0);
    REQUIRE(run("gen-corpus --config toy.ini --out b.cham").code == 0);
    CHECK(slurp(kWork / "a.cham") == slurp(kWork / "b.cham"));
    CHECK(slurp(kWork / "a.cham").substr(0, 5) == "CHAM1");
    CHECK(run("gen-corpus --config toy.ini --out a.cham").code != 0);
    CHECK(run("gen-corpus --config toy.ini --out a.cham --force").code == 0);
    CHECK(run("gen-corpus --config toy.ini --set corpus_seed=8 --out c.cham").code == 0);
    CHECK(slurp(kWork / "a.cham") != slurp(kWork / "c.cham"));
}

TEST_CASE("usage errors exit with code 2") {
    prepare();
    CHECK(run("gen-corpus --out x.cham").code == 2);
    CHECK(run("gen-corpus --config missing.ini --out x.cham").code == 2);
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("train --config toy.ini --set no_such_key=1").code == 2);
    CHECK(run("--help").code == 0);
}

TEST_CASE("train writes outputs and reruns are identical") {
    prepare();
    const auto a = run("train --config toy.ini --set out_dir=run_a");
    INFO(a.out);
    REQUIRE(a.code == 0);
    REQUIRE(run("train --config toy.ini --set out_dir=run_b").code == 0);
    for (const char* f : {"config.resolved.ini", "metrics.jsonl", "checkpoint.last.bin", "summary.json"})
        CHECK(fs::exists(kWork / "run_a" / f));
    CHECK(slurp(kWork / "run_a" / "metrics.jsonl") == slurp(kWork / "run_b" / "metrics.jsonl"));

    std::ifstream metrics(kWork / "run_a" / "metrics.jsonl");
    std::string line;
    int epochs = 0;
    while (std::getline(metrics, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["epoch"] == ++epochs);
        CHECK(j["wall_ms"] == 0.0);
    }
    CHECK(epochs == 2);
    const auto summary = nlohmann::json::parse(slurp(kWork / "run_a" / "summary.json"));
    CHECK(summary["status"] == "ok");

    // rerunning from the echoed config reproduces the run
    REQUIRE(run("train --config run_a/config.resolved.ini --set out_dir=run_c").code == 0);
    CHECK(slurp(kWork / "run_c" / "metrics.jsonl") == slurp(kWork / "run_a" / "metrics.jsonl"));
}

TEST_CASE("ablation flags change the resolved config") {
    prepare();
    REQUIRE(run("train --config toy.ini --set out_dir=run_abl --set epochs=1 --no-specaugment --no-long-skip "
                "--no-focal-loss --no-intermediate-loss --share-mlp --no-share-transposed-conv")
                .code == 0);
    const std::string echo = slurp(kWork / "run_abl" / "config.resolved.ini");
    for (const char* want : {"specaugment = false", "long_skip = false", "focal_loss = false",
                             "intermediate_loss = false", "share_mlp = true", "share_transposed_conv = false"})
        CHECK(echo.find(want) != std::string::npos);
}

TEST_CASE("resume continues a run") {
    prepare();
    REQUIRE(run("train --config toy.ini --set out_dir=run_full --set epochs=3").code == 0);
    REQUIRE(run("train --config toy.ini --set out_dir=run_part --set epochs=2").code == 0);
    REQUIRE(run("train --config toy.ini --set out_dir=run_part --set epochs=3 --resume run_part/checkpoint.last.bin").code == 0);
    CHECK(slurp(kWork / "run_part" / "metrics.jsonl") == slurp(kWork / "run_full" / "metrics.jsonl"));
}

TEST_CASE("numeric blow-up exits with code 3") {
    prepare();
    const auto r = run("train --config toy.ini --set out_dir=run_nan --set warmup_peak_lr=1e300 --set warmup_epochs=0");
    INFO(r.out);
    CHECK(r.code == 3);
    const auto summary = nlohmann::json::parse(slurp(kWork / "run_nan" / "summary.json"));
    CHECK(summary["status"] == "numeric_abort");
}

TEST_CASE("eval reports CE and frame error rate") {
    prepare();
    if (!fs::exists(kWork / "run_a" / "checkpoint.last.bin"))
        REQUIRE(run("train --config toy.ini --set out_dir=run_a").code == 0);
    const auto r = run("eval --checkpoint run_a/checkpoint.last.bin --corpus dev.cham");
    INFO(r.out);
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["ce"].get<double>() > 0.0);
    CHECK(j["frame_error_rate"].get<double>() >= 0.0);
    CHECK(j["frame_error_rate"].get<double>() <= 1.0);
    CHECK(run("eval --checkpoint nope.bin --corpus dev.cham").code != 0);
    CHECK(run("eval --checkpoint run_a/checkpoint.last.bin --corpus nope.cham").code == 4);
}

TEST_CASE("inspect prints the parameter census") {
    prepare();
    const auto r = run("inspect --config toy.ini");
    INFO(r.out);
    REQUIRE(r.code == 0);
    for (const char* want : {"frontend", "block.1", "head.final", "total", "aliased"}) CHECK(r.out.find(want) != std::string::npos);
    std::ofstream(kWork / "empty.ini") << "";
    const auto full = run("inspect --config empty.ini");
    REQUIRE(full.code == 0);
    CHECK(full.out.find("88.51M") != std::string::npos);
    if (fs::exists(kWork / "run_a" / "checkpoint.last.bin")) CHECK(run("inspect --checkpoint run_a/checkpoint.last.bin").code == 0);
}
