#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "raunet/errors.hpp"

using namespace raunet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "raunet_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr,
            std::string* err_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

// byte-wise content snapshot of a directory tree
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream is(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), dir).string()] =
            std::string((std::istreambuf_iterator<char>(is)), {});
    }
    return files;
}

}  // namespace

TEST_CASE("config precedence: flag > config file > default") {
    auto dir = temp_dir("precedence");
    {
        std::ofstream cfg(dir / "run.conf");
        cfg << "# overrides\n";
        cfg << "seed = 7\n";
        cfg << "epochs = 3\n";
        cfg << "variant = mr\n";
    }
    const std::string conf = (dir / "run.conf").string();

    // default only
    auto c0 = cli::parse_args({"train"});
    CHECK(c0.seed == 0);
    CHECK(c0.epochs == 100);
    CHECK(c0.variant == "full");

    // file overrides default
    auto c1 = cli::parse_args({"train", "--config", conf});
    CHECK(c1.seed == 7);
    CHECK(c1.epochs == 3);
    CHECK(c1.variant == "mr");

    // flag overrides file, other file values stay
    auto c2 = cli::parse_args({"train", "--config", conf, "--epochs", "11"});
    CHECK(c2.seed == 7);
    CHECK(c2.epochs == 11);
    CHECK(c2.variant == "mr");

    // flag order does not matter for the override
    auto c3 = cli::parse_args({"train", "--epochs=11", "--config", conf});
    CHECK(c3.epochs == 11);
}

TEST_CASE("unknown flags and config keys are rejected") {
    CHECK_THROWS_AS(cli::parse_args({"train", "--bogus", "1"}), UsageError);
    CHECK_THROWS_AS(cli::parse_args({"frobnicate"}), UsageError);
    CHECK_THROWS_AS(cli::parse_args({"train", "--variant", "resnet"}), ConfigError);

    auto dir = temp_dir("badconf");
    {
        std::ofstream cfg(dir / "bad.conf");
        cfg << "nonsense = 1\n";
    }
    CHECK_THROWS_AS(cli::parse_args({"train", "--config", (dir / "bad.conf").string()}),
                    UsageError);
}

TEST_CASE("usage errors exit 2 with a synopsis") {
    std::string err;
    CHECK(run_cli({"train", "--frob", "x"}, nullptr, &err) == 2);
    CHECK(err.find("usage:") != std::string::npos);
    CHECK(run_cli({}, nullptr, &err) == 2);
    CHECK(run_cli({"train"}, nullptr, &err) == 2);  // missing --data
}

TEST_CASE("data errors exit 3") {
    std::string err;
    CHECK(run_cli({"augment", "--data", "/nonexistent/place", "--out", "/tmp/raunet_x"}, nullptr,
                  &err) == 3);
    CHECK(err.find("raunet: error:") != std::string::npos);
}

TEST_CASE("synth is deterministic and idempotent") {
    auto d1 = temp_dir("synth1");
    auto d2 = temp_dir("synth2");
    CHECK(run_cli({"synth", "--n", "8", "--size", "32", "--seed", "1", "--out", d1.string()}) == 0);
    CHECK(run_cli({"synth", "--n", "8", "--size", "32", "--seed", "1", "--out", d2.string()}) == 0);
    CHECK(snapshot(d1) == snapshot(d2));
    CHECK(snapshot(d1).size() == 17);  // manifest + 8 images + 8 masks

    // re-run over the same directory: content identical afterwards
    CHECK(run_cli({"synth", "--n", "8", "--size", "32", "--seed", "1", "--out", d1.string()}) == 0);
    CHECK(snapshot(d1) == snapshot(d2));
}

TEST_CASE("augment multiplies the manifest by six") {
    auto src = temp_dir("aug_src");
    auto dst = temp_dir("aug_dst");
    REQUIRE(run_cli({"synth", "--n", "5", "--size", "32", "--seed", "2", "--out", src.string()}) ==
            0);
    std::string out;
    CHECK(run_cli({"augment", "--data", src.string(), "--out", dst.string()}, &out) == 0);
    CHECK(out.find("30 samples") != std::string::npos);

    std::ifstream manifest(dst / "manifest.tsv");
    int lines = 0;
    std::string line;
    while (std::getline(manifest, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 30);
}

TEST_CASE("train/eval/predict round trip on a tiny run" * doctest::timeout(900)) {
    auto data = temp_dir("flow_data");
    auto run = temp_dir("flow_run");
    auto pred = temp_dir("flow_pred");
    REQUIRE(run_cli({"synth", "--n", "6", "--size", "16", "--seed", "3", "--out",
                     data.string()}) == 0);

    std::string out;
    CHECK(run_cli({"train", "--data", data.string(), "--out", run.string(), "--variant", "unet",
                   "--epochs", "1", "--folds", "2", "--seed", "3", "--depth", "2",
                   "--base-channels", "4", "--batch-size", "2"},
                  &out) == 0);
    CHECK(fs::exists(run / "fold0.raun"));
    CHECK(fs::exists(run / "fold1.raun"));
    CHECK(fs::exists(run / "report.tsv"));
    CHECK(fs::exists(run / "summary.txt"));
    CHECK(fs::exists(run / "loss_curves.csv"));
    CHECK(fs::exists(run / "folds.tsv"));
    CHECK(out.find("mean") != std::string::npos);

    CHECK(run_cli({"eval", "--data", data.string(), "--checkpoint",
                   (run / "fold0.raun").string()},
                  &out) == 0);
    CHECK(out.find("dice=") != std::string::npos);

    CHECK(run_cli({"predict", "--data", data.string(), "--checkpoint",
                   (run / "fold0.raun").string(), "--out", pred.string()}) == 0);
    CHECK(fs::exists(pred / "s0_panel.ppm"));
    CHECK(fs::exists(pred / "s0_pred.pgm"));

    // panel: input | truth | prediction with two separator columns
    std::ifstream panel(pred / "s0_panel.ppm", std::ios::binary);
    std::string magic;
    panel >> magic;
    int w = 0, h = 0;
    panel >> w >> h;
    CHECK(magic == "P6");
    CHECK(w == 16 * 3 + 4);
    CHECK(h == 16);
}

TEST_CASE("train re-run with the same seed is content-identical" * doctest::timeout(900)) {
    auto data = temp_dir("det_data");
    REQUIRE(run_cli({"synth", "--n", "4", "--size", "16", "--seed", "5", "--out",
                     data.string()}) == 0);
    auto r1 = temp_dir("det_run1");
    auto r2 = temp_dir("det_run2");
    for (const auto& dir : {r1, r2})
        REQUIRE(run_cli({"train", "--data", data.string(), "--out", dir.string(), "--variant",
                         "unet", "--epochs", "1", "--folds", "2", "--seed", "5", "--depth", "2",
                         "--base-channels", "4", "--batch-size", "2"}) == 0);
    CHECK(snapshot(r1) == snapshot(r2));
}

TEST_CASE("gradcheck command exits zero and reports the max error" * doctest::timeout(900)) {
    std::string out;
    CHECK(run_cli({"gradcheck", "--seed", "1"}, &out) == 0);
    CHECK(out.find("max relative error") != std::string::npos);
}
