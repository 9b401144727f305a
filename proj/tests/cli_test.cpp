#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;
};

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "crossflow_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

CliResult run_cli(const std::string& args) {
    const fs::path out_file = work_dir() / "cmd_output.txt";
    const std::string cmd = std::string(CROSSFLOW_CLI_PATH) + " " + args + " > " +
                            out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    res.output.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return res;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
    std::map<std::string, std::string> contents;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        contents[fs::relative(entry.path(), dir).string()] =
            std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    return contents;
}

std::string small_config(const fs::path& dataset, const fs::path& out, int epochs = 1,
                         const std::string& extra = "") {
    return std::string("{\"architecture\":\"cnn_mlp\",\"num_classes\":2,\"height\":8,"
                       "\"width\":8,\"mfcc_dim\":4,\"avg_windows\":1,") +
           "\"dataset\":\"" + dataset.string() + "\",\"epochs\":" + std::to_string(epochs) +
           ",\"batch_size\":4,\"seed\":9,\"k\":2,\"repeats\":1,\"out_dir\":\"" + out.string() +
           "\"" + extra + "}";
}

}  // namespace

TEST_CASE("cli: gen-data") {
    const fs::path base = work_dir();

    SUBCASE("default counts produce 750 examples") {
        CliResult r = run_cli("gen-data --t-min 1 --t-max 2 --height 8 --width 8 --mfcc-dim 4 "
                              "--seed 1 --out " +
                              (base / "ds750").string());
        CHECK(r.exit_code == 0);
        CHECK(r.output.find("wrote 750 examples (10 classes, 15 persons)") != std::string::npos);
    }
    SUBCASE("same seed reproduces identical directory contents") {
        const std::string flags =
            "gen-data --classes 2 --persons 2 --per-class 1 --t-min 1 --t-max 2 "
            "--height 8 --width 8 --mfcc-dim 4 --seed 77 --out ";
        CHECK(run_cli(flags + (base / "ds_a").string()).exit_code == 0);
        CHECK(run_cli(flags + (base / "ds_b").string()).exit_code == 0);
        CHECK(dir_contents(base / "ds_a") == dir_contents(base / "ds_b"));
    }
    SUBCASE("one class is a usage error, exit 2") {
        CliResult r = run_cli("gen-data --classes 1 --out " + (base / "bad").string());
        CHECK(r.exit_code == 2);
    }
    SUBCASE("XFLOW_SEED env var substitutes a missing --seed") {
        const std::string flags =
            "gen-data --classes 2 --persons 2 --per-class 1 --t-min 1 --t-max 2 "
            "--height 8 --width 8 --mfcc-dim 4 ";
        CHECK(run_cli(flags + "--seed 321 --out " + (base / "ds_flag").string()).exit_code == 0);
        setenv("XFLOW_SEED", "321", 1);
        CHECK(run_cli(flags + "--out " + (base / "ds_env").string()).exit_code == 0);
        unsetenv("XFLOW_SEED");
        CHECK(dir_contents(base / "ds_flag") == dir_contents(base / "ds_env"));
    }
    SUBCASE("unknown subcommand exits 2") {
        CHECK(run_cli("frobnicate").exit_code == 2);
    }
}

TEST_CASE("cli: train, info, analyze, crossval") {
    const fs::path base = work_dir();
    const fs::path ds = base / "ds_main";
    REQUIRE(run_cli("gen-data --classes 2 --persons 3 --per-class 2 --t-min 2 --t-max 3 "
                    "--height 8 --width 8 --mfcc-dim 4 --seed 5 --out " +
                    ds.string())
                .exit_code == 0);

    const fs::path cfg = base / "train.json";
    write_file(cfg, small_config(ds, base / "run"));
    REQUIRE(run_cli("train --config " + cfg.string()).exit_code == 0);
    CHECK(fs::exists(base / "run" / "history.csv"));
    CHECK(fs::exists(base / "run" / "model.xfp"));
    CHECK(fs::exists(base / "run" / "model.json"));

    SUBCASE("epochs=0 is a validation error, exit 4") {
        const fs::path bad = base / "bad_epochs.json";
        write_file(bad, small_config(ds, base / "never", 0));
        CHECK(run_cli("train --config " + bad.string()).exit_code == 4);
    }
    SUBCASE("missing dataset is an io error, exit 3") {
        const fs::path bad = base / "bad_ds.json";
        write_file(bad, small_config(base / "nonexistent_ds", base / "never"));
        CHECK(run_cli("train --config " + bad.string()).exit_code == 3);
    }
    SUBCASE("malformed config json is a validation error, exit 4") {
        const fs::path bad = base / "broken.json";
        write_file(bad, "{not json");
        CHECK(run_cli("train --config " + bad.string()).exit_code == 4);
    }
    SUBCASE("info reports strictly more parameters for the connected model") {
        const fs::path base_cfg = base / "train_base.json";
        write_file(base_cfg, small_config(ds, base / "run_base", 1,
                                          ",\"use_xconns\":false,\"use_resconns\":false"));
        REQUIRE(run_cli("train --config " + base_cfg.string()).exit_code == 0);

        auto param_count = [&](const fs::path& model) {
            CliResult r = run_cli("info --model " + model.string());
            REQUIRE(r.exit_code == 0);
            const std::string key = "trainable parameters: ";
            const std::size_t pos = r.output.find(key);
            REQUIRE(pos != std::string::npos);
            return std::stoull(r.output.substr(pos + key.size()));
        };
        CHECK(param_count(base / "run" / "model.xfp") >
              param_count(base / "run_base" / "model.xfp"));
    }
    SUBCASE("info without sidecar is an io error") {
        fs::copy_file(base / "run" / "model.xfp", base / "orphan.xfp",
                      fs::copy_options::overwrite_existing);
        CHECK(run_cli("info --model " + (base / "orphan.xfp").string()).exit_code == 3);
    }
    SUBCASE("analyze features emits rows for every example") {
        CliResult r = run_cli("analyze --model " + (base / "run" / "model.xfp").string() +
                              " --dataset " + ds.string() + " --what features --out " +
                              (base / "an_f").string());
        CHECK(r.exit_code == 0);
        CHECK(fs::exists(base / "an_f" / "features.csv"));
        CHECK(fs::exists(base / "an_f" / "clustering.json"));
        std::ifstream in(base / "an_f" / "features.csv");
        std::string line;
        int rows = -1;  // header
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 12);
    }
    SUBCASE("analyze diffs requires the recurrent architecture, exit 4") {
        CliResult r = run_cli("analyze --model " + (base / "run" / "model.xfp").string() +
                              " --dataset " + ds.string() + " --what diffs --out " +
                              (base / "an_d").string());
        CHECK(r.exit_code == 4);
    }
    SUBCASE("crossval outputs are byte-identical across reruns and job counts") {
        const fs::path cv_cfg = base / "cv.json";
        write_file(cv_cfg, small_config(ds, base / "cv_a"));
        REQUIRE(run_cli("crossval --config " + cv_cfg.string() + " --jobs 1").exit_code == 0);
        write_file(cv_cfg, small_config(ds, base / "cv_b"));
        REQUIRE(run_cli("crossval --config " + cv_cfg.string() + " --jobs 2").exit_code == 0);
        CHECK(dir_contents(base / "cv_a") == dir_contents(base / "cv_b"));
    }
}

TEST_CASE("cli: gradcheck exits clean below the 1e-4 gate") {
    CliResult r = run_cli("gradcheck --arch cnn_mlp");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("worst relative error") != std::string::npos);
}
