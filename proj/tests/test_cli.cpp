// End-to-end checks for the `dfd` command-line tool: each subcommand is run
// as a child process against small generated datasets, and the files it
// leaves behind are inspected with the library itself.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "dfd.hpp"

namespace fs = std::filesystem;
using namespace dfd;

namespace {

std::string dfd_bin() { return std::string(DFD_BIN_DIR) + "/dfd"; }

/// Recreates `name` under the system temp dir and returns its path.
fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

/// Runs `dfd <args>` with stdout/stderr captured into files under `dir`.
RunResult run_cli(const fs::path& dir, const std::string& args) {
    const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd =
        dfd_bin() + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

/// A config the `train` subcommand can finish in seconds.
TrainingConfig quick_config(std::uint64_t seed) {
    TrainingConfig cfg;
    cfg.resolution = 32;
    cfg.channels = {8, 12, 16, 20};
    cfg.dft_blocks = 2;
    cfg.task = Task::x4;
    cfg.batch_size = 1;
    cfg.max_steps = 6;
    cfg.val_interval = 1000;
    cfg.val_count = 0;
    cfg.checkpoint_interval = 100;
    cfg.adversarial = false;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("cli: synth writes images with landmark sidecars") {
    const fs::path dir = fresh_dir("dfd_cli_synth");
    const auto r = run_cli(
        dir, "synth --out " + (dir / "data").string() + " --count 6 --seed 9 --resolution 32");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("wrote 6 faces") != std::string::npos);
    for (int i = 0; i < 6; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "face_%04d", i);
        REQUIRE(fs::exists(dir / "data" / (std::string(name) + ".ppm")));
        REQUIRE(fs::exists(dir / "data" / (std::string(name) + ".txt")));
    }
    const Image im = load_image((dir / "data" / "face_0000.ppm").string());
    REQUIRE(im.width == 32);
    REQUIRE(im.height == 32);
    const LandmarkSet lm = load_landmarks((dir / "data" / "face_0000.txt").string());
    REQUIRE(lm.x.size() == 68);
}

TEST_CASE("cli: degrade honors fixed parameters and writes manifests") {
    const fs::path dir = fresh_dir("dfd_cli_degrade");
    REQUIRE(run_cli(dir, "synth --out " + (dir / "data").string() +
                             " --count 3 --seed 4 --resolution 32")
                .code == 0);
    const auto r = run_cli(dir, "degrade --in " + (dir / "data").string() + " --out " +
                                    (dir / "deg").string() +
                                    " --seed 7 --r 4 --sigma 5 --q 80 --kernel gaussian:1.5");
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("degraded 3 images") != std::string::npos);
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "face_%04d", i);
        const fs::path img = dir / "deg" / (std::string(name) + ".ppm");
        const fs::path man = dir / "deg" / (std::string(name) + ".manifest.txt");
        REQUIRE(fs::exists(img));
        REQUIRE(fs::exists(man));
        // r = 4 leaves the image at the downsampled size.
        const Image deg = load_image(img.string());
        REQUIRE(deg.width == 8);
        REQUIRE(deg.height == 8);
        const auto kv = kv_map(read_kv_file(man));
        REQUIRE(std::stod(kv.at("r")) == 4.0);
        REQUIRE(std::stod(kv.at("sigma")) == 5.0);
        REQUIRE(std::stoi(kv.at("q")) == 80);
        REQUIRE(kv.at("source") == std::string(name) + ".ppm");
    }

    SECTION("same seed reproduces the degraded bytes") {
        REQUIRE(run_cli(dir, "degrade --in " + (dir / "data").string() + " --out " +
                                 (dir / "deg2").string() +
                                 " --seed 7 --r 4 --sigma 5 --q 80 --kernel gaussian:1.5")
                    .code == 0);
        REQUIRE(slurp(dir / "deg" / "face_0000.ppm") == slurp(dir / "deg2" / "face_0000.ppm"));
    }
}

TEST_CASE("cli: build-dict, train, restore, and eval chain together") {
    const fs::path dir = fresh_dir("dfd_cli_chain");
    const std::string data = (dir / "data").string();
    const std::string dict = (dir / "dict").string();
    const std::string run_dir = (dir / "run").string();
    REQUIRE(run_cli(dir, "synth --out " + data + " --count 8 --seed 11 --resolution 32").code == 0);

    // Dictionary + frozen encoder, widths matching the training config below.
    const fs::path enc_path = dir / "enc.bin";
    Encoder::random_toy(7, 32, {8, 12, 16, 20}).save(enc_path.string());
    const auto bd = run_cli(dir, "build-dict --images " + data + " --landmarks " + data +
                                     " --out " + dict +
                                     " --clusters 2 --seed 5 --encoder " + enc_path.string());
    INFO(bd.err);
    REQUIRE(bd.code == 0);
    REQUIRE(bd.out.find("built K=2 dictionaries from 8 images") != std::string::npos);
    REQUIRE(fs::exists(dir / "dict" / "encoder.bin"));
    const DictionarySet loaded = load_dictionary(dict);
    REQUIRE(loaded.k == 2);

    // Short training run.
    const fs::path cfg_path = dir / "config.txt";
    write_kv_file(cfg_path, training_config_to_kv(quick_config(13)));
    const auto tr = run_cli(dir, "train --images " + data + " --landmarks " + data + " --dict " +
                                     dict + " --out " + run_dir + " --config " + cfg_path.string());
    INFO(tr.err);
    REQUIRE(tr.code == 0);
    REQUIRE(tr.out.find("trained 6 steps") != std::string::npos);
    const fs::path ckpt = dir / "run" / "ckpt_step_000006.bin";
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(dir / "run" / "config.txt"));
    const auto log_lines = lines_of(slurp(dir / "run" / "train_log.csv"));
    REQUIRE(log_lines.size() == 7);
    REQUIRE(log_lines[0] == "step,loss_rec,loss_adv_g,loss_d,lr");

    // Restore one degraded image with diagnostics.
    REQUIRE(run_cli(dir, "degrade --in " + data + " --out " + (dir / "deg").string() +
                             " --seed 3 --r 4")
                .code == 0);
    const fs::path diag = dir / "diag.jsonl";
    const auto rs = run_cli(dir, "restore --in " + (dir / "deg" / "face_0000.ppm").string() +
                                     " --landmarks " + (dir / "data" / "face_0000.txt").string() +
                                     " --dict " + dict + " --ckpt " + ckpt.string() + " --out " +
                                     (dir / "restored.ppm").string() + " --diag " + diag.string());
    INFO(rs.err);
    REQUIRE(rs.code == 0);
    const Image restored = load_image((dir / "restored.ppm").string());
    REQUIRE(restored.width == 32);
    REQUIRE(restored.height == 32);
    // Two blocks x four components, innermost scales first.
    const auto diag_lines = lines_of(slurp(diag));
    REQUIRE(diag_lines.size() == 8);
    for (const auto& line : diag_lines) {
        REQUIRE(line.find("\"scale\": ") != std::string::npos);
        REQUIRE(line.find("\"component\": \"") != std::string::npos);
        REQUIRE(line.find("\"k_star\": ") != std::string::npos);
        REQUIRE(line.find("\"mean_confidence\": ") != std::string::npos);
        REQUIRE(line.find("\"skipped\": ") != std::string::npos);
        const bool scale3 = line.find("\"scale\": 3") != std::string::npos;
        const bool scale4 = line.find("\"scale\": 4") != std::string::npos;
        REQUIRE((scale3 || scale4));
    }
    for (const char* name : {"left_eye", "right_eye", "nose", "mouth"}) {
        int hits = 0;
        for (const auto& line : diag_lines)
            if (line.find("\"component\": \"" + std::string(name) + "\"") != std::string::npos)
                ++hits;
        REQUIRE(hits == 2);
    }

    // Evaluation table, to file and to stdout.
    const fs::path csv = dir / "eval.csv";
    const auto ev = run_cli(dir, "eval --images " + data + " --landmarks " + data + " --dict " +
                                     dict + " --ckpt " + ckpt.string() +
                                     " --task x4 --seed 21 --out " + csv.string());
    INFO(ev.err);
    REQUIRE(ev.code == 0);
    REQUIRE(ev.out.find("mean psnr") != std::string::npos);
    const auto csv_lines = lines_of(slurp(csv));
    REQUIRE(csv_lines.size() == 9);
    REQUIRE(csv_lines[0] == "id,task,psnr_db,ssim,psnr_bicubic_db,ssim_bicubic");
    for (std::size_t i = 1; i < csv_lines.size(); ++i) {
        REQUIRE(std::count(csv_lines[i].begin(), csv_lines[i].end(), ',') == 5);
        REQUIRE(csv_lines[i].find(",x4,") != std::string::npos);
    }

    const auto ev2 = run_cli(dir, "eval --images " + data + " --landmarks " + data + " --dict " +
                                      dict + " --ckpt " + ckpt.string() + " --task x4 --seed 21");
    REQUIRE(ev2.code == 0);
    REQUIRE(ev2.out.find("id,task,psnr_db,ssim,psnr_bicubic_db,ssim_bicubic") !=
            std::string::npos);
}

TEST_CASE("cli: bad invocations exit nonzero with a message") {
    const fs::path dir = fresh_dir("dfd_cli_errors");

    SECTION("no subcommand") {
        REQUIRE(run_cli(dir, "").code != 0);
    }
    SECTION("degrade over an empty directory") {
        fs::create_directories(dir / "empty");
        const auto r = run_cli(dir, "degrade --in " + (dir / "empty").string() + " --out " +
                                        (dir / "out").string() + " --seed 1");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("no images") != std::string::npos);
    }
    SECTION("degrade with a malformed kernel") {
        REQUIRE(run_cli(dir, "synth --out " + (dir / "data").string() +
                                 " --count 1 --seed 1 --resolution 32")
                    .code == 0);
        const auto r = run_cli(dir, "degrade --in " + (dir / "data").string() + " --out " +
                                        (dir / "out").string() + " --seed 1 --kernel box:3");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("gaussian:SIGMA or motion:IDX") != std::string::npos);
        const auto r2 = run_cli(dir, "degrade --in " + (dir / "data").string() + " --out " +
                                         (dir / "out").string() + " --seed 1 --kernel gaussian");
        REQUIRE(r2.code == 1);
        REQUIRE(r2.err.find("needs a sigma") != std::string::npos);
    }
    SECTION("train without the dictionary its config needs") {
        REQUIRE(run_cli(dir, "synth --out " + (dir / "data").string() +
                                 " --count 2 --seed 1 --resolution 32")
                    .code == 0);
        write_kv_file(dir / "config.txt", training_config_to_kv(quick_config(1)));
        const auto r = run_cli(dir, "train --images " + (dir / "data").string() + " --landmarks " +
                                        (dir / "data").string() + " --out " +
                                        (dir / "run").string() + " --config " +
                                        (dir / "config.txt").string());
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("--dict is required") != std::string::npos);
    }
    SECTION("restore with a missing checkpoint") {
        REQUIRE(run_cli(dir, "synth --out " + (dir / "data").string() +
                                 " --count 1 --seed 1 --resolution 32")
                    .code == 0);
        const auto r = run_cli(dir, "restore --in " + (dir / "data" / "face_0000.ppm").string() +
                                        " --landmarks " +
                                        (dir / "data" / "face_0000.txt").string() + " --dict " +
                                        (dir / "nope").string() + " --ckpt " +
                                        (dir / "nope.bin").string() + " --out " +
                                        (dir / "out.ppm").string());
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("error:") != std::string::npos);
    }
    SECTION("eval rejects an unknown task name") {
        REQUIRE(run_cli(dir, "synth --out " + (dir / "data").string() +
                                 " --count 2 --seed 1 --resolution 32")
                    .code == 0);
        // A checkpoint is still needed to reach task parsing, so make a tiny one.
        GeneratorConfig gc;
        gc.resolution = 32;
        gc.channels = {8, 12, 16, 20};
        gc.dft_blocks = 0;
        const Encoder enc = Encoder::random_toy(3, 32, {8, 12, 16, 20});
        save_generator(build_generator(gc, enc, 1), (dir / "g.bin").string());
        const auto r = run_cli(dir, "eval --images " + (dir / "data").string() + " --landmarks " +
                                        (dir / "data").string() + " --ckpt " +
                                        (dir / "g.bin").string() + " --task x16");
        REQUIRE(r.code == 1);
        REQUIRE(r.err.find("x16") != std::string::npos);
    }
}
