// dfd: unified command-line entry point.
//
//   dfd synth      - generate a procedural toy face dataset with landmarks
//   dfd degrade    - run the blur/downsample/noise/JPEG pipeline over a folder
//   dfd build-dict - k-means component dictionaries from images + landmarks
//   dfd train      - train a restoration model from a key=value config file
//   dfd restore    - restore one image with a checkpoint and dictionary
//   dfd eval       - PSNR/SSIM table against the bicubic baseline

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dfd.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<fs::path> list_images(const std::string& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = dfd::lower_ext(e.path().string());
        if (ext == "ppm" || ext == "jpg" || ext == "jpeg") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

dfd::BlurKernel parse_kernel(const std::string& s) {
    const auto colon = s.find(':');
    const std::string kind = s.substr(0, colon);
    if (kind == "gaussian") {
        if (colon == std::string::npos)
            throw dfd::parameter_error("--kernel gaussian needs a sigma, e.g. gaussian:2.5");
        const double rho = std::stod(s.substr(colon + 1));
        return rho < 1e-4 ? dfd::delta_kernel()
                          : dfd::gaussian_kernel(rho, dfd::gaussian_auto_size(rho));
    }
    if (kind == "motion") {
        if (colon == std::string::npos)
            throw dfd::parameter_error("--kernel motion needs an index, e.g. motion:7");
        const int idx = std::stoi(s.substr(colon + 1));
        if (idx < 0 || idx > 31) throw dfd::parameter_error("--kernel motion index out of [0,31]");
        return dfd::motion_bank().at(static_cast<std::size_t>(idx));
    }
    throw dfd::parameter_error("--kernel must be gaussian:SIGMA or motion:IDX");
}

/// Resizes sources to `resolution` (scaling landmarks) for dictionary building.
std::vector<std::pair<dfd::Image, dfd::LandmarkSet>> at_resolution(
    const std::vector<dfd::SourceImage>& sources, int resolution) {
    std::vector<std::pair<dfd::Image, dfd::LandmarkSet>> out;
    out.reserve(sources.size());
    for (const auto& s : sources) {
        dfd::Image im = s.image;
        dfd::LandmarkSet lm = s.landmarks;
        if (im.width != resolution || im.height != resolution) {
            const float sx = static_cast<float>(resolution) / static_cast<float>(im.width);
            const float sy = static_cast<float>(resolution) / static_cast<float>(im.height);
            im = dfd::resize_image(im, resolution, resolution);
            for (std::size_t i = 0; i < lm.x.size(); ++i) {
                lm.x[i] *= sx;
                lm.y[i] *= sy;
            }
        }
        out.emplace_back(std::move(im), std::move(lm));
    }
    return out;
}

int run_synth(const std::string& out, int count, std::uint64_t seed, int resolution) {
    dfd::write_toy_dataset(out, count, seed, resolution);
    std::cout << "wrote " << count << " faces (" << resolution << "x" << resolution << ") to "
              << out << "\n";
    return 0;
}

int run_degrade(const std::string& in_dir, const std::string& out_dir, std::uint64_t seed,
                const std::optional<double>& r, const std::optional<double>& sigma,
                const std::optional<int>& q, const std::optional<std::string>& kernel) {
    const auto files = list_images(in_dir);
    if (files.empty()) throw dfd::data_error("degrade: no images in " + in_dir);
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < files.size(); ++i) {
        const dfd::Image im = dfd::load_image(files[i].string());
        dfd::Rng prng(dfd::derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 3));
        dfd::DegradationParams p = dfd::sample_degradation(prng);
        if (kernel) p.kernel = parse_kernel(*kernel);
        if (r) p.r = *r;
        if (sigma) p.sigma = *sigma;
        if (q) p.q = *q;
        p.validate();
        const std::uint64_t noise_seed = dfd::derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 4);
        const dfd::Image deg = dfd::apply_degradation(im, p, noise_seed);
        const std::string stem = files[i].stem().string();
        dfd::save_ppm((fs::path(out_dir) / (stem + ".ppm")).string(), deg);
        dfd::KvPairs kv = dfd::degradation_to_kv(p);
        kv.emplace_back("source", files[i].filename().string());
        dfd::write_kv_file((fs::path(out_dir) / (stem + ".manifest.txt")).string(), kv);
    }
    std::cout << "degraded " << files.size() << " images into " << out_dir << "\n";
    return 0;
}

int run_build_dict(const std::string& images, const std::string& landmarks, const std::string& out,
                   int clusters, std::uint64_t seed, const std::optional<std::string>& encoder_file,
                   std::uint64_t encoder_seed, int resolution) {
    const auto sources = dfd::load_sources(images, landmarks, &std::cerr);
    if (sources.empty()) throw dfd::data_error("build-dict: no usable images in " + images);
    const dfd::Encoder enc = encoder_file ? dfd::Encoder::load(*encoder_file)
                                          : dfd::Encoder::random_toy(encoder_seed, resolution);
    const auto dataset = at_resolution(sources, enc.config.resolution);
    const dfd::DictionarySet dict = dfd::build_dictionary(dataset, enc, clusters, seed);
    dfd::save_dictionary(dict, out);
    enc.save((fs::path(out) / "encoder.bin").string());
    std::cout << "built K=" << clusters << " dictionaries from " << sources.size() << " images ("
              << dict.sample_count << " used) at resolution " << enc.config.resolution
              << "; encoder " << enc.hash_string() << "\n";
    return 0;
}

int run_train(const std::string& images, const std::string& landmarks, const std::string& dict_dir,
              const std::string& out_dir, const std::string& config_path,
              const std::string& resume, const std::optional<std::string>& encoder_file) {
    const dfd::TrainingConfig cfg =
        dfd::training_config_from_kv(dfd::read_kv_file(config_path));
    dfd::DictionarySet dict;
    if (cfg.dft_blocks > 0) {
        if (dict_dir.empty())
            throw dfd::parameter_error("train: --dict is required when dft_blocks > 0");
        dict = dfd::load_dictionary(dict_dir);
    }
    dfd::Encoder enc;
    if (resume.empty()) {
        std::string enc_path;
        if (encoder_file)
            enc_path = *encoder_file;
        else if (!dict_dir.empty())
            enc_path = (fs::path(dict_dir) / "encoder.bin").string();
        else
            throw dfd::parameter_error("train: pass --encoder (no dictionary to take one from)");
        enc = dfd::Encoder::load(enc_path);
    }
    const auto sources = dfd::load_sources(images, landmarks, &std::cerr);
    if (sources.empty()) throw dfd::data_error("train: no usable images in " + images);
    const dfd::PairSet pairs = dfd::make_pairs(sources, cfg.task, cfg.seed, cfg.resolution);
    const dfd::TrainResult res = dfd::train(cfg, dict, enc, pairs, out_dir, resume);
    if (res.nan_aborted) {
        std::cerr << "aborted: non-finite loss at step " << res.steps
                  << "; last checkpoint retained" << (res.checkpoint_path.empty()
                                                          ? ""
                                                          : (": " + res.checkpoint_path))
                  << "\n";
        return 1;
    }
    std::cout << "trained " << res.steps << " steps; final lr " << res.lr << "; checkpoint "
              << res.checkpoint_path << "; log " << res.log_path << "\n";
    return 0;
}

int run_restore(const std::string& in, const std::string& landmarks, const std::string& dict_dir,
                const std::string& ckpt, const std::string& out,
                const std::optional<std::string>& diag) {
    const dfd::GeneratorParams g = dfd::load_generator(ckpt);
    dfd::DictionarySet dict;
    if (g.config.dft_blocks > 0) dict = dfd::load_dictionary(dict_dir);
    const dfd::Image im = dfd::load_image(in);
    const dfd::LandmarkSet lm = dfd::load_landmarks(landmarks);
    const dfd::RestorationOutput res = dfd::restore(g, im, lm, dict);
    dfd::save_image(out, res.image);
    if (diag) {
        std::ofstream os(*diag, std::ios::trunc);
        if (!os) throw dfd::data_error("restore: cannot open diagnostics file " + *diag);
        for (const auto& d : res.diagnostics) {
            char buf[192];
            std::snprintf(buf, sizeof(buf),
                          "{\"scale\": %d, \"component\": \"%s\", \"k_star\": %d, "
                          "\"mean_confidence\": %.6f, \"skipped\": %s}",
                          d.scale, dfd::component_name(d.component), d.k_star, d.mean_confidence,
                          d.skipped ? "true" : "false");
            os << buf << "\n";
        }
    }
    std::cout << "restored " << in << " -> " << out << "\n";
    return 0;
}

int run_eval(const std::string& images, const std::string& landmarks, const std::string& dict_dir,
             const std::string& ckpt, const std::string& task_str, std::uint64_t seed,
             const std::string& out_csv) {
    const dfd::GeneratorParams g = dfd::load_generator(ckpt);
    dfd::DictionarySet dict;
    if (g.config.dft_blocks > 0) dict = dfd::load_dictionary(dict_dir);
    const auto sources = dfd::load_sources(images, landmarks, &std::cerr);
    if (sources.empty()) throw dfd::data_error("eval: no usable images in " + images);
    const dfd::PairSet pairs =
        dfd::make_pairs(sources, dfd::task_from_name(task_str), seed, g.config.resolution);
    const dfd::EvalSummary summary = dfd::evaluate(g, dict, pairs);
    const std::string csv = dfd::eval_csv(summary);
    if (out_csv.empty()) {
        std::cout << csv;
    } else {
        std::ofstream os(out_csv, std::ios::trunc);
        if (!os) throw dfd::data_error("eval: cannot open " + out_csv);
        os << csv;
    }
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "mean psnr %.4f dB (bicubic %.4f), mean ssim %.5f (bicubic %.5f), n=%zu\n",
                  summary.mean_psnr, summary.mean_psnr_bicubic, summary.mean_ssim,
                  summary.mean_ssim_bicubic, summary.records.size());
    std::cout << buf;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dfd: dictionary-guided face restoration toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a procedural toy face dataset");
    std::string sy_out;
    int sy_count = 16, sy_res = 64;
    std::uint64_t sy_seed = 1;
    synth->add_option("--out", sy_out, "output directory")->required();
    synth->add_option("--count", sy_count, "number of faces");
    synth->add_option("--seed", sy_seed, "dataset seed");
    synth->add_option("--resolution", sy_res, "square image size");

    // degrade
    auto* degrade = app.add_subcommand("degrade", "Degrade a folder of images");
    std::string dg_in, dg_out;
    std::uint64_t dg_seed = 1;
    std::optional<double> dg_r, dg_sigma;
    std::optional<int> dg_q;
    std::optional<std::string> dg_kernel;
    degrade->add_option("--in", dg_in, "input image directory")->required();
    degrade->add_option("--out", dg_out, "output directory")->required();
    degrade->add_option("--seed", dg_seed, "sampling seed")->required();
    degrade->add_option("--r", dg_r, "fix the downsampling factor");
    degrade->add_option("--sigma", dg_sigma, "fix the noise std (0-255 scale)");
    degrade->add_option("--q", dg_q, "fix the JPEG quality");
    degrade->add_option("--kernel", dg_kernel, "fix the blur kernel: gaussian:SIGMA | motion:IDX");

    // build-dict
    auto* bdict = app.add_subcommand("build-dict", "Build component dictionaries");
    std::string bd_images, bd_landmarks, bd_out;
    int bd_k = 16;
    std::uint64_t bd_seed = 1, bd_enc_seed = 1;
    int bd_res = 64;
    std::optional<std::string> bd_encoder;
    bdict->add_option("--images", bd_images, "clean image directory")->required();
    bdict->add_option("--landmarks", bd_landmarks, "landmark directory")->required();
    bdict->add_option("--out", bd_out, "output dictionary directory")->required();
    bdict->add_option("--clusters", bd_k, "K clusters per component/scale")->required();
    bdict->add_option("--seed", bd_seed, "k-means seed")->required();
    bdict->add_option("--encoder", bd_encoder, "encoder file (default: fresh toy encoder)");
    bdict->add_option("--encoder-seed", bd_enc_seed, "toy encoder seed");
    bdict->add_option("--resolution", bd_res, "toy encoder resolution");

    // train
    auto* train = app.add_subcommand("train", "Train a restoration model");
    std::string tr_images, tr_landmarks, tr_dict, tr_out, tr_config, tr_resume;
    std::optional<std::string> tr_encoder;
    train->add_option("--images", tr_images, "clean image directory")->required();
    train->add_option("--landmarks", tr_landmarks, "landmark directory")->required();
    train->add_option("--dict", tr_dict, "dictionary directory");
    train->add_option("--out", tr_out, "run output directory")->required();
    train->add_option("--config", tr_config, "key=value training config file")->required();
    train->add_option("--resume", tr_resume, "checkpoint to resume from");
    train->add_option("--encoder", tr_encoder, "encoder file (default: <dict>/encoder.bin)");

    // restore
    auto* restore = app.add_subcommand("restore", "Restore a single image");
    std::string rs_in, rs_landmarks, rs_dict, rs_ckpt, rs_out;
    std::optional<std::string> rs_diag;
    restore->add_option("--in", rs_in, "degraded input image")->required();
    restore->add_option("--landmarks", rs_landmarks, "landmark file")->required();
    restore->add_option("--dict", rs_dict, "dictionary directory")->required();
    restore->add_option("--ckpt", rs_ckpt, "generator checkpoint")->required();
    restore->add_option("--out", rs_out, "output image path")->required();
    restore->add_option("--diag", rs_diag, "write per-component match diagnostics (JSONL)");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on degraded pairs");
    std::string ev_images, ev_landmarks, ev_dict, ev_ckpt, ev_task = "blind", ev_out;
    std::uint64_t ev_seed = 1;
    eval->add_option("--images", ev_images, "clean image directory")->required();
    eval->add_option("--landmarks", ev_landmarks, "landmark directory")->required();
    eval->add_option("--dict", ev_dict, "dictionary directory");
    eval->add_option("--ckpt", ev_ckpt, "generator checkpoint")->required();
    eval->add_option("--task", ev_task, "x4 | x8 | blind");
    eval->add_option("--seed", ev_seed, "degradation sampling seed");
    eval->add_option("--out", ev_out, "CSV output path (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return run_synth(sy_out, sy_count, sy_seed, sy_res);
        if (degrade->parsed())
            return run_degrade(dg_in, dg_out, dg_seed, dg_r, dg_sigma, dg_q, dg_kernel);
        if (bdict->parsed())
            return run_build_dict(bd_images, bd_landmarks, bd_out, bd_k, bd_seed, bd_encoder,
                                  bd_enc_seed, bd_res);
        if (train->parsed())
            return run_train(tr_images, tr_landmarks, tr_dict, tr_out, tr_config, tr_resume,
                             tr_encoder);
        if (restore->parsed())
            return run_restore(rs_in, rs_landmarks, rs_dict, rs_ckpt, rs_out, rs_diag);
        if (eval->parsed())
            return run_eval(ev_images, ev_landmarks, ev_dict, ev_ckpt, ev_task, ev_seed, ev_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
