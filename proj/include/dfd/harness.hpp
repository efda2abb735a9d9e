#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dfd/degradation.hpp"
#include "dfd/dictionary.hpp"
#include "dfd/image.hpp"
#include "dfd/objectives.hpp"
#include "dfd/restorer.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class Task { x4, x8, blind };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::x4: return "x4";
        case Task::x8: return "x8";
        default: return "blind";
    }
}

inline Task task_from_name(const std::string& s) {
    if (s == "x4") return Task::x4;
    if (s == "x8") return Task::x8;
    if (s == "blind") return Task::blind;
    throw parameter_error("unknown task '" + s + "' (expected x4|x8|blind)");
}

// ---------------------------------------------------------------------------
// Training configuration (line-oriented key=value round trip)
// ---------------------------------------------------------------------------

struct TrainingConfig {
    int resolution = 256;
    std::vector<int> channels = {64, 128, 256, 512};
    int dft_blocks = 4;
    bool use_cadain = true;
    bool use_confidence = true;
    MatchMode match_mode = MatchMode::inner;
    Task task = Task::blind;

    int batch_size = 1;
    float lr = 2e-4f;
    float beta1 = 0.5f;
    float beta2 = 0.999f;
    std::int64_t max_steps = 2000;
    int val_interval = 500;   // validation cadence in steps
    int val_count = 32;       // held-out pairs (taken from the end of the set)
    int patience = 2;         // non-improving validations before halving lr
    int checkpoint_interval = 500;
    bool adversarial = true;
    int disc_base_width = 32;
    LossWeights loss;
    std::uint64_t seed = 1;

    void validate() const {
        if (lr <= 0) throw parameter_error("training config: lr must be > 0");
        if (patience < 1) throw parameter_error("training config: patience must be >= 1");
        if (batch_size < 1) throw parameter_error("training config: batch_size must be >= 1");
        if (max_steps < 1) throw parameter_error("training config: max_steps must be >= 1");
        if (val_interval < 1 || checkpoint_interval < 1)
            throw parameter_error("training config: intervals must be >= 1");
        if (val_count < 0) throw parameter_error("training config: val_count must be >= 0");
        if (disc_base_width < 1) throw parameter_error("training config: disc_base_width must be >= 1");
        loss.validate();
        generator_config().validate();
    }

    GeneratorConfig generator_config() const {
        GeneratorConfig g;
        g.resolution = resolution;
        g.channels = channels;
        g.dft_blocks = dft_blocks;
        g.dft.use_cadain = use_cadain;
        g.dft.use_confidence = use_confidence;
        g.dft.match_mode = match_mode;
        return g;
    }
};

namespace detail {
inline std::string join_csv_int(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}
inline std::string join_csv_float(const std::array<float, 4>& v) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g", static_cast<double>(v[0]),
                  static_cast<double>(v[1]), static_cast<double>(v[2]), static_cast<double>(v[3]));
    return buf;
}
inline std::vector<int> parse_csv_int(const std::string& s) {
    std::vector<int> out;
    std::istringstream iss(s);
    std::string tok;
    while (std::getline(iss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}
inline std::array<float, 4> parse_csv_float4(const std::string& s, const char* what) {
    std::array<float, 4> out{};
    std::istringstream iss(s);
    std::string tok;
    std::size_t i = 0;
    while (std::getline(iss, tok, ',')) {
        if (i >= 4) throw parameter_error(std::string(what) + ": expected 4 comma-separated values");
        out[i++] = std::stof(tok);
    }
    if (i != 4) throw parameter_error(std::string(what) + ": expected 4 comma-separated values");
    return out;
}
inline std::string fmt_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}
} // namespace detail

inline KvPairs training_config_to_kv(const TrainingConfig& c) {
    KvPairs kv;
    kv.emplace_back("resolution", std::to_string(c.resolution));
    kv.emplace_back("channels", detail::join_csv_int(c.channels));
    kv.emplace_back("dft_blocks", std::to_string(c.dft_blocks));
    kv.emplace_back("use_cadain", c.use_cadain ? "1" : "0");
    kv.emplace_back("use_confidence", c.use_confidence ? "1" : "0");
    kv.emplace_back("match_mode", match_mode_name(c.match_mode));
    kv.emplace_back("task", task_name(c.task));
    kv.emplace_back("batch_size", std::to_string(c.batch_size));
    kv.emplace_back("lr", detail::fmt_g(c.lr));
    kv.emplace_back("beta1", detail::fmt_g(c.beta1));
    kv.emplace_back("beta2", detail::fmt_g(c.beta2));
    kv.emplace_back("max_steps", std::to_string(c.max_steps));
    kv.emplace_back("val_interval", std::to_string(c.val_interval));
    kv.emplace_back("val_count", std::to_string(c.val_count));
    kv.emplace_back("patience", std::to_string(c.patience));
    kv.emplace_back("checkpoint_interval", std::to_string(c.checkpoint_interval));
    kv.emplace_back("adversarial", c.adversarial ? "1" : "0");
    kv.emplace_back("disc_base_width", std::to_string(c.disc_base_width));
    kv.emplace_back("loss_l2", detail::fmt_g(c.loss.l2));
    kv.emplace_back("loss_perceptual", detail::join_csv_float(c.loss.perceptual));
    kv.emplace_back("loss_adversarial", detail::join_csv_float(c.loss.adversarial));
    kv.emplace_back("pixel_loss_reduction",
                    c.loss.pixel_reduction == LossWeights::PixelReduction::mean ? "mean" : "sum");
    kv.emplace_back("seed", std::to_string(c.seed));
    return kv;
}

inline TrainingConfig training_config_from_kv(const KvPairs& kv) {
    const auto m = kv_map(kv);
    TrainingConfig c;
    auto want = [&](const char* key) -> const std::string& {
        auto it = m.find(key);
        if (it == m.end()) throw parameter_error(std::string("training config: missing key '") + key + "'");
        return it->second;
    };
    c.resolution = std::stoi(want("resolution"));
    c.channels = detail::parse_csv_int(want("channels"));
    c.dft_blocks = std::stoi(want("dft_blocks"));
    c.use_cadain = want("use_cadain") == "1";
    c.use_confidence = want("use_confidence") == "1";
    c.match_mode = match_mode_from_name(want("match_mode"));
    c.task = task_from_name(want("task"));
    c.batch_size = std::stoi(want("batch_size"));
    c.lr = std::stof(want("lr"));
    c.beta1 = std::stof(want("beta1"));
    c.beta2 = std::stof(want("beta2"));
    c.max_steps = std::stoll(want("max_steps"));
    c.val_interval = std::stoi(want("val_interval"));
    c.val_count = std::stoi(want("val_count"));
    c.patience = std::stoi(want("patience"));
    c.checkpoint_interval = std::stoi(want("checkpoint_interval"));
    c.adversarial = want("adversarial") == "1";
    c.disc_base_width = std::stoi(want("disc_base_width"));
    c.loss.l2 = std::stof(want("loss_l2"));
    c.loss.perceptual = detail::parse_csv_float4(want("loss_perceptual"), "loss_perceptual");
    c.loss.adversarial = detail::parse_csv_float4(want("loss_adversarial"), "loss_adversarial");
    const std::string red = want("pixel_loss_reduction");
    if (red == "mean")
        c.loss.pixel_reduction = LossWeights::PixelReduction::mean;
    else if (red == "sum")
        c.loss.pixel_reduction = LossWeights::PixelReduction::sum;
    else
        throw parameter_error("training config: pixel_loss_reduction must be mean|sum");
    c.seed = std::stoull(want("seed"));
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Dataset pairs
// ---------------------------------------------------------------------------

struct SourceImage {
    std::string id;
    Image image;
    LandmarkSet landmarks;
};

/// Lists image files in `images_dir` (ppm/jpg/jpeg, sorted by name) and pairs
/// each with `<stem>.txt` from `landmarks_dir`. Missing landmark files skip
/// the image with a note to `log`.
inline std::vector<SourceImage> load_sources(const std::string& images_dir,
                                             const std::string& landmarks_dir,
                                             std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images_dir)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = lower_ext(e.path().string());
        if (ext == "ppm" || ext == "jpg" || ext == "jpeg") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<SourceImage> out;
    for (const auto& f : files) {
        const fs::path lm_path = fs::path(landmarks_dir) / (f.stem().string() + ".txt");
        if (!fs::exists(lm_path)) {
            if (log) *log << "skip " << f.filename().string() << ": no landmark file\n";
            continue;
        }
        SourceImage s;
        s.id = f.stem().string();
        s.image = load_image(f.string());
        s.landmarks = load_landmarks(lm_path.string());
        out.push_back(std::move(s));
    }
    return out;
}

struct TrainPair {
    std::string id;
    Tensor hq;       // (3,R,R)
    Tensor degraded; // (3,R,R), degradation output resampled back to R
    LandmarkSet landmarks;
    DegradationParams params;
};

struct PairSet {
    int resolution = 0;
    Task task = Task::blind;
    std::vector<TrainPair> pairs;
};

/// Builds (clean, degraded) pairs. x4/x8 force the downsampling factor, the
/// remaining degradation parameters stay randomly sampled; blind samples all.
/// The degraded image is bicubically resampled back to `resolution`.
inline PairSet make_pairs(const std::vector<SourceImage>& sources, Task task, std::uint64_t seed,
                          int resolution, const std::vector<BlurKernel>& bank = motion_bank()) {
    if (resolution < 8) throw parameter_error("make_pairs: resolution too small");
    PairSet set;
    set.resolution = resolution;
    set.task = task;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const SourceImage& src = sources[i];
        TrainPair p;
        p.id = src.id;
        p.landmarks = src.landmarks;

        Image hq = src.image;
        if (hq.width != resolution || hq.height != resolution) {
            const float sx = static_cast<float>(resolution) / static_cast<float>(hq.width);
            const float sy = static_cast<float>(resolution) / static_cast<float>(hq.height);
            hq = resize_image(hq, resolution, resolution);
            for (std::size_t j = 0; j < p.landmarks.x.size(); ++j) {
                p.landmarks.x[j] *= sx;
                p.landmarks.y[j] *= sy;
            }
        }

        Rng prng(derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 3));
        p.params = sample_degradation(prng, bank);
        if (task == Task::x4) p.params.r = 4.0f;
        if (task == Task::x8) p.params.r = 8.0f;
        const std::uint64_t noise_seed = derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 4);

        Image deg = apply_degradation(hq, p.params, noise_seed);
        if (deg.width != resolution || deg.height != resolution)
            deg = resize_image(deg, resolution, resolution);

        p.hq = image_to_tensor(hq);
        p.degraded = image_to_tensor(deg);
        set.pairs.push_back(std::move(p));
    }
    return set;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// 10*log10(1/MSE) over RGB in [0,1]; identical images return the 100 dB
/// sentinel, and the value is capped there.
inline double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw shape_error("psnr: image shapes differ");
    double se = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.rgb.size());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

/// Mean local SSIM on the Rec.601 luma plane: 11x11 Gaussian window with
/// sigma 1.5, K1=0.01, K2=0.03, dynamic range 1, windows fully inside the
/// image ("valid" placement).
inline double ssim(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw shape_error("ssim: image shapes differ");
    constexpr int W = 11, HALF = 5;
    if (a.width < W || a.height < W)
        throw parameter_error("ssim: image smaller than the 11x11 window");

    static const std::array<double, W * W> kWin = [] {
        std::array<double, W * W> w{};
        const double s2 = 2.0 * 1.5 * 1.5;
        double sum = 0.0;
        for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) {
                const double d2 = static_cast<double>((i - HALF) * (i - HALF) + (j - HALF) * (j - HALF));
                w[static_cast<std::size_t>(i * W + j)] = std::exp(-d2 / s2);
                sum += w[static_cast<std::size_t>(i * W + j)];
            }
        for (auto& v : w) v /= sum;
        return w;
    }();
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;

    const std::vector<float> ga = rgb_to_gray(a), gb = rgb_to_gray(b);
    // Identical inputs score exactly 1 by definition; short-circuiting here
    // keeps that guarantee independent of how the window sums are scheduled,
    // the same way psnr pins its identical-input sentinel.
    if (ga == gb) return 1.0;
    const int width = a.width, height = a.height;
    double total = 0.0;
    std::int64_t count = 0;
    for (int cy = HALF; cy < height - HALF; ++cy)
        for (int cx = HALF; cx < width - HALF; ++cx) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < W; ++i)
                for (int j = 0; j < W; ++j) {
                    const double w = kWin[static_cast<std::size_t>(i * W + j)];
                    const double x = ga[static_cast<std::size_t>(cy + i - HALF) * width + (cx + j - HALF)];
                    const double y = gb[static_cast<std::size_t>(cy + i - HALF) * width + (cx + j - HALF)];
                    mx += w * x;
                    my += w * y;
                    xx += w * x * x;
                    yy += w * y * y;
                    xy += w * x * y;
                }
            // Products are materialized once and reused so that numerator and
            // denominator follow identical rounding paths; identical images
            // then score exactly 1 per window even when the compiler fuses
            // multiply-adds.
            const double pxx = mx * mx, pyy = my * my, pxy = mx * my;
            const double sx = xx - pxx, sy = yy - pyy, sxy = xy - pxy;
            total += ((pxy + pxy + C1) * (sxy + sxy + C2)) /
                     ((pxx + pyy + C1) * (sx + sy + C2));
            ++count;
        }
    // Each window's score is at most 1 up to rounding; keep the documented
    // [-1, 1] range airtight.
    return std::clamp(total / static_cast<double>(count), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Training checkpoints (single archive: config text + named blobs)
// ---------------------------------------------------------------------------

namespace detail {
template <typename Bank, typename Fn>
inline void for_each_snconv(Bank& bank, Fn&& fn) {
    for (auto& disc : bank.d) {
        for (auto& blk : disc.blocks) fn(blk);
        fn(disc.out_conv);
    }
}
} // namespace detail

inline void save_train_checkpoint(const std::string& path, const TrainingConfig& cfg,
                                  const GeneratorParams& g, const DiscriminatorBank* bank,
                                  const Adam& opt_g, const Adam* opt_d, std::int64_t step,
                                  float lr, double best_val, int bad_evals) {
    BlobArchive a;
    std::ostringstream text;
    text << generator_config_text(g.config) << kv_to_string(training_config_to_kv(cfg))
         << "state.step=" << step << "\nstate.lr=" << detail::fmt_g(lr)
         << "\nstate.best_val=" << detail::fmt_g(best_val) << "\nstate.bad_evals=" << bad_evals
         << "\n";
    a.text = text.str();
    add_generator_blobs(a, g);
    opt_g.save_state(a, "adam_g");
    if (bank != nullptr) {
        for (const auto& v : bank->trainable()) a.add(v->name, v->value);
        detail::for_each_snconv(const_cast<DiscriminatorBank&>(*bank),
                                [&](SNConv2d& c) { a.add(c.w->name + ".u", c.u); });
        if (opt_d != nullptr) opt_d->save_state(a, "adam_d");
    }
    write_archive(path, a);
}

struct TrainState {
    TrainingConfig config;
    GeneratorParams g;
    DiscriminatorBank bank;
    Adam opt_g, opt_d;
    std::int64_t step = 0;
    float lr = 0.0f;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_evals = 0;
};

inline TrainState load_train_checkpoint(const std::string& path) {
    const BlobArchive a = read_archive(path);
    TrainState st;
    st.config = training_config_from_kv(kv_from_string(a.text));
    st.g = generator_from_archive(a);
    const auto m = kv_map(kv_from_string(a.text));
    st.step = std::stoll(m.at("state.step"));
    st.lr = std::stof(m.at("state.lr"));
    st.best_val = std::stod(m.at("state.best_val"));
    st.bad_evals = std::stoi(m.at("state.bad_evals"));
    st.opt_g = Adam(st.g.trainable(), st.lr, st.config.beta1, st.config.beta2);
    st.opt_g.load_state(a, "adam_g");
    if (st.config.adversarial) {
        st.bank = DiscriminatorBank::make(st.config.disc_base_width, derive_seed(st.config.seed, 2));
        for (auto& v : st.bank.trainable()) {
            const Tensor& stored = a.get(v->name);
            if (!stored.same_shape(v->value))
                throw corruption_error("checkpoint: shape mismatch for " + v->name);
            v->value = stored;
        }
        detail::for_each_snconv(st.bank, [&](SNConv2d& c) { c.u = a.get(c.w->name + ".u"); });
        st.opt_d = Adam(st.bank.trainable(), st.lr, st.config.beta1, st.config.beta2);
        st.opt_d.load_state(a, "adam_d");
    }
    return st;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    std::int64_t steps = 0;
    float lr = 0.0f;
    bool nan_aborted = false;
    double best_val = std::numeric_limits<double>::infinity();
    std::string checkpoint_path; // most recent checkpoint on disk
    std::string log_path;
    std::vector<double> rec_history, adv_history, d_history;
};

/// Alternating one discriminator step and one generator step per iteration on
/// the same sampled batch. Validation reconstruction loss drives plateau lr
/// halving. A non-finite loss aborts immediately; the last written checkpoint
/// stays on disk untouched.
///
/// With a non-empty `resume_path` the embedded checkpoint config is used
/// (only max_steps is taken from `cfg`, so a run can be extended), and
/// `encoder` is ignored in favor of the embedded one.
inline TrainResult train(const TrainingConfig& cfg_in, const DictionarySet& dict,
                         const Encoder& encoder, const PairSet& data, const std::string& out_dir,
                         const std::string& resume_path = "") {
    namespace fs = std::filesystem;
    if (data.pairs.empty()) throw data_error("train: empty pair set");

    TrainingConfig cfg = cfg_in;
    GeneratorParams g;
    DiscriminatorBank bank;
    Adam opt_g, opt_d;
    std::int64_t start_step = 0;
    float lr = 0.0f;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_evals = 0;

    if (resume_path.empty()) {
        cfg.validate();
        g = build_generator(cfg.generator_config(), encoder, derive_seed(cfg.seed, 1));
        if (cfg.adversarial) bank = DiscriminatorBank::make(cfg.disc_base_width, derive_seed(cfg.seed, 2));
        lr = cfg.lr;
        opt_g = Adam(g.trainable(), lr, cfg.beta1, cfg.beta2);
        if (cfg.adversarial) opt_d = Adam(bank.trainable(), lr, cfg.beta1, cfg.beta2);
    } else {
        TrainState st = load_train_checkpoint(resume_path);
        const std::int64_t extend = cfg_in.max_steps;
        cfg = st.config;
        cfg.max_steps = extend;
        g = std::move(st.g);
        bank = std::move(st.bank);
        opt_g = std::move(st.opt_g);
        opt_d = std::move(st.opt_d);
        start_step = st.step;
        lr = st.lr;
        best_val = st.best_val;
        bad_evals = st.bad_evals;
    }

    if (data.resolution != cfg.resolution)
        throw config_error("train: pair set resolution " + std::to_string(data.resolution) +
                           " != configured " + std::to_string(cfg.resolution));
    if (cfg.dft_blocks > 0 && dict.encoder_hash != g.encoder.content_hash())
        throw config_error("train: dictionary encoder hash " + hex64(dict.encoder_hash) +
                           " does not match encoder " + g.encoder.hash_string());

    const int n_total = static_cast<int>(data.pairs.size());
    const int n_val = (cfg.val_count > 0 && cfg.val_count < n_total) ? cfg.val_count : 0;
    const int n_train = n_total - n_val;

    fs::create_directories(out_dir);
    write_kv_file((fs::path(out_dir) / "config.txt").string(), training_config_to_kv(cfg));
    const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
    std::ofstream log(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw data_error("train: cannot open log file " + log_path);
    if (start_step == 0) log << "step,loss_rec,loss_adv_g,loss_d,lr\n";

    const std::vector<Var> g_params = g.trainable();
    const std::vector<Var> d_params = cfg.adversarial ? bank.trainable() : std::vector<Var>{};

    TrainResult result;
    result.log_path = log_path;
    const std::string last_path = (fs::path(out_dir) / "ckpt_last.bin").string();

    auto save_ckpt = [&](std::int64_t done) {
        char name[48];
        std::snprintf(name, sizeof(name), "ckpt_step_%06lld.bin", static_cast<long long>(done));
        const std::string step_path = (fs::path(out_dir) / name).string();
        save_train_checkpoint(step_path, cfg, g, cfg.adversarial ? &bank : nullptr, opt_g,
                              cfg.adversarial ? &opt_d : nullptr, done, lr, best_val, bad_evals);
        save_train_checkpoint(last_path, cfg, g, cfg.adversarial ? &bank : nullptr, opt_g,
                              cfg.adversarial ? &opt_d : nullptr, done, lr, best_val, bad_evals);
        result.checkpoint_path = step_path;
    };

    for (std::int64_t step = start_step; step < cfg.max_steps; ++step) {
        // Batch indices for this step are a pure function of (seed, step), so
        // resumed runs sample identically to uninterrupted ones.
        Rng brng(derive_seed(cfg.seed, 0xba7c00ull + static_cast<std::uint64_t>(step)));
        std::vector<int> idx(static_cast<std::size_t>(cfg.batch_size));
        for (auto& i : idx) i = brng.uniform_int(0, n_train - 1);

        // Generator forwards (graphs retained for the generator step).
        std::vector<Var> fakes;
        fakes.reserve(idx.size());
        for (int i : idx) {
            const TrainPair& p = data.pairs[static_cast<std::size_t>(i)];
            fakes.push_back(restore_forward(g, p.degraded, p.landmarks, dict));
        }

        // Discriminator step on detached fakes.
        double loss_d = 0.0;
        if (cfg.adversarial) {
            Var d_total;
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const TrainPair& p = data.pairs[static_cast<std::size_t>(idx[b])];
                const Var term = discriminator_loss(bank, p.hq, fakes[b]->value, /*update_u=*/true);
                d_total = d_total ? add(d_total, term) : term;
            }
            d_total = mul_scalar(d_total, 1.0f / static_cast<float>(idx.size()));
            loss_d = static_cast<double>(d_total->value[0]);
            zero_grad(d_params);
            backward(d_total);
            opt_d.step();
        }

        // Generator step: reconstruction + adversarial on the (just updated)
        // discriminators.
        double loss_rec = 0.0, loss_adv = 0.0;
        Var g_total;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const TrainPair& p = data.pairs[static_cast<std::size_t>(idx[b])];
            const Var rec = reconstruction_loss(fakes[b], p.hq, g.encoder, cfg.loss);
            loss_rec += static_cast<double>(rec->value[0]);
            Var item = rec;
            if (cfg.adversarial) {
                const Var adv = generator_adv_loss(bank, fakes[b], cfg.loss);
                loss_adv += static_cast<double>(adv->value[0]);
                item = total_loss(rec, adv);
            }
            g_total = g_total ? add(g_total, item) : item;
        }
        g_total = mul_scalar(g_total, 1.0f / static_cast<float>(idx.size()));
        loss_rec /= static_cast<double>(idx.size());
        loss_adv /= static_cast<double>(idx.size());

        if (!std::isfinite(loss_rec) || !std::isfinite(loss_adv) || !std::isfinite(loss_d)) {
            result.nan_aborted = true;
            result.steps = step;
            result.lr = lr;
            result.best_val = best_val;
            return result;
        }

        zero_grad(g_params);
        if (cfg.adversarial) zero_grad(d_params); // adv graph deposits into D weights too
        backward(g_total);
        opt_g.step();

        const std::int64_t done = step + 1;
        log << done << ',' << detail::fmt_g(loss_rec) << ',' << detail::fmt_g(loss_adv) << ','
            << detail::fmt_g(loss_d) << ',' << detail::fmt_g(static_cast<double>(lr)) << '\n';
        log.flush();
        result.rec_history.push_back(loss_rec);
        result.adv_history.push_back(loss_adv);
        result.d_history.push_back(loss_d);

        if (n_val > 0 && done % cfg.val_interval == 0) {
            double v = 0.0;
            for (int i = n_train; i < n_total; ++i) {
                const TrainPair& p = data.pairs[static_cast<std::size_t>(i)];
                const Var y = restore_forward(g, p.degraded, p.landmarks, dict);
                v += static_cast<double>(reconstruction_loss(y, p.hq, g.encoder, cfg.loss)->value[0]);
            }
            v /= static_cast<double>(n_val);
            if (v < best_val) {
                best_val = v;
                bad_evals = 0;
            } else if (++bad_evals >= cfg.patience) {
                lr *= 0.5f;
                opt_g.lr = lr;
                opt_d.lr = lr;
                bad_evals = 0;
            }
        }

        if (done % cfg.checkpoint_interval == 0 || done == cfg.max_steps) save_ckpt(done);
    }

    result.steps = cfg.max_steps;
    result.lr = lr;
    result.best_val = best_val;
    if (result.checkpoint_path.empty()) result.checkpoint_path = last_path;
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalRecord {
    std::string id;
    std::string task;
    double psnr_db = 0, ssim = 0, psnr_bicubic_db = 0, ssim_bicubic = 0;
};

struct EvalSummary {
    std::vector<EvalRecord> records;
    double mean_psnr = 0, mean_ssim = 0, mean_psnr_bicubic = 0, mean_ssim_bicubic = 0;
};

/// Restores every pair and scores it against the clean image, next to the
/// bicubic baseline (the resampled degraded input itself). Read-only.
inline EvalSummary evaluate(const GeneratorParams& g, const DictionarySet& dict,
                            const PairSet& data) {
    if (data.pairs.empty()) throw data_error("evaluate: empty pair set");
    EvalSummary s;
    for (const auto& p : data.pairs) {
        const Var y = restore_forward(g, p.degraded, p.landmarks, dict);
        const Image restored = tensor_to_image(y->value);
        const Image hq = tensor_to_image(p.hq);
        const Image baseline = tensor_to_image(p.degraded);
        EvalRecord r;
        r.id = p.id;
        r.task = task_name(data.task);
        r.psnr_db = psnr(restored, hq);
        r.ssim = ssim(restored, hq);
        r.psnr_bicubic_db = psnr(baseline, hq);
        r.ssim_bicubic = ssim(baseline, hq);
        s.mean_psnr += r.psnr_db;
        s.mean_ssim += r.ssim;
        s.mean_psnr_bicubic += r.psnr_bicubic_db;
        s.mean_ssim_bicubic += r.ssim_bicubic;
        s.records.push_back(std::move(r));
    }
    const double n = static_cast<double>(s.records.size());
    s.mean_psnr /= n;
    s.mean_ssim /= n;
    s.mean_psnr_bicubic /= n;
    s.mean_ssim_bicubic /= n;
    return s;
}

inline std::string eval_csv(const EvalSummary& s) {
    std::ostringstream os;
    os << "id,task,psnr_db,ssim,psnr_bicubic_db,ssim_bicubic\n";
    for (const auto& r : s.records) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f", r.psnr_db, r.ssim,
                      r.psnr_bicubic_db, r.ssim_bicubic);
        os << r.id << ',' << r.task << ',' << buf << '\n';
    }
    return os.str();
}

} // namespace dfd
