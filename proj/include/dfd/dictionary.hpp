#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dfd/errors.hpp"
#include "dfd/features.hpp"
#include "dfd/rng.hpp"
#include "dfd/serialize.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

// ---------------------------------------------------------------------------
// K-means (Lloyd + k-means++ init, seeded, empty-cluster repair)
// ---------------------------------------------------------------------------

struct KmeansResult {
    Tensor centroids;             // (K, D)
    std::vector<int> assignments; // M entries in [0,K)
    double inertia = 0.0;
    int iterations = 0;
};

namespace detail {

inline double sq_dist(const float* a, const float* b, std::int64_t d) {
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double diff = static_cast<double>(a[i]) - b[i];
        s += diff * diff;
    }
    return s;
}

/// k-means++ seeding: first centroid uniform, then proportional to min dist^2.
inline std::vector<std::int64_t> kmeanspp_init(const Tensor& x, int k, Rng& rng) {
    const std::int64_t m = x.dim(0), d = x.dim(1);
    std::vector<std::int64_t> chosen;
    std::vector<double> mind(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
    chosen.push_back(rng.uniform_int(0, static_cast<int>(m - 1)));
    for (int c = 1; c < k; ++c) {
        const float* last = x.ptr() + chosen.back() * d;
        double total = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            const double dist = sq_dist(x.ptr() + i * d, last, d);
            auto& mi = mind[static_cast<std::size_t>(i)];
            if (dist < mi) mi = dist;
            total += mi;
        }
        std::int64_t pick = 0;
        if (total <= 0.0) {
            pick = rng.uniform_int(0, static_cast<int>(m - 1));
        } else {
            double target = rng.uniform01() * total;
            for (std::int64_t i = 0; i < m; ++i) {
                target -= mind[static_cast<std::size_t>(i)];
                if (target <= 0.0) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        }
        chosen.push_back(pick);
    }
    return chosen;
}

struct LloydOutcome {
    Tensor centroids;
    std::vector<int> assign;
    double inertia = 0.0;
    int iters = 0;
};

inline LloydOutcome lloyd(const Tensor& x, int k, Rng& rng, int max_iters) {
    const std::int64_t m = x.dim(0), d = x.dim(1);
    using RM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RM> xm(x.ptr(), m, d);

    LloydOutcome out;
    out.centroids = Tensor({k, d});
    {
        const auto seeds = kmeanspp_init(x, k, rng);
        for (int c = 0; c < k; ++c)
            std::copy(x.ptr() + seeds[static_cast<std::size_t>(c)] * d,
                      x.ptr() + (seeds[static_cast<std::size_t>(c)] + 1) * d,
                      out.centroids.ptr() + static_cast<std::int64_t>(c) * d);
    }
    out.assign.assign(static_cast<std::size_t>(m), -1);

    Eigen::VectorXd xsq(m);
    for (std::int64_t i = 0; i < m; ++i)
        xsq(i) = xm.row(i).cast<double>().squaredNorm();

    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iters; ++it) {
        Eigen::Map<RM> cm(out.centroids.ptr(), k, d);
        // dist^2(i,c) = |x_i|^2 - 2 x_i.c + |c|^2 via one GEMM
        RM dots = xm * cm.transpose(); // m x k
        Eigen::VectorXd csq(k);
        for (int c = 0; c < k; ++c) csq(c) = cm.row(c).cast<double>().squaredNorm();

        bool changed = false;
        double inertia = 0.0;
        std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
        for (std::int64_t i = 0; i < m; ++i) {
            int best = 0;
            double bestd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dist = xsq(i) - 2.0 * static_cast<double>(dots(i, c)) + csq(c);
                if (dist < bestd) {
                    bestd = dist;
                    best = c;
                }
            }
            if (out.assign[static_cast<std::size_t>(i)] != best) {
                out.assign[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
            inertia += std::max(0.0, bestd);
            ++counts[static_cast<std::size_t>(best)];
        }

        // Repair empty clusters: steal the farthest point of the cluster with
        // the largest inertia contribution.
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            std::vector<double> cluster_inertia(static_cast<std::size_t>(k), 0.0);
            std::vector<double> point_dist(static_cast<std::size_t>(m), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                const int a = out.assign[static_cast<std::size_t>(i)];
                const double dist = sq_dist(x.ptr() + i * d,
                                            out.centroids.ptr() + static_cast<std::int64_t>(a) * d, d);
                point_dist[static_cast<std::size_t>(i)] = dist;
                cluster_inertia[static_cast<std::size_t>(a)] += dist;
            }
            int worst = 0;
            for (int j = 1; j < k; ++j)
                if (cluster_inertia[static_cast<std::size_t>(j)] > cluster_inertia[static_cast<std::size_t>(worst)])
                    worst = j;
            std::int64_t far = -1;
            double fard = -1.0;
            for (std::int64_t i = 0; i < m; ++i)
                if (out.assign[static_cast<std::size_t>(i)] == worst && point_dist[static_cast<std::size_t>(i)] > fard) {
                    fard = point_dist[static_cast<std::size_t>(i)];
                    far = i;
                }
            if (far < 0) continue; // worst cluster empty too; leave for next pass
            std::copy(x.ptr() + far * d, x.ptr() + (far + 1) * d,
                      out.centroids.ptr() + static_cast<std::int64_t>(c) * d);
            out.assign[static_cast<std::size_t>(far)] = c;
            ++counts[static_cast<std::size_t>(c)];
            --counts[static_cast<std::size_t>(worst)];
            changed = true;
            inertia = 0.0; // recompute below against repaired centroids
            for (std::int64_t i = 0; i < m; ++i)
                inertia += sq_dist(
                    x.ptr() + i * d,
                    out.centroids.ptr() +
                        static_cast<std::int64_t>(out.assign[static_cast<std::size_t>(i)]) * d,
                    d);
        }

        out.iters = it + 1;
        if (inertia > prev_inertia * (1.0 + 1e-9) + 1e-9)
            throw error("kmeans: inertia increased between iterations (" +
                        std::to_string(prev_inertia) + " -> " + std::to_string(inertia) + ")");
        prev_inertia = inertia;
        out.inertia = inertia;

        if (!changed) break; // assignment fixpoint

        // Means update.
        std::fill(out.centroids.data.begin(), out.centroids.data.end(), 0.0f);
        std::vector<std::vector<double>> acc(static_cast<std::size_t>(k),
                                             std::vector<double>(static_cast<std::size_t>(d), 0.0));
        std::vector<std::int64_t> cnt(static_cast<std::size_t>(k), 0);
        for (std::int64_t i = 0; i < m; ++i) {
            auto& row = acc[static_cast<std::size_t>(out.assign[static_cast<std::size_t>(i)])];
            const float* xi = x.ptr() + i * d;
            for (std::int64_t j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] += xi[j];
            ++cnt[static_cast<std::size_t>(out.assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (!cnt[static_cast<std::size_t>(c)]) continue;
            float* row = out.centroids.ptr() + static_cast<std::int64_t>(c) * d;
            for (std::int64_t j = 0; j < d; ++j)
                row[j] = static_cast<float>(acc[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] /
                                            static_cast<double>(cnt[static_cast<std::size_t>(c)]));
        }
    }

    // Final inertia against final centroids (covers the fixpoint exit path).
    out.inertia = 0.0;
    for (std::int64_t i = 0; i < m; ++i)
        out.inertia +=
            sq_dist(x.ptr() + i * d,
                    out.centroids.ptr() +
                        static_cast<std::int64_t>(out.assign[static_cast<std::size_t>(i)]) * d,
                    d);
    return out;
}

} // namespace detail

/// Lloyd's algorithm, k-means++ init, 3 restarts keeping lowest inertia.
inline KmeansResult kmeans(const Tensor& samples, int k, std::uint64_t seed, int restarts = 3,
                           int max_iters = 300) {
    if (samples.rank() != 2) throw parameter_error("kmeans: samples must be (M,D)");
    const std::int64_t m = samples.dim(0);
    if (k < 1) throw parameter_error("kmeans: K must be >= 1");
    if (m < k)
        throw parameter_error("kmeans: need at least K=" + std::to_string(k) + " samples, got " +
                              std::to_string(m));
    if (!samples.all_finite()) throw data_error("kmeans: non-finite sample values");

    KmeansResult best;
    bool have = false;
    for (int r = 0; r < restarts; ++r) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r) + 1));
        auto out = detail::lloyd(samples, k, rng, max_iters);
        if (!have || out.inertia < best.inertia) {
            best.centroids = std::move(out.centroids);
            best.assignments = std::move(out.assign);
            best.inertia = out.inertia;
            best.iterations = out.iters;
            have = true;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Component dictionaries
// ---------------------------------------------------------------------------

struct ComponentDictionary {
    int scale = 1;
    Component component = Component::left_eye;
    Tensor clusters; // (K, C_s, h, w)

    int k() const { return static_cast<int>(clusters.dim(0)); }
};

struct DictionarySet {
    int k = 0;
    int resolution = 0;
    std::uint64_t encoder_hash = 0;
    std::uint64_t seed = 0;
    std::int64_t sample_count = 0;
    // dics[scale-1][component]
    std::array<std::array<ComponentDictionary, 4>, 4> dics;

    const ComponentDictionary& at(int scale, Component c) const {
        return dics[static_cast<std::size_t>(scale - 1)][static_cast<std::size_t>(c)];
    }
    ComponentDictionary& at(int scale, Component c) {
        return dics[static_cast<std::size_t>(scale - 1)][static_cast<std::size_t>(c)];
    }
};

/// Per-(scale, component) pools of flattened RoIAlign crops.
struct SamplePools {
    // pools[scale-1][component] is (M, C_s*h*w)
    std::array<std::array<std::vector<Tensor>, 4>, 4> crops;
    std::int64_t count = 0;
};

inline SamplePools collect_samples(const std::vector<std::pair<Image, LandmarkSet>>& dataset,
                                   const Encoder& encoder) {
    if (dataset.empty()) throw data_error("collect_samples: no usable images");
    SamplePools pools;
    for (const auto& [img, lm] : dataset) {
        const auto fms = encoder.extract(img);
        const auto boxes = component_rois(lm, img.width, img.height);
        for (int s = 1; s <= 4; ++s)
            for (Component c : kComponents) {
                const int sz = component_size(c, s, encoder.config.resolution);
                Tensor crop = roi_align(fms[static_cast<std::size_t>(s - 1)],
                                        boxes[static_cast<std::size_t>(c)], sz, sz);
                pools.crops[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(c)].push_back(
                    std::move(crop));
            }
        ++pools.count;
    }
    return pools;
}

/// Default cluster count per (scale, component) dictionary.
inline constexpr int kDefaultClusters = 256;

inline DictionarySet build_dictionary(const std::vector<std::pair<Image, LandmarkSet>>& dataset,
                                      const Encoder& encoder, int k = kDefaultClusters,
                                      std::uint64_t seed = 1) {
    if (k < 1) throw parameter_error("build_dictionary: K must be >= 1");
    const SamplePools pools = collect_samples(dataset, encoder);
    DictionarySet set;
    set.k = k;
    set.resolution = encoder.config.resolution;
    set.encoder_hash = encoder.content_hash();
    set.seed = seed;
    set.sample_count = pools.count;
    for (int s = 1; s <= 4; ++s)
        for (Component c : kComponents) {
            const auto& pool = pools.crops[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(c)];
            const auto& shape = pool.front().dims; // (C,h,w)
            const std::int64_t d = pool.front().numel();
            Tensor flat({static_cast<std::int64_t>(pool.size()), d});
            for (std::size_t i = 0; i < pool.size(); ++i)
                std::copy(pool[i].data.begin(), pool[i].data.end(),
                          flat.ptr() + static_cast<std::int64_t>(i) * d);
            const std::uint64_t sc_seed =
                derive_seed(seed, static_cast<std::uint64_t>((s - 1) * 4 + static_cast<int>(c)) + 11);
            auto km = kmeans(flat, k, sc_seed);
            ComponentDictionary dic;
            dic.scale = s;
            dic.component = c;
            dic.clusters = km.centroids.reshaped({k, shape[0], shape[1], shape[2]});
            set.at(s, c) = std::move(dic);
        }
    return set;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.txt + 16 "DFDD" tensor files
// ---------------------------------------------------------------------------

inline constexpr char kDictionaryMagic[4] = {'D', 'F', 'D', 'D'};

inline std::string dictionary_file_name(int scale, Component c) {
    return "dic_s" + std::to_string(scale) + "_" + component_name(c) + ".bin";
}

inline void save_dictionary(const DictionarySet& set, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    KvPairs kv;
    kv.emplace_back("format_version", "1");
    kv.emplace_back("K", std::to_string(set.k));
    kv.emplace_back("resolution", std::to_string(set.resolution));
    kv.emplace_back("encoder_hash", hex64(set.encoder_hash));
    kv.emplace_back("seed", std::to_string(set.seed));
    kv.emplace_back("sample_count", std::to_string(set.sample_count));
    for (int s = 1; s <= 4; ++s)
        for (Component c : kComponents) {
            const auto& t = set.at(s, c).clusters;
            kv.emplace_back("shape_" + std::to_string(s) + "_" + component_name(c),
                            std::to_string(t.dim(0)) + "," + std::to_string(t.dim(1)) + "," +
                                std::to_string(t.dim(2)) + "," + std::to_string(t.dim(3)));
            write_tensor_file(fs::path(dir) / dictionary_file_name(s, c), t, kDictionaryMagic);
        }
    write_kv_file(fs::path(dir) / "manifest.txt", kv);
}

inline DictionarySet load_dictionary(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = fs::path(dir) / "manifest.txt";
    if (!fs::exists(manifest_path))
        throw corruption_error("dictionary: missing manifest.txt in " + dir);
    auto m = kv_map(read_kv_file(manifest_path));
    if (m.at("format_version") != "1")
        throw corruption_error("dictionary: unsupported format_version " + m.at("format_version"));
    DictionarySet set;
    set.k = std::stoi(m.at("K"));
    set.resolution = std::stoi(m.at("resolution"));
    set.encoder_hash = std::stoull(m.at("encoder_hash"), nullptr, 16);
    set.seed = std::stoull(m.at("seed"));
    set.sample_count = std::stoll(m.at("sample_count"));
    for (int s = 1; s <= 4; ++s)
        for (Component c : kComponents) {
            const std::string key = "shape_" + std::to_string(s) + "_" + component_name(c);
            const std::string where = "(" + std::to_string(s) + "," + component_name(c) + ")";
            auto it = m.find(key);
            if (it == m.end()) throw corruption_error("dictionary: manifest missing " + key);
            std::array<std::int64_t, 4> want{};
            {
                std::istringstream iss(it->second);
                std::string tok;
                int i = 0;
                while (std::getline(iss, tok, ',') && i < 4) want[static_cast<std::size_t>(i++)] = std::stoll(tok);
                if (i != 4) throw corruption_error("dictionary: malformed " + key);
            }
            Tensor t = read_tensor_file(fs::path(dir) / dictionary_file_name(s, c), kDictionaryMagic);
            if (t.rank() != 4)
                throw corruption_error("dictionary: tensor rank != 4 for " + where);
            for (int i = 0; i < 4; ++i)
                if (t.dim(i) != want[static_cast<std::size_t>(i)])
                    throw corruption_error("dictionary: manifest/tensor shape mismatch for " + where);
            if (t.dim(0) != set.k)
                throw corruption_error("dictionary: manifest K=" + std::to_string(set.k) +
                                       " does not match tensor for " + where);
            if (!t.all_finite())
                throw corruption_error("dictionary: non-finite values in " + where);
            ComponentDictionary dic;
            dic.scale = s;
            dic.component = c;
            dic.clusters = std::move(t);
            set.at(s, c) = std::move(dic);
        }
    return set;
}

} // namespace dfd
