#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dfd/errors.hpp"
#include "dfd/rng.hpp"

namespace dfd {

/// Dense row-major float32 tensor of arbitrary rank.
struct Tensor {
    std::vector<std::int64_t> dims;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> d, float fill = 0.0f) : dims(std::move(d)) {
        data.assign(static_cast<std::size_t>(numel_of(dims)), fill);
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& d) {
        std::int64_t n = 1;
        for (auto v : d) {
            if (v < 0) throw shape_error("negative dimension");
            n *= v;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> d) { return Tensor(std::move(d), 0.0f); }
    static Tensor full(std::vector<std::int64_t> d, float v) { return Tensor(std::move(d), v); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(dims.size()); }
    std::int64_t dim(int i) const { return dims.at(static_cast<std::size_t>(i)); }
    bool empty() const { return data.empty(); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // Indexing helpers for the common layouts (C,H,W) and (N,C,H,W).
    float& at3(std::int64_t c, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((c * dims[1] + y) * dims[2] + x)];
    }
    float at3(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((c * dims[1] + y) * dims[2] + x)];
    }
    float& at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>(((n * dims[1] + c) * dims[2] + y) * dims[3] + x)];
    }
    float at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>(((n * dims[1] + c) * dims[2] + y) * dims[3] + x)];
    }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    std::string shape_string() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
        os << ")";
        return os.str();
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const {
        double s = 0.0;
        for (float v : data) s += v;
        return s;
    }
    double mean() const { return data.empty() ? 0.0 : sum() / static_cast<double>(data.size()); }
    float min() const { return *std::min_element(data.begin(), data.end()); }
    float max() const { return *std::max_element(data.begin(), data.end()); }

    Tensor reshaped(std::vector<std::int64_t> d) const {
        if (numel_of(d) != numel())
            throw shape_error("reshape " + shape_string() + " to incompatible size");
        Tensor t = *this;
        t.dims = std::move(d);
        return t;
    }

    void fill_normal(Rng& rng, float stddev = 1.0f, float mean_v = 0.0f) {
        for (auto& v : data) v = mean_v + stddev * rng.normalf();
    }
    void fill_uniform(Rng& rng, float lo, float hi) {
        for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw shape_error(std::string(who) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, static_cast<double>(std::fabs(a[i] - b[i])));
    return m;
}

} // namespace dfd
