#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cleansift {

// Weight-assigning network: scalar loss -> hidden(relu) -> sigmoid scalar.
// Hidden layer is small-uniform initialised; output layer starts at zero so
// every sample begins with weight exactly 0.5.
template <typename T>
struct WeightNetParams {
    Tensor<T> w1;  // [hidden] (input dim is 1)
    Tensor<T> b1;  // [hidden]
    Tensor<T> w2;  // [hidden]
    T b2 = T(0);

    int hidden() const { return w1.dim(0); }
    int param_count() const { return 3 * hidden() + 1; }
};

template <typename T>
WeightNetParams<T> make_weightnet(std::uint64_t seed, int hidden = 100) {
    WeightNetParams<T> p;
    p.w1 = Tensor<T>({hidden});
    p.b1 = Tensor<T>({hidden});
    p.w2 = Tensor<T>({hidden});
    p.b2 = T(0);
    SeededRng rng(derive_seed(seed, "weightnet"));
    for (int j = 0; j < hidden; ++j) {
        p.w1[j] = static_cast<T>(rng.uniform(-0.1, 0.1));
        p.b1[j] = static_cast<T>(rng.uniform(-0.1, 0.1));
    }
    return p;
}

namespace detail {
template <typename T>
constexpr T weight_clamp_eps() {
    return static_cast<T>(sizeof(T) == sizeof(float) ? 1e-7 : 1e-15);
}
}  // namespace detail

// Elementwise map loss -> weight in the open interval (0,1).
template <typename T>
std::vector<T> weightnet_forward(const WeightNetParams<T>& psi, std::span<const T> losses) {
    std::vector<T> out(losses.size());
    const int h = psi.hidden();
    for (size_t i = 0; i < losses.size(); ++i) {
        if (!std::isfinite(static_cast<double>(losses[i])))
            throw std::invalid_argument("weightnet: non-finite loss at index " +
                                        std::to_string(i));
        double z = static_cast<double>(psi.b2);
        for (int j = 0; j < h; ++j) {
            double pre = static_cast<double>(psi.w1[j]) * losses[i] + psi.b1[j];
            if (pre > 0.0) z += static_cast<double>(psi.w2[j]) * pre;
        }
        double s = 1.0 / (1.0 + std::exp(-z));
        const double eps = detail::weight_clamp_eps<T>();
        s = std::min(1.0 - eps, std::max(eps, s));
        out[i] = static_cast<T>(s);
    }
    return out;
}

// Per-sample derivatives of the weight w.r.t. the parameters (flattened as
// w1|b1|w2|b2) and w.r.t. the scalar input.
template <typename T>
struct WeightNetGrads {
    std::vector<T> weight;                 // s_i
    std::vector<std::vector<T>> d_params;  // [n][3h+1]
    std::vector<T> d_input;                // ds_i/dx_i
};

template <typename T>
WeightNetGrads<T> weightnet_grads(const WeightNetParams<T>& psi, std::span<const T> losses) {
    const int h = psi.hidden();
    WeightNetGrads<T> g;
    g.weight = weightnet_forward(psi, losses);
    g.d_params.resize(losses.size());
    g.d_input.resize(losses.size());
    for (size_t i = 0; i < losses.size(); ++i) {
        const double x = static_cast<double>(losses[i]);
        double z = static_cast<double>(psi.b2);
        std::vector<double> hid(static_cast<size_t>(h));
        std::vector<bool> on(static_cast<size_t>(h));
        for (int j = 0; j < h; ++j) {
            double pre = static_cast<double>(psi.w1[j]) * x + psi.b1[j];
            on[static_cast<size_t>(j)] = pre > 0.0;
            hid[static_cast<size_t>(j)] = pre > 0.0 ? pre : 0.0;
            z += static_cast<double>(psi.w2[j]) * hid[static_cast<size_t>(j)];
        }
        const double s = 1.0 / (1.0 + std::exp(-z));
        const double sp = s * (1.0 - s);
        auto& dp = g.d_params[i];
        dp.assign(static_cast<size_t>(psi.param_count()), T(0));
        double dx = 0.0;
        for (int j = 0; j < h; ++j) {
            if (on[static_cast<size_t>(j)]) {
                const double w2j = static_cast<double>(psi.w2[j]);
                dp[static_cast<size_t>(j)] = static_cast<T>(sp * w2j * x);          // dw1
                dp[static_cast<size_t>(h + j)] = static_cast<T>(sp * w2j);          // db1
                dx += w2j * static_cast<double>(psi.w1[j]);
            }
            dp[static_cast<size_t>(2 * h + j)] = static_cast<T>(sp * hid[static_cast<size_t>(j)]);
        }
        dp[static_cast<size_t>(3 * h)] = static_cast<T>(sp);  // db2
        g.d_input[i] = static_cast<T>(sp * dx);
    }
    return g;
}

template <typename T>
std::vector<T> flatten_weightnet(const WeightNetParams<T>& p) {
    std::vector<T> out;
    out.insert(out.end(), p.w1.data.begin(), p.w1.data.end());
    out.insert(out.end(), p.b1.data.begin(), p.b1.data.end());
    out.insert(out.end(), p.w2.data.begin(), p.w2.data.end());
    out.push_back(p.b2);
    return out;
}

template <typename T>
void unflatten_weightnet(WeightNetParams<T>& p, std::span<const T> flat) {
    const int h = p.hidden();
    require(static_cast<int>(flat.size()) == p.param_count(), "weightnet: flat size mismatch");
    std::copy(flat.begin(), flat.begin() + h, p.w1.data.begin());
    std::copy(flat.begin() + h, flat.begin() + 2 * h, p.b1.data.begin());
    std::copy(flat.begin() + 2 * h, flat.begin() + 3 * h, p.w2.data.begin());
    p.b2 = flat[static_cast<size_t>(3 * h)];
}

}  // namespace cleansift
